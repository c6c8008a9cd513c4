"""Lightweight three-class classifiers over ILL feature vectors.

Class order is fixed everywhere: Retained, Forgotten, Holdout.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError, TrainingError

CLASSES = ("Retained", "Forgotten", "Holdout")
CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}
MODEL_FORMAT = "remind-classifier"
MODEL_VERSION = 1


def _check_finite(X, ids=None):
    bad = np.flatnonzero(~np.all(np.isfinite(X), axis=1))
    if bad.size:
        row = int(bad[0])
        name = f"sample {ids[row]!r}" if ids is not None else f"row {row}"
        raise DataError(f"non-finite feature value in {name}")


@dataclass
class LabeledDataset:
    X: np.ndarray
    labels: list[str]
    ids: list[str]

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.labels = list(self.labels)
        self.ids = [str(i) for i in self.ids]
        if not (len(self.X) == len(self.labels) == len(self.ids)):
            raise ParameterError("X, labels and ids must have equal length")
        unknown = sorted(set(self.labels) - set(CLASSES))
        if unknown:
            raise DataError(f"unknown labels {unknown}")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate sample ids in labeled dataset")
        _check_finite(self.X, self.ids)

    @classmethod
    def from_rows(cls, rows):
        """``rows`` are ``(IllFeatureVector | array, label, sample_id)`` triples."""
        X = [r[0].as_array() if hasattr(r[0], "as_array") else np.asarray(r[0], dtype=float) for r in rows]
        return cls(np.array(X), [r[1] for r in rows], [r[2] for r in rows])

    def __len__(self):
        return len(self.labels)

    @property
    def y(self) -> np.ndarray:
        return np.array([CLASS_INDEX[c] for c in self.labels], dtype=np.int64)

    def subset(self, idx) -> "LabeledDataset":
        idx = list(idx)
        return LabeledDataset(self.X[idx], [self.labels[i] for i in idx], [self.ids[i] for i in idx])

    @property
    def standardization(self) -> tuple[np.ndarray, np.ndarray]:
        mean = self.X.mean(axis=0)
        std = self.X.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return mean, std


def split(data: LabeledDataset, test_size: float, seed: int):
    """Stratified, seeded train/test split.

    The test set gets ``round(n * test_size)`` rows apportioned across
    classes by largest remainder; every class keeps at least one row on
    each side.
    """
    if not 0 < test_size < 1:
        raise ParameterError(f"test_size={test_size} must lie in (0, 1)")
    y = data.y
    present = [c for c in range(len(CLASSES)) if np.any(y == c)]
    counts = {c: int(np.sum(y == c)) for c in present}
    small = [CLASSES[c] for c, n in counts.items() if n < 2]
    if small:
        raise DataError(f"cannot split: classes {small} have fewer than 2 rows")

    total = int(round(len(y) * test_size))
    exact = {c: counts[c] * test_size for c in present}
    alloc = {c: int(math.floor(exact[c])) for c in present}
    leftover = total - sum(alloc.values())
    for c in sorted(present, key=lambda c: (-(exact[c] - alloc[c]), c))[: max(leftover, 0)]:
        alloc[c] += 1
    alloc = {c: min(max(a, 1), counts[c] - 1) for c, a in alloc.items()}

    rng = np.random.default_rng(seed)
    order = np.argsort(np.array(data.ids, dtype=object), kind="stable")
    test_idx = []
    for c in present:
        members = [i for i in order if y[i] == c]
        perm = rng.permutation(len(members))
        test_idx.extend(members[j] for j in perm[: alloc[c]])
    test_set = set(test_idx)
    train_idx = [i for i in range(len(y)) if i not in test_set]
    return data.subset(train_idx), data.subset(sorted(test_set))


# -- logistic regression ----------------------------------------------------


@dataclass
class LogisticRegressionParams:
    l2: float = 1e-3
    step: float | None = None  # None: 1 / Lipschitz bound of the objective
    tol: float = 1e-7
    max_iter: int = 5000

    def __post_init__(self):
        if self.l2 < 0 or self.tol <= 0 or self.max_iter < 1 or (self.step is not None and self.step <= 0):
            raise ParameterError(f"invalid logistic regression hyperparameters {self}")


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class LogisticRegressionModel:
    kind = "logistic-regression"

    def __init__(self, mean, std, weights, bias, params=None, seed=0):
        self.mean = np.asarray(mean, dtype=float)
        self.std = np.asarray(std, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.bias = np.asarray(bias, dtype=float)
        self.params = params or LogisticRegressionParams()
        self.seed = seed
        self.loss_trace: list[tuple[int, float]] = []

    @staticmethod
    def objective(Xs, Y, W, b, l2):
        P = _softmax(Xs @ W + b)
        ce = -np.mean(np.log(np.clip((P * Y).sum(axis=1), 1e-300, None)))
        return ce + 0.5 * l2 * float(np.sum(W * W)), P

    @classmethod
    def fit(cls, data: LabeledDataset, params: LogisticRegressionParams, seed: int = 0):
        mean, std = data.standardization
        Xs = (data.X - mean) / std
        n, d = Xs.shape
        Y = np.eye(len(CLASSES))[data.y]
        W = np.zeros((d, len(CLASSES)))
        b = np.zeros(len(CLASSES))
        step = params.step
        if step is None:
            aug = np.hstack([Xs, np.ones((n, 1))])
            lam_max = float(np.linalg.eigvalsh(aug.T @ aug / n)[-1])
            step = 1.0 / (0.5 * lam_max + params.l2)

        model = cls(mean, std, W, b, params, seed)
        loss, P = cls.objective(Xs, Y, W, b, params.l2)
        model.loss_trace.append((0, loss))
        for it in range(1, params.max_iter + 1):
            G = P - Y
            W = W - step * (Xs.T @ G / n + params.l2 * W)
            b = b - step * G.mean(axis=0)
            new_loss, P = cls.objective(Xs, Y, W, b, params.l2)
            if it % 100 == 0:
                model.loss_trace.append((it, new_loss))
            converged = abs(loss - new_loss) < params.tol
            loss = new_loss
            if converged:
                break
        model.loss_trace.append((it, loss))
        model.weights, model.bias = W, b
        model.iterations = it
        return model

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        _check_finite(X)
        return _softmax((X - self.mean) / self.std @ self.weights + self.bias)

    def to_dict(self) -> dict:
        return {
            "standardization": {"mean": self.mean.tolist(), "std": self.std.tolist()},
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
        }

    @classmethod
    def from_dict(cls, doc, params, seed):
        s = doc["standardization"]
        return cls(s["mean"], s["std"], doc["weights"], doc["bias"], params, seed)


# -- random forest ----------------------------------------------------------


@dataclass
class RandomForestParams:
    n_trees: int = 200
    max_depth: int = 12
    min_leaf: int = 2
    max_features: int | None = None  # None: ceil(sqrt(n_features))
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ParameterError(f"invalid random forest hyperparameters {self}")
        if self.max_features is not None and self.max_features < 1:
            raise ParameterError("max_features must be positive")


@dataclass
class Tree:
    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    label: list[int] = field(default_factory=list)  # -1 for internal nodes

    def add(self, feature=-1, threshold=0.0, label=-1) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(-1)
        self.right.append(-1)
        self.label.append(label)
        return len(self.label) - 1

    def predict(self, X) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left, right, label = np.asarray(self.left), np.asarray(self.right), np.asarray(self.label)
        active = label[node] < 0
        while active.any():
            rows = np.flatnonzero(active)
            nd = node[rows]
            go_left = X[rows, feature[nd]] <= threshold[nd]
            node[rows] = np.where(go_left, left[nd], right[nd])
            active = label[node] < 0
        return label[node]


def _gini_from_counts(counts):
    tot = counts.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = counts / tot[..., None]
    return 1.0 - np.nansum(frac * frac, axis=-1)


def _best_split(x, onehot, min_leaf):
    """Best threshold on one feature. Returns (weighted gini, threshold) or None."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    n = xs.size
    left = np.cumsum(onehot[order], axis=0)[:-1]
    total = left[-1] + onehot[order[-1]]
    right = total - left
    nl = np.arange(1, n)
    valid = (xs[:-1] < xs[1:]) & (nl >= min_leaf) & (n - nl >= min_leaf)
    if not valid.any():
        return None
    score = (nl * _gini_from_counts(left) + (n - nl) * _gini_from_counts(right)) / n
    score = np.where(valid, score, np.inf)
    i = int(np.argmin(score))
    lo, hi = xs[i], xs[i + 1]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return float(score[i]), float(thr)


def grow_tree(X, y, params: RandomForestParams, rng: np.random.Generator, n_features_split: int) -> Tree:
    tree = Tree()
    n_classes = len(CLASSES)
    onehot_all = np.eye(n_classes)[y]
    root = tree.add()
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        counts = onehot_all[idx].sum(axis=0)
        majority = int(np.argmax(counts))
        if depth >= params.max_depth or len(idx) < 2 * params.min_leaf or counts.max() == len(idx):
            tree.label[node] = majority
            continue
        best = None
        evaluated = 0
        for f in rng.permutation(X.shape[1]):
            if evaluated >= n_features_split:
                break
            col = X[idx, f]
            if col.min() == col.max():
                continue
            evaluated += 1
            res = _best_split(col, onehot_all[idx], params.min_leaf)
            if res is not None and (best is None or res[0] < best[0]):
                best = (res[0], res[1], int(f))
        if best is None:
            tree.label[node] = majority
            continue
        _, thr, f = best
        go_left = X[idx, f] <= thr
        tree.feature[node], tree.threshold[node] = f, thr
        lnode, rnode = tree.add(), tree.add()
        tree.left[node], tree.right[node] = lnode, rnode
        stack.append((rnode, idx[~go_left], depth + 1))
        stack.append((lnode, idx[go_left], depth + 1))
    return tree


class RandomForestModel:
    """Bagged CART trees. Probabilities are Laplace-smoothed vote fractions."""

    kind = "random-forest"

    def __init__(self, trees, params=None, seed=0):
        self.trees = trees
        self.params = params or RandomForestParams()
        self.seed = seed

    @classmethod
    def fit(cls, data: LabeledDataset, params: RandomForestParams, seed: int = 0):
        X, y = data.X, data.y
        n, d = X.shape
        k = params.max_features or math.ceil(math.sqrt(d))
        trees = []
        for t in range(params.n_trees):
            # per-tree stream keyed by tree index: schedule-independent
            rng = np.random.default_rng([seed, t])
            idx = rng.integers(0, n, n) if params.bootstrap else np.arange(n)
            trees.append(grow_tree(X[idx], y[idx], params, rng, k))
        return cls(trees, params, seed)

    def votes(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        _check_finite(X)
        votes = np.zeros((len(X), len(CLASSES)))
        rows = np.arange(len(X))
        for tree in self.trees:
            votes[rows, tree.predict(X)] += 1
        return votes

    def predict_proba(self, X) -> np.ndarray:
        votes = self.votes(X)
        return (votes + 1.0) / (len(self.trees) + len(CLASSES))

    def to_dict(self) -> dict:
        return {"trees": [asdict(t) for t in self.trees]}

    @classmethod
    def from_dict(cls, doc, params, seed):
        return cls([Tree(**t) for t in doc["trees"]], params, seed)


MODEL_KINDS = {
    "logistic-regression": (LogisticRegressionModel, LogisticRegressionParams),
    "random-forest": (RandomForestModel, RandomForestParams),
}


def train(data: LabeledDataset, kind: str, hyperparams=None, seed: int = 0):
    if kind not in MODEL_KINDS:
        raise ParameterError(f"unknown classifier kind {kind!r}")
    model_cls, params_cls = MODEL_KINDS[kind]
    if hyperparams is None:
        params = params_cls()
    elif isinstance(hyperparams, params_cls):
        params = hyperparams
    else:
        params = params_cls(**hyperparams)
    if len(data) < 10:
        raise TrainingError(f"need at least 10 training rows, got {len(data)}")
    if len(set(data.labels)) < 2:
        raise TrainingError("training data contains a single class")
    return model_cls.fit(data, params, seed)


def predict_proba(model, x) -> np.ndarray:
    """Probability triple(s) in class order; a single vector gives shape (3,)."""
    arr = x.as_array() if hasattr(x, "as_array") else np.asarray(x, dtype=float)
    out = model.predict_proba(arr)
    return out[0] if arr.ndim == 1 else out


def predict(model, X) -> list[str]:
    proba = model.predict_proba(X)
    return [CLASSES[i] for i in np.argmax(proba, axis=1)]


def save_model(model, path) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kind": model.kind,
        "classes": list(CLASSES),
        "seed": model.seed,
        "hyperparams": asdict(model.params),
        **model.to_dict(),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise FormatError(f"{path}: not a {MODEL_FORMAT} v{MODEL_VERSION} document")
    if tuple(doc.get("classes", ())) != CLASSES:
        raise FormatError(f"{path}: unexpected class order {doc.get('classes')}")
    model_cls, params_cls = MODEL_KINDS[doc["kind"]]
    return model_cls.from_dict(doc, params_cls(**doc["hyperparams"]), doc["seed"])

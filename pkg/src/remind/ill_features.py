"""Input-loss-landscape statistics for one sample and its neighborhood."""

from __future__ import annotations

import base64
import csv
import math
import threading
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, ParameterError

EPS = 1e-8

FEATURE_COLUMNS = tuple(f"f{i}" for i in range(1, 15))
FEATURE_NAMES = (
    "l_orig", "mu_neigh", "l_max", "l_min", "sigma_neigh", "var_neigh", "delta_mu",
    "delta_max", "delta_min", "var_delta", "mu_grad", "grad_max", "var_grad", "volatility",
)


@dataclass(frozen=True)
class IllFeatureVector:
    l_orig: float
    mu_neigh: float
    l_max: float
    l_min: float
    sigma_neigh: float
    var_neigh: float
    delta_mu: float
    delta_max: float
    delta_min: float
    var_delta: float
    mu_grad: float
    grad_max: float
    var_grad: float
    volatility: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values) -> "IllFeatureVector":
        values = [float(v) for v in values]
        if len(values) != len(FEATURE_NAMES):
            raise ParameterError(f"expected {len(FEATURE_NAMES)} feature values, got {len(values)}")
        return cls(*values)


def features_from_losses(l_orig: float, losses, distances) -> IllFeatureVector:
    """Compute the 14 statistics from neighbor losses and encoder distances.

    Variances use the population (1/K) convention. The finite-difference
    gradient of neighbor ``j`` is ``|l_j - l_orig| / d_j``, taken as 0 when
    ``d_j < EPS``. Volatility walks the neighbors in order of increasing
    distance (stable on ties) and averages absolute successive differences.
    """
    losses = np.asarray(losses, dtype=float)
    distances = np.asarray(distances, dtype=float)
    k = losses.size
    if k < 2:
        raise ParameterError(f"need at least 2 neighbors, got {k}")
    if distances.shape != losses.shape:
        raise ParameterError("losses and distances must align")
    if not (np.all(np.isfinite(losses)) and np.all(np.isfinite(distances)) and math.isfinite(l_orig)):
        raise DataError("non-finite loss or distance in neighborhood")

    # statistics are taken on deltas: exact zeros on flat fields, and
    # means are clipped into [min, max] so ordering survives rounding
    deltas = losses - l_orig
    d_min, d_max = float(deltas.min()), float(deltas.max())
    d_mean = min(max(float(deltas.mean()), d_min), d_max)
    var = float(((deltas - d_mean) ** 2).mean())
    l_min, l_max = float(losses.min()), float(losses.max())
    mu = min(max(l_orig + d_mean, l_min), l_max)
    abs_deltas = np.abs(deltas)
    grads = np.where(distances < EPS, 0.0, abs_deltas / np.maximum(distances, EPS))
    order = np.argsort(distances, kind="stable")
    return IllFeatureVector(
        l_orig=float(l_orig),
        mu_neigh=mu,
        l_max=l_max,
        l_min=l_min,
        sigma_neigh=math.sqrt(var),
        var_neigh=var,
        delta_mu=d_mean,
        delta_max=d_max,
        delta_min=d_min,
        var_delta=float(abs_deltas.var()),
        mu_grad=float(grads.mean()),
        grad_max=float(grads.max()),
        var_grad=float(grads.var()),
        volatility=float(np.abs(np.diff(losses[order])).mean()),
    )


# -- encoders ---------------------------------------------------------------


class MeanPooledEncoder:
    """Mean of the (unit) token embedding rows of a text's tokens."""

    kind = "mean-pooled-token-embeddings"

    def __init__(self, table, tokenizer):
        self.table = table
        self.tokenizer = tokenizer
        self.dim = table.dim

    def encode(self, text: str) -> np.ndarray:
        ids = self.tokenizer.encode(text)
        if not ids:
            raise DataError(f"text {text[:40]!r} has no tokens to encode")
        return self.table.embeddings[ids].mean(axis=0)


class RemoteEncoder:
    """Embedding endpoint: POST ``{"model", "input"}``, read ``data[0].embedding``.

    The vector may be a JSON list of numbers or a base64 string of
    little-endian float32 values.
    """

    kind = "remote-embedding-endpoint"

    def __init__(self, poster, model: str):
        self.poster = poster
        self.model = model
        self.dim = None
        self._memo: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def encode(self, text: str) -> np.ndarray:
        with self._lock:
            hit = self._memo.get(text)
        if hit is not None:
            return hit
        doc = self.poster.post({"model": self.model, "input": text})
        try:
            raw = doc["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError):
            raise DataError("embedding response lacks data[0].embedding") from None
        if isinstance(raw, str):
            vec = np.frombuffer(base64.b64decode(raw), dtype="<f4").astype(np.float64)
        else:
            vec = np.asarray(raw, dtype=np.float64)
        if vec.ndim != 1 or vec.size == 0:
            raise DataError("embedding response is not a non-empty vector")
        with self._lock:
            if self.dim is None:
                self.dim = vec.size
            elif vec.size != self.dim:
                raise DataError(f"encoder dimension changed from {self.dim} to {vec.size}")
            self._memo[text] = vec
        return vec


def encode_text(enc, text: str) -> np.ndarray:
    return enc.encode(text)


def extract_features(orig, neighbors, original_text: str, enc) -> IllFeatureVector:
    """Features of one sample.

    ``orig`` is the original's LossProfile and ``neighbors`` a list of
    ``(LossProfile, variant_text)`` pairs.
    """
    if len(neighbors) < 2:
        raise ParameterError(f"need at least 2 neighbors, got {len(neighbors)}")
    base = np.asarray(enc.encode(original_text))
    losses, distances = [], []
    for profile, text in neighbors:
        losses.append(profile.mean_nll)
        distances.append(0.0 if text == original_text else float(np.linalg.norm(np.asarray(enc.encode(text)) - base)))
    return features_from_losses(orig.mean_nll, losses, distances)


# -- CSV --------------------------------------------------------------------


def write_features_csv(path, rows) -> None:
    """``rows`` are ``(sample_id, label, IllFeatureVector)`` triples."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", *FEATURE_COLUMNS])
        for sid, label, vec in rows:
            w.writerow([sid, label, *(repr(float(v)) for v in vec.as_array())])


def read_features_csv(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["sample_id", "label", *FEATURE_COLUMNS]:
            raise FormatError(f"{path}: unexpected header {header}")
        for lineno, rec in enumerate(reader, 2):
            if len(rec) != 16:
                raise FormatError(f"{path}: line {lineno}: expected 16 columns")
            try:
                vec = IllFeatureVector.from_array(rec[2:])
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: unparsable feature value") from None
            rows.append((rec[0], rec[1], vec))
    return rows

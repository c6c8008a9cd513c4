"""End-to-end audit: perturb, score, featurize, classify, report."""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    BASELINE_METHODS, DISPLAY_NAMES, ORIENTATION, loss_score, min_k_pp_score, min_k_score,
    rouge_l_f1_score, spv_mia_simplified, zlib_score,
)
from .classifiers import CLASSES, LabeledDataset, save_model, split, train
from .classifiers import LogisticRegressionParams, RandomForestParams
from .config import ExperimentConfig
from .datasets import load_corpus, select_view
from .embedding_store import load_embedding_table
from .errors import DataError
from .histograms import emit_feature_histograms
from .ill_features import MeanPooledEncoder, RemoteEncoder, extract_features, write_features_csv
from .metrics import accuracy_and_macro_f1, multiclass_auc, partial_auc, roc_auc, tpr_at_fpr
from .oracle import GENERATION, VOCAB_STATS, CachedOracle, Geometry, HTTPOracle, JsonPoster, SyntheticOracle
from .perturbation import PerturbationConfig, perturb
from .tokenizer import make_tokenizer

logger = logging.getLogger(__name__)

ARM_SUFFIX = {"original": "orig", "paraphrased": "reph"}
METRIC_COLUMNS = (
    "retain_vs_all_auc", "forget_vs_all_auc", "holdout_vs_all_auc", "multi_class_auc",
    "retain_vs_all_auc_at_1_fp", "forget_vs_all_auc_at_1_fp", "holdout_vs_all_auc_at_1_fp",
    "retained_vs_forgotten_auc", "forgotten_vs_holdout_auc", "accuracy", "macro_f1",
)
CLASSIFIER_NAMES = {
    "random-forest": "REMIND (ours): Random Forest",
    "logistic-regression": "REMIND (ours): Logistic Regression",
}
SCALAR_MULTICLASS_AUC = 0.5
FOOTER = (
    "Classifier rows are evaluated on the held-out test split; scalar baseline rows on every sample of the view.",
    "Scalar baselines report multi_class_auc = 50 by convention and no accuracy/F1.",
    "*_auc_at_1_fp columns hold {kind} at FPR = {cap:g}, in percent.",
)


def sample_seed(seed: int, sample_id: str) -> int:
    digest = hashlib.sha256(f"{seed}\x00{sample_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


# -- assembly ---------------------------------------------------------------


@dataclass
class Pipeline:
    cfg: ExperimentConfig
    table: object
    tokenizer: object
    encoder: object
    oracle: object
    corpus: object

    @property
    def live_calls(self) -> int:
        inner = getattr(self.oracle, "inner", self.oracle)
        if inner is None:
            return 0
        if hasattr(inner, "poster"):
            return inner.poster.calls
        return getattr(inner, "calls", 0)


def load_profiles(path) -> dict:
    profiles = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            profiles[str(rec["id"])] = Geometry.from_dict(rec)
    return profiles


def build_oracle(cfg: ExperimentConfig, tokenizer, encoder):
    inner = None
    if cfg.oracle_kind == "http":
        inner = HTTPOracle(cfg.oracle_url, cfg.oracle_model, timeout=cfg.oracle_timeout,
                           backoff=cfg.oracle_backoff, auth_env=cfg.oracle_auth_env)
    elif cfg.oracle_kind == "synthetic":
        profiles = load_profiles(cfg.resolve(cfg.synthetic_profiles_path))
        inner = SyntheticOracle(profiles, tokenizer, encoder, seed=cfg.synthetic_seed)
    if cfg.cache_path:
        return CachedOracle(cfg.resolve(cfg.cache_path), inner, identity=cfg.oracle_identity)
    return inner


def build_pipeline(cfg: ExperimentConfig, oracle=None) -> Pipeline:
    table = load_embedding_table(cfg.resolve(cfg.embedding_table_path), cfg.neighbor_pool_max or cfg.m)
    tokenizer = make_tokenizer(cfg.tokenizer_kind, table, cfg.resolve(cfg.tokenizer_vocab_path),
                               cfg.resolve(cfg.tokenizer_merges_path))
    if cfg.encoder_kind == "remote-embedding-endpoint":
        poster = JsonPoster(cfg.encoder_url, timeout=cfg.oracle_timeout, backoff=cfg.oracle_backoff,
                            auth_env=cfg.oracle_auth_env)
        encoder = RemoteEncoder(poster, cfg.encoder_model)
    else:
        encoder = MeanPooledEncoder(table, tokenizer)
    if oracle is None:
        oracle = build_oracle(cfg, tokenizer, encoder)
    corpus = load_corpus({k: cfg.resolve(v) for k, v in cfg.split_paths.items()}, cfg.split_aliases, cfg.text_template)
    return Pipeline(cfg, table, tokenizer, encoder, oracle, corpus)


# -- per-arm collection -----------------------------------------------------


@dataclass
class SampleRecord:
    sample: object
    anchor: str
    variant_texts: list
    orig: object = None
    neighbors: list = field(default_factory=list)
    stats: tuple | None = None
    rouge: float | None = None


def _fan_out(fn, items, parallelism):
    if parallelism <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items))


def collect_arm(pipe: Pipeline, view, want_baselines: bool = True) -> list[SampleRecord]:
    """Perturb every sample and run all oracle queries for one view."""
    cfg = pipe.cfg
    records = []
    for s in view:
        ids = pipe.tokenizer.encode(s.text)[: cfg.max_tokens]
        if not ids:
            raise DataError(f"sample {s.id!r} has no tokens")
        pcfg = PerturbationConfig(cfg.p, cfg.m, cfg.K, sample_seed(cfg.seed, s.id), cfg.max_tokens, cfg.resample_cap)
        nbhd = perturb(ids, pipe.table, pcfg)
        anchor = pipe.tokenizer.decode(nbhd.original)
        records.append(SampleRecord(s, anchor, [pipe.tokenizer.decode(v) for v in nbhd.variants]))

    oracle = pipe.oracle
    tasks = []
    for r in records:
        for text in dict.fromkeys([r.anchor, *r.variant_texts]):
            tasks.append((r.sample.id, r.anchor, text))
    profiles = _fan_out(lambda t: oracle.score_text(t[2], sample_id=t[0], anchor=t[1]), tasks, cfg.oracle_parallelism)
    lookup = {(t[0], t[2]): prof for t, prof in zip(tasks, profiles)}
    for r in records:
        r.orig = lookup[(r.sample.id, r.anchor)]
        r.neighbors = [(lookup[(r.sample.id, t)], t) for t in r.variant_texts]

    if want_baselines and "min_k_pp" in cfg.baselines and VOCAB_STATS in oracle.capabilities:
        stats = _fan_out(lambda r: oracle.distribution_stats(r.anchor, sample_id=r.sample.id, anchor=r.anchor),
                         records, cfg.oracle_parallelism)
        for r, st in zip(records, stats):
            r.stats = st
    if want_baselines and "rouge_l" in cfg.baselines and GENERATION in oracle.capabilities:
        def rouge(r):
            prompt = answer = None
            if cfg.qa_prompt_field and cfg.qa_answer_field:
                prompt = r.sample.fields.get(cfg.qa_prompt_field)
                answer = r.sample.fields.get(cfg.qa_answer_field)
            return rouge_l_f1_score(r.anchor, oracle, pipe.tokenizer, sample_id=r.sample.id,
                                    anchor=r.anchor, prompt=prompt, answer=answer)
        for r, val in zip(records, _fan_out(rouge, records, cfg.oracle_parallelism)):
            r.rouge = val
    return records


def baseline_scores(cfg: ExperimentConfig, records, capabilities) -> dict[str, list[float] | None]:
    """Scalar score per sample for every configured baseline (None: not applicable)."""
    out: dict[str, list[float] | None] = {}
    for name in BASELINE_METHODS:
        if name not in cfg.baselines:
            continue
        if name == "min_k_pp" and VOCAB_STATS not in capabilities:
            logger.warning("oracle lacks %s; MIN-K%%++ reported as n/a", VOCAB_STATS)
            out[name] = None
            continue
        if name == "rouge_l" and GENERATION not in capabilities:
            logger.warning("oracle lacks %s; ROUGE-L reported as n/a", GENERATION)
            out[name] = None
            continue
        vals = []
        for r in records:
            neigh = [p for p, _ in r.neighbors]
            if name == "loss":
                vals.append(loss_score(r.orig))
            elif name == "zlib":
                vals.append(zlib_score(r.orig, r.anchor))
            elif name == "min_k":
                vals.append(min_k_score(r.orig, cfg.min_k_pct))
            elif name == "min_k_pp":
                vals.append(min_k_pp_score(r.orig, r.stats, cfg.min_k_pct))
            elif name == "rouge_l":
                vals.append(r.rouge)
            elif name == "spv_mia_mean":
                vals.append(spv_mia_simplified(r.orig, neigh, "mean"))
            elif name == "spv_mia_max":
                vals.append(spv_mia_simplified(r.orig, neigh, "max"))
        out[name] = vals
    return out


# -- metrics ----------------------------------------------------------------


def _pairwise(labels, scores, a, b, scalar):
    ia, ib = CLASSES.index(a), CLASSES.index(b)
    mask = np.isin(labels, [a, b])
    pos = labels[mask] == a
    if not pos.any() or pos.all():
        return math.nan
    if scalar:
        s = scores[mask, 0]
    else:
        pa, pb = scores[mask, ia], scores[mask, ib]
        s = pa / (pa + pb)
    return roc_auc(s, pos)


def method_metrics(labels, scores, scalar: bool, fpr_cap=0.01, use_partial_auc=False) -> dict[str, float]:
    """All report columns (as fractions) for one method.

    ``scores`` is (n, 3) in class order; scalar baselines repeat the same
    score in every column.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=float)
    low_fpr = partial_auc if use_partial_auc else tpr_at_fpr
    out = {}
    for c, prefix in zip(CLASSES, ("retain", "forget", "holdout")):
        pos = labels == c
        col = scores[:, CLASSES.index(c)]
        ok = pos.any() and not pos.all()
        out[f"{prefix}_vs_all_auc"] = roc_auc(col, pos) if ok else math.nan
        out[f"{prefix}_vs_all_auc_at_1_fp"] = low_fpr(col, pos, fpr_cap) if ok else math.nan
    out["multi_class_auc"] = SCALAR_MULTICLASS_AUC if scalar else multiclass_auc(labels, scores, CLASSES)
    out["retained_vs_forgotten_auc"] = _pairwise(labels, scores, "Retained", "Forgotten", scalar)
    out["forgotten_vs_holdout_auc"] = _pairwise(labels, scores, "Forgotten", "Holdout", scalar)
    if scalar:
        out["accuracy"] = out["macro_f1"] = math.nan
    else:
        pred = [CLASSES[i] for i in np.argmax(scores, axis=1)]
        out["accuracy"], out["macro_f1"] = accuracy_and_macro_f1(labels.tolist(), pred, CLASSES)
    return out


def _classifier_params(cfg, kind):
    if kind == "logistic-regression":
        return LogisticRegressionParams(cfg.lr_l2, cfg.lr_step, cfg.lr_tol, cfg.lr_max_iter)
    return RandomForestParams(cfg.rf_trees, cfg.rf_max_depth, cfg.rf_min_leaf, cfg.rf_max_features)


@dataclass
class ArmResult:
    arm: str
    features: list  # (sample_id, label, IllFeatureVector)
    metrics: dict  # method display name -> column -> fraction
    score_rows: list  # scores.csv rows
    models: dict


def evaluate_arm(pipe: Pipeline, arm: str, records) -> ArmResult:
    cfg = pipe.cfg
    features = [
        (r.sample.id, r.sample.label, extract_features(r.orig, r.neighbors, r.anchor, pipe.encoder))
        for r in records
    ]
    labels = np.array([r.sample.label for r in records])
    metrics: dict[str, dict] = {}
    score_rows: list[tuple] = []
    models = {}

    for name, vals in baseline_scores(cfg, records, pipe.oracle.capabilities).items():
        display = DISPLAY_NAMES[name]
        if vals is None:
            metrics[display] = None
            continue
        mat = np.repeat(np.asarray(vals, dtype=float)[:, None], 3, axis=1)
        metrics[display] = method_metrics(labels, mat, True, cfg.fpr_cap, cfg.partial_auc)
        score_rows += [(arm, name, r.sample.id, r.sample.label, "all", *row) for r, row in zip(records, mat)]

    data = LabeledDataset.from_rows([(vec, label, sid) for sid, label, vec in features])
    for kind in cfg.classifiers:
        per_repeat = []
        for rep in range(cfg.repeats):
            train_set, test_set = split(data, cfg.test_size, cfg.seed + rep)
            missing = sorted(set(CLASSES) - set(train_set.labels))
            if missing:
                raise DataError(f"class(es) {missing} missing from the {arm} training split")
            model = train(train_set, kind, _classifier_params(cfg, kind), cfg.seed + rep)
            proba = model.predict_proba(test_set.X)
            per_repeat.append(method_metrics(np.array(test_set.labels), proba, False, cfg.fpr_cap, cfg.partial_auc))
            if rep == 0:
                models[kind] = model
                score_rows += [(arm, kind, sid, lab, "test", *row)
                               for sid, lab, row in zip(test_set.ids, test_set.labels, proba)]
        metrics[CLASSIFIER_NAMES[kind]] = {
            k: float(np.mean([m[k] for m in per_repeat])) for k in per_repeat[0]
        }
    return ArmResult(arm, features, metrics, score_rows, models)


# -- report -----------------------------------------------------------------


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    return f"{100.0 * v:.4f}"


@dataclass
class EvaluationReport:
    arms: list  # ArmResult, in run order
    config_hash: str
    seed: int
    oracle_identity: str
    fpr_cap: float
    partial_auc: bool
    started: str = ""
    finished: str = ""
    cache_stats: dict = field(default_factory=dict)

    def methods(self) -> list[str]:
        order = []
        for arm in self.arms:
            for name in arm.metrics:
                if name not in order:
                    order.append(name)
        return order

    def value(self, method, column, arm_suffix) -> float | None:
        for arm in self.arms:
            if ARM_SUFFIX[arm.arm] == arm_suffix:
                row = arm.metrics.get(method)
                return None if row is None else row[column]
        return None

    def rows(self) -> list[dict]:
        """One dict per method: ``{"method", "<column>_<arm>": percent, ...}``."""
        suffixes = [ARM_SUFFIX[a.arm] for a in self.arms]
        out = []
        for method in self.methods():
            row = {"method": method}
            for col in METRIC_COLUMNS:
                for suf in suffixes:
                    v = self.value(method, col, suf)
                    row[f"{col}_{suf}"] = None if v is None or math.isnan(v) else 100.0 * v
            out.append(row)
        return out

    def to_csv(self) -> str:
        suffixes = [ARM_SUFFIX[a.arm] for a in self.arms]
        header = ["method"] + [f"{c}_{s}" for c in METRIC_COLUMNS for s in suffixes] + ["config_hash"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for method in self.methods():
            w.writerow([method] + [_fmt(self.value(method, c, s)) for c in METRIC_COLUMNS for s in suffixes]
                       + [self.config_hash])
        return buf.getvalue()

    def _table(self, title, columns, labels=None) -> str:
        labels = labels or columns
        suffixes = [ARM_SUFFIX[a.arm] for a in self.arms]
        heads = [f"{lab} {s.capitalize()}" if len(suffixes) > 1 else lab for lab in labels for s in suffixes]
        body = [[m] + [_fmt(self.value(m, c, s)) for c in columns for s in suffixes] for m in self.methods()]
        widths = [max(len(x) for x in col) for col in zip(["Method"] + heads, *body)]
        line = lambda cells: "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"
        sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
        return "\n".join([title, sep, line(["Method"] + heads), sep, *map(line, body), sep])

    def to_text(self) -> str:
        kind = "standardized partial AUC" if self.partial_auc else "TPR"
        parts = [
            self._table("AUC metrics", METRIC_COLUMNS[:4]),
            self._table("AUC at 1% FPR metrics", METRIC_COLUMNS[4:7]),
            self._table(
                "Detailed scores",
                ("retain_vs_all_auc", "forget_vs_all_auc", "holdout_vs_all_auc",
                 "retain_vs_all_auc_at_1_fp", "forget_vs_all_auc_at_1_fp", "holdout_vs_all_auc_at_1_fp",
                 "retained_vs_forgotten_auc", "forgotten_vs_holdout_auc", "multi_class_auc",
                 "accuracy", "macro_f1"),
                ("Retain vs All AUC", "Forget vs All AUC", "Holdout vs All AUC",
                 "Retain vs All AUC@1FP", "Forget vs All AUC@1FP", "Holdout vs All AUC@1FP",
                 "Retained vs Forgotten", "Forgotten vs Holdout", "Overall Score", "Accuracy", "F1"),
            ),
            "\n".join(f.format(kind=kind, cap=self.fpr_cap) for f in FOOTER),
            f"config_hash: {self.config_hash}\nseed: {self.seed}\noracle: {self.oracle_identity}",
        ]
        return "\n\n".join(parts) + "\n"


def write_scores_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "method", "sample_id", "label", "split", "score_retained", "score_forgotten",
                    "score_holdout", "orientation"])
        for arm, method, sid, label, part, *vals in rows:
            orient = ORIENTATION.get(method, "class-probability")
            w.writerow([arm, method, sid, label, part, *(repr(float(v)) for v in vals), orient])


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def run_experiment(cfg: ExperimentConfig, oracle=None, write: bool = True) -> EvaluationReport:
    """Run every configured view end to end and write the artifacts."""
    started = _now()
    pipe = build_pipeline(cfg, oracle)
    logger.info("corpus: %s", pipe.corpus.counts())
    arms = []
    for selector in cfg.views:
        view = select_view(pipe.corpus, selector, cfg.per_class_cap, cfg.seed)
        logger.info("%s view: %d samples", selector, len(view))
        records = collect_arm(pipe, view)
        arms.append(evaluate_arm(pipe, selector, records))
    report = EvaluationReport(arms, cfg.config_hash(), cfg.seed, pipe.oracle.identity, cfg.fpr_cap, cfg.partial_auc)
    report.started, report.finished = started, _now()
    report.cache_stats = _cache_stats(pipe)
    logger.info("oracle cache: %s", report.cache_stats)
    if write:
        write_outputs(cfg, report, pipe)
    return report


def _cache_stats(pipe) -> dict:
    stats = pipe.oracle.stats() if hasattr(pipe.oracle, "stats") else {}
    stats["live_calls"] = pipe.live_calls
    return stats


def write_outputs(cfg: ExperimentConfig, report: EvaluationReport, pipe=None) -> Path:
    out = cfg.resolve(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    score_rows = []
    (out / "models").mkdir(exist_ok=True)
    for arm in report.arms:
        suffix = ARM_SUFFIX[arm.arm]
        name = "features.csv" if arm.arm == "original" else f"features_{suffix}.csv"
        write_features_csv(out / name, arm.features)
        score_rows += arm.score_rows
        for kind, model in arm.models.items():
            save_model(model, out / "models" / f"{suffix}-{kind}.json")
        if len({label for _, label, _ in arm.features}) >= 2:
            emit_feature_histograms(out / name, out / "histograms", cfg.histogram_bins, prefix=f"{suffix}_")
    write_scores_csv(out / "scores.csv", score_rows)
    manifest = {
        "package_version": __version__,
        "config_hash": report.config_hash,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "oracle_identity": report.oracle_identity,
        "arms": [a.arm for a in report.arms],
        "samples_per_arm": {a.arm: len(a.features) for a in report.arms},
        "cache": report.cache_stats,
        "started": report.started,
        "finished": report.finished,
    }
    (out / "run-manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def warm_cache(cfg: ExperimentConfig, oracle=None) -> dict:
    """Issue every oracle query a run would make, without evaluating."""
    pipe = build_pipeline(cfg, oracle)
    for selector in cfg.views:
        collect_arm(pipe, select_view(pipe.corpus, selector, cfg.per_class_cap, cfg.seed))
    return _cache_stats(pipe)


def score_baselines_only(cfg: ExperimentConfig, oracle=None) -> EvaluationReport:
    pipe = build_pipeline(cfg, oracle)
    cfg_no_clf = ExperimentConfig(**{**cfg.to_dict(), "classifiers": [], "base_dir": cfg.base_dir})
    pipe.cfg = cfg_no_clf
    arms = []
    for selector in cfg.views:
        view = select_view(pipe.corpus, selector, cfg.per_class_cap, cfg.seed)
        arms.append(evaluate_arm(pipe, selector, collect_arm(pipe, view)))
    report = EvaluationReport(arms, cfg.config_hash(), cfg.seed, pipe.oracle.identity, cfg.fpr_cap, cfg.partial_auc)
    out = cfg.resolve(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    write_scores_csv(out / "scores.csv", [row for a in arms for row in a.score_rows])
    return report

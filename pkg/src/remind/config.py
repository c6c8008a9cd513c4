"""Experiment configuration: one flat YAML mapping.

Every key mirrors a field of :class:`ExperimentConfig`. Relative paths are
resolved against the directory holding the config file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError

ORACLE_KINDS = ("http", "cache", "synthetic")
ENCODER_KINDS = ("mean-pooled-token-embeddings", "remote-embedding-endpoint")
CLASSIFIER_KINDS = ("logistic-regression", "random-forest")
ALL_BASELINES = ("zlib", "min_k_pp", "rouge_l", "spv_mia_mean", "spv_mia_max", "loss", "min_k")

_PATH_FIELDS = (
    "embedding_table_path", "tokenizer_vocab_path", "tokenizer_merges_path",
    "synthetic_profiles_path", "cache_path", "output_dir",
)


@dataclass
class ExperimentConfig:
    seed: int
    embedding_table_path: str
    split_paths: dict
    output_dir: str = "remind-out"
    split_aliases: dict = field(default_factory=dict)
    text_template: str | None = None
    qa_prompt_field: str | None = None
    qa_answer_field: str | None = None

    oracle_kind: str = "http"
    oracle_url: str | None = None
    oracle_model: str | None = None
    oracle_identity: str | None = None
    oracle_parallelism: int = 4
    oracle_timeout: float = 60.0
    oracle_backoff: list = field(default_factory=lambda: [0.5, 2.0, 8.0])
    oracle_auth_env: str | None = None
    cache_path: str | None = None
    synthetic_profiles_path: str | None = None
    synthetic_seed: int = 0

    neighbor_pool_max: int | None = None
    tokenizer_kind: str = "whitespace"
    tokenizer_vocab_path: str | None = None
    tokenizer_merges_path: str | None = None

    p: float = 0.3
    m: int = 20
    K: int = 15
    max_tokens: int = 300
    resample_cap: int = 10

    encoder_kind: str = "mean-pooled-token-embeddings"
    encoder_url: str | None = None
    encoder_model: str | None = None

    classifiers: list = field(default_factory=lambda: list(CLASSIFIER_KINDS))
    lr_l2: float = 1e-3
    lr_step: float | None = None
    lr_tol: float = 1e-7
    lr_max_iter: int = 5000
    rf_trees: int = 200
    rf_max_depth: int = 12
    rf_min_leaf: int = 2
    rf_max_features: int | None = None

    baselines: list = field(default_factory=lambda: list(ALL_BASELINES))
    min_k_pct: float = 20.0
    fpr_cap: float = 0.01
    partial_auc: bool = False
    views: list = field(default_factory=lambda: ["original"])
    per_class_cap: int | None = 1000
    test_size: float = 0.2
    repeats: int = 1
    histogram_bins: int = 40

    base_dir: str = field(default=".", compare=False, repr=False)

    def resolve(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def config_hash(self) -> str:
        doc = {k: v for k, v in asdict(self).items() if k not in ("base_dir", "output_dir")}
        blob = json.dumps(doc, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "base_dir"}

    def validate(self) -> None:
        problems = []
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            problems.append("seed must be an integer")
        if not isinstance(self.split_paths, dict) or not self.split_paths:
            problems.append("split_paths must map split names to files")
        else:
            for name, path in self.split_paths.items():
                if not self.resolve(path).exists():
                    problems.append(f"split file for {name!r} not found: {path}")
        if not self.resolve(self.embedding_table_path).exists():
            problems.append(f"embedding table not found: {self.embedding_table_path}")
        if self.oracle_kind not in ORACLE_KINDS:
            problems.append(f"oracle_kind must be one of {ORACLE_KINDS}")
        if self.oracle_kind == "http" and not (self.oracle_url and self.oracle_model):
            problems.append("http oracle needs oracle_url and oracle_model")
        if self.oracle_kind == "cache" and not (self.cache_path and self.oracle_identity):
            problems.append("cache oracle needs cache_path and oracle_identity")
        if self.oracle_kind == "synthetic":
            if not self.synthetic_profiles_path:
                problems.append("synthetic oracle needs synthetic_profiles_path")
            elif not self.resolve(self.synthetic_profiles_path).exists():
                problems.append(f"synthetic profiles not found: {self.synthetic_profiles_path}")
        if self.tokenizer_kind not in ("whitespace", "byte-pair-encoding", "bpe"):
            problems.append(f"unknown tokenizer_kind {self.tokenizer_kind!r}")
        if self.tokenizer_kind in ("byte-pair-encoding", "bpe"):
            for key in ("tokenizer_vocab_path", "tokenizer_merges_path"):
                value = getattr(self, key)
                if not value or not self.resolve(value).exists():
                    problems.append(f"{key} missing or not found")
        if self.encoder_kind not in ENCODER_KINDS:
            problems.append(f"encoder_kind must be one of {ENCODER_KINDS}")
        if self.encoder_kind == "remote-embedding-endpoint" and not (self.encoder_url and self.encoder_model):
            problems.append("remote encoder needs encoder_url and encoder_model")
        for kind in self.classifiers:
            if kind not in CLASSIFIER_KINDS:
                problems.append(f"unknown classifier {kind!r}")
        for name in self.baselines:
            if name not in ALL_BASELINES:
                problems.append(f"unknown baseline {name!r}")
        for view in self.views:
            if view not in ("original", "paraphrased"):
                problems.append(f"unknown view {view!r}")
        if not 0 <= self.p <= 1:
            problems.append("p must lie in [0, 1]")
        if self.m < 1 or self.K < 1 or self.max_tokens < 1:
            problems.append("m, K and max_tokens must be positive")
        if self.neighbor_pool_max is not None and self.neighbor_pool_max < self.m:
            problems.append("neighbor_pool_max must be >= m")
        if not 0 < self.test_size < 1:
            problems.append("test_size must lie in (0, 1)")
        if self.repeats < 1 or self.oracle_parallelism < 1:
            problems.append("repeats and oracle_parallelism must be positive")
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(ExperimentConfig)} - {"base_dir"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    missing = [k for k in ("seed", "embedding_table_path", "split_paths") if k not in doc]
    if missing:
        raise ConfigError(f"{path}: missing required keys {missing}")
    cfg = ExperimentConfig(**doc, base_dir=str(path.parent.resolve()))
    cfg.validate()
    return cfg

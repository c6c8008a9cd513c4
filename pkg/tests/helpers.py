"""Builders for small on-disk workspaces used across the test suite."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import yaml

from remind.classifiers import CLASSES, LabeledDataset
from remind.embedding_store import write_embedding_table

VOCAB = 500
DIM = 16
WORDS = [f"w{i:03d}" for i in range(VOCAB)]


def random_table(path, vocab=VOCAB, dim=DIM, seed=0):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(vocab, dim))
    write_embedding_table(path, [w.encode() for w in WORDS[:vocab]], emb)
    return path


def random_text(rng, n_words=30, vocab=VOCAB):
    return " ".join(WORDS[i] for i in rng.integers(0, vocab, size=n_words))


GEOMETRIES = {
    "Forgotten": {"kind": "flat", "jitter": 0.05},
    "Retained": {"kind": "basin", "slope": 3.0, "jitter": 0.05},
    "Holdout": {"kind": "volatile", "amplitude": 1.0},
}
SPLIT_OF = {"Retained": "retain", "Forgotten": "forget", "Holdout": "holdout"}


def synthetic_workspace(root, per_class=100, seed=0, n_words=30, paraphrases=False, geometries=None,
                        **cfg_overrides):
    """Three-geometry corpus whose original losses share one distribution.

    Every class draws its original loss from Uniform(1.5, 2.5) by
    stratified sampling, so the marginals match by construction.
    Returns the config path.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    random_table(root / "emb.txt")
    profiles = []
    split_paths = {}
    for label, geo in (geometries or GEOMETRIES).items():
        centers = 1.5 + (np.arange(per_class) + rng.uniform(size=per_class)) / per_class
        rng.shuffle(centers)
        split = SPLIT_OF[label]
        lines = []
        for i in range(per_class):
            sid = f"{split}-{i:04d}"
            lines.append({"id": sid, "text": random_text(rng, n_words)})
            key = "mean_loss" if geo["kind"] == "volatile" else "center_loss"
            profiles.append({"id": sid, **geo, key: float(centers[i])})
            if paraphrases:
                pid = f"{sid}-p"
                lines.append({"id": pid, "text": random_text(rng, n_words), "paraphrase_of": sid})
                profiles.append({"id": pid, **geo, key: float(centers[i])})
        path = root / f"{split}.jsonl"
        path.write_text("".join(json.dumps(x) + "\n" for x in lines))
        split_paths[split] = path.name
    (root / "profiles.jsonl").write_text("".join(json.dumps(p) + "\n" for p in profiles))
    cfg = {
        "seed": 7,
        "embedding_table_path": "emb.txt",
        "split_paths": split_paths,
        "oracle_kind": "synthetic",
        "synthetic_profiles_path": "profiles.jsonl",
        "cache_path": "cache.jsonl",
        "output_dir": "out",
        "oracle_parallelism": 1,
        "rf_trees": 50,
    }
    cfg.update(cfg_overrides)
    path = root / "config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


def blobs(n_per_class=30, d=14, spread=1.0, seed=0):
    rng = np.random.default_rng(seed)
    X, labels, ids = [], [], []
    for c, name in enumerate(CLASSES):
        center = np.zeros(d)
        center[c] = 3.0
        X.append(center + spread * rng.normal(size=(n_per_class, d)))
        labels += [name] * n_per_class
        ids += [f"{name[0]}{i:03d}" for i in range(n_per_class)]
    return LabeledDataset(np.vstack(X), labels, ids)


def margin_one_two_class(n=200, seed=0):
    """2-D points with |w.x| >= 1 for the unit normal w = (1, 1)/sqrt(2)."""
    rng = np.random.default_rng(seed)
    w = np.array([1.0, 1.0]) / math.sqrt(2)
    X, labels = [], []
    while len(X) < n:
        p = rng.uniform(-4, 4, size=2)
        s = p @ w
        if abs(s) >= 1:
            X.append(p)
            labels.append("Retained" if s > 0 else "Forgotten")
    return LabeledDataset(np.array(X), labels, [f"r{i}" for i in range(n)])

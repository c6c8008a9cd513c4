"""Per-feature class histograms as SVG small multiples."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .classifiers import CLASSES  # noqa: E402
from .errors import DataError  # noqa: E402
from .ill_features import FEATURE_COLUMNS, FEATURE_NAMES, read_features_csv  # noqa: E402

COLORS = {"Retained": "#1f77b4", "Forgotten": "#d62728", "Holdout": "#2ca02c"}


def normalized_feature_matrix(rows) -> np.ndarray:
    """Min-max scale every column over all rows; constant columns map to 0."""
    X = np.array([vec.as_array() for _, _, vec in rows], dtype=float)
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.clip((X - lo) / span, 0.0, 1.0)


def binned_counts(rows, bins: int = 40) -> dict:
    """``{(feature_column, label): counts}`` over ``bins`` equal bins of [0, 1]."""
    Z = normalized_feature_matrix(rows)
    labels = np.array([label for _, label, _ in rows])
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = {}
    for j, col in enumerate(FEATURE_COLUMNS):
        for c in CLASSES:
            if (labels == c).any():
                out[(col, c)] = np.histogram(Z[labels == c, j], bins=edges)[0]
    return out


def emit_feature_histograms(features_csv, out_dir, bins: int = 40, prefix: str = "") -> list[Path]:
    """Write one SVG with 14 panels plus a CSV of the binned counts."""
    rows = read_features_csv(features_csv)
    if not rows:
        raise DataError(f"{features_csv}: no feature rows")
    present = [c for c in CLASSES if any(label == c for _, label, _ in rows)]
    if len(present) < 2:
        raise DataError(f"{features_csv}: histograms need at least two classes, found {present}")
    if bins < 1:
        raise DataError("bin count must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = binned_counts(rows, bins)

    counts_path = out_dir / f"{prefix}feature_histograms.csv"
    with open(counts_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "name", "label", *(f"bin{i}" for i in range(bins))])
        for j, col in enumerate(FEATURE_COLUMNS):
            for c in present:
                w.writerow([col, FEATURE_NAMES[j], c, *counts[(col, c)].tolist()])

    edges = np.linspace(0.0, 1.0, bins + 1)
    with plt.rc_context({"svg.hashsalt": "remind", "svg.fonttype": "none"}):
        fig, axes = plt.subplots(4, 4, figsize=(14, 12))
        flat = axes.ravel()
        for j, col in enumerate(FEATURE_COLUMNS):
            ax = flat[j]
            for c in present:
                ax.stairs(counts[(col, c)], edges, fill=True, alpha=0.4, color=COLORS[c], label=c)
            ax.set_title(f"{col}: {FEATURE_NAMES[j]}", fontsize=9)
            ax.tick_params(labelsize=7)
        for ax in flat[len(FEATURE_COLUMNS):]:
            ax.set_axis_off()
        flat[0].legend(fontsize=7)
        fig.tight_layout()
        svg_path = out_dir / f"{prefix}feature_histograms.svg"
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return [svg_path, counts_path]

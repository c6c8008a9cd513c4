"""Pointwise and neighborhood-summary comparison scorers.

Each scorer returns one real number per sample. Orientation is fixed per
method (see ``ORIENTATION``) and is never flipped automatically.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError

SIGMA_FLOOR = 1e-6

ORIENTATION = {
    "loss": "higher-means-less-memorized",
    "zlib": "higher-means-less-memorized",
    "min_k": "higher-means-more-memorized",
    "min_k_pp": "higher-means-more-memorized",
    "rouge_l": "higher-means-more-memorized",
    "spv_mia_mean": "higher-means-less-memorized",
    "spv_mia_max": "higher-means-less-memorized",
}

DISPLAY_NAMES = {
    "zlib": "Zlib Compression",
    "min_k_pp": "MIN-K%++",
    "rouge_l": "ROUGE-L F1",
    "spv_mia_mean": "Simplified SPV-MIA-mean",
    "spv_mia_max": "Simplified SPV-MIA-max",
    "loss": "Loss based",
    "min_k": "Min-k%",
}
BASELINE_METHODS = tuple(DISPLAY_NAMES)


@dataclass(frozen=True)
class BaselineScore:
    method: str
    sample_id: str
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise DataError(f"{self.method} produced a non-finite score for {self.sample_id!r}")

    @property
    def orientation(self) -> str:
        return ORIENTATION[self.method]


def loss_score(orig) -> float:
    return orig.mean_nll


def zlib_length(text: str) -> int:
    return len(zlib.compress(text.encode("utf-8"), 6))


def zlib_score(orig, text: str) -> float:
    """Total loss divided by the DEFLATE-compressed byte length of ``text``."""
    if not text:
        raise ParameterError("zlib score needs non-empty text")
    return math.fsum(orig.token_nll) / zlib_length(text)


def _k_count(n: int, k_pct: float) -> int:
    if not 0 < k_pct <= 100:
        raise ParameterError(f"k_pct={k_pct} outside (0, 100]")
    # round away float noise before ceiling, e.g. 40% of 5 -> 2, not 3
    return max(1, math.ceil(round(k_pct * n / 100.0, 9)))


def min_k_score(orig, k_pct: float = 20.0) -> float:
    """Negated mean of the k% largest per-token losses."""
    nll = sorted(orig.token_nll, reverse=True)
    k = _k_count(len(nll), k_pct)
    return -math.fsum(nll[:k]) / k


def min_k_pp_score(orig, stats, k_pct: float = 20.0) -> float:
    """Mean of the lowest k% of ``(log p(token) - mu) / sigma`` values.

    ``stats`` is the ``(mu, sigma)`` pair of per-position arrays from
    ``distribution_stats``; sigma is floored at ``SIGMA_FLOOR``.
    """
    mu, sigma = (np.asarray(a, dtype=float) for a in stats)
    logp = -np.asarray(orig.token_nll, dtype=float)
    if mu.shape != logp.shape or sigma.shape != logp.shape:
        raise DataError(
            f"distribution stats cover {mu.size} positions but the loss profile has {logp.size}"
        )
    z = (logp - mu) / np.maximum(sigma, SIGMA_FLOOR)
    k = _k_count(z.size, k_pct)
    return float(np.sort(z)[:k].mean())


def lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_f1(generated, reference) -> float:
    lcs = lcs_length(list(generated), list(reference))
    if lcs == 0:
        return 0.0
    p = lcs / len(generated)
    r = lcs / len(reference)
    return 2 * p * r / (p + r)


def split_prompt(ids):
    """First ceil(n/2) tokens as the prompt, the rest as reference."""
    n = len(ids)
    cut = math.ceil(n / 2)
    prefix, reference = list(ids[:cut]), list(ids[cut:])
    if not prefix or not reference:
        raise DataError(f"sample of {n} tokens is too short to split into prompt and reference")
    return prefix, reference


def rouge_l_f1_score(text: str, oracle, tokenizer, sample_id=None, anchor=None,
                     prompt: str | None = None, answer: str | None = None) -> float:
    """Greedy-continue the prompt and compare with the reference continuation.

    The prompt and reference default to the two halves of ``text``; QA
    records may pass them explicitly instead.
    """
    if prompt is not None and answer is not None:
        reference = tokenizer.encode(answer)
        if not reference:
            raise DataError("empty reference answer")
    else:
        ids = tokenizer.encode(text)
        prefix, reference = split_prompt(ids)
        prompt = tokenizer.decode(prefix)
    generated = oracle.generate(prompt, len(reference), sample_id=sample_id, anchor=anchor)
    gen_ids = tokenizer.encode(generated) if generated else []
    return rouge_l_f1(gen_ids, reference)


def spv_mia_simplified(orig, neighbors, mode: str = "mean") -> float:
    """Original loss minus the neighborhood's mean (or max) loss."""
    if mode not in ("mean", "max"):
        raise ParameterError(f"unknown SPV-MIA mode {mode!r}")
    losses = [n.mean_nll for n in neighbors]
    if not losses:
        raise ParameterError("SPV-MIA needs at least one neighbor")
    ref = math.fsum(losses) / len(losses) if mode == "mean" else max(losses)
    return orig.mean_nll - ref

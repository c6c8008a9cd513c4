"""Embedding-proximity perturbation of token sequences.

Every random decision is drawn from a counter-based generator: a SplitMix64
mixing chain over ``(seed, variant, attempt, stream, position)``. The draw
for a given position never depends on evaluation order, so variants can be
produced in any order or in parallel with identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding_store import TokenEmbeddingTable
from .errors import DataError, ParameterError

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_STREAM_FIRE = 1
_STREAM_RANK = 2


def _mix_int(z: int) -> int:
    z = (z + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = z + np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def counter_uniforms(seed: int, variant: int, attempt: int, stream: int, n: int) -> np.ndarray:
    """``n`` uniforms in [0, 1), one per position, keyed by the full counter."""
    key = _mix_int(seed & _MASK)
    for part in (variant, attempt, stream):
        key = _mix_int(key ^ (part & _MASK))
    positions = np.arange(n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _mix_array(positions * np.uint64(_GOLDEN) ^ np.uint64(key))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


@dataclass(frozen=True)
class PerturbationConfig:
    p: float = 0.3
    m: int = 20
    K: int = 15
    seed: int = 0
    max_tokens: int = 300
    resample_cap: int = 10

    def validate(self, table: TokenEmbeddingTable | None = None) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ParameterError(f"replacement probability p={self.p} outside [0, 1]")
        if self.K < 1:
            raise ParameterError(f"K={self.K} must be >= 1")
        if self.m < 1 or (table is not None and self.m > table.m_max):
            limit = table.m_max if table is not None else "m_max"
            raise ParameterError(f"neighbor pool m={self.m} outside 1..{limit}")
        if self.max_tokens < 1:
            raise ParameterError("max_tokens must be >= 1")
        if self.resample_cap < 0:
            raise ParameterError("resample_cap must be >= 0")


@dataclass(frozen=True)
class NeighborhoodSet:
    original: tuple[int, ...]
    variants: tuple[tuple[int, ...], ...]
    replaced_positions: tuple[tuple[int, ...], ...]
    # 1-based neighbor rank used at each replaced position, aligned with replaced_positions
    ranks: tuple[tuple[int, ...], ...]

    @property
    def K(self) -> int:
        return len(self.variants)

    def to_json(self) -> dict:
        return {
            "original": list(self.original),
            "variants": [list(v) for v in self.variants],
            "replaced_positions": [list(r) for r in self.replaced_positions],
            "ranks": [list(r) for r in self.ranks],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "NeighborhoodSet":
        return cls(
            tuple(doc["original"]),
            tuple(tuple(v) for v in doc["variants"]),
            tuple(tuple(r) for r in doc["replaced_positions"]),
            tuple(tuple(r) for r in doc["ranks"]),
        )


def perturb(x, table: TokenEmbeddingTable, cfg: PerturbationConfig) -> NeighborhoodSet:
    """Draw ``cfg.K`` variants of ``x`` by nearest-neighbor token replacement.

    Each position is replaced independently with probability ``p`` by its
    ``j``-th nearest neighbor, ``j`` uniform on ``1..m``. A variant equal to
    the original is redrawn up to ``resample_cap`` times and kept as is
    afterwards.
    """
    cfg.validate(table)
    ids = np.asarray(list(x)[: cfg.max_tokens], dtype=np.int64)
    if ids.size == 0:
        raise ParameterError("cannot perturb an empty token sequence")
    bad = np.flatnonzero((ids < 0) | (ids >= table.vocab_size))
    if bad.size:
        pos = int(bad[0])
        raise DataError(f"token id {int(ids[pos])} at position {pos} is outside the vocabulary")

    n = ids.size
    variants, replaced, ranks = [], [], []
    for k in range(cfg.K):
        for attempt in range(cfg.resample_cap + 1):
            fire = counter_uniforms(cfg.seed, k, attempt, _STREAM_FIRE, n) < cfg.p
            u = counter_uniforms(cfg.seed, k, attempt, _STREAM_RANK, n)
            j = np.minimum((u * cfg.m).astype(np.int64), cfg.m - 1) + 1
            if fire.any():
                break
        swapped = table.neighbor_lists[ids, j - 1]
        v = np.where(fire, swapped, ids)
        pos = np.flatnonzero(fire)
        variants.append(tuple(int(t) for t in v))
        replaced.append(tuple(int(i) for i in pos))
        ranks.append(tuple(int(r) for r in j[pos]))
    return NeighborhoodSet(tuple(int(t) for t in ids), tuple(variants), tuple(replaced), tuple(ranks))

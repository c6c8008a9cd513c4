"""Token embedding table with exact cosine nearest-neighbor lists.

File layout (UTF-8)::

    ill-emb v1 <vocab_size> <dim>
    <escaped token>\t<f1> <f2> ... <f_dim>
    ...

Tokens are byte strings. Bytes outside printable ASCII are written as
``\\xNN`` and a literal backslash as ``\\\\``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError

logger = logging.getLogger(__name__)

HEADER_MAGIC = "ill-emb"
HEADER_VERSION = "v1"
NORM_TOL = 1e-6
_BLOCK = 1024
_SIM_DECIMALS = 12


def escape_token(token: bytes) -> str:
    out = []
    for b in token:
        if b == 0x5C:
            out.append("\\\\")
        elif 0x20 <= b <= 0x7E:
            out.append(chr(b))
        else:
            out.append(f"\\x{b:02x}")
    return "".join(out)


def unescape_token(text: str, lineno: int | None = None) -> bytes:
    out = bytearray()
    i = 0
    where = f" (line {lineno})" if lineno is not None else ""
    while i < len(text):
        ch = text[i]
        if ch != "\\":
            out += ch.encode("utf-8")
            i += 1
            continue
        nxt = text[i + 1 : i + 2]
        if nxt == "\\":
            out.append(0x5C)
            i += 2
        elif nxt == "x":
            digits = text[i + 2 : i + 4]
            try:
                if len(digits) != 2:
                    raise ValueError(digits)
                out.append(int(digits, 16))
            except ValueError:
                raise FormatError(f"bad \\x escape at offset {i}{where}") from None
            i += 4
        else:
            raise FormatError(f"unknown escape {text[i:i + 2]!r} at offset {i}{where}")
    return bytes(out)


@dataclass(frozen=True)
class TokenEmbeddingTable:
    tokens: list[bytes]
    embeddings: np.ndarray  # (vocab_size, dim), unit rows
    neighbor_lists: np.ndarray  # (vocab_size, m_max), int64

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    @property
    def m_max(self) -> int:
        return int(self.neighbor_lists.shape[1])

    def token_id(self, token: bytes) -> int | None:
        index = self.__dict__.get("_index")
        if index is None:
            index = {tok: i for i, tok in enumerate(self.tokens)}
            object.__setattr__(self, "_index", index)
        return index.get(token)

    def nearest_neighbor(self, token_id: int, j: int) -> int:
        return nearest_neighbor(self, token_id, j)

    def cosine(self, a: int, b: int) -> float:
        return float(self.embeddings[a] @ self.embeddings[b])


def nearest_neighbor(table: TokenEmbeddingTable, token_id: int, j: int) -> int:
    """Return the ``j``-th (1-based) nearest neighbor of ``token_id``."""
    if not 1 <= j <= table.m_max:
        raise ParameterError(f"neighbor rank j={j} outside 1..{table.m_max}")
    if not 0 <= token_id < table.vocab_size:
        raise ParameterError(f"token id {token_id} outside vocabulary of {table.vocab_size}")
    return int(table.neighbor_lists[token_id, j - 1])


def normalize_rows(embeddings: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(embeddings, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DataError(f"zero embedding row for token id {int(zero[0])}; cosine undefined")
    return embeddings / norms[:, None]


def compute_neighbor_lists(unit: np.ndarray, m_max: int) -> np.ndarray:
    """Exact top-``m_max`` cosine neighbors per row, self excluded.

    Rows are ordered by decreasing similarity, ties by ascending id, with
    similarities compared after rounding to 12 decimals. Blocks
    have a fixed size so the result never depends on how work is split.
    """
    n = unit.shape[0]
    if not 1 <= m_max < n:
        raise ParameterError(f"m_max={m_max} must satisfy 1 <= m_max < vocab_size={n}")
    out = np.empty((n, m_max), dtype=np.int64)
    # one extra candidate so boundary ties can be detected
    k = min(m_max + 1, n - 1)
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        # rounding makes exact ties independent of BLAS summation order
        sims = np.round(unit[start:stop] @ unit.T, _SIM_DECIMALS)
        rows = np.arange(stop - start)
        sims[rows, rows + start] = -np.inf
        part = np.argpartition(-sims, k - 1, axis=1)[:, :k]
        part_sims = np.take_along_axis(sims, part, axis=1)
        for r in range(stop - start):
            cand, cand_sims = part[r], part_sims[r]
            order = np.lexsort((cand, -cand_sims))
            cand, cand_sims = cand[order], cand_sims[order]
            if k > m_max and cand_sims[m_max - 1] == cand_sims[m_max]:
                # tie straddles the cut: widen to every id at the boundary value
                full = sims[r]
                wide = np.flatnonzero(full >= cand_sims[m_max - 1])
                order = np.lexsort((wide, -full[wide]))
                cand = wide[order]
            out[start + r] = cand[:m_max]
    return out


def build_table(tokens: list[bytes], embeddings, m_max: int) -> TokenEmbeddingTable:
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] != len(tokens):
        raise ParameterError("embeddings must be a (vocab_size, dim) matrix")
    if len(set(tokens)) != len(tokens):
        raise DataError("duplicate token strings in embedding table")
    if not np.all(np.isfinite(emb)):
        raise DataError("non-finite value in embedding matrix")
    unit = normalize_rows(emb)
    unit.setflags(write=False)
    neighbors = compute_neighbor_lists(unit, m_max)
    neighbors.setflags(write=False)
    return TokenEmbeddingTable(list(tokens), unit, neighbors)


def load_embedding_table(path, m_max: int) -> TokenEmbeddingTable:
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="\n") as fh:
        header = fh.readline().rstrip("\n").split(" ")
        if len(header) != 4 or header[0] != HEADER_MAGIC or header[1] != HEADER_VERSION:
            raise FormatError(f"{path}: line 1: expected '{HEADER_MAGIC} {HEADER_VERSION} <vocab_size> <dim>'")
        try:
            vocab_size, dim = int(header[2]), int(header[3])
        except ValueError:
            raise FormatError(f"{path}: line 1: vocab_size and dim must be integers") from None
        if vocab_size < 1 or dim < 1:
            raise FormatError(f"{path}: line 1: vocab_size and dim must be positive")
        if not 1 <= m_max < vocab_size:
            raise ParameterError(f"m_max={m_max} must satisfy 1 <= m_max < vocab_size={vocab_size}")

        tokens: list[bytes] = []
        emb = np.empty((vocab_size, dim), dtype=np.float64)
        for i in range(vocab_size):
            lineno = i + 2
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: line {lineno}: expected {vocab_size} token rows, file ended")
            line = line.rstrip("\n")
            tok, sep, rest = line.partition("\t")
            if not sep:
                raise FormatError(f"{path}: line {lineno}: missing tab separator")
            parts = rest.split(" ")
            if len(parts) != dim:
                raise FormatError(f"{path}: line {lineno}: expected {dim} floats, found {len(parts)}")
            try:
                emb[i] = [float(x) for x in parts]
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: unparsable float") from None
            tokens.append(unescape_token(tok, lineno))
        trailing = fh.read()
        if trailing.strip():
            raise FormatError(f"{path}: line {vocab_size + 2}: unexpected content after {vocab_size} rows")

    zero = np.flatnonzero(np.linalg.norm(emb, axis=1) == 0.0)
    if zero.size:
        raise DataError(f"{path}: line {int(zero[0]) + 2}: zero embedding row, cannot normalize")
    table = build_table(tokens, emb, m_max)
    logger.debug("loaded %d x %d embedding table from %s", vocab_size, dim, path)
    return table


def write_embedding_table(path, tokens: list[bytes], embeddings) -> None:
    emb = np.asarray(embeddings, dtype=np.float64)
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{HEADER_MAGIC} {HEADER_VERSION} {emb.shape[0]} {emb.shape[1]}\n")
        for tok, row in zip(tokens, emb):
            fh.write(escape_token(tok) + "\t" + " ".join(repr(float(x)) for x in row) + "\n")

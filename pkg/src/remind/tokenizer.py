"""Tokenizers paired with a :class:`TokenEmbeddingTable`.

Two kinds are supported:

* ``whitespace``: words are looked up in the embedding table itself;
  ``decode`` joins with single spaces, so round-trips hold for
  whitespace-normalized text.
* ``byte-pair-encoding``: byte-level BPE read from the usual two-file
  layout. ``vocab.txt`` holds one token per line (id = line number,
  0-based) and ``merges.txt`` one ``left right`` pair per line in rank
  order; a leading ``#`` header line is skipped. Tokens in both files use
  the printable byte-to-unicode alphabet of GPT-2 so that no token contains
  whitespace.
"""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import regex

from .embedding_store import TokenEmbeddingTable
from .errors import DataError, FormatError, ParameterError

GPT2_PATTERN = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
)
UNK = b"<unk>"


@lru_cache(maxsize=1)
def bytes_to_unicode() -> dict[int, str]:
    """GPT-2's reversible byte -> printable character map."""
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, (chr(c) for c in cs)))


@lru_cache(maxsize=1)
def unicode_to_bytes() -> dict[str, int]:
    return {c: b for b, c in bytes_to_unicode().items()}


def symbols_to_bytes(token: str) -> bytes:
    table = unicode_to_bytes()
    try:
        return bytes(table[c] for c in token)
    except KeyError as exc:
        raise FormatError(f"character {exc.args[0]!r} is outside the byte alphabet") from None


class WhitespaceTokenizer:
    kind = "whitespace"

    def __init__(self, table: TokenEmbeddingTable):
        self.vocab_size = table.vocab_size
        self._tokens = table.tokens
        self._ids = {tok: i for i, tok in enumerate(table.tokens)}
        self._unk = self._ids.get(UNK)

    def encode(self, text: str) -> list[int]:
        ids = []
        for pos, word in enumerate(text.split()):
            tid = self._ids.get(word.encode("utf-8"), self._unk)
            if tid is None:
                raise DataError(f"word {word!r} at position {pos} is not in the vocabulary")
            ids.append(tid)
        return ids

    def decode(self, ids) -> str:
        return b" ".join(self._tokens[i] for i in ids).decode("utf-8", errors="replace")

    def token_bytes(self, tid: int) -> bytes:
        return self._tokens[tid]


class BPETokenizer:
    kind = "byte-pair-encoding"

    def __init__(self, vocab: list[str], merges: list[tuple[str, str]]):
        self.vocab = list(vocab)
        self.vocab_size = len(self.vocab)
        self._ids = {tok: i for i, tok in enumerate(self.vocab)}
        if len(self._ids) != len(self.vocab):
            raise FormatError("duplicate entries in BPE vocabulary")
        missing = [c for c in bytes_to_unicode().values() if c not in self._ids]
        if missing:
            raise FormatError(f"BPE vocabulary lacks {len(missing)} single-byte tokens; encode would not be total")
        self.ranks = {pair: r for r, pair in enumerate(merges)}
        self._bpe = lru_cache(maxsize=65536)(self._bpe_uncached)

    @classmethod
    def from_files(cls, vocab_path, merges_path) -> "BPETokenizer":
        vocab = []
        with Path(vocab_path).open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                tok = line.rstrip("\n")
                if not tok:
                    raise FormatError(f"{vocab_path}: line {lineno}: empty token")
                vocab.append(tok)
        merges = []
        with Path(merges_path).open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if lineno == 1 and line.startswith("#"):
                    continue
                if not line:
                    continue
                parts = line.split(" ")
                if len(parts) != 2:
                    raise FormatError(f"{merges_path}: line {lineno}: expected 'left right'")
                merges.append((parts[0], parts[1]))
        return cls(vocab, merges)

    def _bpe_uncached(self, word: str) -> tuple[str, ...]:
        parts = list(word)
        while len(parts) > 1:
            best, best_rank = None, None
            for i in range(len(parts) - 1):
                r = self.ranks.get((parts[i], parts[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            pair = (parts[best], parts[best + 1])
            merged = []
            i = 0
            while i < len(parts):
                if i < len(parts) - 1 and (parts[i], parts[i + 1]) == pair:
                    merged.append(parts[i] + parts[i + 1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        return tuple(parts)

    def encode(self, text: str) -> list[int]:
        b2u = bytes_to_unicode()
        ids = []
        for piece in GPT2_PATTERN.findall(text):
            word = "".join(b2u[b] for b in piece.encode("utf-8"))
            for sym in self._bpe(word):
                tid = self._ids.get(sym)
                if tid is None:
                    # a merge produced a symbol absent from vocab; fall back to bytes
                    ids.extend(self._ids[c] for c in sym)
                else:
                    ids.append(tid)
        return ids

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def decode_bytes(self, ids) -> bytes:
        return b"".join(self.token_bytes(i) for i in ids)

    def token_bytes(self, tid: int) -> bytes:
        return symbols_to_bytes(self.vocab[tid])


def check_compatible(tokenizer, table: TokenEmbeddingTable) -> None:
    """Token ids must index the table, and BPE tokens must match its rows."""
    if tokenizer.vocab_size > table.vocab_size:
        raise DataError(
            f"tokenizer vocabulary ({tokenizer.vocab_size}) exceeds embedding table ({table.vocab_size})"
        )
    if isinstance(tokenizer, BPETokenizer):
        for tid in range(tokenizer.vocab_size):
            if tokenizer.token_bytes(tid) != table.tokens[tid]:
                raise DataError(f"token id {tid}: tokenizer and embedding table disagree")


def make_tokenizer(kind: str, table: TokenEmbeddingTable, vocab_path=None, merges_path=None):
    if kind == "whitespace":
        return WhitespaceTokenizer(table)
    if kind in ("byte-pair-encoding", "bpe"):
        if vocab_path is None or merges_path is None:
            raise ParameterError("byte-pair-encoding tokenizer needs vocab and merges files")
        tok = BPETokenizer.from_files(vocab_path, merges_path)
        check_compatible(tok, table)
        return tok
    raise ParameterError(f"unknown tokenizer kind {kind!r}")

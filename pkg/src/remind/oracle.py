"""Black-box access to the model under audit.

All oracles answer the same three questions about a text: per-token losses,
per-position log-probability statistics over the vocabulary, and a greedy
continuation. Implementations:

``HTTPOracle``
    A completions endpoint that echoes prompt log-probabilities.
``CachedOracle``
    Append-only JSON-lines replay cache wrapped around another oracle, or
    standing alone as a cache-only oracle.
``SyntheticOracle``
    Test double whose loss surface around each sample follows a declared
    geometry (flat, basin or volatile).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from .errors import CapabilityError, ConfigError, DataError, FormatError, OracleError, ParameterError

logger = logging.getLogger(__name__)

PER_TOKEN_NLL = "per_token_nll"
VOCAB_STATS = "vocab_distribution_stats"
GENERATION = "generation"

NLL_TOL = 1e-9


@dataclass(frozen=True)
class LossProfile:
    token_nll: tuple[float, ...]
    mean_nll: float = field(init=False)

    def __post_init__(self):
        nll = tuple(float(v) for v in self.token_nll)
        if not nll:
            raise DataError("loss profile needs at least one token")
        if not all(math.isfinite(v) for v in nll):
            raise DataError("non-finite per-token loss")
        if min(nll) < -NLL_TOL:
            raise DataError(f"negative per-token loss {min(nll)}")
        object.__setattr__(self, "token_nll", nll)
        object.__setattr__(self, "mean_nll", math.fsum(nll) / len(nll))

    @property
    def token_count(self) -> int:
        return len(self.token_nll)

    @classmethod
    def from_logprobs(cls, logprobs) -> "LossProfile":
        return cls(tuple(-float(lp) for lp in logprobs))


@dataclass(frozen=True)
class OracleCapabilities:
    flags: frozenset = frozenset({PER_TOKEN_NLL})

    def __post_init__(self):
        object.__setattr__(self, "flags", frozenset(self.flags) | {PER_TOKEN_NLL})

    def __contains__(self, flag) -> bool:
        return flag in self.flags


ALL_CAPABILITIES = OracleCapabilities(frozenset({PER_TOKEN_NLL, VOCAB_STATS, GENERATION}))


class LossOracle:
    """Base class. ``sample_id``/``anchor`` give sample context to oracles that need it."""

    identity: str = "oracle"
    capabilities: OracleCapabilities = OracleCapabilities()
    # when True, answers depend on (sample_id, anchor) as well as text
    sample_keyed: bool = False

    def score_text(self, text: str, sample_id=None, anchor=None) -> LossProfile:
        raise NotImplementedError

    def distribution_stats(self, text: str, sample_id=None, anchor=None):
        raise CapabilityError(VOCAB_STATS, "MIN-K%++")

    def generate(self, prompt: str, max_new_tokens: int, sample_id=None, anchor=None) -> str:
        raise CapabilityError(GENERATION, "ROUGE-L")


# -- HTTP -------------------------------------------------------------------


class JsonPoster:
    """POST JSON with the retry policy shared by every remote endpoint.

    Transport failures and 5xx responses are retried after each delay in
    ``backoff``; 4xx responses fail at once.
    """

    def __init__(self, url, timeout=60.0, backoff=(0.5, 2.0, 8.0), auth_env=None, sleep=time.sleep):
        self.url = url
        self.timeout = timeout
        self.backoff = tuple(backoff)
        self.auth_env = auth_env
        self.sleep = sleep
        self._local = threading.local()
        self.calls = 0
        self._lock = threading.Lock()

    def _session(self) -> requests.Session:
        s = getattr(self._local, "session", None)
        if s is None:
            s = self._local.session = requests.Session()
        return s

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        if self.auth_env:
            token = os.environ.get(self.auth_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def post(self, body: dict) -> dict:
        payload = json.dumps(body).encode("utf-8")
        last = None
        for attempt in range(len(self.backoff) + 1):
            if attempt:
                self.sleep(self.backoff[attempt - 1])
            with self._lock:
                self.calls += 1
            try:
                resp = self._session().post(self.url, data=payload, headers=self._headers(), timeout=self.timeout)
            except requests.RequestException as exc:
                last = f"transport error: {exc}"
                logger.warning("POST %s failed (attempt %d): %s", self.url, attempt + 1, exc)
                continue
            if resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                logger.warning("POST %s returned %d (attempt %d)", self.url, resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise OracleError(f"POST {self.url}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError:
                raise OracleError(f"POST {self.url}: response is not JSON") from None
        raise OracleError(f"POST {self.url}: giving up after {len(self.backoff) + 1} attempts ({last})")


class HTTPOracle(LossOracle):
    capabilities = OracleCapabilities(frozenset({PER_TOKEN_NLL, GENERATION}))

    def __init__(self, url, model, timeout=60.0, backoff=(0.5, 2.0, 8.0), auth_env=None, sleep=time.sleep):
        self.model = model
        self.poster = JsonPoster(url, timeout=timeout, backoff=backoff, auth_env=auth_env, sleep=sleep)
        self.identity = f"http:{url}#{model}"

    def score_text(self, text, sample_id=None, anchor=None):
        body = {"model": self.model, "prompt": text, "max_tokens": 0, "echo": True, "logprobs": 1}
        doc = self.poster.post(body)
        try:
            logprobs = doc["choices"][0]["logprobs"]["token_logprobs"]
        except (KeyError, IndexError, TypeError):
            raise OracleError("completions response lacks choices[0].logprobs.token_logprobs") from None
        logprobs = list(logprobs)
        if logprobs and logprobs[0] is None:
            logprobs = logprobs[1:]
        if not logprobs:
            raise DataError(f"remote tokenization of {text[:40]!r} left no scored tokens")
        if any(lp is None for lp in logprobs):
            raise OracleError("null log-probability after the first token")
        return LossProfile.from_logprobs(logprobs)

    def generate(self, prompt, max_new_tokens, sample_id=None, anchor=None):
        if max_new_tokens <= 0:
            return ""
        body = {"model": self.model, "prompt": prompt, "max_tokens": int(max_new_tokens), "temperature": 0}
        doc = self.poster.post(body)
        try:
            return doc["choices"][0]["text"]
        except (KeyError, IndexError, TypeError):
            raise OracleError("completions response lacks choices[0].text") from None


# -- cache ------------------------------------------------------------------


def cache_key(identity: str, kind: str, request) -> str:
    blob = json.dumps([identity, kind, request], sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class CachedOracle(LossOracle):
    """Replay cache over an optional live oracle.

    Records are appended (and fsynced) as soon as a live answer arrives, so
    an aborted run keeps every completed call. With ``inner=None`` any miss
    raises :class:`OracleError`.
    """

    def __init__(self, path, inner: LossOracle | None = None, identity: str | None = None):
        if inner is None and identity is None:
            raise ConfigError("a cache-only oracle needs the identity of the model it replays")
        self.path = Path(path)
        self.inner = inner
        self.identity = inner.identity if inner is not None else identity
        self.sample_keyed = inner.sample_keyed if inner is not None else False
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()
        self._records: dict[str, dict] = {}
        self._load()
        if inner is not None:
            self.capabilities = inner.capabilities
        else:
            # replaying a sample-keyed source keeps its key layout
            self.sample_keyed = any("sample_id" in r["request"] for r in self._records.values())
            kinds = {r["kind"] for r in self._records.values()}
            flags = {PER_TOKEN_NLL}
            if "stats" in kinds:
                flags.add(VOCAB_STATS)
            if "gen" in kinds:
                flags.add(GENERATION)
            self.capabilities = OracleCapabilities(frozenset(flags))

    def _load(self):
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        cut = data.rfind(b"\n") + 1
        if cut < len(data):
            # a kill mid-append leaves a partial last line; drop it so the
            # next append starts on a fresh line
            logger.warning("%s: dropping truncated final record", self.path)
            with self.path.open("r+b") as fh:
                fh.truncate(cut)
            data = data[:cut]
        for lineno, line in enumerate(data.decode("utf-8").split("\n"), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                self._records[rec["key"]] = rec
            except (ValueError, KeyError, TypeError):
                raise FormatError(f"{self.path}: line {lineno}: malformed cache record") from None

    def __len__(self):
        return len(self._records)

    def _request(self, request, sample_id, anchor):
        if self.sample_keyed:
            return {"sample_id": sample_id, "anchor": anchor, **request}
        return request

    def _lookup(self, kind, request, compute):
        key = cache_key(self.identity, kind, request)
        with self._lock:
            rec = self._records.get(key)
            if rec is not None:
                self.hits += 1
                return rec["response"]
            self.misses += 1
        if self.inner is None:
            raise OracleError(f"cache miss for {kind} request and no live oracle configured")
        response = compute()
        rec = {"key": key, "kind": kind, "request": request, "response": response}
        line = json.dumps(rec, ensure_ascii=False) + "\n"
        with self._lock:
            if key not in self._records:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line)
                    fh.flush()
                    os.fsync(fh.fileno())
                self._records[key] = rec
        return response

    def score_text(self, text, sample_id=None, anchor=None):
        request = self._request({"text": text}, sample_id, anchor)
        resp = self._lookup(
            "nll", request,
            lambda: {"token_nll": list(self.inner.score_text(text, sample_id, anchor).token_nll)},
        )
        return LossProfile(tuple(resp["token_nll"]))

    def distribution_stats(self, text, sample_id=None, anchor=None):
        if VOCAB_STATS not in self.capabilities:
            raise CapabilityError(VOCAB_STATS, "MIN-K%++")
        request = self._request({"text": text}, sample_id, anchor)

        def compute():
            mu, sigma = self.inner.distribution_stats(text, sample_id, anchor)
            return {"mean": [float(v) for v in mu], "std": [float(v) for v in sigma]}

        resp = self._lookup("stats", request, compute)
        return np.asarray(resp["mean"], dtype=float), np.asarray(resp["std"], dtype=float)

    def generate(self, prompt, max_new_tokens, sample_id=None, anchor=None):
        if GENERATION not in self.capabilities:
            raise CapabilityError(GENERATION, "ROUGE-L")
        request = self._request({"prompt": prompt, "max_new_tokens": int(max_new_tokens)}, sample_id, anchor)
        resp = self._lookup(
            "gen", request,
            lambda: {"text": self.inner.generate(prompt, max_new_tokens, sample_id, anchor)},
        )
        return resp["text"]

    def stats(self) -> dict:
        return {"hits": self.hits, "misses": self.misses, "records": len(self._records)}


# -- synthetic --------------------------------------------------------------


def hash_uniform(seed, *parts) -> float:
    """Deterministic pseudo-random value in [-1, 1] keyed by ``parts``."""
    blob = json.dumps([int(seed), *[str(p) for p in parts]], ensure_ascii=False).encode("utf-8")
    h = int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "big")
    return (h >> 11) * (2.0 / (1 << 53)) - 1.0


@dataclass(frozen=True)
class Geometry:
    """Loss surface around one sample.

    ``flat``:     center_loss + jitter * u
    ``basin``:    center_loss + slope * distance + jitter * u
    ``volatile``: center_loss + amplitude * w

    ``u`` and ``w`` are pseudo-random in [-1, 1]. At the anchor itself the
    loss is exactly ``center_loss`` (the mean loss for ``volatile``).
    """

    kind: str
    center_loss: float
    slope: float = 0.0
    jitter: float = 0.0
    amplitude: float = 0.0

    def __post_init__(self):
        if self.kind not in ("flat", "basin", "volatile"):
            raise ConfigError(f"unknown synthetic geometry {self.kind!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "Geometry":
        kind = doc.get("kind") or doc.get("profile")
        if kind == "volatile":
            center = doc.get("mean_loss", doc.get("center_loss"))
        else:
            center = doc.get("center_loss")
        if center is None:
            raise ConfigError(f"geometry {kind!r} needs a center/mean loss")
        return cls(
            kind=kind,
            center_loss=float(center),
            slope=float(doc.get("slope", 0.0)),
            jitter=float(doc.get("jitter", 0.0)),
            amplitude=float(doc.get("amplitude", 0.0)),
        )

    def to_dict(self) -> dict:
        return {"kind": self.kind, "center_loss": self.center_loss, "slope": self.slope,
                "jitter": self.jitter, "amplitude": self.amplitude}

    def loss_at(self, distance: float, u: float) -> float:
        if self.kind == "flat":
            return self.center_loss + self.jitter * u
        if self.kind == "basin":
            return self.center_loss + self.slope * distance + self.jitter * u
        return self.center_loss + self.amplitude * u


def log_prob_stats(probs) -> tuple[float, float]:
    """Mean and (population) std of log p over every vocabulary entry."""
    logp = np.log(np.asarray(probs, dtype=float))
    return float(logp.mean()), float(logp.std())


class SyntheticOracle(LossOracle):
    """Loss field keyed by sample id, for tests and calibration runs.

    Every token of a text receives the same loss, so ``mean_nll`` equals the
    geometry value. The next-token distribution is uniform over the paired
    tokenizer's vocabulary and ``generate`` echoes the prompt's tail.
    """

    capabilities = ALL_CAPABILITIES
    sample_keyed = True

    def __init__(self, profiles: dict, tokenizer, encoder, seed: int = 0):
        self.profiles = {str(k): (v if isinstance(v, Geometry) else Geometry.from_dict(v)) for k, v in profiles.items()}
        self.tokenizer = tokenizer
        self.encoder = encoder
        self.seed = int(seed)
        digest = hashlib.sha256(
            json.dumps({k: g.to_dict() for k, g in sorted(self.profiles.items())}, sort_keys=True).encode()
        ).hexdigest()[:16]
        self.identity = f"synthetic:seed={self.seed}:profiles={digest}"
        self.calls = 0
        self._lock = threading.Lock()

    def _geometry(self, sample_id) -> Geometry:
        if sample_id is None:
            raise ParameterError("synthetic oracle needs the sample id of every query")
        try:
            return self.profiles[str(sample_id)]
        except KeyError:
            raise DataError(f"no synthetic geometry for sample {sample_id!r}") from None

    def loss(self, text, sample_id, anchor) -> float:
        geo = self._geometry(sample_id)
        if anchor is None or text == anchor:
            return geo.center_loss
        a = np.asarray(self.encoder.encode(anchor))
        b = np.asarray(self.encoder.encode(text))
        distance = float(np.linalg.norm(b - a))
        u = hash_uniform(self.seed, sample_id, text)
        return geo.loss_at(distance, u)

    def _count(self):
        with self._lock:
            self.calls += 1

    def score_text(self, text, sample_id=None, anchor=None):
        self._count()
        n = len(self.tokenizer.encode(text))
        if n == 0:
            raise DataError("text is empty after tokenization")
        value = self.loss(text, sample_id, anchor)
        return LossProfile((value,) * n)

    def distribution_stats(self, text, sample_id=None, anchor=None):
        self._count()
        n = len(self.tokenizer.encode(text))
        mu = -math.log(self.tokenizer.vocab_size)
        return np.full(n, mu), np.zeros(n)

    def generate(self, prompt, max_new_tokens, sample_id=None, anchor=None):
        self._count()
        if max_new_tokens <= 0:
            return ""
        ids = self.tokenizer.encode(prompt)
        return self.tokenizer.decode(ids[-max_new_tokens:])

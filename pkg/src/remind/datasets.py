"""Retain / forget / holdout corpora.

Each split lives in its own JSON-lines file. A record is
``{"id": ..., "text": ..., "paraphrase_of": <optional id>}``; the split file
decides the label. Question/answer records without ``text`` are joined as
``question + " " + answer`` unless a ``str.format`` template is given.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .classifiers import CLASSES
from .errors import DataError, FormatError, ParameterError

SPLIT_LABELS = {"retain": "Retained", "forget": "Forgotten", "holdout": "Holdout"}
SELECTORS = ("original", "paraphrased")


@dataclass(frozen=True)
class Sample:
    id: str
    text: str
    label: str
    paraphrase_of: str | None = None
    source: str = ""
    fields: dict = field(default_factory=dict, compare=False, hash=False)


@dataclass(frozen=True)
class Corpus:
    samples: tuple[Sample, ...]

    def __len__(self):
        return len(self.samples)

    def by_id(self, sid) -> Sample:
        for s in self.samples:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def counts(self) -> dict[str, int]:
        return {c: sum(s.label == c for s in self.samples) for c in CLASSES}


@dataclass(frozen=True)
class CorpusView:
    samples: tuple[Sample, ...]
    selector: str
    cap: int | None

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


def _record_text(rec: dict, template: str | None, where: str) -> str:
    if template is not None:
        try:
            return template.format(**rec)
        except KeyError as exc:
            raise DataError(f"{where}: template field {exc.args[0]!r} missing") from None
    if "text" in rec:
        return str(rec["text"])
    if "question" in rec and "answer" in rec:
        return f"{rec['question']} {rec['answer']}"
    raise DataError(f"{where}: record has neither 'text' nor 'question'/'answer'")


def load_split(path, label: str, template: str | None = None) -> list[Sample]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"split file {path} does not exist")
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except ValueError:
                raise FormatError(f"{where}: not valid JSON") from None
            if not isinstance(rec, dict) or "id" not in rec:
                raise FormatError(f"{where}: record must be an object with an 'id'")
            text = _record_text(rec, template, where)
            para = rec.get("paraphrase_of")
            out.append(Sample(str(rec["id"]), text, label, None if para is None else str(para), where, rec))
    if not out:
        raise DataError(f"split file {path} is empty")
    return out


def load_corpus(paths: dict, aliases: dict | None = None, template: str | None = None) -> Corpus:
    """Load every split; ``aliases`` maps extra split names onto canonical ones.

    For example ``{"test": "holdout"}`` labels a test file as Holdout.
    """
    aliases = aliases or {}
    samples: list[Sample] = []
    for split_name, path in paths.items():
        canonical = aliases.get(split_name, split_name)
        if canonical not in SPLIT_LABELS:
            raise DataError(f"unknown split {split_name!r}; expected one of {sorted(SPLIT_LABELS)} or an alias")
        samples.extend(load_split(path, SPLIT_LABELS[canonical], template))

    seen: dict[str, Sample] = {}
    for s in samples:
        if s.id in seen:
            raise DataError(f"duplicate id {s.id!r} at {seen[s.id].source} and {s.source}")
        seen[s.id] = s
    for s in samples:
        if s.paraphrase_of is None:
            continue
        target = seen.get(s.paraphrase_of)
        if target is None:
            raise DataError(f"{s.source}: paraphrase_of {s.paraphrase_of!r} names no sample")
        if target.label != s.label:
            raise DataError(f"{s.source}: paraphrase of {s.paraphrase_of!r} crosses labels")
    order = {c: i for i, c in enumerate(CLASSES)}
    samples.sort(key=lambda s: (order[s.label], s.id))
    return Corpus(tuple(samples))


def select_view(corpus: Corpus, selector: str = "original", cap: int | None = 1000, seed: int = 0) -> CorpusView:
    """Capped per-class view of the original samples.

    The selection depends only on (corpus, cap, seed), so the original and
    paraphrased views pick the same ids. The paraphrased view swaps in the
    text of each sample's paraphrase.
    """
    if selector not in SELECTORS:
        raise ParameterError(f"unknown view selector {selector!r}")
    if cap is not None and cap < 1:
        raise ParameterError("per-class cap must be positive")
    originals = [s for s in corpus.samples if s.paraphrase_of is None]
    rng = np.random.default_rng(seed)
    chosen: list[Sample] = []
    for label in CLASSES:
        members = sorted((s for s in originals if s.label == label), key=lambda s: s.id)
        if cap is not None and len(members) > cap:
            keep = sorted(rng.permutation(len(members))[:cap])
            members = [members[i] for i in keep]
        chosen.extend(members)

    if selector == "paraphrased":
        paraphrases: dict[str, Sample] = {}
        for s in sorted(corpus.samples, key=lambda s: s.id):
            if s.paraphrase_of is not None:
                paraphrases.setdefault(s.paraphrase_of, s)
        missing = [s.id for s in chosen if s.id not in paraphrases]
        if missing:
            raise DataError(f"paraphrased view: no paraphrase for ids {missing}")
        chosen = [
            replace(s, text=paraphrases[s.id].text, source=paraphrases[s.id].source, fields=paraphrases[s.id].fields)
            for s in chosen
        ]
    return CorpusView(tuple(chosen), selector, cap)

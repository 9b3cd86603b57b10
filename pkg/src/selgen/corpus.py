"""Record databases, descriptions, featurization, vocabularies and corpus files.

Corpus files are UTF-8 JSON Lines, one scenario per line::

    {"records": [{"type": "temperature", "time": [17, 6],
                  "attrs": {"min": 48, "mean": 53, "max": 61}, "mode": null},
                 {"type": "windDir", "time": [17, 6], "attrs": {}, "mode": "SSW"}],
     "text": ["a", "low", "around", "48"],
     "gold_selection": [0]}
"""
from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

NUMERIC_ATTRS = ("min", "mean", "max")

PAD, START, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
RESERVED = (PAD, START, EOS, UNK)
PAD_ID, START_ID, EOS_ID, UNK_ID = range(4)


class CorpusFormatError(ValueError):
    """A corpus or feature-spec file does not follow the documented format."""


@dataclass(frozen=True)
class Record:
    record_type: str
    time_span: tuple[int, int] | None = None
    numeric_attrs: Mapping[str, float] = field(default_factory=dict)
    mode_attr: str | None = None
    source_index: int = 0

    def __post_init__(self):
        if not self.numeric_attrs and self.mode_attr is None:
            raise ValueError(f"record {self.record_type!r} has neither numeric attributes nor a mode")
        bad = set(self.numeric_attrs) - set(NUMERIC_ATTRS)
        if bad:
            raise ValueError(f"unknown numeric attributes {sorted(bad)}")

    def label(self) -> str:
        return f"id-{self.source_index}:{self.record_type}"

    def to_json(self) -> dict:
        return {
            "type": self.record_type,
            "time": list(self.time_span) if self.time_span is not None else None,
            "attrs": {k: self.numeric_attrs[k] for k in NUMERIC_ATTRS if k in self.numeric_attrs},
            "mode": self.mode_attr,
        }


@dataclass(frozen=True)
class Scenario:
    records: tuple[Record, ...]
    tokens: tuple[str, ...]
    gold_selection: frozenset[int] | None = None

    def __post_init__(self):
        if not self.records:
            raise ValueError("scenario needs at least one record")
        if not self.tokens:
            raise ValueError("scenario needs at least one token")
        for j, r in enumerate(self.records):
            if r.source_index != j:
                raise ValueError(f"record {j} has source_index {r.source_index}")
        if self.gold_selection is not None:
            n = len(self.records)
            if any(not 0 <= j < n for j in self.gold_selection):
                raise ValueError(f"gold_selection {sorted(self.gold_selection)} outside [0, {n})")

    @property
    def num_records(self) -> int:
        return len(self.records)

    def to_json(self) -> dict:
        out = {"records": [r.to_json() for r in self.records], "text": list(self.tokens)}
        if self.gold_selection is not None:
            out["gold_selection"] = sorted(self.gold_selection)
        return out

    def subset(self, indices: Sequence[int]) -> Scenario:
        """Restrict to some records, keeping dataset order and renumbering them."""
        keep = sorted(set(indices))
        if not keep:
            raise ValueError("empty record subset")
        records = tuple(
            Record(r.record_type, r.time_span, r.numeric_attrs, r.mode_attr, source_index=i)
            for i, r in enumerate(self.records[j] for j in keep)
        )
        gold = None
        if self.gold_selection is not None:
            remap = {j: i for i, j in enumerate(keep)}
            gold = frozenset(remap[j] for j in self.gold_selection if j in remap)
        return Scenario(records, self.tokens, gold)


# ---------------------------------------------------------------- file format


def _parse_record(obj, j: int, lineno: int) -> Record:
    def fail(fld: str, why: str):
        raise CorpusFormatError(f"line {lineno}: record {j} field {fld!r}: {why}")

    if not isinstance(obj, dict):
        fail("records", "record must be an object")
    rtype = obj.get("type")
    if not isinstance(rtype, str) or not rtype:
        fail("type", "expected a non-empty string")
    time = obj.get("time")
    if time is not None:
        if not (isinstance(time, list) and len(time) == 2 and all(isinstance(t, int) for t in time)):
            fail("time", "expected [int, int] or null")
        time = (time[0], time[1])
    attrs = obj.get("attrs", {}) or {}
    if not isinstance(attrs, dict):
        fail("attrs", "expected an object")
    for k, v in attrs.items():
        if k not in NUMERIC_ATTRS:
            fail("attrs", f"unknown attribute {k!r}")
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            fail("attrs", f"attribute {k!r} is not a number")
    mode = obj.get("mode")
    if mode is not None and not isinstance(mode, str):
        fail("mode", "expected a string or null")
    if not attrs and mode is None:
        fail("attrs", "record needs numeric attributes or a mode")
    return Record(rtype, time, dict(attrs), mode, source_index=j)


def parse_scenario(line: str, lineno: int = 1) -> Scenario:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise CorpusFormatError(f"line {lineno}: expected an object")
    records = obj.get("records")
    if not isinstance(records, list) or not records:
        raise CorpusFormatError(f"line {lineno}: field 'records': expected a non-empty array")
    text = obj.get("text")
    if not isinstance(text, list) or not text or not all(isinstance(t, str) and t for t in text):
        raise CorpusFormatError(f"line {lineno}: field 'text': expected a non-empty array of strings")
    gold = obj.get("gold_selection")
    if gold is not None:
        if not isinstance(gold, list) or not all(isinstance(g, int) and not isinstance(g, bool) for g in gold):
            raise CorpusFormatError(f"line {lineno}: field 'gold_selection': expected an array of ints")
        if any(not 0 <= g < len(records) for g in gold):
            raise CorpusFormatError(f"line {lineno}: field 'gold_selection': index out of range")
        gold = frozenset(gold)
    recs = tuple(_parse_record(r, j, lineno) for j, r in enumerate(records))
    return Scenario(recs, tuple(text), gold)


def load_corpus(path: str | Path) -> list[Scenario]:
    scenarios = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            scenarios.append(parse_scenario(line, lineno))
    if not scenarios:
        raise CorpusFormatError("empty corpus")
    return scenarios


def dump_scenario(s: Scenario) -> str:
    return json.dumps(s.to_json(), ensure_ascii=False, separators=(",", ":"))


def save_corpus(scenarios: Iterable[Scenario], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenarios:
            fh.write(dump_scenario(s) + "\n")


# -------------------------------------------------------------- featurization


@dataclass(frozen=True)
class NumericSlot:
    attr: str
    lo: float
    hi: float

    def scale(self, x: float) -> float:
        if self.hi <= self.lo:
            return 0.0
        return min(1.0, max(0.0, (x - self.lo) / (self.hi - self.lo)))


@dataclass(frozen=True)
class TypeBlock:
    numeric: tuple[NumericSlot, ...] = ()
    modes: tuple[str, ...] = ()

    @property
    def width(self) -> int:
        return len(self.numeric) + len(self.modes)


@dataclass(frozen=True)
class FeatureSpec:
    """Layout of a record vector.

    ``[type one-hot | block per type (scaled numerics, mode one-hot) | begin/24, end/24]``
    """

    types: tuple[str, ...]
    blocks: Mapping[str, TypeBlock]

    def __post_init__(self):
        if set(self.types) != set(self.blocks):
            raise ValueError("feature spec blocks must cover exactly the listed types")
        offsets, pos = {}, len(self.types)
        for t in self.types:
            offsets[t] = pos
            pos += self.blocks[t].width
        object.__setattr__(self, "_offsets", offsets)
        object.__setattr__(self, "_width", pos + 2)

    @property
    def width(self) -> int:
        return self._width

    def block_offset(self, record_type: str) -> int:
        return self._offsets[record_type]

    @classmethod
    def from_corpus(cls, scenarios: Iterable[Scenario]) -> FeatureSpec:
        """Infer types, numeric bounds and mode categories from a corpus."""
        order: list[str] = []
        bounds: dict[str, dict[str, list[float]]] = {}
        modes: dict[str, set[str]] = {}
        for s in scenarios:
            for r in s.records:
                if r.record_type not in bounds:
                    order.append(r.record_type)
                    bounds[r.record_type] = {}
                    modes[r.record_type] = set()
                for k, v in r.numeric_attrs.items():
                    lohi = bounds[r.record_type].setdefault(k, [v, v])
                    lohi[0], lohi[1] = min(lohi[0], v), max(lohi[1], v)
                if r.mode_attr is not None:
                    modes[r.record_type].add(r.mode_attr)
        if not order:
            raise ValueError("empty corpus")
        blocks = {}
        for t in order:
            numeric = tuple(
                NumericSlot(k, float(bounds[t][k][0]), float(bounds[t][k][1])) for k in NUMERIC_ATTRS if k in bounds[t]
            )
            blocks[t] = TypeBlock(numeric, tuple(sorted(modes[t])))
        return cls(tuple(order), blocks)

    def to_json(self) -> dict:
        return {
            "types": [
                {
                    "type": t,
                    "numeric": [{"attr": s.attr, "lo": s.lo, "hi": s.hi} for s in self.blocks[t].numeric],
                    "modes": list(self.blocks[t].modes),
                }
                for t in self.types
            ]
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> FeatureSpec:
        try:
            types, blocks = [], {}
            for entry in obj["types"]:
                t = entry["type"]
                types.append(t)
                numeric = tuple(NumericSlot(n["attr"], float(n["lo"]), float(n["hi"])) for n in entry.get("numeric", []))
                blocks[t] = TypeBlock(numeric, tuple(entry.get("modes", [])))
        except (KeyError, TypeError) as exc:
            raise CorpusFormatError(f"malformed feature spec: {exc}") from None
        return cls(tuple(types), blocks)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> FeatureSpec:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def featurize(rec: Record, spec: FeatureSpec, warnings: Counter | None = None) -> np.ndarray:
    try:
        type_idx = spec.types.index(rec.record_type)
    except ValueError:
        raise KeyError(f"unknown record type {rec.record_type!r}") from None
    vec = np.zeros(spec.width)
    vec[type_idx] = 1.0
    block = spec.blocks[rec.record_type]
    pos = spec.block_offset(rec.record_type)
    for slot in block.numeric:
        if slot.attr in rec.numeric_attrs:
            vec[pos] = slot.scale(rec.numeric_attrs[slot.attr])
        pos += 1
    if rec.mode_attr is not None:
        if rec.mode_attr in block.modes:
            vec[pos + block.modes.index(rec.mode_attr)] = 1.0
        else:
            if warnings is not None:
                warnings["unknown_mode"] += 1
            log.debug("unknown mode %r for %s", rec.mode_attr, rec.record_type)
    if rec.time_span is not None:
        vec[-2] = min(1.0, max(0.0, rec.time_span[0] / 24.0))
        vec[-1] = min(1.0, max(0.0, rec.time_span[1] / 24.0))
    return vec


def featurize_scenario(s: Scenario, spec: FeatureSpec, warnings: Counter | None = None) -> np.ndarray:
    """Feature matrix with one row per record, in dataset order."""
    return np.stack([featurize(r, spec, warnings) for r in s.records])


# ----------------------------------------------------------------- vocabulary


class Vocabulary:
    """Word <-> index map with four reserved entries at the front."""

    def __init__(self, words: Sequence[str], min_count: int = 1):
        words = list(words)
        if tuple(words[:4]) != RESERVED:
            words = list(RESERVED) + [w for w in words if w not in RESERVED]
        self.words: list[str] = words
        self.index: dict[str, int] = {w: i for i, w in enumerate(words)}
        if len(self.index) != len(words):
            raise ValueError("duplicate words in vocabulary")
        self.min_count = min_count

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def id(self, word: str) -> int:
        return self.index.get(word, UNK_ID)

    def encode(self, tokens: Iterable[str], add_eos: bool = True) -> list[int]:
        ids = [self.id(t) for t in tokens]
        if add_eos:
            ids.append(EOS_ID)
        return ids

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip and i == EOS_ID:
                break
            if strip and i in (PAD_ID, START_ID):
                continue
            out.append(self.words[i])
        return out

    def is_reserved(self, word: str) -> bool:
        return word in RESERVED

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.words).encode("utf-8")).hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.words == other.words

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self)})"


def build_vocab(corpus: Sequence[Scenario], min_count: int = 1) -> Vocabulary:
    """Vocabulary ordered by frequency (descending), then lexicographically."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    if not corpus:
        raise ValueError("empty corpus")
    counts = Counter(t for s in corpus for t in s.tokens)
    kept = sorted((w for w, c in counts.items() if c >= min_count and w not in RESERVED), key=lambda w: (-counts[w], w))
    return Vocabulary(list(RESERVED) + kept, min_count=min_count)


# --------------------------------------------------------------- model inputs


@dataclass(frozen=True)
class Example:
    """A scenario turned into arrays: ``features`` is N x F, ``targets`` ends with EOS."""

    features: np.ndarray
    targets: tuple[int, ...]
    gold: frozenset[int] | None = None


def make_example(s: Scenario, spec: FeatureSpec, vocab: Vocabulary, warnings: Counter | None = None) -> Example:
    return Example(featurize_scenario(s, spec, warnings), tuple(vocab.encode(s.tokens)), s.gold_selection)

"""Synthetic trimodal "needle" task and its JSONL exchange format.

Every timestamp carries one visual class token and one audio class token.
At exactly one timestamp (the needle) the two classes agree; that class is
the label. Both class sequences are shuffles of the same balanced multiset,
so per-modality class histograms are identical for every sample and carry no
label information. Only the per-timestamp conjunction does.

Token ids: ``0`` is padding, ``1..C`` are class tokens; the remaining ids are
split into three disjoint noise ranges (visual, audio, language) so that noise
tokens of different modalities never coincide.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

PAD = 0
CLASS_OFFSET = 1
QUERY_CLASS = 0  # queried-attribute variant: report the agreeing class
QUERY_MIRROR = 1  # ... or its mirror C-1-c

_CORE_FIELDS = ("id", "T", "visual_ids", "audio_ids", "lang_ids", "label", "meta")
_MAX_REJECTIONS = 1000


class DataError(ValueError):
    pass


@dataclass
class DatasetSpec:
    num_samples: int = 4000
    T: int = 8
    Nv: int = 16
    Na: int = 16
    Nl: int = 12
    C: int = 4
    vocab: int = 64
    distractor_rate: float = 0.2
    seed: int = 0
    queried_attribute: bool = False

    def validate(self) -> None:
        if self.C < 2:
            raise DataError("C must be at least 2")
        if min(self.T, self.Nv, self.Na, self.Nl) < 1 or self.num_samples < 0:
            raise DataError("sizes must be positive")
        if self.vocab < CLASS_OFFSET + self.C + 3:
            raise DataError(f"vocab {self.vocab} leaves no per-modality noise ids beyond {self.C} class tokens")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise DataError("distractor_rate must lie in [0, 1]")


@dataclass
class ToySample:
    id: str
    T: int
    visual_ids: list[list[int]]
    audio_ids: list[list[int]]
    lang_ids: list[int]
    label: int
    meta: dict[str, int] | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        obj: dict[str, Any] = {
            "id": self.id,
            "T": self.T,
            "visual_ids": self.visual_ids,
            "audio_ids": self.audio_ids,
            "lang_ids": self.lang_ids,
            "label": self.label,
        }
        if self.meta is not None:
            obj["meta"] = self.meta
        for k, v in self.extra.items():
            obj[k] = v
        return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def _balanced(T: int, C: int, rng: np.random.Generator) -> np.ndarray:
    counts = np.full(C, T // C)
    counts[rng.permutation(C)[: T % C]] += 1
    return np.repeat(np.arange(C), counts)


def _class_sequences(T: int, C: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, int]:
    """Visual and audio class per timestamp with exactly one agreement."""
    pool = _balanced(T, C, rng)
    for _ in range(_MAX_REJECTIONS):
        v = rng.permutation(pool)
        a = rng.permutation(pool)
        agree = np.flatnonzero(v == a)
        if agree.size == 1:
            return v, a, int(agree[0])
    # long sequences rarely hit exactly one agreement; build one directly
    needle = int(rng.integers(T))
    v = rng.integers(C, size=T)
    a = (v + rng.integers(1, C, size=T)) % C
    a[needle] = v[needle]
    return v, a, needle


def noise_range(spec: DatasetSpec, modality: str) -> tuple[int, int]:
    """Half-open id range of noise tokens for one modality; ranges never overlap."""
    lo = CLASS_OFFSET + spec.C
    span = (spec.vocab - lo) // 3
    i = {"visual": 0, "audio": 1, "language": 2}[modality]
    hi = spec.vocab if i == 2 else lo + (i + 1) * span
    return lo + i * span, hi


def _fill(rng: np.random.Generator, T: int, n: int, classes: np.ndarray, spec: DatasetSpec,
          modality: str) -> list[list[int]]:
    lo, hi = noise_range(spec, modality)
    ids = rng.integers(lo, hi, size=(T, n))
    if spec.distractor_rate < 1.0:
        ids = np.where(rng.random((T, n)) < spec.distractor_rate, ids, PAD)
    slot = rng.integers(n, size=T)
    ids[np.arange(T), slot] = CLASS_OFFSET + classes
    return ids.tolist()


def query_ids(spec: DatasetSpec, query: int = QUERY_CLASS) -> list[int]:
    lo, hi = noise_range(spec, "language")
    ids = [lo + (i % (hi - lo)) for i in range(spec.Nl)]
    if spec.queried_attribute:
        ids[0] = CLASS_OFFSET + query
    return ids


def make_sample(spec: DatasetSpec, index: int, with_meta: bool = True) -> ToySample:
    """Sample ``index``; its randomness depends only on ``(seed, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    v_cls, a_cls, needle = _class_sequences(spec.T, spec.C, rng)
    c_star = int(v_cls[needle])
    visual = _fill(rng, spec.T, spec.Nv, v_cls, spec, "visual")
    audio = _fill(rng, spec.T, spec.Na, a_cls, spec, "audio")
    query = int(rng.integers(2)) if spec.queried_attribute else QUERY_CLASS
    label = c_star if query == QUERY_CLASS else spec.C - 1 - c_star
    meta = {"needle_t": needle, "class": c_star} if with_meta else None
    return ToySample(id=f"s{spec.seed}-{index}", T=spec.T, visual_ids=visual, audio_ids=audio,
                     lang_ids=query_ids(spec, query), label=label, meta=meta)


def generate(spec: DatasetSpec, with_meta: bool = True, start: int = 0) -> Iterator[ToySample]:
    spec.validate()
    for i in range(start, start + spec.num_samples):
        yield make_sample(spec, i, with_meta)


def validate_needle(sample: ToySample, C: int) -> None:
    """Raise ``DataError`` unless the sample has exactly one agreeing timestamp."""
    v = [_class_of(row, C) for row in sample.visual_ids]
    a = [_class_of(row, C) for row in sample.audio_ids]
    agree = [t for t in range(sample.T) if v[t] == a[t]]
    if len(agree) != 1:
        raise DataError(f"{sample.id}: expected one agreeing timestamp, found {agree}")
    if sample.meta is not None and sample.meta.get("needle_t") != agree[0]:
        raise DataError(f"{sample.id}: meta.needle_t disagrees with the tokens")


def _class_of(row: list[int], C: int) -> int:
    hits = [x - CLASS_OFFSET for x in row if CLASS_OFFSET <= x < CLASS_OFFSET + C]
    if len(hits) != 1:
        raise DataError(f"expected one class token per timestamp, found {len(hits)}")
    return hits[0]


# --- JSONL ----------------------------------------------------------------

def save(samples: Iterable[ToySample], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(s.to_json())
            fh.write("\n")
            n += 1
    return n


def _int_grid(value, rows: int, name: str, lineno: int) -> list[list[int]]:
    if not isinstance(value, list) or len(value) != rows:
        raise DataError(f"line {lineno}: {name} must have {rows} rows")
    width = None
    for row in value:
        if not isinstance(row, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in row):
            raise DataError(f"line {lineno}: {name} rows must be integer lists")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise DataError(f"line {lineno}: {name} rows have unequal lengths")
    return value


def parse_line(line: str, lineno: int, num_classes: int | None = None) -> ToySample:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"line {lineno}: malformed JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise DataError(f"line {lineno}: expected a JSON object")
    for key in ("id", "T", "visual_ids", "audio_ids", "lang_ids", "label"):
        if key not in obj:
            raise DataError(f"line {lineno}: missing field {key!r}")
    T = obj["T"]
    if not isinstance(T, int) or T < 1:
        raise DataError(f"line {lineno}: T must be a positive integer")
    visual = _int_grid(obj["visual_ids"], T, "visual_ids", lineno)
    audio = _int_grid(obj["audio_ids"], T, "audio_ids", lineno)
    lang = obj["lang_ids"]
    if not isinstance(lang, list) or not all(isinstance(x, int) for x in lang):
        raise DataError(f"line {lineno}: lang_ids must be an integer list")
    label = obj["label"]
    if not isinstance(label, int) or label < 0 or (num_classes is not None and label >= num_classes):
        raise DataError(f"line {lineno}: label {label!r} out of range")
    extra = {k: v for k, v in obj.items() if k not in _CORE_FIELDS}
    return ToySample(id=str(obj["id"]), T=T, visual_ids=visual, audio_ids=audio, lang_ids=lang,
                     label=label, meta=obj.get("meta"), extra=extra)


def load(path: str | Path, num_classes: int | None = None) -> list[ToySample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            out.append(parse_line(line, lineno, num_classes))
    return out


def to_arrays(samples: list[ToySample]) -> dict[str, np.ndarray]:
    """Stack samples into batch arrays; all samples must share shapes."""
    try:
        return {
            "visual": np.asarray([s.visual_ids for s in samples], dtype=np.int64),
            "audio": np.asarray([s.audio_ids for s in samples], dtype=np.int64),
            "lang": np.asarray([s.lang_ids for s in samples], dtype=np.int64),
            "label": np.asarray([s.label for s in samples], dtype=np.int64),
        }
    except ValueError as exc:
        raise DataError(f"samples have inconsistent shapes: {exc}") from None

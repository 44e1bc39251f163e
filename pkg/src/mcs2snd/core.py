"""Domain types, RTTM I/O and flat key-value configuration helpers.

Array-valued types hold numpy arrays; the network code in :mod:`mcs2snd.model`
works on torch tensors and converts at the boundary.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FRAME_PERIOD = 0.010


class RttmError(ValueError):
    """Raised for malformed RTTM input; the message names the line number."""


@dataclass
class FeatureSequence:
    """Frame-wise features.

    ``role`` is ``per_channel`` (T x F x C), ``fused`` (T x F) or
    ``encoded`` (T x D).
    """

    data: np.ndarray
    role: str = "fused"
    frame_period: float = FRAME_PERIOD

    def __post_init__(self):
        expected = {"per_channel": 3, "fused": 2, "encoded": 2}
        if self.role not in expected:
            raise ValueError(f"unknown feature role {self.role!r}")
        if self.data.ndim != expected[self.role]:
            raise ValueError(f"{self.role} features need {expected[self.role]} dims, got {self.data.shape}")
        if min(self.data.shape) <= 0:
            raise ValueError(f"empty feature dimension in {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("features contain NaN/Inf")
        if self.frame_period <= 0:
            raise ValueError("frame_period must be positive")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]


@dataclass
class ActivityMatrix:
    """N x T' speaker activity, either binary ground truth or probabilities."""

    values: np.ndarray
    kind: str = "ground_truth"
    frame_period: float = FRAME_PERIOD

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"activity must be N x T', got shape {self.values.shape}")
        if self.kind == "ground_truth":
            if not np.all((self.values == 0) | (self.values == 1)):
                raise ValueError("ground-truth activity must be binary")
        elif self.kind == "probability":
            if np.any(self.values < 0) or np.any(self.values > 1) or not np.all(np.isfinite(self.values)):
                raise ValueError("probabilities must lie in [0, 1]")
        else:
            raise ValueError(f"unknown activity kind {self.kind!r}")

    @property
    def num_speakers(self) -> int:
        return self.values.shape[0]

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if not np.issubdtype(self.vectors.dtype, np.floating):
            self.vectors = self.vectors.astype(np.float32)
        if self.vectors.ndim != 2:
            raise ValueError(f"embeddings must be N x S, got {self.vectors.shape}")
        if self.valid_mask is None:
            self.valid_mask = np.ones(len(self.vectors), dtype=bool)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.valid_mask.shape != (len(self.vectors),):
            raise ValueError("valid_mask length must match the number of embeddings")

    def __len__(self):
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class SpeakerSelection:
    """Indices of the locally present speakers into the global speaker table."""

    labels: np.ndarray
    num_all: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(set(self.labels.tolist())) != len(self.labels):
            raise ValueError("speaker labels must be pairwise distinct")
        if np.any(self.labels < 0):
            raise ValueError("negative speaker label")
        if np.any(self.labels >= self.num_all):
            bad = self.labels[self.labels >= self.num_all].tolist()
            raise ValueError(f"speaker labels {bad} exceed table size {self.num_all}")

    @property
    def one_hot(self) -> np.ndarray:
        out = np.zeros((len(self.labels), self.num_all), dtype=np.float32)
        out[np.arange(len(self.labels)), self.labels] = 1.0
        return out

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True, order=True)
class Segment:
    onset: float
    speaker: str
    duration: float

    @property
    def end(self) -> float:
        return self.onset + self.duration


@dataclass
class DiarizationResult:
    """Labelled speech segments of one recording, kept sorted by (onset, speaker)."""

    segments: list[Segment] = field(default_factory=list)
    recording_id: str = "rec"

    def __post_init__(self):
        segs = [s if isinstance(s, Segment) else _segment_from_tuple(s) for s in self.segments]
        for s in segs:
            if s.duration <= 0:
                raise ValueError(f"segment duration must be positive: {s}")
            if s.onset < 0:
                raise ValueError(f"segment onset must be nonnegative: {s}")
        self.segments = sorted(segs)

    @property
    def speakers(self) -> list[str]:
        """Speaker ids ordered by first appearance (ties broken by id)."""
        first: dict[str, float] = {}
        for s in self.segments:
            first.setdefault(s.speaker, s.onset)
        return sorted(first, key=lambda spk: (first[spk], spk))

    @property
    def end_time(self) -> float:
        return max((s.end for s in self.segments), default=0.0)

    def normalized(self) -> "DiarizationResult":
        """Merge overlapping or touching segments of the same speaker."""
        merged: list[Segment] = []
        for spk in sorted({s.speaker for s in self.segments}):
            runs = sorted((s.onset, s.end) for s in self.segments if s.speaker == spk)
            start, stop = runs[0]
            for a, b in runs[1:]:
                if a <= stop:
                    stop = max(stop, b)
                else:
                    merged.append(Segment(start, spk, stop - start))
                    start, stop = a, b
            merged.append(Segment(start, spk, stop - start))
        return DiarizationResult(merged, self.recording_id)

    def renamed(self, mapping: dict[str, str]) -> "DiarizationResult":
        return DiarizationResult(
            [Segment(s.onset, mapping.get(s.speaker, s.speaker), s.duration) for s in self.segments],
            self.recording_id,
        )


def _segment_from_tuple(t) -> Segment:
    speaker, onset, duration = t
    return Segment(float(onset), str(speaker), float(duration))


@dataclass
class BlockPlan:
    block_length: float = 8.0
    block_shift: float = 2.0
    frame_period: float = FRAME_PERIOD

    def __post_init__(self):
        if self.frame_period <= 0:
            raise ValueError("frame_period must be positive")
        if not 0 < self.block_shift <= self.block_length:
            raise ValueError("need 0 < block_shift <= block_length")
        for name in ("block_length", "block_shift"):
            ratio = getattr(self, name) / self.frame_period
            if abs(ratio - round(ratio)) > 1e-6:
                raise ValueError(f"{name} must be a multiple of frame_period")

    @property
    def block_frames(self) -> int:
        return int(round(self.block_length / self.frame_period))

    @property
    def shift_frames(self) -> int:
        return int(round(self.block_shift / self.frame_period))

    def num_blocks(self, duration: float) -> int:
        if duration <= self.block_length:
            return 1
        # tolerance guards float noise in e.g. 12.0 - 8.0
        return int(math.ceil((duration - self.block_length) / self.block_shift - 1e-9)) + 1

    def block_starts(self, duration: float) -> list[float]:
        return [i * self.block_shift for i in range(self.num_blocks(duration))]


# ---------------------------------------------------------------------------
# RTTM


def parse_rttm_all(text: str) -> dict[str, DiarizationResult]:
    """Parse every SPEAKER record, grouped by recording id (in file order)."""
    grouped: dict[str, list[Segment]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields or fields[0] != "SPEAKER":
            continue
        if len(fields) < 9:
            raise RttmError(f"line {lineno}: expected at least 9 fields, got {len(fields)}")
        try:
            onset, duration = float(fields[3]), float(fields[4])
        except ValueError:
            raise RttmError(f"line {lineno}: non-numeric onset/duration {fields[3]!r} {fields[4]!r}") from None
        if not (math.isfinite(onset) and math.isfinite(duration)) or onset < 0 or duration <= 0:
            raise RttmError(f"line {lineno}: invalid onset/duration {onset} {duration}")
        grouped.setdefault(fields[1], []).append(Segment(onset, fields[7], duration))
    return {rec: DiarizationResult(segs, rec) for rec, segs in grouped.items()}


def parse_rttm(text: str, recording_id: str | None = None) -> DiarizationResult:
    results = parse_rttm_all(text)
    if not results:
        return DiarizationResult([], recording_id or "rec")
    if recording_id is None:
        if len(results) > 1:
            raise RttmError(f"RTTM holds {len(results)} recordings; pass recording_id")
        return next(iter(results.values()))
    return results.get(recording_id, DiarizationResult([], recording_id))


def emit_rttm(result: DiarizationResult) -> str:
    lines = [
        f"SPEAKER {result.recording_id} 1 {s.onset:.2f} {s.duration:.2f} <NA> <NA> {s.speaker} <NA> <NA>"
        for s in result.segments
    ]
    return "".join(line + "\n" for line in lines)


def read_rttm(path, recording_id: str | None = None) -> DiarizationResult:
    return parse_rttm(Path(path).read_text(), recording_id)


def write_rttm(result: DiarizationResult, path) -> None:
    Path(path).write_text(emit_rttm(result))


# ---------------------------------------------------------------------------
# rasterization


def frame_range(onset: float, end: float, frame_period: float) -> tuple[int, int]:
    """Frames [a, b) whose midpoints lie in [onset, end)."""
    a = int(math.ceil(onset / frame_period - 0.5 - 1e-9))
    b = int(math.ceil(end / frame_period - 0.5 - 1e-9))
    return max(a, 0), max(b, 0)


def activity_from_segments(
    result: DiarizationResult,
    frame_period: float = FRAME_PERIOD,
    total_frames: int | None = None,
    speaker_order: Sequence[str] | None = None,
    offset: float = 0.0,
    clip: bool = False,
) -> ActivityMatrix:
    """Rasterize segments to an N x T' binary matrix.

    Frame ``t`` covers time ``offset + t * frame_period``; it is active for a
    speaker when its midpoint lies inside one of that speaker's segments.
    With ``clip=True`` segments reaching past ``total_frames`` are truncated
    instead of rejected (used when cutting blocks out of a recording).
    """
    order = list(result.speakers if speaker_order is None else speaker_order)
    index = {spk: i for i, spk in enumerate(order)}
    unknown = sorted({s.speaker for s in result.segments} - set(index))
    if unknown:
        raise KeyError(f"speakers not in speaker_order: {unknown}")
    needed = int(math.ceil((result.end_time - offset) / frame_period - 1e-9)) if result.segments else 0
    if total_frames is None:
        total_frames = max(needed, 0)
    elif total_frames < needed and not clip:
        raise ValueError(f"total_frames={total_frames} < {needed} frames needed by the segments")
    values = np.zeros((len(order), total_frames), dtype=np.float32)
    for s in result.segments:
        a, b = frame_range(s.onset - offset, s.end - offset, frame_period)
        if a < total_frames and b > a:
            values[index[s.speaker], a:min(b, total_frames)] = 1.0
    return ActivityMatrix(values, "ground_truth", frame_period)


# ---------------------------------------------------------------------------
# flat key-value configuration


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if "," in text:
        return [parse_value(part) for part in text.split(",") if part.strip()]
    return text


def parse_kv(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def dump_kv(values: dict) -> str:
    def fmt(v):
        if isinstance(v, (list, tuple)):
            return ",".join(fmt(x) for x in v)
        return str(v)

    return "".join(f"{k} = {fmt(v)}\n" for k, v in values.items())


def update_dataclass(obj, values: dict, strict: bool = True):
    """Return a copy of dataclass ``obj`` with ``values`` applied."""
    names = {f.name: f for f in dataclasses.fields(obj)}
    kwargs = {}
    for key, value in values.items():
        if key not in names:
            if strict:
                raise KeyError(f"unknown config key {key!r} for {type(obj).__name__}")
            continue
        current = getattr(obj, key)
        if isinstance(current, tuple) and value is None:  # an empty sequence dumps as an empty value
            value = ()
        if isinstance(current, tuple) and not isinstance(value, (list, tuple)):
            value = (value,)
        if isinstance(current, tuple):
            value = tuple(value)
        elif isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        kwargs[key] = value
    return dataclasses.replace(obj, **kwargs)


def parse_overrides(items: Iterable[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out

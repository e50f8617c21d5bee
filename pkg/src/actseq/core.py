"""Labeled time series, action sequences and segment lists.

Class indices are 0-based. An :class:`ActionSequence` carries no timing; the
timing lives in :class:`FrameLabeling` and :class:`SegmentList`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, SegmentError, ShapeError


@dataclass(frozen=True)
class LabelVocab:
    """Ordered class names plus the two reserved decoder tokens.

    ``start_of_sequence`` is ``c`` and ``end_of_sequence`` is ``c + 1``, both
    outside the class range.
    """

    classes: tuple[str, ...]

    def __post_init__(self):
        classes = tuple(self.classes)
        object.__setattr__(self, "classes", classes)
        if not classes:
            raise ConfigError("vocabulary needs at least one class")
        if any(not isinstance(n, str) or not n for n in classes):
            raise ConfigError("class names must be non-empty strings")
        if len(set(classes)) != len(classes):
            raise ConfigError("class names must be unique")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def start_of_sequence(self) -> int:
        return len(self.classes)

    @property
    def end_of_sequence(self) -> int:
        return len(self.classes) + 1

    def index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise ConfigError(f"unknown class name {name!r}") from None

    def encode(self, names: Iterable[str]) -> list[int]:
        return [self.index(n) for n in names]

    def decode(self, indices: Iterable[int]) -> list[str]:
        return [self.classes[int(i)] for i in indices]


class ActionSequence(tuple):
    """Ordered class indices, e.g. ``(reach, transport, idle)``.

    With ``canonical=True`` (the default) consecutive repeats are rejected.
    Pass ``canonical=False`` for raw ground truth that may legitimately hold
    two back-to-back instances of one class.
    """

    def __new__(cls, items: Iterable[int] = (), canonical: bool = True,
                num_classes: int | None = None):
        items = tuple(int(i) for i in items)
        for i in items:
            if i < 0 or (num_classes is not None and i >= num_classes):
                raise ShapeError(f"class index {i} out of range")
        if canonical:
            for a, b in zip(items, items[1:]):
                if a == b:
                    raise ShapeError("canonical action sequence has consecutive repeats")
        return super().__new__(cls, items)

    def __repr__(self):
        return f"ActionSequence({list(self)})"


def _as_label_array(labels) -> np.ndarray:
    if isinstance(labels, FrameLabeling):
        return labels.labels
    arr = np.asarray(labels, dtype=np.int64).reshape(-1)
    return arr


@dataclass(frozen=True, eq=False)
class FrameLabeling:
    """One class index per frame."""

    labels: np.ndarray
    frame_rate: float = 1.0

    def __post_init__(self):
        arr = np.array(self.labels, dtype=np.int64).reshape(-1)
        if arr.size and arr.min() < 0:
            raise ShapeError("negative class index in frame labeling")
        if not self.frame_rate > 0:
            raise ConfigError("frame_rate must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)

    def __len__(self):
        return int(self.labels.shape[0])

    def __eq__(self, other):
        if not isinstance(other, FrameLabeling):
            return NotImplemented
        return self.frame_rate == other.frame_rate and np.array_equal(self.labels, other.labels)

    def __hash__(self):
        return hash((self.labels.tobytes(), self.frame_rate))

    def check_classes(self, num_classes: int) -> None:
        if self.labels.size and self.labels.max() >= num_classes:
            raise ShapeError(f"label {int(self.labels.max())} >= class count {num_classes}")


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """T x D matrix of finite per-frame features."""

    frames: np.ndarray
    frame_rate: float = 1.0
    metadata: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        arr = np.array(self.frames, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[1] < 1:
            raise ShapeError(f"features must be T x D with D >= 1, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ShapeError("features contain non-finite values")
        if not self.frame_rate > 0:
            raise ConfigError("frame_rate must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "frames", arr)
        object.__setattr__(self, "metadata", MappingProxyType(dict(self.metadata)))

    def __len__(self):
        return int(self.frames.shape[0])

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])


class Segment(NamedTuple):
    label: int
    start: int
    end: int  # exclusive

    @property
    def length(self) -> int:
        return self.end - self.start


class SegmentList(tuple):
    """Contiguous, non-overlapping, non-empty segments covering ``[0, T)``."""

    def __new__(cls, segments: Iterable[Sequence[int]] = ()):
        segs = tuple(Segment(int(s[0]), int(s[1]), int(s[2])) for s in segments)
        prev_end, prev_label = 0, None
        for seg in segs:
            if seg.start != prev_end:
                kind = "overlap" if seg.start < prev_end else "gap"
                raise SegmentError(f"segments not contiguous ({kind} at frame {seg.start})")
            if seg.end <= seg.start:
                raise SegmentError(f"empty segment at frame {seg.start}")
            if seg.label < 0:
                raise SegmentError("negative class index")
            if seg.label == prev_label:
                raise SegmentError(f"adjacent segments share class {seg.label}")
            prev_end, prev_label = seg.end, seg.label
        return super().__new__(cls, segs)

    @property
    def num_frames(self) -> int:
        return self[-1].end if self else 0


@dataclass(frozen=True, eq=False)
class LabeledSample:
    features: FeatureSequence
    frame_labels: FrameLabeling
    sequence: ActionSequence = None  # derived when omitted
    sample_id: str = ""

    def __post_init__(self):
        if len(self.features) != len(self.frame_labels):
            raise ShapeError(
                f"features have {len(self.features)} frames, labels {len(self.frame_labels)}")
        derived = collapse(self.frame_labels)
        if self.sequence is None:
            object.__setattr__(self, "sequence", derived)
        elif tuple(self.sequence) != tuple(derived):
            raise ShapeError("sequence does not match collapsed frame labels")


def collapse(f) -> ActionSequence:
    """Drop label repetitions at consecutive frames."""
    arr = _as_label_array(f)
    if arr.size == 0:
        return ActionSequence()
    keep = np.ones(arr.shape[0], dtype=bool)
    keep[1:] = arr[1:] != arr[:-1]
    return ActionSequence(arr[keep].tolist())


def boundaries_of(f) -> list[int]:
    """Frames ``i >= 1`` where the label differs from frame ``i - 1``."""
    arr = _as_label_array(f)
    if arr.size < 2:
        return []
    return (np.flatnonzero(arr[1:] != arr[:-1]) + 1).tolist()


def segments_from_frames(f) -> SegmentList:
    arr = _as_label_array(f)
    if arr.size == 0:
        return SegmentList()
    starts = [0] + boundaries_of(arr)
    ends = starts[1:] + [int(arr.shape[0])]
    return SegmentList((int(arr[s]), s, e) for s, e in zip(starts, ends))


def frames_from_segments(s, frame_rate: float = 1.0) -> FrameLabeling:
    segs = s if isinstance(s, SegmentList) else SegmentList(s)
    labels = np.empty(segs.num_frames, dtype=np.int64)
    for seg in segs:
        labels[seg.start:seg.end] = seg.label
    return FrameLabeling(labels, frame_rate)


def import_sequence(items: Iterable[int], canonical: bool = True) -> ActionSequence:
    """Build a ground-truth sequence, collapsing repeats unless told not to."""
    items = list(items)
    if canonical:
        return collapse(items)
    return ActionSequence(items, canonical=False)

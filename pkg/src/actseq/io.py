"""On-disk dataset directories, prediction files and JSON helpers.

A dataset directory holds ``meta.json`` plus, per sample, ``<id>.features.csv``
(T rows of D comma-separated floats) and ``<id>.labels.csv`` (T rows of one
class index). Predicted sequences are JSON lines ``{id, sequence}`` with class
names.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import FeatureSequence, FrameLabeling, LabeledSample, LabelVocab
from .errors import FormatError, ShapeError
from .numerics import check_version

FORMAT_VERSION = "1.0"
OUTPUT_DIR_ENV = "ACTSEQ_OUTPUT_DIR"


def dump_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise FormatError(f"missing file {path}") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None


def matrix_to_csv(rows: np.ndarray) -> str:
    rows = np.asarray(rows)
    if rows.ndim == 1:
        return "".join(f"{v!r}\n" for v in rows.tolist())
    return "".join(",".join(repr(v) for v in r) + "\n" for r in rows.tolist())


def read_matrix_csv(path, columns: int | None = None) -> np.ndarray:
    """Headerless float CSV as a ``T x D`` array (``T x 1`` for one column)."""
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise FormatError(f"missing file {path}") from None
    lines = [ln for ln in text.splitlines() if ln.strip()]
    try:
        arr = np.array([[float(v) for v in ln.split(",")] for ln in lines], dtype=np.float64)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None
    if arr.size == 0:
        arr = arr.reshape(0, columns or 1)
    if arr.ndim != 2:
        raise FormatError(f"{path}: rows have differing column counts")
    if columns is not None and arr.shape[1] != columns:
        raise ShapeError(f"{path}: {arr.shape[1]} columns, expected {columns}")
    return arr


def read_labels_csv(path) -> np.ndarray:
    try:
        lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    except FileNotFoundError:
        raise FormatError(f"missing file {path}") from None
    try:
        return np.array([int(v) for v in lines], dtype=np.int64)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


@dataclass
class Dataset:
    vocab: LabelVocab
    frame_rate: float
    samples: list[LabeledSample]
    splits: dict[str, list[str]] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.samples[0].features.dim if self.samples else 0

    def by_id(self) -> dict[str, LabeledSample]:
        return {s.sample_id: s for s in self.samples}

    def split(self, name: str) -> list[LabeledSample]:
        if name not in self.splits:
            raise FormatError(f"dataset has no split {name!r} (has {sorted(self.splits)})")
        index = self.by_id()
        return [index[i] for i in self.splits[name]]


def _check_splits(ids: Sequence[str], splits: dict[str, list[str]]) -> None:
    known = set(ids)
    seen: set[str] = set()
    for name, members in splits.items():
        for i in members:
            if i not in known:
                raise FormatError(f"split {name!r} lists unknown sample {i!r}")
            if i in seen:
                raise FormatError(f"sample {i!r} appears in more than one split")
            seen.add(i)


def write_dataset(path, dataset: Dataset) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    ids = [s.sample_id for s in dataset.samples]
    if len(set(ids)) != len(ids) or any(not i for i in ids):
        raise FormatError("sample ids must be unique and non-empty")
    _check_splits(ids, dataset.splits)
    meta = {
        "format_version": FORMAT_VERSION,
        "classes": list(dataset.vocab.classes),
        "feature_dim": dataset.feature_dim,
        "frame_rate": dataset.frame_rate,
        "samples": [{"id": s.sample_id, "num_frames": len(s.frame_labels),
                     "metadata": dict(s.features.metadata)} for s in dataset.samples],
        "splits": {k: list(v) for k, v in dataset.splits.items()},
    }
    meta.update(dataset.extra)
    for s in dataset.samples:
        (root / f"{s.sample_id}.features.csv").write_text(matrix_to_csv(s.features.frames))
        (root / f"{s.sample_id}.labels.csv").write_text(
            "".join(f"{v}\n" for v in s.frame_labels.labels.tolist()))
    dump_json(root / "meta.json", meta)


def read_dataset(path) -> Dataset:
    root = Path(path)
    meta = load_json(root / "meta.json")
    check_version(meta.get("format_version"), FORMAT_VERSION, "dataset")
    try:
        vocab = LabelVocab(tuple(meta["classes"]))
        D = int(meta["feature_dim"])
        fps = float(meta["frame_rate"])
        entries = meta["samples"]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"meta.json is missing or has a bad field: {e}") from None
    ids = [e["id"] for e in entries]
    if len(set(ids)) != len(ids):
        raise FormatError("meta.json lists a sample more than once")
    splits = {k: list(v) for k, v in meta.get("splits", {}).items()}
    _check_splits(ids, splits)
    samples = []
    for e in entries:
        sid = e["id"]
        feats = read_matrix_csv(root / f"{sid}.features.csv", D)
        labels = read_labels_csv(root / f"{sid}.labels.csv")
        if feats.shape[0] != labels.shape[0]:
            raise ShapeError(f"sample {sid}: {feats.shape[0]} feature rows, "
                             f"{labels.shape[0]} label rows")
        fl = FrameLabeling(labels, fps)
        fl.check_classes(vocab.num_classes)
        samples.append(LabeledSample(FeatureSequence(feats, fps, e.get("metadata", {})), fl,
                                     sample_id=sid))
    extra = {k: v for k, v in meta.items()
             if k not in ("format_version", "classes", "feature_dim", "frame_rate", "samples",
                          "splits")}
    return Dataset(vocab, fps, samples, splits, extra)


def write_predictions(path, items: Iterable[tuple[str, Sequence[str]]]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"format_version": FORMAT_VERSION, "id": i, "sequence": list(seq)})
             for i, seq in items]
    Path(path).write_text("".join(ln + "\n" for ln in lines))


def read_predictions(path) -> list[tuple[str, list[str]]]:
    out = []
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise FormatError(f"missing file {path}") from None
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}:{n}: invalid JSON ({e})") from None
        if "format_version" in obj:
            check_version(obj["format_version"], FORMAT_VERSION, "predictions")
        if not isinstance(obj.get("id"), str) or not isinstance(obj.get("sequence"), list):
            raise FormatError(f"{path}:{n}: expected an object with 'id' and 'sequence'")
        out.append((obj["id"], [str(v) for v in obj["sequence"]]))
    ids = [i for i, _ in out]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate prediction ids")
    return out


def output_dir(default) -> Path:
    """``default`` unless the output-directory environment variable is set."""
    return Path(os.environ.get(OUTPUT_DIR_ENV) or default)

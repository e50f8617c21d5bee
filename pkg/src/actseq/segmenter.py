"""Multi-stage dilated temporal-convolution frame classifier and refinements.

Each stage is a stack of dilated residual layers (dilation ``2**l`` for layer
``l``); the first stage reads features, later stages read the previous stage's
softmax. An optional boundary head predicts, per frame, the probability that an
action starts there. Frame labels can be refined by a centered smoothing window
or by pooling class probabilities between detected boundaries.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .core import FeatureSequence, FrameLabeling, boundaries_of, collapse
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .metrics import aer as action_error_rate
from .metrics import framewise_accuracy
from .training import TrainConfig, TrainingLog

log = logging.getLogger(__name__)


@dataclass
class SegmenterConfig:
    input_dim: int
    num_classes: int
    stages: int = 2
    layers_per_stage: int = 6
    channels: int = 32
    kernel_size: int = 3
    dropout: float = 0.2
    boundary_head: bool = False
    boundary_lambda: float = 0.1
    boundary_width: int = 2
    class_weights: list[float] | None = None
    boundary_pos_weight: float | None = None

    def __post_init__(self):
        if min(self.input_dim, self.num_classes, self.stages, self.layers_per_stage,
               self.channels) < 1:
            raise ConfigError("segmenter dimensions and counts must be positive")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel size must be odd")
        if self.boundary_lambda < 0:
            raise ConfigError("boundary lambda must be >= 0")
        if self.class_weights is not None and len(self.class_weights) != self.num_classes:
            raise ConfigError("class_weights length must equal num_classes")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SegmenterConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown segmenter fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FrameProbs:
    """``T x c`` class probabilities and optional per-frame boundary probabilities."""

    probs: np.ndarray
    boundary: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ShapeError("frame probabilities must be T x c")
        if self.boundary is not None:
            self.boundary = np.asarray(self.boundary, dtype=np.float64).reshape(-1)
            if self.boundary.shape[0] != self.probs.shape[0]:
                raise ShapeError("boundary probabilities must have one entry per frame")

    def __len__(self):
        return self.probs.shape[0]

    def argmax(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    def to_csv(self) -> str:
        cols = self.probs if self.boundary is None else np.column_stack([self.probs, self.boundary])
        return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in cols)

    @classmethod
    def from_csv(cls, text: str, num_classes: int) -> "FrameProbs":
        rows = [r for r in csv.reader(io.StringIO(text)) if r]
        try:
            arr = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
        except ValueError as e:
            raise FormatError(f"bad probability CSV: {e}") from None
        if arr.size == 0:
            arr = arr.reshape(0, num_classes)
        if arr.shape[1] == num_classes:
            return cls(arr)
        if arr.shape[1] == num_classes + 1:
            return cls(arr[:, :num_classes], arr[:, num_classes])
        raise FormatError(f"probability CSV has {arr.shape[1]} columns, expected {num_classes}(+1)")


# ------------------------------------------------------------------- model

def _param(shape, fan_in, rng):
    return nn.Parameter(nx.init_uniform(shape, fan_in, rng))


class DilatedResidualLayer(nn.Module):
    def __init__(self, channels: int, kernel_size: int, dilation: int, rng: nx.Rng):
        super().__init__()
        self.dilation = dilation
        fan = channels * kernel_size
        self.w_dil = _param((channels, channels, kernel_size), fan, rng)
        self.b_dil = _param((channels,), fan, rng)
        self.w_1x1 = _param((channels, channels, 1), channels, rng)
        self.b_1x1 = _param((channels,), channels, rng)

    def forward(self, x, mask, p_drop, rng, training):
        out = nx.relu(nx.conv1d_dilated(x, self.w_dil, self.b_dil, self.dilation))
        out = nx.conv1d_dilated(out, self.w_1x1, self.b_1x1)
        out = nx.dropout(out, p_drop, rng, training)
        return (x + out) * mask


class Stage(nn.Module):
    """1x1 input projection, dilated residual stack, 1x1 class projection."""

    def __init__(self, in_dim: int, channels: int, layers: int, kernel_size: int,
                 out_dim: int, rng: nx.Rng):
        super().__init__()
        self.w_in = _param((channels, in_dim, 1), in_dim, rng)
        self.b_in = _param((channels,), in_dim, rng)
        self.layers = nn.ModuleList(
            DilatedResidualLayer(channels, kernel_size, 2 ** l, rng) for l in range(layers))
        self.w_out = _param((out_dim, channels, 1), channels, rng)
        self.b_out = _param((out_dim,), channels, rng)

    def forward(self, x, mask, p_drop=0.0, rng=None, training=False):
        h = nx.conv1d_dilated(x, self.w_in, self.b_in) * mask
        for layer in self.layers:
            h = layer(h, mask, p_drop, rng, training)
        return nx.conv1d_dilated(h, self.w_out, self.b_out) * mask, h


class Segmenter(nn.Module):
    def __init__(self, config: SegmenterConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = nx.Rng(seed)
        c = config
        self.stages = nn.ModuleList(
            [Stage(c.input_dim, c.channels, c.layers_per_stage, c.kernel_size, c.num_classes, rng)]
            + [Stage(c.num_classes, c.channels, c.layers_per_stage, c.kernel_size,
                     c.num_classes, rng) for _ in range(c.stages - 1)])
        if c.boundary_head:
            self.w_bnd = _param((1, c.channels, 1), c.channels, rng)
            self.b_bnd = _param((1,), c.channels, rng)
        self.to(nx.DTYPE)

    def forward(self, x, mask=None, rng: nx.Rng | None = None, training: bool = False):
        """``x`` is ``(B, D, T)``; returns per-stage logits ``(B, c, T)`` and boundary logits."""
        if x.shape[1] != self.config.input_dim:
            raise ShapeError(f"segmenter expects {self.config.input_dim} input channels, "
                             f"got {x.shape[1]}")
        if mask is None:
            mask = torch.ones(x.shape[0], x.shape[2], dtype=nx.DTYPE)
        m = mask.unsqueeze(1)
        p = self.config.dropout
        logits, feats = self.stages[0](x, m, p, rng, training)
        outs = [logits]
        for stage in self.stages[1:]:
            logits, _ = stage(nx.softmax(logits, axis=1) * m, m, p, rng, training)
            outs.append(logits)
        bnd = None
        if self.config.boundary_head:
            bnd = nx.conv1d_dilated(feats, self.w_bnd, self.b_bnd).squeeze(1)
        return outs, bnd

    def params_dict(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    def load_params(self, params: dict[str, torch.Tensor]) -> None:
        own = self.params_dict()
        if set(own) != set(params):
            raise FormatError("checkpoint parameters do not match the segmenter architecture")
        with torch.no_grad():
            for name, t in params.items():
                if own[name].shape != t.shape:
                    raise FormatError(f"parameter {name}: shape {tuple(t.shape)} "
                                      f"!= {tuple(own[name].shape)}")
                own[name].copy_(t)


def _batch(feature_list: Sequence[np.ndarray]):
    T = max(f.shape[0] for f in feature_list)
    D = feature_list[0].shape[1]
    x = torch.zeros(len(feature_list), D, T, dtype=nx.DTYPE)
    mask = torch.zeros(len(feature_list), T, dtype=nx.DTYPE)
    for i, f in enumerate(feature_list):
        x[i, :, :f.shape[0]] = torch.from_numpy(np.ascontiguousarray(f.T))
        mask[i, :f.shape[0]] = 1.0
    return x, mask


def _frames(x) -> np.ndarray:
    return x.frames if isinstance(x, FeatureSequence) else np.asarray(x, dtype=np.float64)


def predict_probs(model: Segmenter, inputs: Sequence, batch_size: int = 8) -> list[FrameProbs]:
    """Final-stage softmax (and boundary sigmoid) for each input sequence."""
    arrays = [_frames(x) for x in inputs]
    out = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(arrays), batch_size):
            chunk = arrays[start:start + batch_size]
            x, mask = _batch(chunk)
            logits, bnd = model(x, mask)
            probs = nx.softmax(logits[-1], axis=1)
            bprob = torch.sigmoid(bnd) if bnd is not None else None
            for i, f in enumerate(chunk):
                T = f.shape[0]
                out.append(FrameProbs(probs[i, :, :T].T.numpy().copy(),
                                      None if bprob is None else bprob[i, :T].numpy().copy()))
    return out


def segmenter_forward(x, model: Segmenter) -> FrameProbs:
    return predict_probs(model, [x])[0]


# -------------------------------------------------------------------- loss

def boundary_targets(labels, width: int) -> np.ndarray:
    """1.0 within ``width`` frames of every label change, else 0.0."""
    arr = labels.labels if isinstance(labels, FrameLabeling) else np.asarray(labels)
    tgt = np.zeros(arr.shape[0], dtype=np.float64)
    for b in boundaries_of(arr):
        tgt[max(0, b - width):b + width + 1] = 1.0
    return tgt


def segmenter_loss(stage_logits, targets, config: SegmenterConfig, boundary_logits=None,
                   boundary_target=None, mask=None):
    """Weighted frame cross-entropy summed over stages, plus lambda x boundary BCE.

    ``stage_logits`` are ``(B, c, T)`` tensors (or ``(c, T)`` for one sequence);
    ``targets`` holds class indices with -100 on padded frames.
    """
    if isinstance(targets, FrameLabeling):
        targets = torch.as_tensor(targets.labels)
    targets = torch.as_tensor(targets)
    if targets.dim() == 1:
        targets = targets.unsqueeze(0)
    weight = None
    if config.class_weights is not None:
        weight = torch.tensor(config.class_weights, dtype=nx.DTYPE)
    flat_t = targets.reshape(-1)
    total = 0.0
    for logits in stage_logits:
        if logits.dim() == 2:
            logits = logits.unsqueeze(0)
        if logits.shape[0] != targets.shape[0] or logits.shape[2] != targets.shape[1]:
            raise ShapeError(f"logits {tuple(logits.shape)} do not match targets "
                             f"{tuple(targets.shape)}")
        flat = logits.permute(0, 2, 1).reshape(-1, logits.shape[1])
        total = total + nx.cross_entropy(flat, flat_t, weight)
    if config.boundary_head and config.boundary_lambda > 0 and boundary_logits is not None:
        bl = boundary_logits if boundary_logits.dim() == 2 else boundary_logits.unsqueeze(0)
        bt = torch.as_tensor(boundary_target, dtype=nx.DTYPE)
        if bt.dim() == 1:
            bt = bt.unsqueeze(0)
        valid = (targets != -100).to(nx.DTYPE) if mask is None else mask
        pw = None
        if config.boundary_pos_weight is not None:
            pw = torch.tensor(config.boundary_pos_weight, dtype=nx.DTYPE)
        total = total + config.boundary_lambda * nx.binary_cross_entropy(bl, bt, pw, valid)
    return total


def median_frequency_weights(label_arrays: Sequence[np.ndarray], num_classes: int) -> list[float]:
    """``median(freq) / freq[c]`` over classes present in training; absent classes get 1."""
    counts = np.zeros(num_classes, dtype=np.float64)
    for a in label_arrays:
        counts += np.bincount(np.asarray(a, dtype=np.int64), minlength=num_classes)[:num_classes]
    present = counts > 0
    if not present.any():
        return [1.0] * num_classes
    freq = counts / counts.sum()
    med = np.median(freq[present])
    return [float(med / f) if f > 0 else 1.0 for f in freq]


def boundary_pos_weight(label_arrays: Sequence[np.ndarray], width: int) -> float:
    pos = neg = 0.0
    for a in label_arrays:
        t = boundary_targets(a, width)
        pos += t.sum()
        neg += t.size - t.sum()
    return float(neg / pos) if pos > 0 else 1.0


# -------------------------------------------------------------- refinement

def smooth_refine(p: FrameProbs, window: int) -> FrameLabeling:
    """Argmax of the centered moving average of class probabilities.

    Near the edges the average is over the frames that exist.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError("smoothing window must be an odd count >= 1")
    probs = p.probs
    T = probs.shape[0]
    if window == 1 or T == 0:
        return FrameLabeling(probs.argmax(axis=1) if T else np.zeros(0, dtype=np.int64))
    half = window // 2
    csum = np.vstack([np.zeros((1, probs.shape[1])), np.cumsum(probs, axis=0)])
    idx = np.arange(T)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, T)
    avg = (csum[hi] - csum[lo]) / (hi - lo)[:, None]
    return FrameLabeling(avg.argmax(axis=1))


def detect_boundaries(boundary: np.ndarray, threshold: float = 0.5, radius: int = 5) -> list[int]:
    """Frames whose boundary probability exceeds ``threshold`` and is a local maximum.

    A candidate must be the largest value within ``radius`` frames; among equal
    values the earliest frame wins. Frame 0 never starts a new segment.
    """
    b = np.asarray(boundary, dtype=np.float64)
    out = []
    for t in range(1, b.shape[0]):
        v = b[t]
        if v <= threshold:
            continue
        lo, hi = max(0, t - radius), min(b.shape[0], t + radius + 1)
        if v < b[lo:hi].max() or np.any(b[lo:t] == v):
            continue
        out.append(t)
    return out


def boundary_refine(p: FrameProbs, threshold: float = 0.5, radius: int = 5) -> FrameLabeling:
    """Split at detected boundaries; label each piece by its highest mean class probability."""
    if p.boundary is None:
        raise ConfigError("boundary refinement needs boundary probabilities")
    if not 0 < threshold < 1:
        raise ConfigError("boundary threshold must be in (0, 1)")
    T = len(p)
    cuts = [0] + detect_boundaries(p.boundary, threshold, radius) + [T]
    labels = np.empty(T, dtype=np.int64)
    for s, e in zip(cuts, cuts[1:]):
        labels[s:e] = int(p.probs[s:e].mean(axis=0).argmax())
    return FrameLabeling(labels)


# ---------------------------------------------------------------- training

def _mean_aer(gt_labels: Sequence[np.ndarray], pred_labels: Sequence[np.ndarray]) -> float:
    vals = [action_error_rate(collapse(g), collapse(p)) for g, p in zip(gt_labels, pred_labels)
            if len(g)]
    return float(np.mean(vals)) if vals else 0.0


def evaluate_segmenter(model: Segmenter, inputs, labels) -> dict:
    probs = predict_probs(model, inputs)
    preds = [p.argmax() for p in probs]
    acc = float(np.mean([framewise_accuracy(g, p) for g, p in zip(labels, preds)]))
    return {"aer": _mean_aer(labels, preds), "frame_accuracy": acc}


def train_segmenter(train: Sequence[tuple], val: Sequence[tuple] | None,
                    config: SegmenterConfig, train_config: TrainConfig | None = None,
                    seed: int = 0) -> tuple[Segmenter, TrainingLog]:
    """Train on ``(features, frame_labels)`` pairs; keep the epoch with lowest val AER.

    Without a validation set the training set is used for selection. Ties keep
    the earlier epoch.
    """
    tc = train_config or TrainConfig()
    if not train:
        raise ConfigError("training set is empty")
    xs = [_frames(x) for x, _ in train]
    ys = [np.array(y.labels if isinstance(y, FrameLabeling) else y, dtype=np.int64)
          for _, y in train]
    if val:
        vx = [_frames(x) for x, _ in val]
        vy = [np.asarray(y.labels if isinstance(y, FrameLabeling) else y) for _, y in val]
    else:
        vx, vy = xs, ys
    for x, y in zip(xs, ys):
        if x.shape[0] != y.shape[0]:
            raise ShapeError("features and labels differ in length")
    if config.class_weights is None:
        config = replace(config, class_weights=median_frequency_weights(ys, config.num_classes))
    if config.boundary_head and config.boundary_pos_weight is None:
        config = replace(config, boundary_pos_weight=boundary_pos_weight(ys, config.boundary_width))

    model = Segmenter(config, seed=nx.derive_seed(seed, 1))
    params = list(model.parameters())
    opt = nx.Adam(params, lr=tc.lr, weight_decay=tc.weight_decay)
    rng = nx.Rng(nx.derive_seed(seed, 2))
    btargets = [boundary_targets(y, config.boundary_width) for y in ys]
    trace = TrainingLog()
    best_aer, best_state = float("inf"), None
    for epoch in range(tc.epochs):
        model.train()
        order = rng.permutation(len(xs))
        losses = []
        for start in range(0, len(order), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            x, mask = _batch([xs[i] for i in idx])
            T = x.shape[2]
            tgt = torch.full((len(idx), T), -100, dtype=torch.int64)
            bt = torch.zeros(len(idx), T, dtype=nx.DTYPE)
            for j, i in enumerate(idx):
                tgt[j, :ys[i].shape[0]] = torch.from_numpy(ys[i])
                bt[j, :ys[i].shape[0]] = torch.from_numpy(btargets[i])
            try:
                logits, bnd = model(x, mask, rng, training=True)
                loss = segmenter_loss(logits, tgt, config, bnd, bt, mask)
                nx.backward(loss, params)
            except NumericError as e:
                raise NumericError(f"segmenter training diverged at epoch {epoch}: {e}") from None
            opt.step()
            losses.append(loss.item())
        entry = {"epoch": epoch, "loss": float(np.mean(losses))}
        if (epoch + 1) % tc.eval_every == 0 or epoch == tc.epochs - 1:
            entry.update({f"val_{k}": v for k, v in evaluate_segmenter(model, vx, vy).items()})
            if entry["val_aer"] < best_aer:
                best_aer, trace.best_epoch = entry["val_aer"], epoch
                best_state = {k: v.detach().clone() for k, v in model.params_dict().items()}
        trace.entries.append(entry)
        log.debug("segmenter epoch %d %s", epoch, entry)
    model.load_params(best_state)
    model.eval()
    return model, trace


def save_segmenter(path, model: Segmenter, extra: dict | None = None) -> None:
    nx.save_checkpoint(path, model.params_dict(), model.config.to_dict(), "segmenter", extra)


def load_segmenter(path_or_doc) -> Segmenter:
    doc = path_or_doc if isinstance(path_or_doc, dict) else nx.load_checkpoint(path_or_doc)
    if doc["kind"] != "segmenter":
        raise FormatError(f"checkpoint kind {doc['kind']!r} is not a segmenter")
    model = Segmenter(SegmenterConfig.from_dict(doc["config"]))
    model.load_params(doc["params"])
    model.eval()
    return model

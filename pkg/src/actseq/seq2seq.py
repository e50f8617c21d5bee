"""Encoder-decoder that reads a window of frames and emits its action sequence.

Token ids follow :class:`~actseq.core.LabelVocab`: classes ``0..c-1``,
start-of-sequence ``c`` and end-of-sequence ``c+1``. The decoder's output
distribution has ``c+1`` entries; entry ``c`` is end-of-sequence.

A window of ``W`` frames carries labels only for its middle ``W - 2m`` frames
(the label span); the ``m`` frames on either side are context. Long inputs are
decoded window by window, with label spans tiling the sequence, and the window
decodes are stitched together.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .core import ActionSequence, FeatureSequence, FrameLabeling, collapse
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .metrics import aer as action_error_rate
from .segmenter import DilatedResidualLayer, FrameProbs
from .training import TrainConfig, TrainingLog

log = logging.getLogger(__name__)

INPUT_KINDS = ("raw", "probs")
ENCODERS = ("conv", "recurrent")


@dataclass
class WindowSpec:
    length: int = 60   # W, frames of input per window
    stride: int = 20   # training stride between label spans
    margin: int = 10   # m, context frames on each side without labels

    def __post_init__(self):
        if self.length < 1 or self.margin < 0:
            raise ConfigError("window length must be >= 1 and margin >= 0")
        if self.label_span < 1:
            raise ConfigError("window length must exceed twice the margin")
        if not 1 <= self.stride <= self.length:
            raise ConfigError("training stride must be in [1, window length]")

    @property
    def label_span(self) -> int:
        return self.length - 2 * self.margin


@dataclass
class EpsilonSchedule:
    """Probability of feeding the model's own previous prediction, per epoch."""

    start: float = 0.0
    end: float = 0.5
    epochs: int = 150

    def __post_init__(self):
        if not 0.0 <= self.start <= self.end <= 1.0:
            raise ConfigError("epsilon schedule needs 0 <= start <= end <= 1")
        if self.epochs < 1:
            raise ConfigError("epsilon schedule needs at least one epoch")

    def value(self, epoch: int) -> float:
        if self.epochs == 1:
            return self.start
        frac = min(max(epoch, 0), self.epochs - 1) / (self.epochs - 1)
        return self.start + (self.end - self.start) * frac


@dataclass
class Seq2SeqConfig:
    input_dim: int
    num_classes: int
    input_kind: str = "raw"
    encoder: str = "conv"
    encoder_hidden: int = 64
    encoder_layers: int = 6
    decoder_hidden: int = 128
    attention: bool = True
    heads: int = 1
    max_decode_len: int = 32
    aux_weight: float | None = None   # resolved from input_kind when None
    dropout: float = 0.1
    window: WindowSpec = field(default_factory=WindowSpec)
    epsilon_start: float = 0.0
    epsilon_end: float = 0.5

    def __post_init__(self):
        if isinstance(self.window, dict):
            self.window = WindowSpec(**self.window)
        if self.input_kind not in INPUT_KINDS:
            raise ConfigError(f"input_kind must be one of {INPUT_KINDS}")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {ENCODERS}")
        if min(self.input_dim, self.num_classes, self.encoder_hidden, self.encoder_layers,
               self.decoder_hidden, self.heads) < 1:
            raise ConfigError("seq2seq dimensions must be positive")
        if self.max_decode_len < 1:
            raise ConfigError("max decode length must be >= 1")
        if self.attention and self.encoder_dim % self.heads:
            raise ConfigError("encoder state size must be divisible by the head count")
        if self.aux_weight is None:
            self.aux_weight = 1.0 if self.input_kind == "raw" else 0.0
        if self.aux_weight < 0:
            raise ConfigError("auxiliary loss weight must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        EpsilonSchedule(self.epsilon_start, self.epsilon_end)

    @property
    def encoder_dim(self) -> int:
        return self.encoder_hidden * (2 if self.encoder == "recurrent" else 1)

    @property
    def embed_dim(self) -> int:
        return max(1, self.decoder_hidden // 4)

    @property
    def start_token(self) -> int:
        return self.num_classes

    @property
    def end_token(self) -> int:
        return self.num_classes + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Seq2SeqConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown seq2seq fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DecodeTrace:
    """Emitted token ids (classes, then end-of-sequence if reached) and per-step outputs."""

    tokens: list[int]
    probs: list[np.ndarray]
    attention: list[np.ndarray] | None
    truncated: bool
    num_classes: int

    @property
    def sequence(self) -> ActionSequence:
        return ActionSequence([t for t in self.tokens if t < self.num_classes], canonical=False)

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens),
                "probs": [p.tolist() for p in self.probs],
                "attention": None if self.attention is None else [a.tolist() for a in self.attention],
                "truncated": self.truncated}


def output_to_token(index: int, num_classes: int) -> int:
    return index if index < num_classes else num_classes + 1


def token_to_output(token: int, num_classes: int) -> int:
    if 0 <= token < num_classes:
        return token
    if token == num_classes + 1:
        return num_classes
    raise ShapeError(f"token {token} is not a class or end-of-sequence")


def target_tokens(sequence, num_classes: int) -> list[int]:
    """Class indices followed by the end-of-sequence token."""
    seq = [int(t) for t in sequence]
    if any(t < 0 or t >= num_classes for t in seq):
        raise ShapeError("target contains an index outside the class range")
    return seq + [num_classes + 1]


# ------------------------------------------------------------------- model

def _param(shape, fan_in, rng):
    return nn.Parameter(nx.init_uniform(shape, fan_in, rng))


class Seq2Seq(nn.Module):
    def __init__(self, config: Seq2SeqConfig, seed: int = 0):
        super().__init__()
        self.config = cfg = config
        rng = nx.Rng(seed)
        D, E, H, c = cfg.input_dim, cfg.encoder_hidden, cfg.decoder_hidden, cfg.num_classes
        enc = cfg.encoder_dim
        if cfg.encoder == "conv":
            self.w_in = _param((E, D, 1), D, rng)
            self.b_in = _param((E,), D, rng)
            self.layers = nn.ModuleList(
                DilatedResidualLayer(E, 3, 2 ** l, rng) for l in range(cfg.encoder_layers))
        else:
            for d in ("fw", "bw"):
                setattr(self, f"{d}_w_ih", _param((3 * E, D), E, rng))
                setattr(self, f"{d}_w_hh", _param((3 * E, E), E, rng))
                setattr(self, f"{d}_b_ih", _param((3 * E,), E, rng))
                setattr(self, f"{d}_b_hh", _param((3 * E,), E, rng))
        self.w_init = _param((H, enc), enc, rng)
        self.b_init = _param((H,), enc, rng)
        self.embedding = nn.Parameter(rng.uniform((c + 2, cfg.embed_dim), -1.0, 1.0))
        dec_in = cfg.embed_dim + enc
        self.w_ih = _param((3 * H, dec_in), H, rng)
        self.w_hh = _param((3 * H, H), H, rng)
        self.b_ih = _param((3 * H,), H, rng)
        self.b_hh = _param((3 * H,), H, rng)
        if cfg.attention:
            self.w_query = _param((enc, H), H, rng)
        mlp_in = H + enc + (enc if cfg.attention else 0)
        self.w_mlp = _param((H, mlp_in), mlp_in, rng)
        self.b_mlp = _param((H,), mlp_in, rng)
        self.w_out = _param((c + 1, H), H, rng)
        self.b_out = _param((c + 1,), H, rng)
        self.w_aux = _param((c, enc), enc, rng)
        self.b_aux = _param((c,), enc, rng)
        self.to(nx.DTYPE)

    def params_dict(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    def load_params(self, params: dict[str, torch.Tensor]) -> None:
        own = self.params_dict()
        if set(own) != set(params):
            raise FormatError("checkpoint parameters do not match the seq2seq architecture")
        with torch.no_grad():
            for name, t in params.items():
                if own[name].shape != t.shape:
                    raise FormatError(f"parameter {name}: shape {tuple(t.shape)} "
                                      f"!= {tuple(own[name].shape)}")
                own[name].copy_(t)


def _as_window_batch(x, config: Seq2SeqConfig, mask=None):
    """Return ``(B, W, D)`` tensor and ``(B, W)`` bool mask."""
    if isinstance(x, FeatureSequence):
        x = x.frames
    elif isinstance(x, FrameProbs):
        x = x.probs
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))
    t = t.to(nx.DTYPE)
    if t.dim() == 2:
        t = t.unsqueeze(0)
    if t.dim() != 3 or t.shape[2] != config.input_dim:
        raise ShapeError(f"expected windows with {config.input_dim} channels, got shape "
                         f"{tuple(t.shape)}")
    if t.shape[1] < 1:
        raise ShapeError("window has no frames")
    if mask is None:
        mask = torch.ones(t.shape[0], t.shape[1], dtype=torch.bool)
    else:
        mask = torch.as_tensor(mask).to(torch.bool).reshape(t.shape[0], t.shape[1])
    return t, mask


def _bigru(model: Seq2Seq, x, mask, prefix: str, reverse: bool):
    B, T, _ = x.shape
    h = torch.zeros(B, model.config.encoder_hidden, dtype=nx.DTYPE)
    w = [getattr(model, f"{prefix}_{n}") for n in ("w_ih", "w_hh", "b_ih", "b_hh")]
    states = [None] * T
    m = mask.to(nx.DTYPE).unsqueeze(-1)
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        new = nx.gru_cell(x[:, t], h, *w)
        h = m[:, t] * new + (1.0 - m[:, t]) * h
        states[t] = h
    return torch.stack(states, dim=1), h


def encode(x_window, model: Seq2Seq, mask=None, rng: nx.Rng | None = None,
           training: bool = False):
    """Return ``(h, states, mask)``: pooled vector ``(B, enc)``, per-frame states ``(B, W, enc)``.

    The conv encoder pools by averaging states over valid frames; the recurrent
    encoder concatenates the final forward and backward states.
    """
    cfg = model.config
    x, mask = _as_window_batch(x_window, cfg, mask)
    m = mask.to(nx.DTYPE)
    if cfg.encoder == "conv":
        mc = m.unsqueeze(1)
        s = nx.conv1d_dilated(x.transpose(1, 2), model.w_in, model.b_in) * mc
        for layer in model.layers:
            s = layer(s, mc, cfg.dropout, rng, training)
        states = s.transpose(1, 2)
        count = m.sum(dim=1, keepdim=True).clamp(min=1.0)
        h = (states * m.unsqueeze(-1)).sum(dim=1) / count
    else:
        fw, h_fw = _bigru(model, x, mask, "fw", reverse=False)
        bw, h_bw = _bigru(model, x, mask, "bw", reverse=True)
        states = nx.concat([fw, bw], axis=-1)
        h = nx.concat([h_fw, h_bw], axis=-1)
        states = nx.dropout(states, cfg.dropout, rng, training)
    return h, states, mask


def initial_state(model: Seq2Seq, h):
    """Decoder state before the first step: ``tanh(W h + b)``."""
    return nx.tanh(h @ model.w_init.T + model.b_init)


def _step(model: Seq2Seq, s_prev, h, prev_token, states, mask):
    cfg = model.config
    prev = torch.as_tensor(prev_token, dtype=torch.int64).reshape(-1)
    if prev.numel() and (prev.min() < 0 or prev.max() > cfg.end_token):
        raise ShapeError(f"previous token out of range [0, {cfg.end_token}]")
    emb = model.embedding[prev]
    s = nx.gru_cell(nx.concat([emb, h], axis=-1), s_prev,
                    model.w_ih, model.w_hh, model.b_ih, model.b_hh)
    parts = [s, h]
    weights = None
    if cfg.attention:
        B, T, enc = states.shape
        heads = cfg.heads
        q = (s @ model.w_query.T).reshape(B, heads, enc // heads)
        k = states.reshape(B, T, heads, enc // heads).transpose(1, 2)
        ctx, weights = nx.attention(q, k, k, mask.unsqueeze(1))
        parts.append(ctx.reshape(B, enc))
        weights = weights.mean(dim=1)
    hidden = nx.relu(nx.concat(parts, axis=-1) @ model.w_mlp.T + model.b_mlp)
    logits = hidden @ model.w_out.T + model.b_out
    return s, logits, weights


def decode_step(s_prev, h, prev_token, states, model: Seq2Seq, mask=None):
    """One decoder step; returns ``(s_i, p_i, attention weights or None)``."""
    if mask is None:
        mask = torch.ones(states.shape[0], states.shape[1], dtype=torch.bool)
    s, logits, w = _step(model, s_prev, h, prev_token, states, mask)
    return s, nx.softmax(logits, axis=-1), w


def aux_logits(model: Seq2Seq, states):
    """Per-frame class logits ``(B, W, c)`` from encoder states."""
    return states @ model.w_aux.T + model.b_aux


# -------------------------------------------------------------------- loss

def seq2seq_loss(x_window, targets, model: Seq2Seq, epsilon: float = 0.0,
                 rng: nx.Rng | None = None, frame_labels=None, mask=None,
                 training: bool = False):
    """Sequence negative log-likelihood, averaged over the windows of the batch.

    ``targets`` is one token list (or a list of them per window), each ending
    with the end-of-sequence token. With probability ``epsilon`` per window and
    step the fed previous token is the model's own argmax instead of the
    ground truth. ``frame_labels`` (``(B, W)``, -100 where unlabeled) enable the
    auxiliary frame-wise cross-entropy weighted by ``aux_weight``.
    """
    cfg = model.config
    c = cfg.num_classes
    if targets and not isinstance(targets[0], (list, tuple, np.ndarray, torch.Tensor)):
        targets = [targets]
    if not targets or any(len(t) == 0 for t in targets):
        raise ShapeError("seq2seq target is empty (needs at least end-of-sequence)")
    for t in targets:
        if int(t[-1]) != cfg.end_token:
            raise ShapeError("seq2seq target must end with the end-of-sequence token")
    if epsilon > 0 and rng is None:
        raise ConfigError("scheduled sampling with epsilon > 0 needs an Rng")
    h, states, mask = encode(x_window, model, mask, rng, training)
    B = h.shape[0]
    if len(targets) != B:
        raise ShapeError(f"{len(targets)} targets for {B} windows")
    steps = max(len(t) for t in targets)
    tgt_out = torch.full((B, steps), -100, dtype=torch.int64)
    tgt_tok = torch.full((B, steps), cfg.end_token, dtype=torch.int64)
    for b, t in enumerate(targets):
        toks = [int(v) for v in t]
        tgt_tok[b, :len(toks)] = torch.tensor(toks)
        tgt_out[b, :len(toks)] = torch.tensor([token_to_output(v, c) for v in toks])
    s = initial_state(model, h)
    prev = torch.full((B,), cfg.start_token, dtype=torch.int64)
    total = torch.zeros((), dtype=nx.DTYPE)
    for i in range(steps):
        s, logits, _ = _step(model, s, h, prev, states, mask)
        logp = nx.log_softmax(logits, axis=-1)
        valid = tgt_out[:, i] != -100
        picked = logp.gather(1, tgt_out[:, i].clamp(min=0).unsqueeze(1)).squeeze(1)
        total = total - (picked * valid.to(nx.DTYPE)).sum()
        prev = tgt_tok[:, i].clone()
        if epsilon > 0:
            own = logits.detach().argmax(dim=-1)
            own = torch.where(own == c, torch.full_like(own, cfg.end_token), own)
            use_own = rng.bernoulli(epsilon, (B,))
            prev = torch.where(use_own, own, prev)
    loss = total / B
    if cfg.aux_weight > 0 and frame_labels is not None:
        fl = torch.as_tensor(np.asarray(frame_labels), dtype=torch.int64).reshape(B, -1)
        if fl.shape[1] != states.shape[1]:
            raise ShapeError("frame labels do not match window length")
        flat = aux_logits(model, states).reshape(-1, c)
        if (fl != -100).any():
            loss = loss + cfg.aux_weight * nx.cross_entropy(flat, fl.reshape(-1))
    return loss


# ---------------------------------------------------------------- decoding

def _greedy(models: Sequence[Seq2Seq], windows: Sequence, masks, max_len: int,
            keep_trace: bool = True) -> list[DecodeTrace]:
    """Lockstep greedy decode of a batch; ``windows[k]`` is model ``k``'s input."""
    cfg = models[0].config
    c = cfg.num_classes
    encoded = []
    with torch.no_grad():
        for model, x, m in zip(models, windows, masks):
            model.eval()
            h, states, mask = encode(x, model, m)
            encoded.append([model, h, states, mask, initial_state(model, h)])
        B = encoded[0][1].shape[0]
        prev = torch.full((B,), cfg.start_token, dtype=torch.int64)
        done = torch.zeros(B, dtype=torch.bool)
        tokens = [[] for _ in range(B)]
        probs = [[] for _ in range(B)]
        attn = [[] for _ in range(B)] if cfg.attention else None
        for _ in range(max_len):
            p_sum, w_sum = None, None
            for e in encoded:
                model, h, states, mask, s = e
                s, logits, w = _step(model, s, h, prev, states, mask)
                e[4] = s
                p = nx.softmax(logits, axis=-1)
                p_sum = p if p_sum is None else p_sum + p
                if w is not None:
                    w_sum = w if w_sum is None else w_sum + w
            p_avg = p_sum / len(encoded) if len(encoded) > 1 else p_sum
            # torch.argmax returns the first maximal index
            out = p_avg.argmax(dim=-1)
            tok = torch.where(out == c, torch.full_like(out, cfg.end_token), out)
            for b in torch.nonzero(~done).flatten().tolist():
                tokens[b].append(int(tok[b]))
                if keep_trace:
                    probs[b].append(p_avg[b].numpy().copy())
                    if attn is not None and w_sum is not None:
                        attn[b].append((w_sum[b] / len(encoded)).numpy().copy())
            done = done | (tok == cfg.end_token)
            prev = tok
            if bool(done.all()):
                break
    return [DecodeTrace(tokens[b], probs[b], None if attn is None else attn[b],
                        truncated=not tokens[b] or tokens[b][-1] != cfg.end_token,
                        num_classes=c) for b in range(B)]


def greedy_decode(x_window, model: Seq2Seq, max_len: int | None = None, mask=None) -> DecodeTrace:
    """Decode one window; ties in the argmax go to the lowest index."""
    ml = model.config.max_decode_len if max_len is None else max_len
    if ml < 1:
        raise ConfigError("max decode length must be >= 1")
    x, m = _as_window_batch(x_window, model.config, mask)
    if x.shape[0] != 1:
        raise ShapeError("greedy_decode takes a single window")
    return _greedy([model], [x], [m], ml)[0]


def _check_family(models: Sequence[Seq2Seq]) -> None:
    if not models:
        raise ConfigError("ensemble needs at least one model")
    c0 = models[0].config
    for m in models[1:]:
        if m.config.num_classes != c0.num_classes:
            raise ConfigError("ensemble members disagree on the class count")


def ensemble_decode(x_window, models: Sequence[Seq2Seq], max_len: int | None = None,
                    mask=None) -> DecodeTrace:
    """Greedy decode on the step-wise average of the members' output distributions.

    ``x_window`` is one window shared by all members, or a list with one window
    per member (members may read different inputs, e.g. their own segmenter's
    probabilities).
    """
    models = list(models)
    _check_family(models)
    ml = models[0].config.max_decode_len if max_len is None else max_len
    per_model = x_window if isinstance(x_window, list) else [x_window] * len(models)
    if len(per_model) != len(models):
        raise ShapeError("one input window per ensemble member expected")
    xs, ms = zip(*(_as_window_batch(x, m.config, mask) for x, m in zip(per_model, models)))
    return _greedy(models, list(xs), list(ms), ml)[0]


# --------------------------------------------------------------- windowing

def window_starts(num_frames: int, step: int) -> list[int]:
    """First labeled frame of each window; the last window may run past the end."""
    return list(range(0, max(num_frames, 1), step))


def cut_window(frames: np.ndarray, start: int, spec: WindowSpec) -> tuple[np.ndarray, np.ndarray]:
    """Frames ``[start - m, start - m + W)`` zero-padded outside the sequence, plus validity mask."""
    T, D = frames.shape
    lo = start - spec.margin
    out = np.zeros((spec.length, D), dtype=np.float64)
    mask = np.zeros(spec.length, dtype=bool)
    a, b = max(lo, 0), min(lo + spec.length, T)
    if b > a:
        out[a - lo:b - lo] = frames[a:b]
        mask[a - lo:b - lo] = True
    return out, mask


def stitch(window_sequences: Sequence[Sequence[int]]) -> ActionSequence:
    """Concatenate window decodes in order.

    At each junction the leading token of the next non-empty window is dropped
    when it equals the last token so far; repeats inside a window are collapsed
    too, so the result is canonical.
    """
    out: list[int] = []
    for seq in window_sequences:
        seq = list(seq)
        if not seq:
            continue
        if out and seq[0] == out[-1]:
            seq = seq[1:]
        out.extend(seq)
    return collapse(out)


def _frames_of(x) -> np.ndarray:
    if isinstance(x, FeatureSequence):
        return x.frames
    if isinstance(x, FrameProbs):
        return x.probs
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def infer_sequences(inputs: Sequence, models, spec: WindowSpec | None = None,
                    batch_size: int = 256) -> list[ActionSequence]:
    """Windowed greedy decoding of whole sequences, batched across windows.

    ``models`` is one model or a list (ensemble). For an ensemble, ``inputs``
    may hold per-sequence lists with one input per member.
    """
    models = list(models) if isinstance(models, (list, tuple)) else [models]
    _check_family(models)
    spec = spec or models[0].config.window
    K = len(models)
    jobs = []  # (sequence index, per-model window arrays, mask)
    for si, x in enumerate(inputs):
        per_model = [_frames_of(v) for v in x] if isinstance(x, list) else [_frames_of(x)] * K
        if len(per_model) != K:
            raise ShapeError("one input per ensemble member expected")
        T = per_model[0].shape[0]
        for start in window_starts(T, spec.label_span):
            cuts = [cut_window(f, start, spec) for f in per_model]
            jobs.append((si, [w for w, _ in cuts], cuts[0][1]))
    per_seq: list[list[list[int]]] = [[] for _ in inputs]
    ml = models[0].config.max_decode_len
    for lo in range(0, len(jobs), batch_size):
        chunk = jobs[lo:lo + batch_size]
        xs = [torch.as_tensor(np.stack([j[1][k] for j in chunk])) for k in range(K)]
        mask = torch.as_tensor(np.stack([j[2] for j in chunk]))
        traces = _greedy(models, xs, [mask] * K, ml, keep_trace=False)
        for (si, _, _), tr in zip(chunk, traces):
            per_seq[si].append(list(tr.sequence))
    return [stitch(w) for w in per_seq]


def windowed_infer(x, model, spec: WindowSpec | None = None) -> ActionSequence:
    """Decode one full sequence by windows whose label spans tile it, then stitch."""
    return infer_sequences([x], model, spec)[0]


def make_windows(frames: np.ndarray, labels: np.ndarray, spec: WindowSpec):
    """Training windows: ``(features, mask, target tokens, frame labels)`` per stride step."""
    c_labels = np.asarray(labels, dtype=np.int64)
    T = frames.shape[0]
    if c_labels.shape[0] != T:
        raise ShapeError("features and labels differ in length")
    out = []
    for start in window_starts(T, spec.stride):
        win, mask = cut_window(frames, start, spec)
        seq = collapse(c_labels[start:start + spec.label_span])
        fl = np.full(spec.length, -100, dtype=np.int64)
        lo = start - spec.margin
        a, b = max(lo, 0), min(lo + spec.length, T)
        fl[a - lo:b - lo] = c_labels[a:b]
        out.append((win, mask, list(seq), fl))
    return out


# ---------------------------------------------------------------- training

def _mean_aer(gts: Sequence[np.ndarray], preds: Sequence[ActionSequence]) -> float:
    vals = [action_error_rate(collapse(g), p) for g, p in zip(gts, preds) if len(g)]
    return float(np.mean(vals)) if vals else 0.0


def train_seq2seq(train: Sequence[tuple], val: Sequence[tuple] | None, config: Seq2SeqConfig,
                  train_config: TrainConfig | None = None, seed: int = 0,
                  snapshot_every: int = 0) -> tuple[Seq2Seq, TrainingLog]:
    """Train on ``(inputs, frame_labels)`` pairs; keep the epoch with lowest val AER.

    Validation AER is measured by windowed decoding of whole sequences. Without
    a validation set the training set is used. With ``snapshot_every > 0`` the
    log's ``snapshots`` attribute collects parameter copies every that many epochs.
    """
    tc = train_config or TrainConfig(batch_size=32)
    if not train:
        raise ConfigError("training set is empty")
    spec = config.window
    xs = [_frames_of(x) for x, _ in train]
    ys = [np.array(y.labels if isinstance(y, FrameLabeling) else y, dtype=np.int64)
          for _, y in train]
    for x in xs:
        if x.shape[1] != config.input_dim:
            raise ShapeError(f"inputs have {x.shape[1]} channels, config says {config.input_dim}")
    windows = [w for x, y in zip(xs, ys) for w in make_windows(x, y, spec)]
    if val:
        vx = [_frames_of(x) for x, _ in val]
        vy = [np.asarray(y.labels if isinstance(y, FrameLabeling) else y) for _, y in val]
    else:
        vx, vy = xs, ys

    model = Seq2Seq(config, seed=nx.derive_seed(seed, 1))
    params = list(model.parameters())
    opt = nx.Adam(params, lr=tc.lr, weight_decay=tc.weight_decay)
    rng = nx.Rng(nx.derive_seed(seed, 2))
    schedule = EpsilonSchedule(config.epsilon_start, config.epsilon_end, tc.epochs)
    trace = TrainingLog()
    snapshots = []
    best_aer, best_state = float("inf"), None
    for epoch in range(tc.epochs):
        eps = schedule.value(epoch)
        model.train()
        order = rng.permutation(len(windows))
        losses = []
        for lo in range(0, len(order), tc.batch_size):
            batch = [windows[i] for i in order[lo:lo + tc.batch_size]]
            x = torch.as_tensor(np.stack([b[0] for b in batch]))
            mask = torch.as_tensor(np.stack([b[1] for b in batch]))
            tgts = [target_tokens(b[2], config.num_classes) for b in batch]
            fl = np.stack([b[3] for b in batch])
            try:
                loss = seq2seq_loss(x, tgts, model, eps, rng, fl, mask, training=True)
                nx.backward(loss, params)
            except NumericError as e:
                raise NumericError(f"seq2seq training diverged at epoch {epoch}: {e}") from None
            opt.step()
            losses.append(loss.item())
        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "epsilon": eps}
        if (epoch + 1) % tc.eval_every == 0 or epoch == tc.epochs - 1:
            entry["val_aer"] = _mean_aer(vy, infer_sequences(vx, model, spec))
            if entry["val_aer"] < best_aer:
                best_aer, trace.best_epoch = entry["val_aer"], epoch
                best_state = {k: v.detach().clone() for k, v in model.params_dict().items()}
        if snapshot_every and (epoch + 1) % snapshot_every == 0:
            snapshots.append((epoch, {k: v.detach().clone() for k, v in model.params_dict().items()}))
        trace.entries.append(entry)
        log.debug("seq2seq epoch %d %s", epoch, entry)
    model.load_params(best_state)
    model.eval()
    trace.snapshots = snapshots
    return model, trace


def save_seq2seq(path, model: Seq2Seq, extra: dict | None = None) -> None:
    nx.save_checkpoint(path, model.params_dict(), model.config.to_dict(), "seq2seq", extra)


def load_seq2seq(path_or_doc) -> Seq2Seq:
    doc = path_or_doc if isinstance(path_or_doc, dict) else nx.load_checkpoint(path_or_doc)
    if doc["kind"] != "seq2seq":
        raise FormatError(f"checkpoint kind {doc['kind']!r} is not a seq2seq model")
    model = Seq2Seq(Seq2SeqConfig.from_dict(doc["config"]))
    model.load_params(doc["params"])
    model.eval()
    return model

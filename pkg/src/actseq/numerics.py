"""Differentiable primitives, recurrent/attention blocks, Adam, checkpoints.

Tensors are float64 ``torch.Tensor`` objects; torch's autograd graph plays
the role of the computation tape and ``backward`` walks it in reverse. Every
primitive checks its output for NaN/Inf and raises :class:`NumericError`.

Random streams come from :class:`Rng`, which wraps torch's CPU generator
(MT19937) so that dropout masks and scheduled-sampling draws are reproducible.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FormatError, NumericError, ShapeError

DTYPE = torch.float64
CHECKPOINT_VERSION = "1.0"


class Rng:
    """Seeded random stream; identical seeds give identical draws."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = torch.Generator().manual_seed(self.seed)

    def uniform(self, shape, low=0.0, high=1.0) -> torch.Tensor:
        u = torch.rand(tuple(shape), generator=self.generator, dtype=DTYPE)
        return low + (high - low) * u

    def bernoulli(self, p: float, shape) -> torch.Tensor:
        return self.uniform(shape) < p

    def permutation(self, n: int) -> list[int]:
        return torch.randperm(n, generator=self.generator).tolist()

    def child(self, *keys: int) -> "Rng":
        return Rng(derive_seed(self.seed, *keys))


def derive_seed(seed: int, *keys: int) -> int:
    """Mix a base seed with integer keys (numpy SeedSequence entropy mixing)."""
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def as_tensor(values, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(values, dtype=np.float64)).clone()
    return t.requires_grad_(requires_grad)


def _checked(out: torch.Tensor, op: str) -> torch.Tensor:
    # any NaN/Inf element makes the sum non-finite
    if not math.isfinite(out.detach().sum().item()):
        raise NumericError(f"non-finite output from {op}")
    return out


def _require(cond: bool, msg: str):
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------- primitives

def matmul(a, b):
    _require(a.shape[-1] == b.shape[0] if b.dim() <= 2 else a.shape[-1] == b.shape[-2],
             f"matmul shapes {tuple(a.shape)} @ {tuple(b.shape)}")
    return _checked(a @ b, "matmul")


def add(a, b):
    try:
        return _checked(a + b, "add")
    except RuntimeError as e:
        raise ShapeError(str(e)) from None


def mul(a, b):
    try:
        return _checked(a * b, "mul")
    except RuntimeError as e:
        raise ShapeError(str(e)) from None


def relu(x):
    return _checked(torch.relu(x), "relu")


def sigmoid(x):
    return _checked(torch.sigmoid(x), "sigmoid")


def tanh(x):
    return _checked(torch.tanh(x), "tanh")


def concat(tensors: Sequence[torch.Tensor], axis: int = -1):
    try:
        return torch.cat(list(tensors), dim=axis)
    except RuntimeError as e:
        raise ShapeError(str(e)) from None


def slice_(x, axis: int, start: int, stop: int):
    return x.narrow(axis, start, stop - start)


def mean(x, axis=None):
    return _checked(x.mean() if axis is None else x.mean(dim=axis), "mean")


def log(x):
    return _checked(torch.log(x), "log")


def softmax(x, axis: int = -1):
    return _checked(torch.softmax(x, dim=axis), "softmax")


def log_softmax(x, axis: int = -1):
    return _checked(torch.log_softmax(x, dim=axis), "log_softmax")


def conv1d_dilated(x, weight, bias=None, dilation: int = 1):
    """Same-length dilated convolution over ``(batch, channels, time)`` input.

    ``weight`` is ``(out, in, k)`` with odd ``k``; the input is zero padded by
    ``dilation * (k - 1) / 2`` frames on each side.
    """
    _require(x.dim() == 3, f"conv1d expects (batch, channels, time), got {tuple(x.shape)}")
    _require(weight.dim() == 3 and weight.shape[1] == x.shape[1],
             f"conv weight {tuple(weight.shape)} does not match input channels {x.shape[1]}")
    k = weight.shape[2]
    _require(k % 2 == 1, "conv kernel size must be odd for same-length padding")
    out = F.conv1d(x, weight, bias, padding=dilation * (k - 1) // 2, dilation=dilation)
    return _checked(out, "conv1d_dilated")


def cross_entropy(logits, target, weight=None, ignore_index: int = -100):
    """Mean negative log-likelihood of integer targets under softmax(logits).

    ``logits`` is ``(N, C)``. With class ``weight`` the mean is weighted by the
    target's class weight. Targets equal to ``ignore_index`` are skipped.
    """
    _require(logits.dim() == 2 and target.dim() == 1 and logits.shape[0] == target.shape[0],
             f"cross_entropy shapes {tuple(logits.shape)} vs {tuple(target.shape)}")
    if weight is not None:
        _require(weight.shape == (logits.shape[1],), "class weight length must equal class count")
    out = F.cross_entropy(logits, target, weight=weight, ignore_index=ignore_index)
    return _checked(out, "cross_entropy")


def binary_cross_entropy(logits, target, pos_weight=None, mask=None):
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    _require(logits.shape == target.shape, "binary_cross_entropy shape mismatch")
    per = F.binary_cross_entropy_with_logits(logits, target, pos_weight=pos_weight,
                                             reduction="none")
    if mask is not None:
        out = (per * mask).sum() / mask.sum().clamp_min(1)
    else:
        out = per.mean()
    return _checked(out, "binary_cross_entropy")


def dropout(x, p: float, rng: Rng | None, training: bool = True):
    if not training or p == 0.0:
        return x
    _require(rng is not None, "dropout in training mode needs an Rng")
    keep = ~rng.bernoulli(p, x.shape)
    return _checked(x * keep / (1.0 - p), "dropout")


# ------------------------------------------------------- composite blocks

def gru_cell(x, h, w_ih, w_hh, b_ih=None, b_hh=None):
    """Gated recurrent update; gate rows are stacked as (reset, update, candidate).

    ``x`` is ``(..., input)`` and ``h`` is ``(..., hidden)``; ``w_ih`` is
    ``(3 * hidden, input)`` and ``w_hh`` is ``(3 * hidden, hidden)``.
    """
    hidden = h.shape[-1]
    _require(w_ih.shape == (3 * hidden, x.shape[-1]),
             f"w_ih {tuple(w_ih.shape)} incompatible with input {x.shape[-1]} / hidden {hidden}")
    _require(w_hh.shape == (3 * hidden, hidden), f"w_hh {tuple(w_hh.shape)} incompatible")
    gi = x @ w_ih.T
    gh = h @ w_hh.T
    if b_ih is not None:
        gi = gi + b_ih
    if b_hh is not None:
        gh = gh + b_hh
    i_r, i_z, i_n = gi.chunk(3, dim=-1)
    h_r, h_z, h_n = gh.chunk(3, dim=-1)
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return _checked((1.0 - z) * n + z * h, "gru_cell")


def attention(query, keys, values, mask=None):
    """Scaled dot-product attention of one query over ``T`` keys.

    Unbatched: ``query (d,)``, ``keys (T, d)``, ``values (T, dv)``. Batched
    inputs add a leading batch axis. ``mask`` marks valid key positions.
    Returns ``(context, weights)`` with weights summing to one.
    """
    _require(keys.shape[:-1] == values.shape[:-1], "keys and values differ in length")
    _require(query.shape[-1] == keys.shape[-1], "query and key dimensions differ")
    scores = (keys @ query.unsqueeze(-1)).squeeze(-1) / math.sqrt(keys.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    context = (weights.unsqueeze(-2) @ values).squeeze(-2)
    return _checked(context, "attention"), weights


def backward(loss: torch.Tensor, params: Iterable[torch.Tensor] = ()) -> None:
    """Zero ``params`` grads, then accumulate d(loss)/d(param) into ``.grad``.

    Parameters that the loss does not depend on end up with zero gradients.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    _checked(loss.detach(), "loss")
    params = list(params)
    for p in params:
        p.grad = None
    if loss.requires_grad:
        loss.backward()
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)


# ------------------------------------------------------------------- Adam

def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: dict,
              lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """In-place Adam update with decoupled weight decay.

    ``state`` holds the step counter and first/second moment buffers; pass the
    same dict on every call.
    """
    b1, b2 = betas
    if "m" not in state:
        state["step"] = 0
        state["m"] = [torch.zeros_like(p) for p in params]
        state["v"] = [torch.zeros_like(p) for p in params]
    state["step"] += 1
    t = state["step"]
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            _require(p.shape == g.shape == m.shape, "adam parameter/gradient shape mismatch")
            if weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))


class Adam:
    def __init__(self, params: Sequence[torch.Tensor], lr=5e-4, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state: dict = {}

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.betas, self.eps, self.weight_decay)


# ----------------------------------------------------------------- init

def init_uniform(shape, fan_in: int, rng: Rng) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(shape, -bound, bound)


# --------------------------------------------------------- finite differences

def numeric_grad(fn: Callable[[], torch.Tensor], x: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    """Central-difference gradient of scalar ``fn()`` with respect to ``x``."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
    return grad


def gradient_check(fn: Callable[[], torch.Tensor], inputs: Sequence[torch.Tensor],
                   step: float = 1e-4, rtol: float = 1e-4, atol: float = 1e-7) -> float:
    """Compare analytic gradients of ``fn`` with central differences.

    Returns the largest relative error among entries whose absolute error
    exceeds ``atol`` (0.0 if none); callers compare it with ``rtol``.
    """
    inputs = list(inputs)
    for x in inputs:
        x.requires_grad_(True)
    backward(fn(), inputs)
    analytic = [x.grad.detach().clone() for x in inputs]
    worst = 0.0
    for x, a in zip(inputs, analytic):
        n = numeric_grad(fn, x, step)
        err = (a - n).abs()
        scale = torch.maximum(a.abs(), n.abs())
        rel = torch.where(err > atol, err / scale.clamp_min(atol), torch.zeros_like(err))
        worst = max(worst, float(rel.max()) if rel.numel() else 0.0)
    return worst


# ------------------------------------------------------------- checkpoints

def params_to_json(params: Mapping[str, torch.Tensor]) -> dict:
    return {name: {"shape": list(t.shape), "values": t.detach().reshape(-1).tolist()}
            for name, t in params.items()}


def params_from_json(entries: Mapping[str, dict]) -> dict[str, torch.Tensor]:
    out = {}
    for name, entry in entries.items():
        shape = tuple(entry["shape"])
        values = torch.tensor(entry["values"], dtype=DTYPE)
        if values.numel() != math.prod(shape):
            raise FormatError(f"parameter {name}: {values.numel()} values for shape {shape}")
        out[name] = values.reshape(shape)
    return out


def check_version(version, expected: str = CHECKPOINT_VERSION, what: str = "file") -> None:
    try:
        major = str(version).split(".")[0]
    except Exception:
        major = None
    if major != expected.split(".")[0]:
        raise FormatError(f"{what}: unsupported format_version {version!r}")


def save_checkpoint(path, params: Mapping[str, torch.Tensor], config: dict, kind: str,
                    extra: dict | None = None) -> None:
    doc = {"format_version": CHECKPOINT_VERSION, "kind": kind, "config": config,
           "params": params_to_json(params)}
    if extra:
        doc.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from None
    check_version(doc.get("format_version"), what=str(path))
    for key in ("kind", "config", "params"):
        if key not in doc:
            raise FormatError(f"checkpoint {path} missing {key!r}")
    doc["params"] = params_from_json(doc["params"])
    return doc

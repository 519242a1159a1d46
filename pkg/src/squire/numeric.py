"""Tensor ops, Adam, the warmup/decay schedule and the binary checkpoint format.

Reverse-mode gradients come from torch autograd; everything the model relies on
for masking, normalisation and optimisation is defined here so that it can be
checked in isolation against finite differences.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

NEG_INF = -1e9  # additive surrogate for a hidden position
CHECKPOINT_MAGIC = b"SQRC"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    """A NaN or Inf showed up where finite values were required."""


def _check(cond: bool, op: str, *shapes) -> None:
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check(a.shape[-1] == b.shape[-2 if b.dim() > 1 else 0], "matmul", a.shape, b.shape)
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        _check(False, "add", a.shape, b.shape)
    return a + b


def scale(a: torch.Tensor, c: float) -> torch.Tensor:
    return a * c


def embedding_lookup(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    _check(table.dim() == 2, "embedding_lookup", table.shape, ids.shape)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"embedding_lookup: ids outside 0..{table.shape[0] - 1}")
    return table[ids]


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis with an additive mask (0 visible, <= NEG_INF hidden).

    Rows whose every position is hidden come out as all zeros.
    """
    _check(scores.shape[-1] == mask.shape[-1], "masked_softmax", scores.shape, mask.shape)
    hidden = mask <= NEG_INF
    p = torch.softmax(scores + mask.clamp(min=NEG_INF), dim=-1)
    # exp(NEG_INF) underflows to 0 already; only fully hidden rows need fixing
    all_hidden = hidden.all(dim=-1, keepdim=True)
    if bool(all_hidden.any()):
        p = p.masked_fill(hidden | all_hidden, 0.0)
    return p


def layer_norm(x: torch.Tensor, weight=None, bias=None, eps: float = 1e-5) -> torch.Tensor:
    """Normalise the last axis to zero mean, unit variance, then apply the affine map."""
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def layer_norm_reference(x: torch.Tensor, weight=None, bias=None, eps: float = 1e-5) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def dropout(x: torch.Tensor, rate: float, train: bool, generator: torch.Generator | None = None) -> torch.Tensor:
    if not train or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` on every leaf parameter the loss depends on (summing into it)."""
    if loss.dim() != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None:
        if loss.requires_grad:
            raise RuntimeError("backward: loss is a leaf, nothing recorded")
        raise RuntimeError("backward called before any forward pass was recorded")
    loss.backward()


def check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")


def numerical_gradient(f: Callable[[], torch.Tensor], param: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Central finite differences of the scalar ``f()`` with respect to every entry of ``param``."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            g[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor) over the whole block."""
    num = (a - b).abs().max().item() if a.numel() else 0.0
    den = max(a.abs().max().item() if a.numel() else 0.0, b.abs().max().item() if b.numel() else 0.0, floor)
    return num / den


class Adam:
    """Bias-corrected Adam. Gradients are cleared after every step."""

    def __init__(self, params: Iterable[torch.Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.t = 0

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(opt: Adam, lr: float) -> None:
    opt.step(lr)


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return math.ceil(warmup_ratio * total_steps)


def lr_at(step: int, total_steps: int, warmup_ratio: float, peak: float) -> float:
    """Linear ramp 0 -> peak over ceil(ratio * total) steps, then linear decay to 0 at total."""
    if not 0.0 < warmup_ratio < 1.0:
        raise ValueError("warmup_ratio must lie in (0, 1)")
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside 0..{total_steps}")
    w = warmup_steps(total_steps, warmup_ratio)
    if step <= w:
        return peak * step / w if w else peak
    return peak * (total_steps - step) / (total_steps - w)


def save_checkpoint(
    path: str | Path, params: Mapping[str, torch.Tensor], vocab_size: int, d: int, layers: int
) -> None:
    """Flat little-endian binary: header, then (name, shape, float32 data) blocks."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIIII", CHECKPOINT_VERSION, vocab_size, d, layers, len(params)))
        for name, value in params.items():
            raw = name.encode("utf-8")
            arr = value.detach().cpu().to(torch.float32).numpy()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, V, d, layers, n = struct.unpack_from("<IIIII", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + 20
    params = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + ln].decode("utf-8")
        off += ln
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        params[name] = torch.from_numpy(arr.copy())
    return {"version": version, "vocab_size": V, "d": d, "layers": layers}, params

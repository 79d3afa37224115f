"""Differentiable NN primitives and verification helpers.

Thin, contract-enforcing wrappers around torch ops (reverse-mode autodiff
comes from torch's tape), plus the pieces shared by every model in the
package: masked scaled-dot-product attention, sinusoidal embeddings,
zero-initialization, parameter naming/checksum utilities, and a
finite-difference gradient checker.

Conventions: conv padding is "same" spatially; 3D kernels are given as
[time, height, width] and time is zero-padded.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn


# ---------------------------------------------------------------------------
# Functional primitives
# ---------------------------------------------------------------------------

def _same_pad(kernel: Sequence[int]) -> tuple[int, ...]:
    for k in kernel:
        if k % 2 == 0:
            raise ValueError(f"same padding needs odd kernel sizes, got {tuple(kernel)}")
    return tuple(k // 2 for k in kernel)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """2D convolution with same padding (odd kernels)."""
    return F.conv2d(x, weight, bias, stride=stride, padding=_same_pad(weight.shape[-2:]))


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3D convolution over (t, h, w) with same padding; time is zero-filled."""
    return F.conv3d(x, weight, bias, padding=_same_pad(weight.shape[-3:]))


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    return F.linear(x, weight, bias)


def group_norm(
    x: Tensor, groups: int, weight: Tensor | None = None, bias: Tensor | None = None,
    eps: float = 1e-5,
) -> Tensor:
    if x.shape[1] % groups != 0:
        raise ValueError(f"{x.shape[1]} channels not divisible into {groups} groups")
    return F.group_norm(x, groups, weight, bias, eps)


def silu(x: Tensor) -> Tensor:
    return F.silu(x)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return F.softmax(x, dim=dim)


def layer_norm(
    x: Tensor, normalized_shape: Sequence[int], weight: Tensor | None = None,
    bias: Tensor | None = None, eps: float = 1e-5,
) -> Tensor:
    return F.layer_norm(x, tuple(normalized_shape), weight, bias, eps)


def nearest_upsample(x: Tensor, factor: int = 2) -> Tensor:
    return F.interpolate(x, scale_factor=factor, mode="nearest")


def strided_downsample(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Strided conv downsampling with same-style padding."""
    return F.conv2d(x, weight, bias, stride=stride, padding=_same_pad(weight.shape[-2:]))


_PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "conv2d": conv2d,
    "conv3d": conv3d,
    "dense": dense,
    "group_norm": group_norm,
    "silu": silu,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "nearest_upsample": nearest_upsample,
    "strided_downsample": strided_downsample,
}


def primitive_forward(kind: str, x: Tensor, params: Mapping | None = None) -> Tensor:
    """Dispatch a primitive by name with keyword params."""
    if kind not in _PRIMITIVES:
        raise ValueError(f"unknown primitive {kind!r}; expected one of {sorted(_PRIMITIVES)}")
    return _PRIMITIVES[kind](x, **(params or {}))


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def attention(
    q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None,
    bias: Tensor | None = None,
) -> Tensor:
    """softmax(q k^T / sqrt(d) [+ bias] [+ mask]) v.

    q: (..., Lq, d), k/v: (..., Lk, d); `mask` is boolean (Lq, Lk) with
    False = blocked (-inf logit); `bias` is an additive logit term
    broadcastable to (..., Lq, Lk). Rows with at least one allowed key
    sum to 1 after softmax.
    """
    d = q.shape[-1]
    if d == 0:
        raise ValueError("zero head dimension")
    logits = q @ k.transpose(-2, -1) / math.sqrt(d)
    if bias is not None:
        logits = logits + bias
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    return softmax(logits, dim=-1) @ v


def banded_mask(length_q: int, length_k: int, window: int | None) -> Tensor | None:
    """Boolean mask allowing |i - j| <= window; None means unbounded."""
    if window is None:
        return None
    i = torch.arange(length_q).unsqueeze(1)
    j = torch.arange(length_k).unsqueeze(0)
    return (i - j).abs() <= window


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

def sinusoidal_embedding(position, dim: int, base: float = 10000.0) -> Tensor:
    """Blocked sin/cos embedding at geometric frequencies.

    Layout is [sin(p f_0) .. sin(p f_{d/2-1}), cos(p f_0) .. cos(p f_{d/2-1})],
    so position 0 maps to zeros followed by ones. Accepts scalars or tensors
    of positions (integer or real, negatives allowed) and appends the dim
    axis last.
    """
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    pos = torch.as_tensor(position)
    dtype = pos.dtype if pos.is_floating_point() else torch.float32
    pos = pos.to(dtype)
    half = dim // 2
    freqs = torch.exp(-math.log(base) * torch.arange(half, dtype=dtype) / half)
    args = pos.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def zero_module(module: nn.Module) -> nn.Module:
    """Zero all parameters of a module in place (identity-at-init blocks)."""
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


# ---------------------------------------------------------------------------
# Parameter namespace helpers (the checkpoint contract)
# ---------------------------------------------------------------------------

def named_param_tensors(module: nn.Module, prefix: str = "") -> dict[str, Tensor]:
    """Stable '<module-path>.<layer>.<param>' name -> tensor mapping."""
    out: dict[str, Tensor] = {}
    for name, p in module.named_parameters():
        out[prefix + name] = p
    for name, b in module.named_buffers():
        out[prefix + name] = b
    return out


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over all parameter/buffer bytes in name order (freeze contract)."""
    h = hashlib.sha256()
    for name, t in sorted(named_param_tensors(module).items()):
        h.update(name.encode())
        h.update(t.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def unfreeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(True)
    return module


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[..., Tensor],
    inputs: Iterable[Tensor],
    h: float = 1e-4,
    max_coords: int | None = None,
    rng: torch.Generator | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    `f` must return a scalar; run it in float64. When `max_coords` is set,
    a random coordinate subset per input is probed (keeps large layers cheap).
    Relative error uses max(|a|, |b|, 1) as denominator so near-zero
    gradients are compared absolutely.
    """
    inputs = [t.detach().clone().double().requires_grad_(True) for t in inputs]
    out = f(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    worst = 0.0
    for x, g in zip(inputs, grads):
        flat = x.detach().reshape(-1)
        n = flat.numel()
        if max_coords is not None and n > max_coords:
            idx = torch.randperm(n, generator=rng)[:max_coords]
        else:
            idx = torch.arange(n)
        g_flat = torch.zeros(n, dtype=torch.float64) if g is None else g.reshape(-1)
        for i in idx.tolist():
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                hi = f(*inputs).item()
                flat[i] = orig - h
                lo = f(*inputs).item()
                flat[i] = orig
            fd = (hi - lo) / (2.0 * h)
            ad = g_flat[i].item()
            err = abs(ad - fd) / max(abs(ad), abs(fd), 1.0)
            worst = max(worst, err)
    return worst

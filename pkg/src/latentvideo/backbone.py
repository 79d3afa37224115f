"""Spatial image denoiser: a small U-Net over frames or latents.

The network predicts epsilon or v for a batch of independent frames given
per-sample diffusion steps and optional conditioning (class embedding or a
cross-attention token sequence). Residual-block output convs are
zero-initialized so the freshly built model outputs ~0 and the initial
denoising loss sits at E||target||^2.

Temporal layers are not defined here; the U-Net only exposes *insertion
points* (one after every residual block and every spatial attention) that
a video wrapper can hook into. With no hook installed this is exactly the
image model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch import Tensor, nn

from . import nncore
from .nncore import sinusoidal_embedding, zero_module
from .schedule import ConfigurationError, Parameterization, Schedule, diffuse, target

# Paper-scale reference (driving model): channels 224, multipliers
# [1,2,2,3,4], attention at 16/8/4, head channels 32. Toy defaults below
# keep tests in CPU minutes.


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 4
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    blocks_per_level: int = 1
    attention_levels: tuple[int, ...] = (2,)
    head_channels: int = 16
    conditioning: str = "none"  # none | class_embedding | cross_attention
    cond_dim: int = 0  # number of classes, or token embedding width
    cond_tokens: int = 1  # cross-attention sequence length

    def __post_init__(self):
        if not self.channel_multipliers:
            raise ConfigurationError("channel_multipliers must be nonempty")
        levels = range(len(self.channel_multipliers))
        if any(l not in levels for l in self.attention_levels):
            raise ConfigurationError(
                f"attention_levels {self.attention_levels} outside levels {list(levels)}"
            )
        if self.conditioning not in ("none", "class_embedding", "cross_attention"):
            raise ConfigurationError(f"unknown conditioning {self.conditioning!r}")
        if self.conditioning != "none" and self.cond_dim <= 0:
            raise ConfigurationError("conditioning enabled but cond_dim not positive")

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def temb_dim(self) -> int:
        return 4 * self.base_channels


@dataclass
class Conditioning:
    """Optional conditioning payload: a class-id vector or token embeddings.

    null_flag replaces the payload with the learned null embedding, the same
    code path classifier-free guidance uses for its unconditional branch.
    """

    class_ids: Tensor | None = None  # (B,) long
    tokens: Tensor | None = None  # (B, L, cond_dim)
    null_flag: bool = False

    @staticmethod
    def null() -> "Conditioning":
        return Conditioning(null_flag=True)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def build(self, params) -> torch.optim.Optimizer:
        return torch.optim.Adam(
            params, lr=self.lr, betas=(self.beta1, self.beta2), eps=self.eps
        )


@dataclass(frozen=True)
class InsertionPoint:
    """Where a temporal layer may hook in: index, tag, width, resolution level."""

    index: int
    tag: str
    channels: int
    level: int


class ResBlock(nn.Module):
    """GroupNorm/SiLU/conv residual block with timestep-embedding injection."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = zero_module(nn.Conv2d(out_ch, out_ch, 3, padding=1))
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(nncore.silu(self.norm1(x)))
        h = h + self.temb_proj(nncore.silu(temb))[:, :, None, None]
        h = self.conv2(nncore.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialAttention(nn.Module):
    """Self-attention over spatial positions, plus optional cross-attention
    to conditioning tokens. Output projection is zero-initialized."""

    def __init__(self, channels: int, head_channels: int, cond_dim: int = 0):
        super().__init__()
        if channels % head_channels != 0:
            raise ConfigurationError(
                f"{channels} channels not divisible by head_channels {head_channels}"
            )
        self.heads = channels // head_channels
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = zero_module(nn.Linear(channels, channels))
        self.cross = cond_dim > 0
        if self.cross:
            self.cross_norm = nn.LayerNorm(channels)
            self.cross_q = nn.Linear(channels, channels)
            self.cross_kv = nn.Linear(cond_dim, 2 * channels)
            self.cross_proj = zero_module(nn.Linear(channels, channels))

    def _heads(self, t: Tensor) -> Tensor:
        b, l, c = t.shape
        return t.reshape(b, l, self.heads, c // self.heads).transpose(1, 2)

    def _merge(self, t: Tensor) -> Tensor:
        b, h, l, d = t.shape
        return t.transpose(1, 2).reshape(b, l, h * d)

    def forward(self, x: Tensor, tokens: Tensor | None = None) -> Tensor:
        b, c, hh, ww = x.shape
        seq = self.norm(x).reshape(b, c, hh * ww).transpose(1, 2)
        q, k, v = self.qkv(seq).chunk(3, dim=-1)
        out = nncore.attention(self._heads(q), self._heads(k), self._heads(v))
        seq = x.reshape(b, c, hh * ww).transpose(1, 2) + self.proj(self._merge(out))
        if self.cross and tokens is not None:
            q = self.cross_q(self.cross_norm(seq))
            k, v = self.cross_kv(tokens).chunk(2, dim=-1)
            out = nncore.attention(self._heads(q), self._heads(k), self._heads(v))
            seq = seq + self.cross_proj(self._merge(out))
        return seq.transpose(1, 2).reshape(b, c, hh, ww)


def _groups(channels: int, cap: int = 8) -> int:
    for g in range(min(cap, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class SpatialUNet(nn.Module):
    """Image denoiser f(x_tau, tau, c) with enumerated temporal insertion points."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.base_channels
        temb_dim = cfg.temb_dim

        self.temb_mlp = nn.Sequential(
            nn.Linear(ch, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        if cfg.conditioning == "class_embedding":
            # last row is the learned null embedding
            self.class_emb = nn.Embedding(cfg.cond_dim + 1, temb_dim)
        elif cfg.conditioning == "cross_attention":
            self.null_tokens = nn.Parameter(
                torch.zeros(1, cfg.cond_tokens, cfg.cond_dim)
            )

        self.conv_in = nn.Conv2d(cfg.in_channels, ch, 3, padding=1)

        points: list[InsertionPoint] = []

        def point(tag: str, channels: int, level: int) -> None:
            points.append(InsertionPoint(len(points), tag, channels, level))

        cross_dim = cfg.cond_dim if cfg.conditioning == "cross_attention" else 0
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        widths = [ch]
        cur = ch
        for level, mult in enumerate(cfg.channel_multipliers):
            out_ch = ch * mult
            blocks = nn.ModuleList()
            for b in range(cfg.blocks_per_level):
                entry = nn.ModuleDict({"res": ResBlock(cur, out_ch, temb_dim)})
                cur = out_ch
                point(f"down{level}.res{b}", cur, level)
                if level in cfg.attention_levels:
                    entry["attn"] = SpatialAttention(cur, cfg.head_channels, cross_dim)
                    point(f"down{level}.attn{b}", cur, level)
                blocks.append(entry)
                widths.append(cur)
            self.down_blocks.append(blocks)
            if level < cfg.levels - 1:
                self.downsamples.append(nn.Conv2d(cur, cur, 3, stride=2, padding=1))
                widths.append(cur)
            else:
                self.downsamples.append(nn.Identity())

        mid_level = cfg.levels - 1
        self.mid_res1 = ResBlock(cur, cur, temb_dim)
        point("mid.res0", cur, mid_level)
        self.mid_attn = SpatialAttention(cur, cfg.head_channels, cross_dim)
        point("mid.attn", cur, mid_level)
        self.mid_res2 = ResBlock(cur, cur, temb_dim)
        point("mid.res1", cur, mid_level)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level in reversed(range(cfg.levels)):
            out_ch = ch * cfg.channel_multipliers[level]
            blocks = nn.ModuleList()
            for b in range(cfg.blocks_per_level + 1):
                entry = nn.ModuleDict(
                    {"res": ResBlock(cur + widths.pop(), out_ch, temb_dim)}
                )
                cur = out_ch
                point(f"up{level}.res{b}", cur, level)
                if level in cfg.attention_levels:
                    entry["attn"] = SpatialAttention(cur, cfg.head_channels, cross_dim)
                    point(f"up{level}.attn{b}", cur, level)
                blocks.append(entry)
            self.up_blocks.append(blocks)
            if level > 0:
                self.upsamples.append(nn.Conv2d(cur, cur, 3, padding=1))
            else:
                self.upsamples.append(nn.Identity())

        self.norm_out = nn.GroupNorm(_groups(cur), cur)
        self.conv_out = zero_module(nn.Conv2d(cur, cfg.in_channels, 3, padding=1))
        self._points = tuple(points)

    # -- structure ---------------------------------------------------------

    def insertion_points(self) -> tuple[InsertionPoint, ...]:
        return self._points

    def spatial_divisor(self) -> int:
        return 2 ** (self.cfg.levels - 1)

    # -- conditioning ------------------------------------------------------

    def _cond_inputs(
        self, batch: int, cond: Conditioning | None
    ) -> tuple[Tensor | None, Tensor | None]:
        """Resolve conditioning to (class embedding addend, cross tokens)."""
        cfg = self.cfg
        if cfg.conditioning == "none":
            return None, None
        if cfg.conditioning == "class_embedding":
            if cond is None or cond.null_flag or cond.class_ids is None:
                ids = torch.full((batch,), cfg.cond_dim, dtype=torch.long)
            else:
                ids = cond.class_ids.long()
            return self.class_emb(ids), None
        if cond is None or cond.null_flag or cond.tokens is None:
            return None, self.null_tokens.expand(batch, -1, -1)
        return None, cond.tokens

    # -- forward -----------------------------------------------------------

    def time_embedding(self, tau: Tensor) -> Tensor:
        emb = sinusoidal_embedding(tau, self.cfg.base_channels)
        return self.temb_mlp(emb.to(self.temb_mlp[0].weight.dtype))

    def forward(
        self,
        x: Tensor,
        tau: Tensor,
        cond: Conditioning | None = None,
        hook: Callable[[int, Tensor], Tensor] | None = None,
        temb_add: Tensor | None = None,
    ) -> Tensor:
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected (B, {self.cfg.in_channels}, H, W), got {tuple(x.shape)}"
            )
        div = self.spatial_divisor()
        if x.shape[-2] % div or x.shape[-1] % div:
            raise ValueError(f"spatial dims must divide {div}, got {tuple(x.shape[-2:])}")
        tau = torch.as_tensor(tau)
        if not tau.is_floating_point():
            tau = tau.float()
        if tau.dim() == 0:
            tau = tau.expand(x.shape[0])

        temb = self.time_embedding(tau)
        if temb_add is not None:
            temb = temb + temb_add
        class_add, tokens = self._cond_inputs(x.shape[0], cond)
        if class_add is not None:
            temb = temb + class_add

        idx = 0

        def run(h: Tensor) -> Tensor:
            nonlocal idx
            if hook is not None:
                h = hook(idx, h)
            idx += 1
            return h

        h = self.conv_in(x)
        skips = [h]
        for level, blocks in enumerate(self.down_blocks):
            for entry in blocks:
                h = run(entry["res"](h, temb))
                if "attn" in entry:
                    h = run(entry["attn"](h, tokens))
                skips.append(h)
            if not isinstance(self.downsamples[level], nn.Identity):
                h = self.downsamples[level](h)
                skips.append(h)

        h = run(self.mid_res1(h, temb))
        h = run(self.mid_attn(h, tokens))
        h = run(self.mid_res2(h, temb))

        for i, blocks in enumerate(self.up_blocks):
            for entry in blocks:
                h = run(entry["res"](torch.cat([h, skips.pop()], dim=1), temb))
                if "attn" in entry:
                    h = run(entry["attn"](h, tokens))
            level = self.cfg.levels - 1 - i
            if level > 0:
                h = self.upsamples[i](nncore.nearest_upsample(h))

        return self.conv_out(nncore.silu(self.norm_out(h)))


def build_unet(cfg: UNetConfig, seed: int = 0) -> SpatialUNet:
    """Deterministically initialized U-Net: same cfg+seed, same bytes."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return SpatialUNet(cfg)


def denoise_image(
    model: SpatialUNet, x_tau: Tensor, tau, cond: Conditioning | None = None
) -> Tensor:
    """Prediction (epsilon-hat or v-hat) for a batch of diffused frames."""
    return model(x_tau, tau, cond)


def train_image_dm(
    model: SpatialUNet,
    frames: Tensor,
    labels: Tensor | None,
    sched: Schedule,
    param: Parameterization,
    steps: int,
    batch_size: int = 16,
    p_drop: float = 0.1,
    opt_cfg: OptimizerConfig = OptimizerConfig(),
    rng: torch.Generator | None = None,
    log_every: int = 0,
) -> list[float]:
    """Denoising score-matching training over independent frames.

    Per step: sample a frame batch and per-sample step indices, diffuse,
    regress the epsilon/v target under MSE. Conditioning is replaced by the
    null embedding with probability p_drop per sample so the model supports
    classifier-free guidance. Returns the per-step loss trace.
    """
    if frames.numel() == 0:
        raise ValueError("empty dataset")
    rng = rng or torch.Generator().manual_seed(0)
    opt = opt_cfg.build([p for p in model.parameters() if p.requires_grad])
    losses: list[float] = []
    model.train()
    for step in range(steps):
        idx = torch.randint(0, frames.shape[0], (batch_size,), generator=rng)
        x = frames[idx]
        tau = torch.randint(0, sched.n_steps, (batch_size,), generator=rng)
        eps = torch.randn(x.shape, generator=rng)
        x_tau = diffuse(x, tau, eps, sched)
        y = target(x, eps, tau, param, sched)

        cond = None
        if labels is not None and model.cfg.conditioning != "none":
            ids = labels[idx].clone()
            dropped = torch.rand(batch_size, generator=rng) < p_drop
            ids[dropped] = model.cfg.cond_dim  # null row
            cond = Conditioning(class_ids=ids)

        pred = model(x_tau, tau, cond)
        loss = torch.mean((pred - y) ** 2)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"NaN/inf loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            print(f"  image-dm step {step}: loss {loss.item():.4f}")
    model.eval()
    return losses

"""Temporal alignment layers over a frozen spatial denoiser.

The spatial U-Net treats the T frames of each video as independent batch
entries; after every spatial residual/attention block a temporal mixing
layer (attention over frames and/or a 3D-conv residual block) sees the
activations in video layout and its output is merged back through a
learned convex weight alpha (alpha=1 recovers the image model exactly).

Also here: masked context conditioning for prediction/interpolation
models (mask + masked latents, run through a learned strided-conv
downsampler and concatenated into the temporal conv blocks), the
frame-rate-regime embedding for two-regime interpolation training, and
the temporal-only training loop that leaves spatial parameters bit-frozen.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from einops import rearrange
from torch import Tensor, nn

from . import nncore
from .backbone import Conditioning, OptimizerConfig, SpatialUNet, _groups
from .nncore import banded_mask, sinusoidal_embedding, zero_module
from .schedule import ConfigurationError, Parameterization, Schedule, diffuse, target

RAW_ALPHA_INIT = 4.6  # sigmoid(4.6) ~ 0.99: start as (almost exactly) the image model


class IncompatibleBackboneError(RuntimeError):
    """Temporal layers structurally incompatible with a spatial backbone."""


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------

def to_video(z: Tensor, t: int) -> Tensor:
    """(b t) c h w -> b c t h w. Leading dim must divide by t."""
    if z.shape[0] % t != 0:
        raise ValueError(f"leading dim {z.shape[0]} not divisible by T={t}")
    return rearrange(z, "(b t) c h w -> b c t h w", t=t)


def to_batch(z: Tensor) -> Tensor:
    """b c t h w -> (b t) c h w; exact inverse of to_video."""
    return rearrange(z, "b c t h w -> (b t) c h w")


# ---------------------------------------------------------------------------
# Configuration and context
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TemporalConfig:
    mode: str = "full"  # full | attention_only | end_to_end
    layer_kinds: str = "both"  # attention | conv3d_residual | both
    alpha_param: str = "scalar"  # scalar | per_frame
    seq_len: int = 8  # training T (per-frame alpha dimension)
    attention_window: int | None = None  # None = unbounded during training
    head_channels: int = 16
    rel_dim: int = 16  # width of the relative-distance encoding
    context_channels: int = 128
    use_context: bool = False  # prediction/interpolation models set this
    regimes: int = 0  # >0 adds a learned regime embedding (interpolation: 2)

    def __post_init__(self):
        if self.mode not in ("full", "attention_only", "end_to_end"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.layer_kinds not in ("attention", "conv3d_residual", "both"):
            raise ConfigurationError(f"unknown layer_kinds {self.layer_kinds!r}")
        if self.alpha_param not in ("scalar", "per_frame"):
            raise ConfigurationError(f"unknown alpha_param {self.alpha_param!r}")
        if self.mode == "attention_only" and self.use_context:
            raise ConfigurationError("attention_only mode has no context pathway")

    def block_kinds(self) -> tuple[str, ...]:
        """Temporal block kinds instantiated at each insertion point.

        attention_only doubles the attention layers so the trainable
        parameter count matches the attention+conv configuration.
        """
        if self.mode == "attention_only":
            return ("attention", "attention")
        if self.layer_kinds == "both":
            return ("attention", "conv3d_residual")
        return (self.layer_kinds,)


@dataclass
class ContextSpec:
    """Temporal mask plus masked encoded frames conditioning a model.

    mask: (B, T) binary; latents: (B, T, C, H, W), exactly zero wherever the
    mask is zero. S = per-sample number of given context frames.
    """

    mask: Tensor
    latents: Tensor

    def __post_init__(self):
        if self.mask.dim() == 1:
            self.mask = self.mask.unsqueeze(0)
        if self.mask.shape[0] != self.latents.shape[0] or self.mask.shape[1] != self.latents.shape[1]:
            raise ValueError(
                f"mask {tuple(self.mask.shape)} does not match latents "
                f"{tuple(self.latents.shape[:2])}"
            )
        masked_out = self.latents * (1.0 - self.mask[:, :, None, None, None])
        if masked_out.abs().max() > 0:
            raise ValueError("latents must be exactly zero at masked-out frames")

    @property
    def s(self) -> Tensor:
        return self.mask.sum(dim=1).long()

    @staticmethod
    def from_frames(mask: Tensor, latents: Tensor) -> "ContextSpec":
        """Apply the mask to raw latents (zeroing predicted frames)."""
        if mask.dim() == 1:
            mask = mask.unsqueeze(0).expand(latents.shape[0], -1)
        mask = mask.to(latents.dtype)
        return ContextSpec(mask=mask, latents=latents * mask[:, :, None, None, None])

    @staticmethod
    def empty(batch: int, t: int, channels: int, h: int, w: int) -> "ContextSpec":
        """S=0 context: all-zero mask and latents (unconditional branch)."""
        return ContextSpec(
            mask=torch.zeros(batch, t), latents=torch.zeros(batch, t, channels, h, w)
        )


# ---------------------------------------------------------------------------
# Merge
# ---------------------------------------------------------------------------

class MergeAlpha(nn.Module):
    """Learned convex-combination weight, sigmoid of a raw parameter.

    Constant across batch, channel and spatial dimensions; either a scalar
    or one value per frame of the training sequence length.
    """

    def __init__(self, kind: str, seq_len: int):
        super().__init__()
        shape = () if kind == "scalar" else (seq_len,)
        self.raw = nn.Parameter(torch.full(shape, RAW_ALPHA_INIT))
        self.per_frame = kind == "per_frame"

    def value(self) -> Tensor:
        return torch.sigmoid(self.raw)


def merge(z: Tensor, z_prime: Tensor, alpha) -> Tensor:
    """alpha * z + (1 - alpha) * z_prime in video layout (b c t h w).

    A python-float alpha of exactly 1 (or 0) short-circuits to the
    corresponding input so the skip path is bit-exact.
    """
    if isinstance(alpha, (int, float)):
        if alpha == 1.0:
            return z
        if alpha == 0.0:
            return z_prime
        alpha = torch.tensor(float(alpha), dtype=z.dtype)
    if z.shape != z_prime.shape:
        raise ValueError(f"shape mismatch {tuple(z.shape)} vs {tuple(z_prime.shape)}")
    if alpha.dim() == 1:  # per-frame -> broadcast over (b, c, ., h, w)
        if alpha.shape[0] != z.shape[2]:
            raise ValueError(
                f"per-frame alpha has {alpha.shape[0]} entries but T={z.shape[2]}"
            )
        alpha = alpha.reshape(1, 1, -1, 1, 1)
    return alpha * z + (1.0 - alpha) * z_prime


# ---------------------------------------------------------------------------
# Temporal mixing blocks
# ---------------------------------------------------------------------------

class TemporalAttentionBlock(nn.Module):
    """Attention over the frame axis at each spatial position.

    Uses a relative sinusoidal distance encoding projected to a per-head
    logit bias, so the layer depends only on frame offsets and extends to
    longer sequences. Output projection is zero-initialized.
    """

    def __init__(self, channels: int, cfg: TemporalConfig):
        super().__init__()
        if channels % cfg.head_channels != 0:
            raise ConfigurationError(
                f"{channels} channels not divisible by head_channels {cfg.head_channels}"
            )
        self.heads = channels // cfg.head_channels
        self.rel_dim = cfg.rel_dim
        self.norm = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.rel_proj = zero_module(nn.Linear(cfg.rel_dim, self.heads, bias=False))
        self.proj = zero_module(nn.Linear(channels, channels))
        self.alpha = MergeAlpha(cfg.alpha_param, cfg.seq_len)

    def forward(
        self, zv: Tensor, temb: Tensor | None = None,
        ctx_feat: Tensor | None = None, window: int | None = None,
    ) -> Tensor:
        b, c, t, hh, ww = zv.shape
        seq = rearrange(zv, "b c t h w -> (b h w) t c")
        h = self.norm(seq)
        q, k, v = self.qkv(h).chunk(3, dim=-1)

        def heads(x: Tensor) -> Tensor:
            return rearrange(x, "n t (h d) -> n h t d", h=self.heads)

        offsets = torch.arange(t).unsqueeze(1) - torch.arange(t).unsqueeze(0)
        bias = self.rel_proj(sinusoidal_embedding(offsets.to(zv.dtype), self.rel_dim))
        bias = rearrange(bias, "i j h -> h i j")
        mask = banded_mask(t, t, window)
        out = nncore.attention(heads(q), heads(k), heads(v), mask=mask, bias=bias)
        seq = seq + self.proj(rearrange(out, "n h t d -> n t (h d)"))
        return rearrange(seq, "(b h w) t c -> b c t h w", b=b, h=hh, w=ww)


class TemporalConvBlock(nn.Module):
    """Residual block of 3D convolutions over (t, h, w).

    Normalization is applied per frame so no statistic crosses the time
    axis; temporal reach is exactly one frame per conv. Optional context
    features are concatenated to the input channels, and the timestep
    embedding is injected between the convs. Final conv zero-initialized.
    """

    temporal_reach = 2  # two convs with kernel time-size 3

    def __init__(
        self, channels: int, cfg: TemporalConfig, temb_dim: int,
        ctx_channels: int = 0, kernel: tuple[int, int, int] = (3, 1, 1),
    ):
        super().__init__()
        pad = tuple(k // 2 for k in kernel)
        in_ch = channels + ctx_channels
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv3d(in_ch, channels, kernel, padding=pad)
        self.temb_proj = nn.Linear(temb_dim, channels)
        self.norm2 = nn.GroupNorm(_groups(channels), channels)
        self.conv2 = zero_module(nn.Conv3d(channels, channels, kernel, padding=pad))
        self.alpha = MergeAlpha(cfg.alpha_param, cfg.seq_len)

    @staticmethod
    def _frame_norm(norm: nn.GroupNorm, x: Tensor) -> Tensor:
        t = x.shape[2]
        return to_video(norm(to_batch(x)), t)

    def forward(
        self, zv: Tensor, temb: Tensor | None = None,
        ctx_feat: Tensor | None = None, window: int | None = None,
    ) -> Tensor:
        h = zv if ctx_feat is None else torch.cat([zv, ctx_feat], dim=1)
        h = self.conv1(nncore.silu(self._frame_norm(self.norm1, h)))
        if temb is not None:
            h = h + self.temb_proj(nncore.silu(temb))[:, :, None, None, None]
        h = self.conv2(nncore.silu(self._frame_norm(self.norm2, h)))
        return zv + h


class ContextEncoder(nn.Module):
    """Learned downsampling of (mask, masked latents) to per-level features.

    The mask is concatenated as an extra channel, then strided convs halve
    the spatial dims once per U-Net level; every level yields
    context_channels channels, consumed by the temporal conv blocks.
    """

    def __init__(self, latent_channels: int, context_channels: int, levels: int):
        super().__init__()
        self.convs = nn.ModuleList()
        in_ch = latent_channels + 1
        for level in range(levels):
            stride = 1 if level == 0 else 2
            self.convs.append(
                nn.Conv2d(in_ch, context_channels, 3, stride=stride, padding=1)
            )
            in_ch = context_channels

    def forward(self, ctx: ContextSpec) -> list[Tensor]:
        b, t = ctx.latents.shape[:2]
        frames = rearrange(ctx.latents, "b t c h w -> (b t) c h w")
        mask = ctx.mask.to(frames.dtype).reshape(b * t, 1, 1, 1)
        mask = mask.expand(-1, 1, frames.shape[-2], frames.shape[-1])
        h = torch.cat([frames, mask], dim=1)
        feats = []
        for conv in self.convs:
            h = nncore.silu(conv(h))
            feats.append(to_video(h, t))
        return feats


def encode_context(encoder: ContextEncoder, ctx: ContextSpec) -> list[Tensor]:
    """Per-resolution context features (video layout) for the conv blocks."""
    return encoder(ctx)


# ---------------------------------------------------------------------------
# Assembled model
# ---------------------------------------------------------------------------

class TemporalLayers(nn.Module):
    """The trainable phi: mixing blocks per insertion point, the context
    downsampler, and the frame-rate-regime embedding."""

    def __init__(self, spatial: SpatialUNet, cfg: TemporalConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.expected = tuple(
            (p.tag, p.channels, p.level) for p in spatial.insertion_points()
        )
        temb_dim = spatial.cfg.temb_dim
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.blocks = nn.ModuleList()
            for p in spatial.insertion_points():
                stack = nn.ModuleList()
                for kind in cfg.block_kinds():
                    if kind == "attention":
                        stack.append(TemporalAttentionBlock(p.channels, cfg))
                    else:
                        ctx_ch = cfg.context_channels if cfg.use_context else 0
                        stack.append(
                            TemporalConvBlock(p.channels, cfg, temb_dim, ctx_ch)
                        )
                self.blocks.append(stack)
            self.ctx_encoder = (
                ContextEncoder(
                    spatial.cfg.in_channels, cfg.context_channels, spatial.cfg.levels
                )
                if cfg.use_context
                else None
            )
            self.regime_emb = (
                nn.Embedding(cfg.regimes, temb_dim) if cfg.regimes else None
            )
            if self.regime_emb is not None:
                nn.init.zeros_(self.regime_emb.weight)


class VideoDenoiser(nn.Module):
    """f_{theta,phi}: spatial layers in batch-major layout interleaved with
    temporal layers in video layout.

    Calling with alpha_override=1.0 bypasses the temporal stacks entirely,
    which is the exact image model applied frame-wise.
    """

    def __init__(self, spatial: SpatialUNet, temporal: TemporalLayers):
        super().__init__()
        points = tuple(
            (p.tag, p.channels, p.level) for p in spatial.insertion_points()
        )
        if len(points) != len(temporal.expected):
            raise IncompatibleBackboneError(
                f"backbone has {len(points)} insertion points, temporal layers "
                f"expect {len(temporal.expected)}"
            )
        for got, want in zip(points, temporal.expected):
            if got != want:
                raise IncompatibleBackboneError(
                    f"first mismatched layer: backbone {got} vs temporal {want}"
                )
        self.spatial = spatial
        self.temporal = temporal
        self.set_mode(temporal.cfg.mode)

    @property
    def cfg(self) -> TemporalConfig:
        return self.temporal.cfg

    def set_mode(self, mode: str) -> None:
        """full/attention_only freeze the spatial backbone; end_to_end trains it."""
        if mode == "end_to_end":
            nncore.unfreeze(self.spatial)
        else:
            nncore.freeze(self.spatial)

    def temporal_receptive_field(self, window: int | None = None) -> int | None:
        """Max frame distance one forward pass can propagate information.

        None means unbounded (an un-windowed attention layer is global).
        """
        reach = 0
        for stack in self.temporal.blocks:
            for block in stack:
                if isinstance(block, TemporalAttentionBlock):
                    if window is None:
                        return None
                    reach += window
                else:
                    reach += block.temporal_reach
        return reach

    def forward(
        self,
        video: Tensor,
        tau,
        cond: Conditioning | None = None,
        ctx: ContextSpec | None = None,
        regime=None,
        alpha_override: float | None = None,
        attention_window: int | None = None,
    ) -> Tensor:
        if video.dim() != 5:
            raise ValueError(f"expected (B, T, C, H, W), got {tuple(video.shape)}")
        b, t = video.shape[:2]
        flat = rearrange(video, "b t c h w -> (b t) c h w")
        tau = torch.as_tensor(tau, dtype=torch.float32)
        if tau.dim() == 0:
            tau = tau.expand(b)
        tau_frames = tau.repeat_interleave(t)

        if alpha_override is not None and alpha_override == 1.0:
            out = self.spatial(flat, tau_frames, cond)
            return rearrange(out, "(b t) c h w -> b t c h w", t=t)

        if self.cfg.alpha_param == "per_frame" and t != self.cfg.seq_len:
            raise IncompatibleBackboneError(
                f"per-frame alpha is bound to T={self.cfg.seq_len}; "
                f"got T={t} (convolutional-in-time needs scalar alpha)"
            )

        window = attention_window if attention_window is not None else self.cfg.attention_window

        temb = self.spatial.time_embedding(tau)
        if self.temporal.regime_emb is not None:
            if regime is None:
                regime = torch.zeros(b, dtype=torch.long)
            regime = torch.as_tensor(regime, dtype=torch.long)
            if regime.dim() == 0:
                regime = regime.expand(b)
            temb = temb + self.temporal.regime_emb(regime)

        feats: list[Tensor] | None = None
        if self.temporal.ctx_encoder is not None:
            if ctx is None:
                ctx = ContextSpec.empty(b, t, *video.shape[2:])
            feats = encode_context(self.temporal.ctx_encoder, ctx)

        def hook(idx: int, h: Tensor) -> Tensor:
            stack = self.temporal.blocks[idx]
            level = self.temporal.expected[idx][2]
            zv = to_video(h, t)
            for block in stack:
                ctx_feat = None
                if feats is not None and isinstance(block, TemporalConvBlock):
                    ctx_feat = feats[level]
                z_prime = block(zv, temb, ctx_feat, window)
                alpha = alpha_override if alpha_override is not None else block.alpha.value()
                zv = merge(zv, z_prime, alpha)
            return to_batch(zv)

        out = self.spatial(flat, tau_frames, cond, hook=hook)
        return rearrange(out, "(b t) c h w -> b t c h w", t=t)

    def alpha_summary(self) -> dict[str, list[float]]:
        """Effective merge weights per temporal layer (human-readable dump)."""
        out: dict[str, list[float]] = {}
        for idx, stack in enumerate(self.temporal.blocks):
            tag = self.temporal.expected[idx][0]
            for j, block in enumerate(stack):
                kind = type(block).__name__
                out[f"{tag}.{j}.{kind}"] = block.alpha.value().reshape(-1).tolist()
        return out


def build_temporal_layers(
    spatial: SpatialUNet, cfg: TemporalConfig, seed: int = 0
) -> TemporalLayers:
    return TemporalLayers(spatial, cfg, seed=seed)


def assemble_video_denoiser(
    spatial: SpatialUNet, temporal: TemporalLayers
) -> VideoDenoiser:
    """Combine spatial and temporal layers; raises IncompatibleBackboneError
    naming the first mismatched layer when the structures disagree."""
    return VideoDenoiser(spatial, temporal)


def swap_spatial_backbone(
    model: VideoDenoiser, new_spatial: SpatialUNet
) -> VideoDenoiser:
    """Insert the trained temporal layers into a different (structurally
    identical) spatial backbone."""
    return VideoDenoiser(new_spatial, model.temporal)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _prediction_masks(
    batch: int, t: int, p_s: Sequence[float], rng: torch.Generator
) -> Tensor:
    probs = torch.as_tensor(p_s, dtype=torch.float32)
    s = torch.multinomial(probs, batch, replacement=True, generator=rng)
    mask = (torch.arange(t).unsqueeze(0) < s.unsqueeze(1)).float()
    return mask


def train_temporal(
    model: VideoDenoiser,
    latents: Tensor,
    sched: Schedule,
    param: Parameterization,
    steps: int,
    task: str = "prediction",
    p_s: Sequence[float] = (1 / 3, 1 / 3, 1 / 3),
    guidance_drop: float = 0.1,
    batch_size: int = 4,
    labels: Tensor | None = None,
    opt_cfg: OptimizerConfig = OptimizerConfig(),
    rng: torch.Generator | None = None,
    log_every: int = 0,
) -> list[float]:
    """Optimize only the temporal layers on encoded video clips.

    latents: (N, F, C, H, W) full encoded clips at the master frame rate.
    Prediction draws T=seq_len windows at stride 4 and first-S-frame masks
    with S ~ p_s; interpolation draws 5-frame windows at stride 4 or 1
    (coarse/fine regime, passed as the regime label) with the fixed
    keyframe mask. With probability guidance_drop the context is nulled
    (S=0) to enable context guidance. In end_to_end mode the spatial
    parameters train as well; otherwise they stay bit-frozen.
    """
    if task not in ("prediction", "interpolation"):
        raise ConfigurationError(f"unknown task {task!r}")
    rng = rng or torch.Generator().manual_seed(0)
    cfg = model.cfg
    t = cfg.seq_len
    n_clips, clip_len = latents.shape[:2]
    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = opt_cfg.build(trainable)
    interp_mask = torch.tensor([1.0, 0.0, 0.0, 0.0, 1.0])

    losses: list[float] = []
    for step in range(steps):
        idx = torch.randint(0, n_clips, (batch_size,), generator=rng)
        if task == "prediction":
            stride = 4
            regime = None
            mask = _prediction_masks(batch_size, t, p_s, rng)
        else:
            if t != 5:
                raise ConfigurationError("interpolation requires seq_len=5")
            regime = torch.randint(0, max(cfg.regimes, 1), (batch_size,), generator=rng)
            mask = interp_mask.unsqueeze(0).expand(batch_size, -1).clone()

        windows = []
        for row in range(batch_size):
            stride_row = stride if task == "prediction" else (4 if regime[row] == 0 else 1)
            span = (t - 1) * stride_row + 1
            if span > clip_len:
                raise ConfigurationError(
                    f"window span {span} exceeds clip length {clip_len}"
                )
            start = int(torch.randint(0, clip_len - span + 1, (1,), generator=rng))
            windows.append(latents[idx[row], start : start + span : stride_row])
        x = torch.stack(windows)

        dropped = torch.rand(batch_size, generator=rng) < guidance_drop
        mask[dropped] = 0.0
        ctx = ContextSpec.from_frames(mask, x)

        tau = torch.randint(0, sched.n_steps, (batch_size,), generator=rng)
        eps = torch.randn(x.shape, generator=rng)
        x_tau = diffuse(x, tau, eps, sched)
        y = target(x, eps, tau, param, sched)

        cond = None
        if labels is not None and model.spatial.cfg.conditioning != "none":
            cond = Conditioning(class_ids=labels[idx])

        pred = model(x_tau, tau, cond=cond, ctx=ctx if cfg.use_context else None,
                     regime=regime)
        loss = torch.mean((pred - y) ** 2)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"NaN/inf loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            print(f"  temporal step {step}: loss {loss.item():.4f}")
    return losses

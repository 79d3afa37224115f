"""DDIM sampling, guidance, long-video rollout, and interpolation.

One core loop (`ddim_sample`) drives everything: image sampling, video
window sampling with masked context conditioning and context guidance,
iterative prediction rollouts that re-use previous frames verbatim,
the two-stage keyframe interpolation cascade, and convolutional-in-time
or -space sampling with a banded temporal attention window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import Tensor

from .backbone import Conditioning, SpatialUNet
from .schedule import ConfigurationError, Parameterization, Schedule, invert_prediction
from .temporal import ContextSpec, VideoDenoiser


@dataclass(frozen=True)
class SamplerConfig:
    """DDIM settings. Paper-scale driving defaults are 200 steps / eta 1.0 /
    guidance 2.0; the toy default trims steps for CPU runs."""

    n_steps: int = 50
    eta: float = 0.0
    guidance_scale: float = 2.0
    clamp_x0: bool = False  # [-1, 1] clamp for pixel-space models only

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError(f"eta must be in [0, 1], got {self.eta}")
        if self.guidance_scale < 0:
            raise ConfigurationError(f"guidance scale must be >= 0, got {self.guidance_scale}")
        if self.n_steps < 1:
            raise ConfigurationError("n_steps must be positive")


def step_schedule(sched: Schedule, n_steps: int) -> list[int]:
    """Evenly spaced descending step subsequence including the last step and 0."""
    if n_steps > sched.n_steps:
        raise ConfigurationError(
            f"{n_steps} sampling steps exceed the {sched.n_steps}-step schedule"
        )
    taus = np.round(np.linspace(sched.n_steps - 1, 0, n_steps)).astype(int)
    out = [int(taus[0])]
    for t in taus[1:]:
        if int(t) != out[-1]:
            out.append(int(t))
    return out


DenoiseFn = Callable[[Tensor, Tensor], Tensor]


def ddim_step(
    denoise_fn: DenoiseFn,
    x: Tensor,
    tau: int,
    tau_prev: int,
    param: Parameterization,
    sched: Schedule,
    eta: float = 0.0,
    rng: torch.Generator | None = None,
    clamp_x0: bool = False,
) -> Tensor:
    """One DDIM update from step tau to tau_prev (< tau).

    x_prev = alpha_prev * x0_hat + sqrt(sigma_prev^2 - var^2) * eps_hat
             + var * noise,
    var = eta * (sigma_prev / sigma_tau) * sqrt(1 - alpha_tau^2 / alpha_prev^2).
    tau_prev == tau is a degenerate no-op.
    """
    if tau_prev > tau:
        raise ConfigurationError(f"invalid step pair: {tau} -> {tau_prev}")
    if tau_prev == tau:
        return x
    tau_batch = torch.full((x.shape[0],), float(tau))
    y = denoise_fn(x, tau_batch)
    x0, eps = invert_prediction(x, y, tau, param, sched)
    if clamp_x0:
        x0 = x0.clamp(-1.0, 1.0)
    a_t, s_t = float(sched.alpha[tau]), float(sched.sigma[tau])
    a_p, s_p = float(sched.alpha[tau_prev]), float(sched.sigma[tau_prev])
    if eta > 0.0 and s_t > 0.0:
        var = eta * (s_p / s_t) * math.sqrt(max(1.0 - a_t * a_t / (a_p * a_p), 0.0))
    else:
        var = 0.0
    dir_coeff = math.sqrt(max(s_p * s_p - var * var, 0.0))
    x_prev = a_p * x0 + dir_coeff * eps
    if var > 0.0:
        noise = torch.randn(x.shape, generator=rng, dtype=x.dtype)
        x_prev = x_prev + var * noise
    return x_prev


def ddim_sample(
    denoise_fn: DenoiseFn,
    noise: Tensor,
    sched: Schedule,
    param: Parameterization,
    cfg: SamplerConfig,
    rng: torch.Generator | None = None,
) -> Tensor:
    """Full DDIM chain from standard-normal noise down to a clean estimate.

    After reaching step 0 the remaining noise is removed by one final
    inversion (the tau_prev = "clean" limit where alpha=1, sigma=0).
    """
    taus = step_schedule(sched, cfg.n_steps)
    x = noise
    for tau, tau_prev in zip(taus[:-1], taus[1:]):
        x = ddim_step(denoise_fn, x, tau, tau_prev, param, sched,
                      eta=cfg.eta, rng=rng, clamp_x0=cfg.clamp_x0)
    tau_end = taus[-1]
    y = denoise_fn(x, torch.full((x.shape[0],), float(tau_end)))
    x0, _ = invert_prediction(x, y, tau_end, param, sched)
    return x0.clamp(-1.0, 1.0) if cfg.clamp_x0 else x0


# ---------------------------------------------------------------------------
# Guidance
# ---------------------------------------------------------------------------

def guided_denoise(
    model: VideoDenoiser, z: Tensor, tau, ctx: ContextSpec, scale: float, **kw
) -> Tensor:
    """Context guidance: f(z) + s * (f(z; c_S) - f(z)).

    s=1 returns the conditional pass itself (bitwise); s=0 the unconditional.
    """
    if scale == 1.0:
        return model(z, tau, ctx=ctx, **kw)
    b, t, c, h, w = z.shape
    uncond = model(z, tau, ctx=ContextSpec.empty(b, t, c, h, w), **kw)
    if scale == 0.0:
        return uncond
    cond = model(z, tau, ctx=ctx, **kw)
    return uncond + scale * (cond - uncond)


def cfg_denoise(
    model: SpatialUNet, x: Tensor, tau, cond: Conditioning, scale: float
) -> Tensor:
    """Classifier-free guidance with the learned null conditioning."""
    if scale == 1.0:
        return model(x, tau, cond)
    uncond = model(x, tau, Conditioning.null())
    if scale == 0.0:
        return uncond
    return uncond + scale * (model(x, tau, cond) - uncond)


# ---------------------------------------------------------------------------
# Window sampling
# ---------------------------------------------------------------------------

def sample_images(
    model: SpatialUNet,
    shape: tuple[int, ...],
    sched: Schedule,
    param: Parameterization,
    cfg: SamplerConfig,
    cond: Conditioning | None = None,
    rng: torch.Generator | None = None,
    noise: Tensor | None = None,
) -> Tensor:
    """DDIM sampling of independent frames from the image model."""
    if noise is None:
        noise = torch.randn(shape, generator=rng)

    if cond is not None and cfg.guidance_scale != 1.0:
        def fn(x, tau):
            return cfg_denoise(model, x, tau, cond, cfg.guidance_scale)
    else:
        def fn(x, tau):
            return model(x, tau, cond)

    return ddim_sample(fn, noise, sched, param, cfg, rng)


def sample_window(
    model: VideoDenoiser,
    shape: tuple[int, int, int, int, int],
    sched: Schedule,
    param: Parameterization,
    cfg: SamplerConfig,
    ctx: ContextSpec | None = None,
    cond: Conditioning | None = None,
    regime=None,
    rng: torch.Generator | None = None,
    noise: Tensor | None = None,
    alpha_override: float | None = None,
    attention_window: int | None = None,
) -> Tensor:
    """DDIM sampling of one latent video window (B, T, C, H, W).

    Context frames, when given, condition every step; with a guidance scale
    other than 1 the context-guided combination of the conditional and
    unconditional passes is used.
    """
    if noise is None:
        noise = torch.randn(shape, generator=rng)
    kw = dict(cond=cond, regime=regime, alpha_override=alpha_override,
              attention_window=attention_window)

    if ctx is not None and cfg.guidance_scale != 1.0 and model.cfg.use_context:
        def fn(z, tau):
            return guided_denoise(model, z, tau, ctx, cfg.guidance_scale, **kw)
    else:
        def fn(z, tau):
            return model(z, tau, ctx=ctx, **kw)

    return ddim_sample(fn, noise, sched, param, cfg, rng)


def sample_convolutional(
    model: VideoDenoiser,
    shape: tuple[int, int, int, int, int],
    sched: Schedule,
    param: Parameterization,
    cfg: SamplerConfig,
    window: int | None = 8,
    rng: torch.Generator | None = None,
    noise: Tensor | None = None,
    **kw,
) -> Tensor:
    """Sampling at extended T and/or H, W with banded temporal attention.

    `shape` may exceed the training sequence length and resolution; the
    attention band keeps the temporal layers local, matching training.
    Requires scalar merge weights for extended T (per-frame weights raise).
    """
    return sample_window(
        model, shape, sched, param, cfg, rng=rng, noise=noise,
        attention_window=window, **kw,
    )


# ---------------------------------------------------------------------------
# Long-video rollout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RolloutPlan:
    """Iterative prediction plan: an image-model bootstrap frame, one S=1
    window, then S=2 continuations that each add window - 2 new frames.

    Consecutive windows overlap in exactly the context frames, which are
    re-used verbatim rather than regenerated.
    """

    total_frames: int
    window: int = 8
    context: int = 2

    def __post_init__(self):
        if not 0 < self.context < self.window:
            raise ConfigurationError(
                f"context {self.context} must be within (0, window {self.window})"
            )
        if self.total_frames < self.window:
            raise ConfigurationError("total_frames smaller than one window")
        if (self.total_frames - self.window) % (self.window - self.context) != 0:
            raise ConfigurationError(
                f"{self.total_frames} frames cannot be tiled by {self.window}-frame "
                f"windows overlapping {self.context}"
            )

    @property
    def continuations(self) -> int:
        return (self.total_frames - self.window) // (self.window - self.context)

    @property
    def num_stages(self) -> int:
        """Generation stages: bootstrap + first window + continuations."""
        return 2 + self.continuations


def rollout_long(
    model: VideoDenoiser,
    plan: RolloutPlan,
    latent_hw: tuple[int, int],
    sched: Schedule,
    param: Parameterization,
    cfg: SamplerConfig,
    cond: Conditioning | None = None,
    rng: torch.Generator | None = None,
    collect_contexts: list | None = None,
) -> Tensor:
    """Generate plan.total_frames latent frames by iterative prediction.

    The first frame comes from the image backbone (temporal layers
    skipped); the first prediction window conditions on it (S=1), and every
    further window conditions on the previous window's last `context`
    frames, which enter the output verbatim. When `collect_contexts` is a
    list, (start_frame, context_tensor) pairs are appended per window for
    seam verification.
    """
    t = plan.window
    c = model.spatial.cfg.in_channels
    h, w = latent_hw
    latent_shape = (1, t, c, h, w)

    first = sample_window(
        model, (1, 1, c, h, w), sched, param, cfg, cond=cond, rng=rng,
        alpha_override=1.0,
    )
    frames = [first[:, 0]]

    def predict(context_frames: list[Tensor], s: int, start: int) -> Tensor:
        mask = torch.zeros(t)
        mask[:s] = 1.0
        raw = torch.zeros(latent_shape)
        for i, f in enumerate(context_frames):
            raw[:, i] = f
        if collect_contexts is not None:
            collect_contexts.append((start, torch.stack(context_frames, dim=1)))
        ctx = ContextSpec.from_frames(mask, raw)
        return sample_window(model, latent_shape, sched, param, cfg,
                             ctx=ctx, cond=cond, rng=rng)

    window = predict([frames[0]], s=1, start=0)
    frames.extend(window[:, i] for i in range(1, t))

    while len(frames) < plan.total_frames:
        start = len(frames) - plan.context
        window = predict(frames[-plan.context:], s=plan.context, start=start)
        frames.extend(window[:, i] for i in range(plan.context, t))

    out = torch.stack(frames, dim=1)
    assert out.shape[1] == plan.total_frames
    return out


# ---------------------------------------------------------------------------
# Interpolation cascade
# ---------------------------------------------------------------------------

INTERPOLATION_WINDOW = 5  # two keyframes enclosing three generated frames


def interpolate_between(
    model: VideoDenoiser,
    keyframes: Tensor,
    sched: Schedule,
    param: Parameterization,
    cfg: SamplerConfig,
    regime: int,
    cond: Conditioning | None = None,
    rng: torch.Generator | None = None,
) -> Tensor:
    """Fill 3 frames between each pair of consecutive keyframes.

    keyframes: (1, K, C, H, W) latents -> (1, K + (K-1)*3, C, H, W); input
    keyframes pass through to the output unchanged.
    """
    if keyframes.shape[1] < 2:
        raise ConfigurationError("need at least 2 keyframes to interpolate")
    _, k, c, h, w = keyframes.shape
    t = INTERPOLATION_WINDOW
    pairs = k - 1
    raw = torch.zeros(pairs, t, c, h, w)
    raw[:, 0] = keyframes[0, :-1]
    raw[:, t - 1] = keyframes[0, 1:]
    mask = torch.zeros(t)
    mask[0] = mask[t - 1] = 1.0
    ctx = ContextSpec.from_frames(mask, raw)
    windows = sample_window(
        model, (pairs, t, c, h, w), sched, param, cfg, ctx=ctx, cond=cond,
        regime=torch.full((pairs,), regime, dtype=torch.long), rng=rng,
    )
    out = [keyframes[0, 0:1]]
    for p in range(pairs):
        out.append(windows[p, 1 : t - 1])
        out.append(keyframes[0, p + 1 : p + 2])
    return torch.cat(out).unsqueeze(0)


def interpolate_cascade(
    model: VideoDenoiser,
    keyframes: Tensor,
    stages: int,
    sched: Schedule,
    param: Parameterization,
    cfg: SamplerConfig,
    cond: Conditioning | None = None,
    rng: torch.Generator | None = None,
) -> Tensor:
    """One or two 4x interpolation passes with the shared two-regime model.

    Two stages run coarse (regime 0) then fine (regime 1); a single stage
    runs the fine regime. K keyframes become K + (K-1)*3 per stage.
    """
    if stages not in (1, 2):
        raise ConfigurationError(f"stages must be 1 or 2, got {stages}")
    regimes = (1,) if stages == 1 else (0, 1)
    video = keyframes
    for regime in regimes:
        video = interpolate_between(model, video, sched, param, cfg, regime,
                                    cond=cond, rng=rng)
    return video

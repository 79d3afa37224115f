"""Discrete variance-preserving diffusion process.

Provides the precomputed noise-schedule tables (signal/noise coefficients
and log-SNR), the forward diffusion map, the epsilon/v regression targets,
and the algebraic inversion from a model prediction back to (clean, noise)
estimates. Tables are float64; tensor math follows the input dtype
(float32 by default elsewhere in the package).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch

ALPHA_FLOOR = 1e-8  # below this, epsilon-inversion of x0 is ill-conditioned


class ConfigurationError(ValueError):
    """Invalid schedule or model configuration."""


class Parameterization(str, Enum):
    """Regression target convention of a trained denoiser."""

    EPSILON = "epsilon"
    V = "v"


@dataclass(frozen=True)
class Schedule:
    """Precomputed tables of a discrete variance-preserving process.

    alpha[t]**2 + sigma[t]**2 == 1 for every step; log-SNR is strictly
    decreasing. Immutable after construction and safe for concurrent reads.
    """

    n_steps: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    alpha: np.ndarray = field(repr=False, default=None)
    sigma: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.sqrt(self.alpha_bar))
        object.__setattr__(self, "sigma", np.sqrt(1.0 - self.alpha_bar))
        object.__setattr__(self, "_alpha_t", torch.from_numpy(self.alpha.copy()))
        object.__setattr__(self, "_sigma_t", torch.from_numpy(self.sigma.copy()))
        for arr in (self.beta, self.alpha_bar, self.alpha, self.sigma):
            arr.setflags(write=False)

    def check_step(self, tau: int) -> None:
        if not 0 <= tau < self.n_steps:
            raise IndexError(f"step {tau} outside [0, {self.n_steps})")


def make_linear_schedule(beta_0: float, beta_t: float, n_steps: int) -> Schedule:
    """Linear per-step variances, endpoints inclusive.

    beta[t] = beta_0 + (beta_t - beta_0) * t / (n_steps - 1); a single-step
    schedule degenerates to beta = [beta_0].
    """
    if n_steps < 1:
        raise ConfigurationError(f"n_steps must be >= 1, got {n_steps}")
    if not (0.0 < beta_0 <= beta_t < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_0 <= beta_T < 1, got ({beta_0}, {beta_t})"
        )
    if n_steps == 1:
        beta = np.array([beta_0], dtype=np.float64)
    else:
        t = np.arange(n_steps, dtype=np.float64)
        beta = beta_0 + (beta_t - beta_0) * t / (n_steps - 1)
    alpha_bar = np.cumprod(1.0 - beta)
    return Schedule(n_steps=n_steps, beta=beta, alpha_bar=alpha_bar)


def zero_noise_schedule(n_steps: int) -> Schedule:
    """Degenerate beta = 0 schedule (test-only constructor): alpha = 1, sigma = 0."""
    beta = np.zeros(n_steps, dtype=np.float64)
    return Schedule(n_steps=n_steps, beta=beta, alpha_bar=np.ones(n_steps))


def alpha_sigma(s: Schedule, tau: int) -> tuple[float, float]:
    """Signal and noise coefficients (alpha, sigma) at a step index."""
    s.check_step(tau)
    return float(s.alpha[tau]), float(s.sigma[tau])


def log_snr(s: Schedule, tau: int) -> float:
    """Logarithmic signal-to-noise ratio log(alpha^2 / sigma^2).

    Returns +inf for a zero-noise step instead of raising.
    """
    s.check_step(tau)
    ab = float(s.alpha_bar[tau])
    if ab >= 1.0:
        return math.inf
    return math.log(ab) - math.log1p(-ab)


def _coeffs(s: Schedule, tau: torch.Tensor, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample (alpha, sigma) broadcast against `like` (leading batch dim)."""
    tau = torch.as_tensor(tau, dtype=torch.long)
    if tau.dim() == 0:
        tau = tau.reshape(1)
    if tau.min() < 0 or tau.max() >= s.n_steps:
        raise IndexError(f"step indices outside [0, {s.n_steps})")
    shape = (-1,) + (1,) * (like.dim() - 1)
    alpha = s._alpha_t.to(like.dtype)[tau].reshape(shape)
    sigma = s._sigma_t.to(like.dtype)[tau].reshape(shape)
    return alpha, sigma


def diffuse(x: torch.Tensor, tau, eps: torch.Tensor, s: Schedule) -> torch.Tensor:
    """Forward diffusion: alpha_tau * x + sigma_tau * eps.

    `tau` is a scalar or per-sample index vector; `eps` must be the caller's
    standard-normal draw with the same shape as x.
    """
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs eps {tuple(eps.shape)}")
    alpha, sigma = _coeffs(s, tau, x)
    return alpha * x + sigma * eps


def target(
    x: torch.Tensor, eps: torch.Tensor, tau, p: Parameterization, s: Schedule
) -> torch.Tensor:
    """Regression target: eps itself, or v = alpha_tau * eps - sigma_tau * x."""
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs eps {tuple(eps.shape)}")
    if p == Parameterization.EPSILON:
        return eps
    alpha, sigma = _coeffs(s, tau, x)
    return alpha * eps - sigma * x


def invert_prediction(
    x_tau: torch.Tensor, y: torch.Tensor, tau, p: Parameterization, s: Schedule
) -> tuple[torch.Tensor, torch.Tensor]:
    """Recover (x0_hat, eps_hat) from a diffused input and a model prediction.

    v-kind inverts exactly via x0 = alpha*x_tau - sigma*v and
    eps = sigma*x_tau + alpha*v; epsilon-kind divides by alpha and refuses
    steps where alpha < 1e-8 instead of returning inf.
    """
    alpha, sigma = _coeffs(s, tau, x_tau)
    if p == Parameterization.V:
        x0 = alpha * x_tau - sigma * y
        eps = sigma * x_tau + alpha * y
        return x0, eps
    if float(alpha.min()) < ALPHA_FLOOR:
        raise FloatingPointError(
            f"alpha < {ALPHA_FLOOR} at requested step; epsilon inversion undefined"
        )
    x0 = (x_tau - sigma * y) / alpha
    return x0, y

"""Diffusion-process math: noise schedules, forward noising, the training
loss, ancestral sampling with a fixed-small posterior variance, and the
dual-prompt guidance combiner.

Schedule coefficients are kept in float64 so the endpoint identities hold to
1e-12; model tensors keep whatever dtype the caller uses.  Every stochastic
function takes an explicit ``numpy.random.Generator`` and is bit-reproducible
under a fixed seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

try:
    import torch
except ImportError:  # schedule math itself only needs numpy
    torch = None


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise coefficients of a discrete diffusion process.

    ``alpha_bars[t]`` is the cumulative product of ``alphas[0..t]``; it is
    strictly decreasing and every beta lies in (0, 1).
    """

    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        for name in ("betas", "alphas", "alpha_bars"):
            arr = getattr(self, name)
            if arr.shape != (self.num_steps,):
                raise ValueError(f"{name} must have shape ({self.num_steps},)")
        if np.any(self.betas <= 0.0) or np.any(self.betas >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ValueError("alpha_bars must be strictly decreasing")

    def alpha_bar_prev(self, t: int) -> float:
        """Cumulative alpha one step earlier, with the t=0 boundary fixed at 1."""
        return float(self.alpha_bars[t - 1]) if t > 0 else 1.0


def make_schedule(num_steps: int, kind: str = "cosine") -> DiffusionSchedule:
    """Build a noise schedule.

    ``cosine`` follows the squared-cosine cumulative-alpha curve (s = 0.008,
    betas clipped at 0.999); ``linear`` interpolates beta from 1e-4 to 2e-2.
    """
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if kind == "linear":
        betas = np.linspace(1e-4, 2e-2, num_steps, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        ts = np.arange(num_steps + 1, dtype=np.float64) / num_steps
        f = np.cos((ts + s) / (1 + s) * math.pi / 2) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return DiffusionSchedule(num_steps=num_steps, betas=betas, alphas=alphas,
                             alpha_bars=alpha_bars)


@dataclass(frozen=True)
class GuidanceConfig:
    """Sampler settings: guidance scale, number of denoising steps, seed."""

    omega: float = 4.5
    steps: int = 50
    seed: int = 0

    def validate(self, sched: DiffusionSchedule):
        if not (1 <= self.steps <= sched.num_steps):
            raise ValueError(
                f"steps must be in [1, {sched.num_steps}], got {self.steps}")


def _is_torch(x) -> bool:
    return torch is not None and isinstance(x, torch.Tensor)


def _noise_like(x, rng: np.random.Generator):
    """Standard normal noise shaped and typed like ``x``, drawn from ``rng``."""
    eps = rng.standard_normal(tuple(x.shape))
    if _is_torch(x):
        return torch.from_numpy(eps).to(x.dtype)
    return eps.astype(x.dtype, copy=False)


def add_noise(z0, t: int, eps, sched: DiffusionSchedule):
    """Forward noising z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if tuple(z0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: {tuple(z0.shape)} vs {tuple(eps.shape)}")
    if not (0 <= t < sched.num_steps):
        raise ValueError(f"t={t} out of range [0, {sched.num_steps})")
    abar = float(sched.alpha_bars[t])
    return math.sqrt(abar) * z0 + math.sqrt(1.0 - abar) * eps


def diffusion_loss(model: Callable, z0, cond, sched: DiffusionSchedule,
                   rng: np.random.Generator):
    """Noise-prediction MSE at a uniformly drawn timestep.

    Draws (t, eps) from ``rng``, noises ``z0`` and returns the mean squared
    error between ``model(z_t, t, cond)`` and the drawn noise.  Differentiable
    when the model returns a torch tensor.
    """
    t = int(rng.integers(0, sched.num_steps))
    eps = _noise_like(z0, rng)
    z_t = add_noise(z0, t, eps, sched)
    pred = model(z_t, t, cond)
    if tuple(pred.shape) != tuple(eps.shape):
        raise ValueError("model output shape differs from the noised latent")
    return ((pred - eps) ** 2).mean()


def cfg_combine(eps_pos, eps_neg, omega: float):
    """Guided prediction omega * eps_pos + (1 - omega) * eps_neg.

    omega = 1 and omega = 0 return the respective input unchanged so the
    collapse cases are bit-exact.
    """
    if tuple(eps_pos.shape) != tuple(eps_neg.shape):
        raise ValueError("eps_pos / eps_neg shape mismatch")
    if omega == 1.0:
        return eps_pos
    if omega == 0.0:
        return eps_neg
    return omega * eps_pos + (1.0 - omega) * eps_neg


def posterior_mean(z_t, eps_hat, t: int, sched: DiffusionSchedule):
    """Mean of q(z_{t-1} | z_t, z0_hat) with z0_hat inferred from eps_hat."""
    abar = float(sched.alpha_bars[t])
    abar_prev = sched.alpha_bar_prev(t)
    alpha = float(sched.alphas[t])
    beta = float(sched.betas[t])
    z0_hat = (z_t - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)
    coef0 = math.sqrt(abar_prev) * beta / (1.0 - abar)
    coef_t = math.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)
    return coef0 * z0_hat + coef_t * z_t


def posterior_sigma(t: int, sched: DiffusionSchedule) -> float:
    """Fixed-small posterior std sqrt(beta_t (1 - abar_{t-1}) / (1 - abar_t))."""
    if t == 0:
        return 0.0
    abar = float(sched.alpha_bars[t])
    abar_prev = sched.alpha_bar_prev(t)
    return math.sqrt(float(sched.betas[t]) * (1.0 - abar_prev) / (1.0 - abar))


def ddpm_step(z_t, eps_hat, t: int, sched: DiffusionSchedule,
              rng: np.random.Generator):
    """One ancestral denoising step; the final step (t=0) adds no noise."""
    if not (0 <= t < sched.num_steps):
        raise ValueError(f"t={t} out of range [0, {sched.num_steps})")
    mu = posterior_mean(z_t, eps_hat, t, sched)
    sigma = posterior_sigma(t, sched)
    if sigma == 0.0:
        return mu
    return mu + sigma * _noise_like(z_t, rng)


def stride_steps(num_steps: int, n: int) -> np.ndarray:
    """Uniform stride of n original timesteps, both endpoints included."""
    if not (1 <= n <= num_steps):
        raise ValueError(f"n must be in [1, {num_steps}], got {n}")
    if n == 1:
        return np.array([num_steps - 1], dtype=np.int64)
    return np.unique(np.round(np.linspace(0, num_steps - 1, n)).astype(np.int64))


def respaced_schedule(sched: DiffusionSchedule,
                      use_steps: Sequence[int]) -> DiffusionSchedule:
    """Schedule over a subsequence of timesteps.

    The new betas are set so the cumulative alphas at the retained steps are
    unchanged: beta'_i = 1 - abar[t_i] / abar[t_{i-1}].
    """
    use = np.asarray(use_steps, dtype=np.int64)
    abars = sched.alpha_bars[use]
    prev = np.concatenate([[1.0], abars[:-1]])
    betas = 1.0 - abars / prev
    alphas = 1.0 - betas
    return DiffusionSchedule(num_steps=len(use), betas=betas, alphas=alphas,
                             alpha_bars=abars)


def sample(model: Callable, cond_pos, cond_neg, guidance: GuidanceConfig,
           sched: DiffusionSchedule, shape: tuple, like=None):
    """Ancestral sampling with two predictions per step combined by CFG.

    ``model(z_t, t, cond)`` is called with the original-schedule timestep t.
    ``like`` optionally supplies a template tensor (dtype/backend) for the
    latent; the default is float64 numpy.
    """
    guidance.validate(sched)
    rng = np.random.default_rng(guidance.seed)
    use = stride_steps(sched.num_steps, guidance.steps)
    sub = respaced_schedule(sched, use)
    if like is None:
        template = np.zeros(shape)
    elif _is_torch(like):
        template = torch.zeros(shape, dtype=like.dtype)
    else:
        template = np.zeros(shape, dtype=like.dtype)
    z = _noise_like(template, rng)
    for i in range(len(use) - 1, -1, -1):
        t_orig = int(use[i])
        eps_p = model(z, t_orig, cond_pos)
        eps_n = model(z, t_orig, cond_neg)
        eps = cfg_combine(eps_p, eps_n, guidance.omega)
        z = ddpm_step(z, eps, i, sub, rng)
    return z

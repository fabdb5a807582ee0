"""Gaussian diffusion with an x0-predicting denoiser.

Steps are 1-indexed: ``t = 1`` is the least noisy step and ``t = T`` the
most. Arrays on :class:`NoiseSchedule` are stored 0-indexed, so step ``t``
lives at position ``t - 1``.

    q(x_t | x_0) = N(sqrt(abar_t) x_0, (1 - abar_t) I)
    mu_t(x_t, x0_hat) = c0_t * x0_hat + ct_t * x_t
        c0_t = sqrt(abar_{t-1}) beta_t / (1 - abar_t)
        ct_t = sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, NumericDivergenceError, ParameterError


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_variances: np.ndarray

    def _check(self, t: int) -> int:
        if not 1 <= int(t) <= self.num_steps:
            raise IndexError(f"step {t} outside [1, {self.num_steps}]")
        return int(t) - 1

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self._check(t)])

    def alpha_bar_prev(self, t: int) -> float:
        i = self._check(t)
        return 1.0 if i == 0 else float(self.alpha_bars[i - 1])

    def posterior_coefficients(self, t: int) -> tuple[float, float]:
        """(coefficient on x0_hat, coefficient on x_t) of the posterior mean."""
        i = self._check(t)
        abar = self.alpha_bars[i]
        abar_prev = 1.0 if i == 0 else self.alpha_bars[i - 1]
        c0 = np.sqrt(abar_prev) * self.betas[i] / (1.0 - abar)
        ct = np.sqrt(self.alphas[i]) * (1.0 - abar_prev) / (1.0 - abar)
        return float(c0), float(ct)

    def snr(self) -> np.ndarray:
        return self.alpha_bars / (1.0 - self.alpha_bars)


def make_linear_schedule(num_steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if int(num_steps) != num_steps or num_steps < 1:
        raise ParameterError(f"num_steps must be a positive integer, got {num_steps!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    num_steps = int(num_steps)
    if num_steps == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
        # linspace can miss the endpoint by one ulp; pin both ends
        betas[0], betas[-1] = beta_start, beta_end
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    abar_prev = np.concatenate([[1.0], alpha_bars[:-1]])
    post_var = betas * (1.0 - abar_prev) / (1.0 - alpha_bars)
    post_var[0] = betas[0]
    for arr in (betas, alphas, alpha_bars, post_var):
        arr.setflags(write=False)
    return NoiseSchedule(num_steps, betas, alphas, alpha_bars, post_var)


def _gather(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Per-sample coefficient broadcastable against ``like`` (batch first)."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        idx = t.long() - 1
        if (idx < 0).any() or (idx >= len(values)).any():
            raise IndexError(f"step indices outside [1, {len(values)}]")
        out = torch.tensor(np.array(values), dtype=like.dtype, device=like.device)[idx]
        return out.view(-1, *([1] * (like.ndim - 1)))
    t = int(t)
    if not 1 <= t <= len(values):
        raise IndexError(f"step {t} outside [1, {len(values)}]")
    return torch.tensor(values[t - 1], dtype=like.dtype, device=like.device)


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward noising x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` is an int or a 1-D tensor with one step per leading batch entry.
    """
    if eps.shape != x0.shape:
        raise ContractError(f"noise shape {tuple(eps.shape)} != data shape {tuple(x0.shape)}")
    abar = _gather(sched.alpha_bars, t, x0)
    return abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps


def training_loss(denoiser, x0, t, cond, eps, sched: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between x0 and the denoiser's reconstruction from x_t."""
    x_t = q_sample(x0, t, eps, sched)
    if not isinstance(t, torch.Tensor):
        t = torch.full((x0.shape[0],) if x0.ndim == 3 else (), int(t), dtype=torch.long)
    x0_hat = denoiser(x_t, t, cond)
    if x0_hat.shape != x0.shape:
        raise ContractError(
            f"denoiser returned shape {tuple(x0_hat.shape)}, expected {tuple(x0.shape)}"
        )
    return F.mse_loss(x0_hat, x0)


def _step_tensor(t: int, x: torch.Tensor) -> torch.Tensor:
    if x.ndim >= 3:
        return torch.full((x.shape[0],), t, dtype=torch.long, device=x.device)
    return torch.tensor(t, dtype=torch.long, device=x.device)


@torch.no_grad()
def p_sample_step(denoiser, x_t, t: int, cond, sched: NoiseSchedule,
                  generator: torch.Generator | None = None, clip_x0=None) -> torch.Tensor:
    """One reverse step x_t -> x_{t-1}; no noise is added at t = 1."""
    sched._check(t)
    x0_hat = denoiser(x_t, _step_tensor(t, x_t), cond)
    if clip_x0 is not None:
        x0_hat = x0_hat.clamp(*clip_x0)
    c0, ct = sched.posterior_coefficients(t)
    mean = c0 * x0_hat + ct * x_t
    if t == 1:
        return mean
    z = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype, device=x_t.device)
    return mean + float(np.sqrt(sched.posterior_variances[t - 1])) * z


@torch.no_grad()
def sample_loop(denoiser, cond, n_frames: int, n_channels: int, sched: NoiseSchedule,
                generator: torch.Generator | None = None, batch_size: int | None = None,
                clip_x0=None, dtype=torch.float32) -> torch.Tensor:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0.

    Returns shape ``(n_frames, n_channels)``, or ``(batch_size, n_frames,
    n_channels)`` when ``batch_size`` is given.
    """
    shape = (n_frames, n_channels) if batch_size is None else (batch_size, n_frames, n_channels)
    x = torch.randn(shape, generator=generator, dtype=dtype)
    for t in range(sched.num_steps, 0, -1):
        x = p_sample_step(denoiser, x, t, cond, sched, generator, clip_x0)
        if not torch.isfinite(x).all():
            raise NumericDivergenceError(f"non-finite values after reverse step {t}", step=t)
    return x

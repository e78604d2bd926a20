"""Variance-preserving forward process and DDIM sampling for x0-predictors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def abar(self, t):
        """Cumulative signal level at step ``t``; ``abar(0) == 1``."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep outside [0, {self.T}]")
        table = np.concatenate([[1.0], self.alpha_bars])
        return table[t]

    def beta(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep outside [1, {self.T}]")
        return self.betas[t - 1]


def make_linear_schedule(
    T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START, beta_end: float = DEFAULT_BETA_END
) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


def _per_item(values, ndim: int) -> np.ndarray:
    """Broadcast a scalar or per-batch-item array against (B, m, G) data."""
    v = np.asarray(values, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def q_sample(B0, t, eps, s: NoiseSchedule) -> np.ndarray:
    """``B_t = sqrt(abar_t) B0 + sqrt(1 - abar_t) eps``.

    ``t`` may be a scalar or one step per leading batch item.
    """
    B0 = np.asarray(B0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if B0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != data shape {B0.shape}")
    if np.any(np.asarray(t) < 1):
        raise ValueError("forward step must be >= 1")
    a = _per_item(s.abar(t), B0.ndim)
    return np.sqrt(a) * B0 + np.sqrt(1.0 - a) * eps


def eps_from_x0(B_t, x0_hat, t, s: NoiseSchedule) -> np.ndarray:
    B_t = np.asarray(B_t, dtype=np.float64)
    a = _per_item(s.abar(t), B_t.ndim)
    return (B_t - np.sqrt(a) * x0_hat) / np.sqrt(1.0 - a)


def x0_from_eps(B_t, eps, t, s: NoiseSchedule) -> np.ndarray:
    B_t = np.asarray(B_t, dtype=np.float64)
    a = _per_item(s.abar(t), B_t.ndim)
    return (B_t - np.sqrt(1.0 - a) * eps) / np.sqrt(a)


def posterior_mean(x0, B_t, t: int, s: NoiseSchedule):
    """Mean and variance factor of the reverse conditional ``q(B_{t-1} | B_t, B0)``.

    Returns ``(mean, beta_tilde)`` with ``beta_tilde = (1 - abar_{t-1}) / (1 - abar_t) * beta_t``.
    """
    if t < 2 or t > s.T:
        raise ValueError("posterior is defined for 2 <= t <= T")
    beta = s.beta(t)
    a_t, a_prev = s.abar(t), s.abar(t - 1)
    c0 = np.sqrt(a_prev) * beta / (1.0 - a_t)
    ct = np.sqrt(1.0 - beta) * (1.0 - a_prev) / (1.0 - a_t)
    var = (1.0 - a_prev) / (1.0 - a_t) * beta
    return c0 * np.asarray(x0) + ct * np.asarray(B_t), var


def ddim_step(B_t, x0_hat, t: int, t_next: int, eta: float, rng, s: NoiseSchedule, eps_hat=None) -> np.ndarray:
    """Move from step ``t`` to ``t_next < t`` (``t_next = 0`` is the data end).

    With ``eta = 0`` no random numbers are drawn. ``eps_hat`` defaults to the
    noise implied by ``x0_hat``.
    """
    if not t_next < t:
        raise ValueError(f"DDIM step must decrease the timestep ({t} -> {t_next})")
    if eps_hat is None:
        eps_hat = eps_from_x0(B_t, x0_hat, t, s)
    a_t, a_next = float(s.abar(t)), float(s.abar(t_next))
    if eta == 0:
        return np.sqrt(a_next) * x0_hat + np.sqrt(1.0 - a_next) * eps_hat
    sigma = eta * np.sqrt((1.0 - a_next) / (1.0 - a_t)) * np.sqrt(1.0 - a_t / a_next)
    direction = np.sqrt(max(1.0 - a_next - sigma**2, 0.0)) * eps_hat
    return np.sqrt(a_next) * x0_hat + direction + sigma * rng.standard_normal(np.shape(B_t))


def apply_cfg(eps_cond, eps_uncond, w: float) -> np.ndarray:
    """Classifier-free guidance in noise space: ``(1 + w) eps_c - w eps_u``."""
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("conditional and unconditional predictions differ in shape")
    if w == 0:
        return eps_cond
    return (1.0 + w) * eps_cond - w * eps_uncond


def timesteps(K: int, T: int) -> np.ndarray:
    """K evenly spaced steps from T downward, strictly decreasing."""
    if not 1 <= K <= T:
        raise ValueError(f"need 1 <= K <= T, got K={K}, T={T}")
    ts = np.round(T - np.arange(K) * (T / K)).astype(int)
    return ts


@dataclass
class SamplerConfig:
    steps: int = 100
    eta: float = 0.0
    guidance: float = 0.0
    self_condition: bool = True
    seed: int = 0
    schedule: tuple | None = None

    def timesteps(self, T: int) -> np.ndarray:
        ts = np.asarray(self.schedule, dtype=int) if self.schedule is not None else timesteps(self.steps, T)
        if np.any(np.diff(ts) >= 0) or ts[0] > T or ts[-1] < 1:
            raise ValueError("timesteps must be strictly decreasing within [1, T]")
        return ts


class X0Model(Protocol):
    def __call__(self, B_t: np.ndarray, B_sc: np.ndarray, B_ctrl: np.ndarray, t, cond, null: bool = False) -> np.ndarray:
        ...


def sample(
    model: X0Model | Callable,
    cond,
    B_ctrl: np.ndarray,
    cfg: SamplerConfig,
    s: NoiseSchedule,
    shape: tuple | None = None,
) -> np.ndarray:
    """Run the reverse DDIM chain from pure noise and return the generated batch.

    ``model(B_t, B_sc, B_ctrl, t, cond, null=...)`` returns an x0 estimate;
    ``null=True`` requests the metadata-masked branch (the control batch is
    always passed). With guidance the guided x0 is clipped at zero so the
    output stays nonnegative.
    """
    B_ctrl = np.asarray(B_ctrl, dtype=np.float64)
    shape = shape or B_ctrl.shape
    rng = np.random.default_rng(cfg.seed)
    B = rng.standard_normal(shape)
    x0_prev = np.zeros(shape)
    ts = cfg.timesteps(s.T)
    for k, t in enumerate(ts):
        t = int(t)
        t_next = int(ts[k + 1]) if k + 1 < len(ts) else 0
        sc = x0_prev if cfg.self_condition else np.zeros(shape)
        x0 = model(B, sc, B_ctrl, t, cond, null=False)
        eps = None
        if cfg.guidance != 0:
            x0_u = model(B, sc, B_ctrl, t, cond, null=True)
            eps = apply_cfg(eps_from_x0(B, x0, t, s), eps_from_x0(B, x0_u, t, s), cfg.guidance)
            x0 = np.maximum(x0_from_eps(B, eps, t, s), 0.0)
            eps = eps_from_x0(B, x0, t, s)
        B = ddim_step(B, x0, t, t_next, cfg.eta, rng, s, eps_hat=eps)
        x0_prev = x0
    return np.maximum(B, 0.0)

"""Noise schedules, the exact Gaussian-mixture noise predictor and DDIM/DDPM steps.

All step functions broadcast over leading batch dimensions: ``x`` may be a
single ``(D,)`` state or a ``(N, D)`` stack evaluated at one shared timestep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from procreate_lab.errors import ParameterError


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels ``alpha_bar[0..T]`` of a linear-beta forward process."""

    total_steps: int
    beta_start: float
    beta_end: float
    alpha_bar: np.ndarray = field(repr=False)

    def alpha(self, t: int) -> float:
        if not 0 <= t <= self.total_steps:
            raise ParameterError(f"timestep {t} outside [0, {self.total_steps}]")
        return float(self.alpha_bar[t])

    def to_dict(self) -> dict:
        return {"T": self.total_steps, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    T = int(T)
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    if not alpha_bar[-1] >= np.finfo(np.float64).tiny:
        raise ParameterError("cumulative signal level underflows; use fewer steps or smaller betas")
    alpha_bar.flags.writeable = False
    return NoiseSchedule(T, float(beta_start), float(beta_end), alpha_bar)


@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic Gaussian mixture; ``component_std`` may contain zeros (point masses)."""

    weights: np.ndarray
    means: np.ndarray
    component_std: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        sd = np.asarray(self.component_std, dtype=np.float64).reshape(-1)
        if mu.ndim != 2 or mu.shape[0] < 1 or mu.shape[1] < 1:
            raise ParameterError("means must be a non-empty (K, D) array")
        K = mu.shape[0]
        if sd.size == 1 and K > 1:
            sd = np.full(K, sd[0])
        if w.shape != (K,) or sd.shape != (K,):
            raise ParameterError(f"weights and component_std must have length K={K}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ParameterError("weights must be nonnegative and sum to 1")
        if np.any(sd < 0) or not np.all(np.isfinite(sd)):
            raise ParameterError("component_std must be finite and nonnegative")
        if not np.all(np.isfinite(mu)):
            raise ParameterError("means must be finite")
        for name, arr in (("weights", w), ("means", mu), ("component_std", sd)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.means[comp] + self.component_std[comp, None] * noise

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "stds": self.component_std.tolist(),
        }


def ring_mixture(K: int, std: float, spacing: float = 1.0) -> GaussianMixture:
    """Equal-weight mixture with means on an origin-centred ring, adjacent means ``spacing`` apart."""
    if K < 1:
        raise ParameterError("K must be >= 1")
    radius = spacing / (2.0 * np.sin(np.pi / K)) if K > 1 else spacing
    angles = 2.0 * np.pi * np.arange(K) / K
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return GaussianMixture(np.full(K, 1.0 / K), means, np.full(K, float(std)))


def mixture_score_terms(x: np.ndarray, alpha: float, mixture: GaussianMixture):
    """Responsibilities, per-component scores and variances of the noised mixture.

    The noised marginal has component means ``sqrt(alpha) * mu_k`` and isotropic
    variances ``alpha * sigma_k**2 + (1 - alpha)``. Returns ``(log_resp, comp_score,
    var)`` with shapes ``(..., K)``, ``(..., K, D)`` and ``(K,)``; the score of the
    marginal is ``sum_k resp_k * comp_score_k``.
    """
    var = alpha * mixture.component_std**2 + (1.0 - alpha)
    diff = np.sqrt(alpha) * mixture.means - x[..., None, :]
    comp_score = diff / var[:, None]
    D = mixture.dim
    with np.errstate(divide="ignore"):
        log_w = np.log(mixture.weights)
    log_comp = log_w - 0.5 * (np.sum(diff * diff, axis=-1) / var + D * np.log(2.0 * np.pi * var))
    log_resp = log_comp - logsumexp(log_comp, axis=-1, keepdims=True)
    return log_resp, comp_score, var


def _check_point(x, schedule: NoiseSchedule, t: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= t <= schedule.total_steps:
        raise ParameterError(f"timestep {t} outside [0, {schedule.total_steps}]")
    return x


def epsilon_gmm(x, t: int, schedule: NoiseSchedule, mixture: GaussianMixture) -> np.ndarray:
    """Exact noise prediction ``-sqrt(1 - alpha_t) * grad log q_t(x)``."""
    x = _check_point(x, schedule, t)
    if t == 0:
        raise ParameterError("epsilon is undefined at t=0 (no noise to predict)")
    if x.shape[-1] != mixture.dim:
        raise ParameterError(f"state dimension {x.shape[-1]} != mixture dimension {mixture.dim}")
    alpha = schedule.alpha(t)
    log_resp, comp_score, _ = mixture_score_terms(x, alpha, mixture)
    score = np.einsum("...k,...kd->...d", np.exp(log_resp), comp_score)
    return -np.sqrt(1.0 - alpha) * score


def predict_x0_one_step(x, eps, t: int, schedule: NoiseSchedule) -> np.ndarray:
    x = _check_point(x, schedule, t)
    if t < 1:
        raise ParameterError("one-step prediction needs t >= 1")
    alpha = schedule.alpha(t)
    return (x - np.sqrt(1.0 - alpha) * eps) / np.sqrt(alpha)


def ddim_step(x, eps, t: int, t_next: int, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM transition from ``t`` to ``t_next``."""
    if not 0 <= t_next < t:
        raise ParameterError(f"DDIM step needs 0 <= t_next < t, got t={t}, t_next={t_next}")
    x0 = predict_x0_one_step(x, eps, t, schedule)
    alpha_next = schedule.alpha(t_next)
    return np.sqrt(alpha_next) * x0 + np.sqrt(1.0 - alpha_next) * eps


def ddpm_posterior_std(t: int, t_next: int, schedule: NoiseSchedule) -> float:
    a_t, a_next = schedule.alpha(t), schedule.alpha(t_next)
    var = (1.0 - a_next) / (1.0 - a_t) * (1.0 - a_t / a_next)
    return float(np.sqrt(max(var, 0.0)))


def ddpm_step(x, eps, t: int, schedule: NoiseSchedule, rng_seed: int, t_next: Optional[int] = None) -> np.ndarray:
    """Ancestral step with the posterior variance of ``q(x_{t_next} | x_t, x_0)``.

    ``t_next`` defaults to ``t - 1``; on a strided grid this is the eta = 1 member
    of the DDIM family. The noise draw is zero when ``t_next`` lands on alpha = 1.
    """
    if t_next is None:
        t_next = t - 1
    if not 0 <= t_next < t:
        raise ParameterError(f"DDPM step needs 0 <= t_next < t, got t={t}, t_next={t_next}")
    x0 = predict_x0_one_step(x, eps, t, schedule)
    alpha_next = schedule.alpha(t_next)
    sigma = ddpm_posterior_std(t, t_next, schedule)
    out = np.sqrt(alpha_next) * x0 + np.sqrt(max(1.0 - alpha_next - sigma**2, 0.0)) * eps
    if sigma > 0.0:
        out = out + sigma * np.random.default_rng(rng_seed).standard_normal(np.shape(out))
    return out


def timestep_grid(start: int, steps: int) -> list[int]:
    """``steps`` transitions from ``start`` to 0 on an evenly spaced integer grid."""
    grid = np.round(np.linspace(start, 0, steps + 1)).astype(int)
    # when steps > start rounding repeats values; keep strict descent
    return [int(v) for v in dict.fromkeys(grid.tolist())]


# (x_t, t, t_next, eps) -> modified eps
GuidanceHook = Callable[[np.ndarray, int, int, np.ndarray], np.ndarray]


def run_sampler(
    kind: str,
    steps: int,
    schedule: NoiseSchedule,
    mixture: GaussianMixture,
    guidance_hook: Optional[GuidanceHook] = None,
    rng_seed: int = 0,
) -> np.ndarray:
    """Draw one sample by denoising seeded ``x_T ~ N(0, I)`` down to ``x_0``."""
    if kind not in ("ddim", "ddpm"):
        raise ParameterError(f"unknown sampler kind {kind!r}")
    if int(steps) != steps or not 1 <= steps <= schedule.total_steps:
        raise ParameterError(f"steps must be in [1, {schedule.total_steps}], got {steps}")
    rng = np.random.default_rng(rng_seed)
    x = rng.standard_normal(mixture.dim)
    grid = timestep_grid(schedule.total_steps, int(steps))
    for t, t_next in zip(grid[:-1], grid[1:]):
        eps = epsilon_gmm(x, t, schedule, mixture)
        if guidance_hook is not None:
            eps = guidance_hook(x, t, t_next, eps)
        if kind == "ddim":
            x = ddim_step(x, eps, t, t_next, schedule)
        else:
            x = ddpm_step(x, eps, t, schedule, int(rng.integers(2**63)), t_next=t_next)
    return x


def sample_seeds(rng_seed: int, count: int) -> list[int]:
    """Per-sample sampler seeds fanned out from one run seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(rng_seed).spawn(count)]


def rollout_batch(kind: str, steps: int, schedule: NoiseSchedule, mixture: GaussianMixture,
                  n: int, rng_seed: int) -> np.ndarray:
    """Vectorised unguided sampling of ``n`` points (shared noise stream, not per-sample seeds)."""
    rng = np.random.default_rng(rng_seed)
    x = rng.standard_normal((n, mixture.dim))
    grid = timestep_grid(schedule.total_steps, steps)
    for t, t_next in zip(grid[:-1], grid[1:]):
        eps = epsilon_gmm(x, t, schedule, mixture)
        if kind == "ddim":
            x = ddim_step(x, eps, t, t_next, schedule)
        else:
            x = ddpm_step(x, eps, t, schedule, int(rng.integers(2**63)), t_next=t_next)
    return x


__all__: Sequence[str] = (
    "NoiseSchedule", "GaussianMixture", "make_linear_schedule", "ring_mixture",
    "mixture_score_terms", "epsilon_gmm", "predict_x0_one_step", "ddim_step", "ddpm_step",
    "ddpm_posterior_std", "timestep_grid", "run_sampler", "sample_seeds", "rollout_batch",
)

"""Propulsive-energy guidance with multi-step look-ahead, plus classifier guidance.

The guided noise prediction is ``eps' = eps + sqrt(1 - alpha_next) * clip(grad g)``
with ``g = gamma * max_i cos(f(x0_hat(x_t)), f(ref_i))``. Adding the energy
gradient to ``eps`` moves the implied clean sample *down* the similarity, i.e.
away from the closest reference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from procreate_lab import autodiff as ad
from procreate_lab.diffusion import (
    GaussianMixture,
    NoiseSchedule,
    epsilon_gmm,
    mixture_score_terms,
    run_sampler,
    sample_seeds,
    timestep_grid,
)
from procreate_lab.embedding import Embedder
from procreate_lab.errors import ConfigurationError, ParameterError
from procreate_lab.refstore import ReferenceSnapshot, ReferenceStore


@dataclass(frozen=True)
class GuidanceConfig:
    gamma: float = 0.0
    n_step: int = 5
    clip_norm: Optional[float] = None
    dynamic_growth: bool = True
    batch_size: int = 1

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ParameterError("gamma must be >= 0")
        if int(self.n_step) != self.n_step or self.n_step < 0:
            raise ParameterError("n_step must be a nonnegative integer")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ParameterError("clip_norm must be positive when set")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ParameterError("batch_size must be a positive integer")

    @property
    def active(self) -> bool:
        return self.n_step >= 1


@dataclass(frozen=True)
class ClassifierGuidanceConfig:
    target_component: int
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale >= 0:
            raise ParameterError("classifier guidance scale must be >= 0")


class EnergyValue(NamedTuple):
    value: float
    closest: int


# -- multi-step look-ahead ----------------------------------------------------

def lookahead_grid(t: int, n_step: int) -> list[int]:
    """Timesteps visited by the look-ahead: ``n_step`` even strides from ``t`` to 0."""
    if t < 1:
        raise ParameterError("look-ahead needs t >= 1")
    if n_step < 1:
        raise ParameterError("n_step = 0 means no guidance; there is no look-ahead to run")
    return timestep_grid(t, n_step)


def msla_predict_x0(x, t: int, n_step: int, schedule: NoiseSchedule, mixture: GaussianMixture):
    """Clean-sample prediction from ``n_step`` deterministic DDIM steps.

    Accepts an array or an ``autodiff.Var``; the result is traced when ``x`` is.
    The last transition lands on ``alpha_0 = 1`` so ``n_step=1`` is the one-step
    prediction.
    """
    grid = lookahead_grid(t, n_step)
    for t_cur, t_next in zip(grid[:-1], grid[1:]):
        eps = ad.mixture_eps(x, t_cur, schedule, mixture)
        if t_next == 0:
            x = ad.predict_x0(x, eps, t_cur, schedule)
        else:
            x = ad.ddim(x, eps, t_cur, t_next, schedule)
    return x


# -- energy -------------------------------------------------------------------

def energy_program(refs: ReferenceSnapshot, cfg: GuidanceConfig, embedder: Embedder, t: int,
                   schedule: NoiseSchedule, mixture: GaussianMixture):
    """The scalar map ``x_t -> g(x_t)`` as a differentiable program.

    The returned callable also exposes the most recent argmax via ``program.closest``.
    """
    ref_emb = refs.embeddings

    def program(x):
        x0 = msla_predict_x0(x, t, cfg.n_step, schedule, mixture)
        sims = ad.cosine_rows(embedder.trace(x0), ref_emb)
        best = ad.max_(sims)
        program.closest = best.meta["argmax"] if isinstance(best, ad.Var) else int(np.argmax(sims))
        return ad.scale(best, cfg.gamma)

    program.closest = None
    return program


def energy(x, t: int, refs: ReferenceSnapshot, cfg: GuidanceConfig, embedder: Embedder,
           schedule: NoiseSchedule, mixture: GaussianMixture) -> Optional[EnergyValue]:
    """``gamma * max_i cos(f(x0_hat), f(ref_i))`` and the argmax index.

    Returns ``None`` (guidance disabled) when the reference snapshot is empty.
    """
    if len(refs) == 0:
        return None
    prog = energy_program(refs, cfg, embedder, t, schedule, mixture)
    value = ad.evaluate(prog, x)
    return EnergyValue(value, prog.closest)


def energy_gradient(x, t: int, refs: ReferenceSnapshot, cfg: GuidanceConfig, embedder: Embedder,
                    schedule: NoiseSchedule, mixture: GaussianMixture):
    """``(value, closest_index, grad_x g)`` through the full look-ahead rollout."""
    prog = energy_program(refs, cfg, embedder, t, schedule, mixture)
    value, grad = ad.value_and_gradient(prog, x)
    return value, prog.closest, grad


def clip_gradient(gvec, clip_norm: Optional[float]) -> np.ndarray:
    gvec = np.asarray(gvec, dtype=np.float64)
    if clip_norm is None:
        return gvec
    if not clip_norm > 0:
        raise ParameterError("clip_norm must be positive")
    n = float(np.linalg.norm(gvec))
    if n <= clip_norm:
        return gvec
    return gvec * (clip_norm / n)


def guided_epsilon(x, t: int, t_next: int, refs: ReferenceSnapshot, cfg: GuidanceConfig,
                   embedder: Embedder, schedule: NoiseSchedule, mixture: GaussianMixture,
                   eps: Optional[np.ndarray] = None) -> np.ndarray:
    """Noise prediction with the additive propulsive term.

    ``eps`` may be passed in when the caller already evaluated the base predictor.
    With ``gamma == 0``, ``n_step == 0`` or an empty snapshot the base ``eps`` is
    returned unchanged.
    """
    if not 0 <= t_next < t:
        raise ParameterError(f"need 0 <= t_next < t, got t={t}, t_next={t_next}")
    if eps is None:
        eps = epsilon_gmm(x, t, schedule, mixture)
    if cfg.gamma == 0 or not cfg.active or len(refs) == 0:
        return eps
    _, _, grad = energy_gradient(x, t, refs, cfg, embedder, schedule, mixture)
    return eps + np.sqrt(1.0 - schedule.alpha(t_next)) * clip_gradient(grad, cfg.clip_norm)


def procreate_hook(refs: ReferenceSnapshot, cfg: GuidanceConfig, embedder: Embedder,
                   schedule: NoiseSchedule, mixture: GaussianMixture):
    """Sampler hook applying :func:`guided_epsilon` at every denoising step."""

    def hook(x, t, t_next, eps):
        return guided_epsilon(x, t, t_next, refs, cfg, embedder, schedule, mixture, eps=eps)

    return hook


def compose_hooks(*hooks):
    """Chain sampler hooks left to right; ``None`` entries are skipped."""
    active = [h for h in hooks if h is not None]
    if not active:
        return None

    def hook(x, t, t_next, eps):
        for h in active:
            eps = h(x, t, t_next, eps)
        return eps

    return hook


def sample_batch_procreate(
    count: int,
    refs: ReferenceStore,
    cfg: GuidanceConfig,
    embedder: Embedder,
    schedule: NoiseSchedule,
    mixture: GaussianMixture,
    sampler: str = "ddim",
    steps: int = 50,
    rng_seed: int = 0,
    base_hook=None,
) -> list[np.ndarray]:
    """Generate ``count`` samples in batches, growing ``refs`` between batches if configured.

    Sample ``i`` uses sampler seed ``sample_seeds(rng_seed, count)[i]`` whatever the
    guidance settings, so guided and baseline runs are paired noise-for-noise.
    ``base_hook`` (e.g. classifier guidance) is applied first, before the energy term.
    """
    if count < 1:
        raise ParameterError("count must be >= 1")
    if cfg.active and cfg.gamma > 0 and len(refs) == 0 and not cfg.dynamic_growth:
        raise ConfigurationError("references", "empty reference set with gamma > 0 and no dynamic growth")
    seeds = sample_seeds(rng_seed, count)
    out: list[np.ndarray] = []
    for start in range(0, count, cfg.batch_size):
        batch_seeds = seeds[start:start + cfg.batch_size]
        snap = refs.snapshot()
        hook = base_hook
        if cfg.active and cfg.gamma > 0 and len(snap) > 0:
            hook = compose_hooks(base_hook, procreate_hook(snap, cfg, embedder, schedule, mixture))
        batch = [run_sampler(sampler, steps, schedule, mixture, guidance_hook=hook, rng_seed=s)
                 for s in batch_seeds]
        out.extend(batch)
        if cfg.dynamic_growth:
            refs.add_batch(np.stack(batch), origin="generated")
    return out


# -- classifier guidance ------------------------------------------------------

def component_log_posterior(x, t: int, schedule: NoiseSchedule, mixture: GaussianMixture) -> np.ndarray:
    """``log p(k | x_t)`` under the noised mixture (exact noise-aware classifier)."""
    log_resp, _, _ = mixture_score_terms(np.asarray(x, dtype=np.float64), schedule.alpha(t), mixture)
    return log_resp


def classifier_loss_gradient(x, t: int, target: int, schedule: NoiseSchedule,
                             mixture: GaussianMixture) -> np.ndarray:
    """Gradient of the cross-entropy ``-log p(target | x_t)`` with respect to ``x_t``."""
    log_resp, s, _ = mixture_score_terms(np.asarray(x, dtype=np.float64), schedule.alpha(t), mixture)
    r = np.exp(log_resp)
    return -(s[..., target, :] - np.einsum("...k,...kd->...d", r, s))


def classifier_guided_epsilon(x, t: int, t_next: int, cfg: ClassifierGuidanceConfig,
                              schedule: NoiseSchedule, mixture: GaussianMixture,
                              eps: Optional[np.ndarray] = None) -> np.ndarray:
    if not 0 <= cfg.target_component < mixture.n_components:
        raise ParameterError(f"target component {cfg.target_component} out of range")
    if not 0 <= t_next < t:
        raise ParameterError(f"need 0 <= t_next < t, got t={t}, t_next={t_next}")
    if eps is None:
        eps = epsilon_gmm(x, t, schedule, mixture)
    if cfg.scale == 0:
        return eps
    grad = classifier_loss_gradient(x, t, cfg.target_component, schedule, mixture)
    return eps + cfg.scale * np.sqrt(1.0 - schedule.alpha(t_next)) * grad


def classifier_hook(cfg: ClassifierGuidanceConfig, schedule: NoiseSchedule, mixture: GaussianMixture):
    def hook(x, t, t_next, eps):
        return classifier_guided_epsilon(x, t, t_next, cfg, schedule, mixture, eps=eps)

    return hook

"""Deterministic diffusion stepping.

Noise schedule construction, single deterministic denoise/invert steps,
guided noise prediction, multi-step chains over the sampling sub-sequence,
and an analytic Gaussian noise model used as an exact oracle in tests.
Chains are built from tape primitives, so gradients flow through them.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np

from .autodiff import Tensor, _as_tensor, add, multiply, scale, subtract

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "GaussianAnalyticModel",
    "analytic_epsilon",
    "cfg_predict",
    "ddim_step",
    "ddim_invert_step",
    "invert_chain",
    "denoise_chain",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule plus the deterministic-sampling sub-sequence.

    ``alpha_bars`` has length ``t_train + 1`` with ``alpha_bars[0] == 1``;
    ``ddim_indices`` is the strictly increasing timestep sub-sequence the
    chains walk, starting at 0 and ending at ``t_train``.
    """

    t_train: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    ddim_steps: int
    ddim_indices: np.ndarray


def make_schedule(
    t_train: int = 100,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    ddim_steps: int = 20,
) -> NoiseSchedule:
    """Linear beta schedule with cumulative-product alpha-bars."""
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid beta range [{beta_start}, {beta_end}]")
    if not (1 <= ddim_steps <= t_train):
        raise ValueError(f"ddim_steps {ddim_steps} outside [1, {t_train}]")
    betas = np.linspace(beta_start, beta_end, t_train)
    alpha_bars = np.concatenate(([1.0], np.cumprod(1.0 - betas)))
    indices = np.array(
        [int(round(k * t_train / ddim_steps)) for k in range(ddim_steps + 1)],
        dtype=np.intp,
    )
    if np.any(np.diff(indices) <= 0):
        raise ValueError("sampling indices are not strictly increasing")
    betas.flags.writeable = False
    alpha_bars.flags.writeable = False
    indices.flags.writeable = False
    return NoiseSchedule(
        t_train=t_train,
        betas=betas,
        alpha_bars=alpha_bars,
        ddim_steps=ddim_steps,
        ddim_indices=indices,
    )


class GaussianAnalyticModel:
    """Exact noise predictor for N(mu, diag(sigma)) data.

    Stands in for a trained predictor wherever an exact reference is
    needed; conditioning inputs are accepted and ignored.
    """

    variant = "analytic-gaussian"

    def __init__(self, mu, sigma_diag, schedule: NoiseSchedule):
        mu = np.asarray(mu, dtype=np.float64)
        sigma_diag = np.asarray(sigma_diag, dtype=np.float64)
        if mu.shape != sigma_diag.shape or mu.ndim != 1:
            raise ValueError("mu and sigma_diag must be equal-length vectors")
        if np.any(sigma_diag <= 0.0):
            raise ValueError("sigma_diag must be strictly positive")
        mu.flags.writeable = False
        sigma_diag.flags.writeable = False
        self.mu = mu
        self.sigma_diag = sigma_diag
        self.schedule = schedule

    def predict(self, z, t, cond=None) -> Tensor:
        return analytic_epsilon(self, z, float(self.schedule.alpha_bars[int(t)]))


def analytic_epsilon(model: GaussianAnalyticModel, z, abar_t: float) -> Tensor:
    """Exact noise estimate sqrt(1-a) * (a*Sigma + (1-a)I)^{-1} (z - sqrt(a)*mu).

    Sigma is diagonal so the inverse is elementwise; the result is the
    negative scaled score of the diffused Gaussian marginal.
    """
    if not (0.0 < abar_t <= 1.0):
        raise ValueError(f"abar_t {abar_t} outside (0, 1]")
    coeff = sqrt(1.0 - abar_t) / (abar_t * model.sigma_diag + (1.0 - abar_t))
    shift = sqrt(abar_t) * model.mu
    coeff.flags.writeable = False
    shift.flags.writeable = False
    return multiply(subtract(_as_tensor(z), shift), coeff)


def cfg_predict(model, z, t, cond, null_cond=None, w: float = 1.0) -> Tensor:
    """Guided prediction w * eps(z,t,cond) + (1-w) * eps(z,t,null_cond).

    The endpoints w=1 and w=0 return the conditional / unconditional
    branch directly, so no extrapolation arithmetic touches them.
    """
    w = float(w)
    if w == 1.0:
        return model.predict(z, t, cond)
    if w == 0.0:
        if null_cond is None:
            raise ValueError("w=0 requires a null conditioning input")
        return model.predict(z, t, null_cond)
    if null_cond is None:
        raise ValueError("guidance with w != 1 requires a null conditioning input")
    eps_c = model.predict(z, t, cond)
    eps_n = model.predict(z, t, null_cond)
    if eps_c.shape != eps_n.shape:
        raise ValueError("conditional and unconditional predictions disagree in shape")
    return add(scale(eps_c, w), scale(eps_n, 1.0 - w))


def _check_abars(abar_a: float, abar_b: float) -> None:
    if not (0.0 < abar_a <= 1.0 and 0.0 < abar_b <= 1.0):
        raise ValueError(f"alpha-bar values {abar_a}, {abar_b} outside (0, 1]")


def ddim_step(z_t, eps, abar_t: float, abar_prev: float) -> Tensor:
    """One deterministic denoise step t -> t-1 with a given noise estimate.

    z_prev = sqrt(abar_prev) * (z_t - sqrt(1-abar_t) * eps) / sqrt(abar_t)
             + sqrt(1-abar_prev) * eps
    """
    _check_abars(abar_t, abar_prev)
    c1 = sqrt(abar_prev / abar_t)
    c2 = sqrt(1.0 - abar_prev) - c1 * sqrt(1.0 - abar_t)
    return add(scale(_as_tensor(z_t), c1), scale(_as_tensor(eps), c2))


def ddim_invert_step(z_t, eps, abar_t: float, abar_next: float) -> Tensor:
    """One deterministic inversion step t -> t+1; algebraic inverse of
    :func:`ddim_step` when the same noise estimate is reused."""
    _check_abars(abar_t, abar_next)
    c1 = sqrt(abar_next / abar_t)
    c2 = sqrt(1.0 - abar_next) - c1 * sqrt(1.0 - abar_t)
    return add(scale(_as_tensor(z_t), c1), scale(_as_tensor(eps), c2))


def invert_chain(
    model,
    schedule: NoiseSchedule,
    z_0,
    stop_index: int,
    cond,
    null_cond=None,
    w: float = 1.0,
) -> list[Tensor]:
    """Walk the sampling sub-sequence upward from a clean latent.

    Returns the trajectory [z at index 0, ..., z at index ``stop_index``];
    the noise estimate for each step is evaluated at the current latent
    (first-order inversion).
    """
    if not (1 <= stop_index <= schedule.ddim_steps):
        raise ValueError(f"stop_index {stop_index} outside [1, {schedule.ddim_steps}]")
    z = _as_tensor(z_0)
    trajectory = [z]
    for i in range(stop_index):
        t = int(schedule.ddim_indices[i])
        t_next = int(schedule.ddim_indices[i + 1])
        eps = cfg_predict(model, z, t, cond, null_cond, w)
        z = ddim_invert_step(
            z, eps, float(schedule.alpha_bars[t]), float(schedule.alpha_bars[t_next])
        )
        trajectory.append(z)
    return trajectory


def denoise_chain(
    model,
    schedule: NoiseSchedule,
    z_s,
    start_index: int,
    cond,
    null_cond=None,
    w: float = 1.0,
) -> Tensor:
    """Walk the sampling sub-sequence downward from index ``start_index``.

    ``start_index`` 0 is the empty chain (identity). The whole chain is
    differentiable with respect to the starting latent.
    """
    if not (0 <= start_index <= schedule.ddim_steps):
        raise ValueError(f"start_index {start_index} outside [0, {schedule.ddim_steps}]")
    z = _as_tensor(z_s)
    for i in range(start_index, 0, -1):
        t = int(schedule.ddim_indices[i])
        t_prev = int(schedule.ddim_indices[i - 1])
        eps = cfg_predict(model, z, t, cond, null_cond, w)
        z = ddim_step(
            z, eps, float(schedule.alpha_bars[t]), float(schedule.alpha_bars[t_prev])
        )
    return z

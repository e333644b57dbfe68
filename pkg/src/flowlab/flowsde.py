"""Reverse-time sampling machinery for rectified-flow models.

Time runs 1 -> 0 on a uniform grid; the velocity field v(x, t, prompt) is
the only model-dependent input. Deterministic steps follow the probability
flow; stochastic steps inject noise through the equivalent reverse-time
dynamics, using the interpolation identity

    score(x, t) = -(x + (1 - t) * v) / t

to turn a velocity into a score. Stochastic transitions are Gaussian with a
known mean and isotropic std, which is what makes policy ratios computable
later. A closed-form Gaussian oracle provides exact marginals, velocities
and scores for validating all of it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diffcore import RngStream


class FlowSdeError(ValueError):
    """Domain or contract violation in the sampling layer."""


VelocityFn = Callable[[np.ndarray, float, int], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    """Uniform descending time grid t_k = 1 - k/T with an SDE-eligible window."""

    steps: int = 25
    eta: float = 0.7
    t_min: float = 0.04
    t_max: float = 0.96

    def __post_init__(self):
        if self.steps < 2:
            raise FlowSdeError("schedule needs at least 2 steps")
        if not (0.0 < self.t_min < self.t_max < 1.0):
            raise FlowSdeError(
                f"need 0 < t_min < t_max < 1, got [{self.t_min}, {self.t_max}]"
            )
        if self.eta <= 0:
            raise FlowSdeError("eta must be positive")

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    def grid(self) -> np.ndarray:
        return 1.0 - np.arange(self.steps + 1) / self.steps

    def time_at(self, k: int) -> float:
        if not 0 <= k <= self.steps:
            raise FlowSdeError(f"grid index {k} outside 0..{self.steps}")
        return 1.0 - k / self.steps

    def eligible_indices(self) -> list[int]:
        """Step indices whose time lies in the SDE window."""
        eps = 1e-12
        return [
            k
            for k in range(self.steps)
            if self.t_min - eps <= self.time_at(k) <= self.t_max + eps
        ]

    def sigma(self, t: float) -> float:
        return sigma(t, self.eta, self.t_min, self.t_max)

    def lambda_at(self, k: int) -> float:
        t = self.time_at(k)
        return lambda_rect(t, self.dt, self.sigma(t))


def sigma(t: float, eta: float, t_min: float, t_max: float) -> float:
    """Noise magnitude eta * sqrt(t / (1 - t)), defined on the SDE window only."""
    eps = 1e-12
    if not (t_min - eps <= t <= t_max + eps):
        raise FlowSdeError(f"sigma: t={t} outside SDE window [{t_min}, {t_max}]")
    return eta * np.sqrt(t / (1.0 - t))


def lambda_rect(t: float, dt: float, sigma_t: float) -> float:
    """Time-dependent scale of the one-step policy-gradient signal.

    lambda(t) = sqrt(dt)/sigma_t + sigma_t*sqrt(dt)*(1-t)/(2t); dividing
    advantages by it equalizes gradient magnitude across assigned timesteps.
    """
    if not 0.0 < t < 1.0:
        raise FlowSdeError(f"lambda_rect: t={t} outside (0,1)")
    if sigma_t <= 0 or dt <= 0:
        raise FlowSdeError("lambda_rect: sigma_t and dt must be positive")
    root = np.sqrt(dt)
    return root / sigma_t + sigma_t * root * (1.0 - t) / (2.0 * t)


@dataclass(frozen=True)
class TransitionKernel:
    """Isotropic Gaussian transition: next state ~ N(mean, std^2 I)."""

    mean: np.ndarray
    std: float

    def __post_init__(self):
        if self.std <= 0:
            raise FlowSdeError("kernel std must be positive")


def ode_step(x: np.ndarray, v: np.ndarray, dt: float) -> np.ndarray:
    """Deterministic update x(t - dt) = x - dt * v."""
    return x - dt * v


def sde_mean(x: np.ndarray, t: float, v: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Mean of the stochastic transition leaving (x, t).

    The score correction uses score = -(x + (1-t)v)/t, so the drift is
    v + sigma^2/(2t) * (x + (1-t)v); correctness is pinned down by the
    marginal-equivalence tests rather than assumed.
    """
    s = schedule.sigma(t)
    return x - schedule.dt * (v + (s * s / (2.0 * t)) * (x + (1.0 - t) * v))


def sde_step(
    x: np.ndarray, t: float, v: np.ndarray, z: np.ndarray, schedule: NoiseSchedule
) -> tuple[np.ndarray, TransitionKernel]:
    """Stochastic update; returns the next state and its transition kernel."""
    s = schedule.sigma(t)  # raises outside the window
    mean = sde_mean(x, t, v, schedule)
    std = s * np.sqrt(schedule.dt)
    return mean + std * z, TransitionKernel(mean=mean, std=float(std))


def transition_logprob(kernel: TransitionKernel, x_next: np.ndarray):
    """Isotropic Gaussian log-density of x_next under the kernel.

    1-D inputs give a float; a (n,d) batch gives per-row log-densities.
    """
    mean = np.asarray(kernel.mean, dtype=np.float64)
    x_next = np.asarray(x_next, dtype=np.float64)
    if kernel.std <= 0:
        raise FlowSdeError("kernel std must be positive")
    if mean.shape != x_next.shape:
        raise FlowSdeError(f"shape mismatch: kernel {mean.shape} vs state {x_next.shape}")
    d = x_next.shape[-1]
    var = kernel.std * kernel.std
    sq = ((x_next - mean) ** 2).sum(axis=-1)
    out = -0.5 * d * np.log(2.0 * np.pi * var) - sq / (2.0 * var)
    return float(out) if out.ndim == 0 else out


def score_from_velocity(x: np.ndarray, v: np.ndarray, t: float) -> np.ndarray:
    """Interpolation identity linking score and velocity; singular at t = 0."""
    if t <= 0:
        raise FlowSdeError("score_from_velocity: t must be positive")
    return -(x + (1.0 - t) * v) / t


@dataclass(frozen=True)
class SdeStepRecord:
    """Bookkeeping for one stochastic transition inside a trajectory."""

    index: int
    kernel: TransitionKernel
    logp: float


@dataclass(frozen=True)
class Trajectory:
    """One reverse-time path with its recorded stochastic transition(s).

    Isotemporal sampling records exactly one SDE step; the general mode
    (sde_set) keeps one record per stochastic index, in ascending order.
    """

    states: np.ndarray  # (T+1, d)
    prompt_id: int
    sde_steps: tuple[SdeStepRecord, ...]

    def _single(self) -> SdeStepRecord:
        if len(self.sde_steps) != 1:
            raise FlowSdeError(
                f"trajectory holds {len(self.sde_steps)} SDE steps; isotemporal accessors need exactly one"
            )
        return self.sde_steps[0]

    @property
    def sde_index(self) -> int:
        return self._single().index

    @property
    def kernel_old(self) -> TransitionKernel:
        return self._single().kernel

    @property
    def logp_old(self) -> float:
        return self._single().logp

    def realized_next(self, k: int | None = None) -> np.ndarray:
        k = self.sde_index if k is None else k
        return self.states[k + 1]


def sample_mixed_trajectory(
    velocity_fn: VelocityFn,
    prompt_id: int,
    dim: int,
    schedule: NoiseSchedule,
    sde_index: int | None,
    stream: RngStream,
    sde_set: Sequence[int] | None = None,
) -> Trajectory:
    """Sample one reverse path: SDE exactly at `sde_index`, ODE elsewhere.

    Pass `sde_set` instead to take stochastic steps at several indices
    (the general mixed form; used by equivalence tests). Initial noise and
    per-SDE-step noise come from `stream` in a fixed order, so the same
    stream identity reproduces the trajectory bit-exactly.
    """
    if sde_set is None:
        if sde_index is None:
            raise FlowSdeError("need sde_index or sde_set")
        sde_set = [sde_index]
    ks = sorted(set(int(k) for k in sde_set))
    eligible = set(schedule.eligible_indices())
    for k in ks:
        if k not in eligible:
            raise FlowSdeError(
                f"step {k} (t={schedule.time_at(k) if 0 <= k <= schedule.steps else '?'}) not SDE-eligible"
            )
    x = stream.normal(dim)
    states = np.empty((schedule.steps + 1, dim))
    states[0] = x
    records: list[SdeStepRecord] = []
    for k in range(schedule.steps):
        t = schedule.time_at(k)
        v = velocity_fn(x, t, prompt_id)
        if k in eligible and k in ks:
            z = stream.normal(dim)
            x, kernel = sde_step(x, t, v, z, schedule)
            records.append(
                SdeStepRecord(index=k, kernel=kernel, logp=transition_logprob(kernel, x))
            )
        else:
            x = ode_step(x, v, schedule.dt)
        states[k + 1] = x
    return Trajectory(states=states, prompt_id=prompt_id, sde_steps=tuple(records))


def sample_batch(
    velocity_fn: VelocityFn,
    prompt_id: int,
    dim: int,
    n: int,
    schedule: NoiseSchedule,
    stream: RngStream,
    mode: str = "ode",
    sde_index: int | None = None,
) -> np.ndarray:
    """Vectorized terminal sampling for n paths of one prompt.

    mode: "ode" (deterministic everywhere), "sde" (stochastic at every
    eligible step), or "mixed" (stochastic at a single index, default the
    middle eligible one).
    """
    if mode not in ("ode", "sde", "mixed"):
        raise FlowSdeError(f"unknown sampling mode '{mode}'")
    eligible = schedule.eligible_indices()
    if mode == "mixed":
        k_star = eligible[len(eligible) // 2] if sde_index is None else sde_index
        if k_star not in eligible:
            raise FlowSdeError(f"mixed-mode index {k_star} not eligible")
    x = stream.normal(n, dim)
    for k in range(schedule.steps):
        t = schedule.time_at(k)
        v = velocity_fn(x, t, prompt_id)
        stochastic = (mode == "sde" and k in eligible) or (mode == "mixed" and k == k_star)
        if stochastic:
            x, _ = sde_step(x, t, v, stream.normal(n, dim), schedule)
        else:
            x = ode_step(x, v, schedule.dt)
    return x


class GaussianOracle:
    """Closed-form marginals, velocity and score for Gaussian data x0 ~ N(mu0, Sig0).

    Under x_t = (1-t) x0 + t eps the time-t marginal is
    N((1-t) mu0, (1-t)^2 Sig0 + t^2 I); the posterior velocity E[eps - x0 | x_t]
    and the score are exact linear functions of x. Used as the ground-truth
    velocity field in equivalence and fidelity tests.
    """

    def __init__(self, mu0, sig0):
        self.mu0 = np.asarray(mu0, dtype=np.float64)
        self.sig0 = np.asarray(sig0, dtype=np.float64)
        d = self.mu0.shape[0]
        if self.sig0.shape != (d, d):
            raise FlowSdeError("covariance shape must match mean dimension")
        eig = np.linalg.eigvalsh(self.sig0)
        if eig.min() <= 0:
            raise FlowSdeError("data covariance must be positive definite")
        self.dim = d

    def marginal(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        eye = np.eye(self.dim)
        return (1.0 - t) * self.mu0, (1.0 - t) ** 2 * self.sig0 + t * t * eye

    def velocity(self, x: np.ndarray, t: float, prompt_id: int = 0) -> np.ndarray:
        mean, cov = self.marginal(t)
        a = (t * np.eye(self.dim) - (1.0 - t) * self.sig0) @ np.linalg.inv(cov)
        return -self.mu0 + (np.asarray(x) - mean) @ a.T

    def score(self, x: np.ndarray, t: float) -> np.ndarray:
        mean, cov = self.marginal(t)
        return -(np.asarray(x) - mean) @ np.linalg.inv(cov).T


def gaussian_oracle(mu0, sig0) -> GaussianOracle:
    return GaussianOracle(mu0, sig0)

"""Group-relative policy optimization for the flow model.

Each iteration freezes theta_old, samples G groups of N trajectories (one
stochastic transition per trajectory at the group's assigned grid index,
deterministic steps elsewhere), scores only the terminal samples, and
standardizes rewards within each group. The clipped surrogate compares the
current transition density against the recorded one at the single stochastic
step; advantages are divided by lambda(t_k) so the gradient scale does not
depend on which timestep a group drew. No KL term for the flow policy.

Clipping note: the printed objective form puts the ratio/lambda quotient
inside the clip band around 1, which for lambda well below 1 clips every
sample. Here the raw ratio is clipped and 1/lambda scales the advantage,
which preserves the normalization intent with a meaningful trust region.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffcore import (
    AdamState,
    RngStream,
    Tensor,
    adam_step,
    backward,
    clamp,
    exp,
    grad_norm,
    minimum,
    square,
    sum_rows,
    tsum,
)
from .flowsde import (
    NoiseSchedule,
    Trajectory,
    TransitionKernel,
    ode_step,
    sde_mean,
    sde_step,
    transition_logprob,
)
from .genmodel import FlowNet, Task
from .rewards import RewardWeights, component_matrix, reward_fn_for

log = logging.getLogger(__name__)


class GrpoError(ValueError):
    """Invalid configuration or aborted training run."""


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    n_groups: int = 8
    clip_eps: float = 0.2
    lr: float = 1e-3
    iterations: int = 300
    eps_std: float = 1e-6
    inner_steps: int = 1
    collapse_window: int = 20
    collapse_arm_level: float = 0.5

    def __post_init__(self):
        if self.group_size < 2:
            raise GrpoError("group size must be at least 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise GrpoError("clip epsilon must lie in (0, 1)")
        if self.n_groups < 1 or self.iterations < 0 or self.inner_steps < 1:
            raise GrpoError("n_groups >= 1, iterations >= 0, inner_steps >= 1")


@dataclass
class RolloutGroup:
    """N same-prompt rollouts sharing one stochastic grid index k.

    x_t/x_next bracket the stochastic transition; mean_old and logp_old are
    the behavior policy's kernel statistics recorded during the rollout.
    """

    prompt_id: int
    k: int
    x_t: np.ndarray  # (N, d) states entering the SDE step
    x_next: np.ndarray  # (N, d) realized next states
    mean_old: np.ndarray  # (N, d) kernel means under theta_old
    std: float  # kernel std (shared: same t_k)
    logp_old: np.ndarray  # (N,)
    terminal: np.ndarray  # (N, d)
    rewards: np.ndarray = field(default_factory=lambda: np.zeros(0))
    components: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))


def assign_isotemporal(n_groups: int, schedule: NoiseSchedule, iteration: int) -> list[int]:
    """Distinct, evenly strided SDE indices for this iteration's groups,
    rotating with the iteration counter so every eligible index is visited."""
    eligible = schedule.eligible_indices()
    m = len(eligible)
    if m == 0:
        raise GrpoError("no SDE-eligible grid indices in the schedule window")
    if n_groups > m:
        raise GrpoError(f"{n_groups} groups exceed {m} eligible indices")
    stride = m // n_groups
    return [eligible[(iteration + j * stride) % m] for j in range(n_groups)]


def compute_advantages(rewards: np.ndarray, eps_std: float = 1e-6) -> np.ndarray:
    """Group standardization with population std; degenerate groups get zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise GrpoError("advantages need at least 2 rewards")
    std = r.std()
    if not np.isfinite(std) or std < eps_std:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def policy_ratio(model: FlowNet, traj: Trajectory, schedule: NoiseSchedule) -> float:
    """Current-over-behavior transition density at the trajectory's SDE step."""
    k = traj.sde_index
    t = schedule.time_at(k)
    x_t = traj.states[k]
    v = model.forward_np(x_t[None, :], t, traj.prompt_id)[0]
    mean_new = sde_mean(x_t, t, v, schedule)
    kernel_new = TransitionKernel(mean=mean_new, std=traj.kernel_old.std)
    logp_new = transition_logprob(kernel_new, traj.realized_next())
    return float(np.exp(logp_new - traj.logp_old))


def rollout_groups(
    model: FlowNet,
    task: Task,
    ks: Sequence[int],
    prompt_ids: Sequence[int],
    config: GrpoConfig,
    schedule: NoiseSchedule,
    stream: RngStream,
) -> list[RolloutGroup]:
    """Sample all groups in one sweep over the grid (one model forward per step).

    Noise comes from per-member child streams in a fixed order (initial draw,
    then the SDE draw), so the batched sweep reproduces per-trajectory
    sampling regardless of scheduling; only last-bit linear-algebra batching
    effects separate it from sampling each path alone. At each group's
    stochastic step the velocity is recomputed on the group's own (N, d)
    slice so the recorded kernel is bitwise reproducible by the surrogate.
    """
    G, N, d = len(ks), config.group_size, task.dim
    member_streams = [[stream.child(g, m) for m in range(N)] for g in range(G)]
    x = np.empty((G * N, d))
    for g in range(G):
        for m in range(N):
            x[g * N + m] = member_streams[g][m].normal(d)
    pid_rows = np.repeat(np.asarray(prompt_ids, dtype=int), N)
    ks_arr = np.asarray(ks, dtype=int)

    captured: dict[int, dict] = {}
    for k in range(schedule.steps):
        t = schedule.time_at(k)
        v = model.forward_np(x, t, pid_rows)
        x_new = ode_step(x, v, schedule.dt)
        hit = np.where(ks_arr == k)[0]
        for g in hit:
            rows = slice(g * N, (g + 1) * N)
            # forward again on the (N, d) slice so the recorded kernel is
            # bitwise what the surrogate's own (N, d) forward will produce
            v_slice = model.forward_np(x[rows], t, int(prompt_ids[g]))
            z = np.stack([member_streams[g][m].normal(d) for m in range(N)])
            stepped, kernel = sde_step(x[rows], t, v_slice, z, schedule)
            captured[g] = {
                "x_t": x[rows].copy(),
                "x_next": stepped.copy(),
                "mean_old": kernel.mean.copy(),
                "std": kernel.std,
                "logp_old": transition_logprob(kernel, stepped),
            }
            x_new[rows] = stepped
        x = x_new

    groups = []
    for g in range(G):
        cap = captured[g]
        groups.append(
            RolloutGroup(
                prompt_id=int(prompt_ids[g]),
                k=int(ks[g]),
                terminal=x[g * N : (g + 1) * N].copy(),
                **cap,
            )
        )
    return groups


def score_groups(
    groups: Sequence[RolloutGroup],
    task: Task,
    reward_fn: Callable[[int, np.ndarray], np.ndarray],
    config: GrpoConfig,
) -> None:
    """Sparse terminal reward: only x_T is scored, then group-standardized."""
    for grp in groups:
        grp.components = component_matrix(task, grp.prompt_id, grp.terminal)
        grp.rewards = np.asarray(reward_fn(grp.prompt_id, grp.terminal), dtype=np.float64)
        grp.advantages = compute_advantages(grp.rewards, config.eps_std)


def _group_ratio(
    model: FlowNet,
    grp: RolloutGroup,
    idx,
    t: float,
    coef: float,
    var2: float,
    schedule: NoiseSchedule,
) -> Tensor:
    """Per-member density ratio for the selected rows, as a graph tensor.

    The kernel mean repeats the rollout's arithmetic op for op, so at
    theta == theta_old the squared residuals cancel bitwise and the ratio
    comes out exactly 1.
    """
    x_t = grp.x_t[idx]
    x_next = grp.x_next[idx]
    mean_old = grp.mean_old[idx]
    v = model.forward_graph(x_t, t, grp.prompt_id)
    x_c = Tensor(x_t)
    mean_new = x_c - (v + (x_c + v * (1.0 - t)) * coef) * schedule.dt
    sq_new = sum_rows(square(Tensor(x_next) - mean_new))
    sq_old = ((x_next - mean_old) ** 2.0).sum(axis=1)
    return exp((Tensor(sq_old) - sq_new) * (1.0 / var2))


def grpo_surrogate(
    model: FlowNet,
    groups: Sequence[RolloutGroup],
    clip_eps: float,
    schedule: NoiseSchedule,
) -> tuple[Tensor, dict]:
    """Clipped surrogate loss (negated objective) over all group members.

    objective = mean over members of min(r*A~, clip(r, 1-eps, 1+eps)*A~)
    with A~ = advantage / lambda(t_k). Members whose ratio is non-finite
    (overflowing exp, or NaN from a broken forward) are dropped from the
    group with a warning. Returns (loss tensor, stats).
    """
    total = None
    count = 0
    clipped = 0
    skipped = 0
    for grp in groups:
        t = schedule.time_at(grp.k)
        lam = schedule.lambda_at(grp.k)
        s = schedule.sigma(t)
        coef = s * s / (2.0 * t)
        var2 = 2.0 * grp.std * grp.std
        ratio = _group_ratio(model, grp, slice(None), t, coef, var2, schedule)
        finite = np.isfinite(ratio.data)
        adv = grp.advantages
        if not finite.all():
            skipped += int((~finite).sum())
            log.warning(
                "dropping %d member(s) with non-finite policy ratio (prompt %d, k=%d)",
                int((~finite).sum()), grp.prompt_id, grp.k,
            )
            if not finite.any():
                continue
            keep = np.where(finite)[0]
            ratio = _group_ratio(model, grp, keep, t, coef, var2, schedule)
            if not np.isfinite(ratio.data).all():
                raise GrpoError("policy ratio non-finite even after dropping members")
            adv = grp.advantages[keep]
        a_tilde = Tensor(adv / lam)
        term = minimum(ratio * a_tilde, clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * a_tilde)
        contrib = tsum(term)
        total = contrib if total is None else total + contrib
        n_kept = ratio.values.size
        count += n_kept
        clipped += int((np.abs(ratio.data - 1.0) > clip_eps).sum())
    if count == 0:
        raise GrpoError("all policy ratios non-finite")
    loss = total * (-1.0 / count)
    stats = {"clip_frac": clipped / count, "skipped": skipped}
    return loss, stats


def rlhf_train(
    model: FlowNet,
    task: Task,
    config: GrpoConfig,
    weights: RewardWeights,
    schedule: NoiseSchedule,
    stream: RngStream,
    reward_fn: Callable[[int, np.ndarray], np.ndarray] | None = None,
) -> tuple[FlowNet, list[dict], dict]:
    """The RLHF loop. Returns (model, metric rows, status).

    status["halted"] is set if the collapse guard fired: mean reward below
    half its running peak (once the peak clears the arming level) for
    collapse_window consecutive iterations. Non-finite losses abort after
    restoring the last finite-loss parameters into the model.
    """
    reward_fn = reward_fn or reward_fn_for(task, weights)
    opt = AdamState(lr=config.lr)
    rows: list[dict] = []
    status: dict = {"halted": False, "iterations_run": 0}
    peak = -np.inf
    low_run = 0
    last_good = model.store.snapshot()

    for it in range(config.iterations):
        ks = assign_isotemporal(config.n_groups, schedule, it)
        pids = [g % task.num_prompts for g in range(config.n_groups)]
        groups = rollout_groups(
            model, task, ks, pids, config, schedule, stream.child("rollout", it)
        )
        score_groups(groups, task, reward_fn, config)

        first_stats = None
        for inner in range(config.inner_steps):
            loss, stats = grpo_surrogate(model, groups, config.clip_eps, schedule)
            if not np.isfinite(loss.item()):
                model.store.load(last_good)
                raise GrpoError(
                    f"non-finite surrogate loss at iteration {it}; "
                    "last good parameters restored"
                )
            backward(loss, store=model.store)
            gnorm = grad_norm(model.store)
            adam_step(model.store, opt)
            if first_stats is None:
                first_stats = dict(stats, grad_norm=gnorm)
        last_good = model.store.snapshot()

        mean_reward = float(np.mean([g.rewards.mean() for g in groups]))
        comp_means = np.mean([g.components.mean(axis=0) for g in groups], axis=0)
        rows.append(
            {
                "stage": "rlhf",
                "iter": it,
                "mean_reward": mean_reward,
                "r_align": float(comp_means[0]),
                "r_video": float(comp_means[1]),
                "r_image": float(comp_means[2]),
                "r_motion": float(comp_means[3]),
                "clip_frac": float(first_stats["clip_frac"]),
                "grad_norm": float(first_stats["grad_norm"]),
            }
        )
        status["iterations_run"] = it + 1

        peak = max(peak, mean_reward)
        if peak >= config.collapse_arm_level and mean_reward < 0.5 * peak:
            low_run += 1
        else:
            low_run = 0
        if low_run >= config.collapse_window:
            status["halted"] = True
            status["reason"] = (
                f"reward collapse: mean reward below half of peak {peak:.3f} "
                f"for {config.collapse_window} iterations"
            )
            log.warning(status["reason"])
            break

    return model, rows, status

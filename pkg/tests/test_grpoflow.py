"""Group-relative policy optimization: algebra oracles and loop contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import flowlab.grpoflow as grpoflow_module
from flowlab.diffcore import RngStream, backward
from flowlab.flowsde import (
    NoiseSchedule,
    TransitionKernel,
    sample_mixed_trajectory,
    sde_mean,
    transition_logprob,
)
from flowlab.genmodel import FlowNet, point_task
from flowlab.grpoflow import (
    GrpoConfig,
    GrpoError,
    RolloutGroup,
    assign_isotemporal,
    compute_advantages,
    grpo_surrogate,
    policy_ratio,
    rlhf_train,
    rollout_groups,
    score_groups,
)
from oracles import fd_gradients, rel_err


SCHED = NoiseSchedule()
TASK = point_task()


def small_model(seed=0, hidden=16):
    return FlowNet(TASK.dim, TASK.num_prompts, hidden=hidden, stream=RngStream(seed, ("t", "net")))


def simple_reward(prompt_id, x):
    """Analytic stand-in reward: negative squared distance to the prompt mode."""
    center = TASK.prompts[prompt_id].law.means[0]
    return -((x - center) ** 2).sum(axis=1)


# ------------------------------------------------------------- advantages


def test_advantages_hand_values():
    adv = compute_advantages(np.array([1.0, 2.0, 3.0]))
    assert adv == pytest.approx([-1.22474487, 0.0, 1.22474487], abs=1e-4)


def test_advantages_zero_variance_gives_zeros():
    adv = compute_advantages(np.array([0.7, 0.7, 0.7, 0.7]))
    assert np.array_equal(adv, np.zeros(4))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_advantages_nonfinite_rewards_give_zeros():
    assert np.array_equal(compute_advantages(np.array([np.nan, 1.0, 2.0])), np.zeros(3))
    assert np.array_equal(compute_advantages(np.array([np.inf, -np.inf, 0.0])), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(
    scale=st.floats(0.1, 100.0),
    shift=st.floats(-100.0, 100.0),
)
def test_advantages_affine_invariant(scale, shift):
    r = np.array([0.3, -1.2, 2.5, 0.0, 4.4])
    base = compute_advantages(r)
    moved = compute_advantages(scale * r + shift)
    assert np.allclose(base, moved, atol=1e-9)


def test_advantages_require_a_group():
    with pytest.raises(GrpoError):
        compute_advantages(np.array([1.0]))
    with pytest.raises(GrpoError):
        compute_advantages(np.array([[1.0, 2.0]]))


# ------------------------------------------------------------- assignment


def test_assignment_distinct_eligible_and_strided():
    ks = assign_isotemporal(8, SCHED, iteration=0)
    assert len(ks) == 8
    assert len(set(ks)) == 8
    eligible = SCHED.eligible_indices()
    assert all(k in eligible for k in ks)
    positions = sorted(eligible.index(k) for k in ks)
    gaps = np.diff(positions)
    assert np.all(gaps == gaps[0])


def test_assignment_rotation_covers_every_eligible_index():
    eligible = set(SCHED.eligible_indices())  # 24 indices by default
    seen = set()
    for it in range(3):
        ks = assign_isotemporal(8, SCHED, iteration=it)
        assert len(set(ks)) == 8
        seen.update(ks)
    assert seen == eligible


def test_assignment_twenty_indices_four_groups():
    sched = NoiseSchedule(steps=25, t_min=0.12, t_max=0.88)
    eligible = sched.eligible_indices()
    assert len(eligible) == 20
    seen = set()
    for it in range(5):
        ks = assign_isotemporal(4, sched, iteration=it)
        assert len(set(ks)) == 4
        seen.update(ks)
    assert seen == set(eligible)


def test_assignment_errors():
    with pytest.raises(GrpoError):
        assign_isotemporal(30, SCHED, iteration=0)
    narrow = NoiseSchedule(steps=25, t_min=0.9591, t_max=0.9599)
    assert narrow.eligible_indices() == []
    with pytest.raises(GrpoError):
        assign_isotemporal(1, narrow, iteration=0)


def test_config_validation():
    with pytest.raises(GrpoError):
        GrpoConfig(group_size=1)
    with pytest.raises(GrpoError):
        GrpoConfig(clip_eps=0.0)
    with pytest.raises(GrpoError):
        GrpoConfig(clip_eps=1.0)
    with pytest.raises(GrpoError):
        GrpoConfig(inner_steps=0)


# ------------------------------------------------------------- policy ratio


def test_policy_ratio_is_exactly_one_at_behavior_params():
    model = small_model(1)
    traj = sample_mixed_trajectory(
        model.velocity_fn, 0, TASK.dim, SCHED, sde_index=12, stream=RngStream(3, ("t", "traj"))
    )
    assert policy_ratio(model, traj, SCHED) == 1.0


def test_policy_ratio_matches_manual_gaussian_ratio():
    model = small_model(1)
    traj = sample_mixed_trajectory(
        model.velocity_fn, 1, TASK.dim, SCHED, sde_index=9, stream=RngStream(4, ("t", "traj"))
    )
    other = model.clone()
    bump = RngStream(5, ("t", "bump"))
    for name in other.store.names():
        p = other.store[name]
        p.values += 0.05 * bump.normal(p.values.size)

    r = policy_ratio(other, traj, SCHED)
    assert r > 0.0

    k = traj.sde_index
    t = SCHED.time_at(k)
    v = other.forward_np(traj.states[k][None, :], t, 1)[0]
    mean_new = sde_mean(traj.states[k], t, v, SCHED)
    std = traj.kernel_old.std
    x_next = traj.realized_next()
    log_r = (
        ((x_next - traj.kernel_old.mean) ** 2).sum() - ((x_next - mean_new) ** 2).sum()
    ) / (2.0 * std * std)
    assert r == pytest.approx(np.exp(log_r), rel=1e-10)


# ------------------------------------------------------------- rollouts


def test_rollout_matches_per_member_sampling():
    model = small_model(2)
    config = GrpoConfig(group_size=4, n_groups=3)
    ks = [2, 12, 23]
    pids = [0, 1, 2]
    root = RngStream(7, ("t", "roll"))
    groups = rollout_groups(model, TASK, ks, pids, config, SCHED, root)

    for g, grp in enumerate(groups):
        assert grp.k == ks[g]
        assert grp.prompt_id == pids[g]
        assert grp.x_t.shape == (4, TASK.dim)
        for m in range(4):
            traj = sample_mixed_trajectory(
                model.velocity_fn, pids[g], TASK.dim, SCHED,
                sde_index=ks[g], stream=root.child(g, m),
            )
            assert np.allclose(grp.x_t[m], traj.states[ks[g]], atol=1e-9)
            assert np.allclose(grp.x_next[m], traj.realized_next(), atol=1e-9)
            assert np.allclose(grp.mean_old[m], traj.kernel_old.mean, atol=1e-9)
            assert grp.std == pytest.approx(traj.kernel_old.std, rel=1e-12)
            assert grp.logp_old[m] == pytest.approx(traj.logp_old, abs=1e-6)
            assert np.allclose(grp.terminal[m], traj.states[-1], atol=1e-8)


def test_rollout_deterministic_under_stream_identity():
    model = small_model(2)
    config = GrpoConfig(group_size=3, n_groups=2)
    a = rollout_groups(model, TASK, [5, 15], [0, 1], config, SCHED, RngStream(9, ("t", "r")))
    b = rollout_groups(model, TASK, [5, 15], [0, 1], config, SCHED, RngStream(9, ("t", "r")))
    for ga, gb in zip(a, b):
        assert np.array_equal(ga.terminal, gb.terminal)
        assert np.array_equal(ga.x_next, gb.x_next)
        assert np.array_equal(ga.logp_old, gb.logp_old)


def test_score_groups_standardizes_within_group():
    model = small_model(2)
    config = GrpoConfig(group_size=6, n_groups=2)
    groups = rollout_groups(model, TASK, [8, 16], [0, 1], config, SCHED, RngStream(11, ("t", "r")))
    score_groups(groups, TASK, simple_reward, config)
    for grp in groups:
        assert grp.rewards.shape == (6,)
        assert grp.components.shape == (6, 4)
        assert grp.advantages.mean() == pytest.approx(0.0, abs=1e-12)
        assert grp.advantages.std() == pytest.approx(1.0, rel=1e-9)


# ------------------------------------------------------------- surrogate


def make_scored_groups(model, seed=13, group_size=4, ks=(6, 18), pids=(0, 1)):
    config = GrpoConfig(group_size=group_size, n_groups=len(ks))
    groups = rollout_groups(
        model, TASK, list(ks), list(pids), config, SCHED, RngStream(seed, ("t", "mk"))
    )
    score_groups(groups, TASK, simple_reward, config)
    return groups


def test_surrogate_ratio_exactly_one_and_loss_zero_at_behavior_params():
    model = small_model(3)
    groups = make_scored_groups(model)
    for grp in groups:
        t = SCHED.time_at(grp.k)
        s = SCHED.sigma(t)
        ratio = grpoflow_module._group_ratio(
            model, grp, slice(None), t, s * s / (2.0 * t), 2.0 * grp.std * grp.std, SCHED
        )
        assert np.all(ratio.data == 1.0)
    loss, stats = grpo_surrogate(model, groups, 0.2, SCHED)
    assert abs(loss.item()) < 1e-12
    assert stats["clip_frac"] == 0.0
    assert stats["skipped"] == 0


def test_surrogate_matches_plain_numpy_formula():
    model = small_model(3)
    groups = make_scored_groups(model)
    bump = RngStream(17, ("t", "bump"))
    for name in model.store.names():
        p = model.store[name]
        p.values += 0.02 * bump.normal(p.values.size)

    clip_eps = 0.2
    loss, stats = grpo_surrogate(model, groups, clip_eps, SCHED)

    terms, ratios = [], []
    for grp in groups:
        t = SCHED.time_at(grp.k)
        v = model.forward_np(grp.x_t, t, grp.prompt_id)
        mean_new = sde_mean(grp.x_t, t, v, SCHED)
        log_r = (
            ((grp.x_next - grp.mean_old) ** 2).sum(axis=1)
            - ((grp.x_next - mean_new) ** 2).sum(axis=1)
        ) / (2.0 * grp.std * grp.std)
        r = np.exp(log_r)
        a = grp.advantages / SCHED.lambda_at(grp.k)
        terms.append(np.minimum(r * a, np.clip(r, 1 - clip_eps, 1 + clip_eps) * a))
        ratios.append(r)
    expected = -np.concatenate(terms).mean()
    r_all = np.concatenate(ratios)
    assert loss.item() == pytest.approx(expected, rel=1e-10)
    assert stats["clip_frac"] == pytest.approx(np.mean(np.abs(r_all - 1.0) > clip_eps))
    assert np.any(r_all != 1.0)


def test_surrogate_is_pessimistic():
    model = small_model(3)
    groups = make_scored_groups(model, seed=19)
    bump = RngStream(23, ("t", "bump"))
    for name in model.store.names():
        p = model.store[name]
        p.values += 0.05 * bump.normal(p.values.size)
    clip_eps = 0.1
    for grp in groups:
        t = SCHED.time_at(grp.k)
        v = model.forward_np(grp.x_t, t, grp.prompt_id)
        mean_new = sde_mean(grp.x_t, t, v, SCHED)
        log_r = (
            ((grp.x_next - grp.mean_old) ** 2).sum(axis=1)
            - ((grp.x_next - mean_new) ** 2).sum(axis=1)
        ) / (2.0 * grp.std * grp.std)
        r = np.exp(log_r)
        a = grp.advantages / SCHED.lambda_at(grp.k)
        term = np.minimum(r * a, np.clip(r, 1 - clip_eps, 1 + clip_eps) * a)
        assert np.all(term <= r * a + 1e-15)
        assert np.all(term <= np.clip(r, 1 - clip_eps, 1 + clip_eps) * a + 1e-15)


def crafted_group(model, k, ratios, advantages, prompt_id=0):
    """Group whose members have exact target density ratios under `model`.

    Ratios above 1 come from pinning x_next to the current kernel mean and
    pushing the behavior mean away; ratios below 1 pin x_next to the behavior
    mean instead. Either way ln(r) = (sq_old - sq_new) / (2 std^2).
    """
    t = SCHED.time_at(k)
    n = len(ratios)
    d = model.dim
    stream = RngStream(31, ("t", "craft", k))
    x_t = stream.normal(n, d)
    v = model.forward_np(x_t, t, prompt_id)
    mean_new = sde_mean(x_t, t, v, SCHED)
    std = SCHED.sigma(t) * np.sqrt(SCHED.dt)
    x_next = mean_new.copy()
    mean_old = mean_new.copy()
    direction = np.zeros(d)
    direction[0] = 1.0
    for i, r in enumerate(ratios):
        gap = np.sqrt(2.0 * std * std * abs(np.log(r)))
        if r > 1.0:
            mean_old[i] = mean_new[i] - direction * gap
        elif r < 1.0:
            mean_old[i] = mean_new[i] + direction * gap
            x_next[i] = mean_old[i]
    kernel = TransitionKernel(mean=mean_old, std=float(std))
    return RolloutGroup(
        prompt_id=prompt_id, k=k, x_t=x_t, x_next=x_next, mean_old=mean_old,
        std=float(std), logp_old=transition_logprob(kernel, x_next),
        terminal=x_next.copy(), rewards=np.zeros(n), components=np.zeros((n, 4)),
        advantages=np.asarray(advantages, dtype=np.float64),
    )


def test_surrogate_upper_clip_value_and_blocked_gradient():
    model = small_model(4)
    eps = 0.2
    k = 12
    grp = crafted_group(model, k, ratios=[1.0 + 2 * eps, 1.0], advantages=[1.0, 0.0])
    loss, stats = grpo_surrogate(model, [grp], eps, SCHED)
    lam = SCHED.lambda_at(k)
    assert loss.item() == pytest.approx(-(1.0 + eps) / lam / 2.0, rel=1e-9)
    assert stats["clip_frac"] == pytest.approx(0.5)
    backward(loss, store=model.store)
    for name in model.store.names():
        assert np.array_equal(model.store[name].grad, np.zeros_like(model.store[name].grad))


def test_surrogate_lower_clip_with_negative_advantage():
    model = small_model(4)
    eps = 0.2
    k = 9
    grp = crafted_group(model, k, ratios=[1.0 - 2 * eps, 1.0], advantages=[-1.0, 0.0])
    loss, _ = grpo_surrogate(model, [grp], eps, SCHED)
    lam = SCHED.lambda_at(k)
    assert loss.item() == pytest.approx((1.0 - eps) / lam / 2.0, rel=1e-9)
    backward(loss, store=model.store)
    for name in model.store.names():
        assert np.array_equal(model.store[name].grad, np.zeros_like(model.store[name].grad))


def test_surrogate_zero_advantages_have_zero_gradient():
    model = small_model(5)
    config = GrpoConfig(group_size=4, n_groups=2)
    groups = rollout_groups(model, TASK, [6, 18], [0, 1], config, SCHED, RngStream(37, ("t", "r")))
    score_groups(groups, TASK, lambda pid, x: np.zeros(len(x)), config)
    loss, _ = grpo_surrogate(model, groups, 0.2, SCHED)
    assert loss.item() == 0.0
    backward(loss, store=model.store)
    for name in model.store.names():
        assert np.array_equal(model.store[name].grad, np.zeros_like(model.store[name].grad))


def test_surrogate_gradient_matches_finite_differences():
    model = FlowNet(TASK.dim, TASK.num_prompts, hidden=6, stream=RngStream(6, ("t", "net")))
    groups = make_scored_groups(model, seed=41, group_size=3, ks=(10,), pids=(0,))
    bump = RngStream(43, ("t", "bump"))
    for name in model.store.names():
        p = model.store[name]
        p.values += 0.01 * bump.normal(p.values.size)
    clip_eps = 0.4

    loss, _ = grpo_surrogate(model, groups, clip_eps, SCHED)
    ratio_gap = []
    for grp in groups:
        t = SCHED.time_at(grp.k)
        v = model.forward_np(grp.x_t, t, grp.prompt_id)
        mean_new = sde_mean(grp.x_t, t, v, SCHED)
        log_r = (
            ((grp.x_next - grp.mean_old) ** 2).sum(axis=1)
            - ((grp.x_next - mean_new) ** 2).sum(axis=1)
        ) / (2.0 * grp.std * grp.std)
        ratio_gap.append(np.abs(np.abs(np.exp(log_r) - 1.0) - clip_eps))
    assert min(g.min() for g in ratio_gap) > 1e-3  # away from the clip kink

    backward(loss, store=model.store)
    got = {name: model.store[name].grad.copy() for name in model.store.names()}
    want = fd_gradients(
        model.store, lambda: grpo_surrogate(model, groups, clip_eps, SCHED)[0].item()
    )
    for name in got:
        assert rel_err(got[name], want[name]) < 1e-3, name


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_surrogate_drops_nonfinite_ratio_members():
    model = small_model(4)
    eps = 0.2
    k = 12
    grp = crafted_group(model, k, ratios=[1.0, 1.0, 1.0], advantages=[1.0, -1.0, 0.5])
    # behavior mean absurdly far away: exp overflows to inf for member 0
    grp.mean_old[0] += 1e6
    loss, stats = grpo_surrogate(model, [grp], eps, SCHED)
    assert stats["skipped"] == 1
    assert np.isfinite(loss.item())
    lam = SCHED.lambda_at(k)
    assert loss.item() == pytest.approx(-(-1.0 + 0.5) / lam / 2.0, rel=1e-9)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_surrogate_raises_when_every_ratio_is_nonfinite():
    model = small_model(4)
    grp = crafted_group(model, 12, ratios=[1.0, 1.0], advantages=[1.0, -1.0])
    grp.mean_old += 1e6
    with pytest.raises(GrpoError):
        grpo_surrogate(model, [grp], 0.2, SCHED)


# ------------------------------------------------------------- training loop


def tiny_config(**over):
    base = dict(group_size=4, n_groups=4, clip_eps=0.2, lr=1e-3, iterations=3)
    base.update(over)
    return GrpoConfig(**base)


def test_rlhf_zero_lr_keeps_parameters():
    model = small_model(8)
    before = model.store.snapshot()
    _, rows, status = rlhf_train(
        model, TASK, tiny_config(lr=0.0), None, SCHED,
        RngStream(51, ("t", "loop")), reward_fn=simple_reward,
    )
    after = model.store.snapshot()
    for name in before:
        assert np.array_equal(before[name], after[name])
    assert len(rows) == 3
    assert not status["halted"]
    assert all(np.isfinite(r["mean_reward"]) for r in rows)


def test_rlhf_deterministic_given_stream_identity():
    out = []
    for _ in range(2):
        model = small_model(8)
        _, rows, _ = rlhf_train(
            model, TASK, tiny_config(), None, SCHED,
            RngStream(52, ("t", "loop")), reward_fn=simple_reward,
        )
        out.append((rows, model.store.snapshot()))
    rows_a, snap_a = out[0]
    rows_b, snap_b = out[1]
    assert rows_a == rows_b
    for name in snap_a:
        assert np.array_equal(snap_a[name], snap_b[name])


def test_rlhf_scores_only_terminal_states():
    model = small_model(8)
    config = tiny_config(iterations=2)
    calls = []

    def recording_reward(prompt_id, x):
        calls.append((prompt_id, x.shape, np.isfinite(x).all()))
        return simple_reward(prompt_id, x)

    rlhf_train(model, TASK, config, None, SCHED, RngStream(53, ("t", "loop")),
               reward_fn=recording_reward)
    assert len(calls) == config.iterations * config.n_groups
    assert all(shape == (config.group_size, TASK.dim) for _, shape, _ in calls)
    assert all(finite for _, _, finite in calls)


def test_rlhf_metric_rows_have_component_means():
    model = small_model(8)
    _, rows, _ = rlhf_train(
        model, TASK, tiny_config(iterations=1), None, SCHED,
        RngStream(54, ("t", "loop")), reward_fn=simple_reward,
    )
    row = rows[0]
    for key in ("stage", "iter", "mean_reward", "r_align", "r_video", "r_image",
                "r_motion", "clip_frac", "grad_norm"):
        assert key in row
    assert row["stage"] == "rlhf"
    assert row["iter"] == 0
    assert row["r_motion"] == 0.0  # single-frame task has no motion
    assert row["clip_frac"] == 0.0  # first gradient step starts at the behavior policy


def test_rlhf_nonfinite_loss_restores_last_good_parameters(monkeypatch):
    reference = small_model(9)
    rlhf_train(
        reference, TASK, tiny_config(iterations=1), None, SCHED,
        RngStream(55, ("t", "loop")), reward_fn=simple_reward,
    )
    good = reference.store.snapshot()

    from flowlab.diffcore import Tensor

    real = grpoflow_module.grpo_surrogate
    state = {"calls": 0}

    def poisoned(model, groups, clip_eps, schedule):
        state["calls"] += 1
        if state["calls"] >= 2:
            return Tensor(np.array([np.nan])), {"clip_frac": 0.0, "skipped": 0}
        return real(model, groups, clip_eps, schedule)

    monkeypatch.setattr(grpoflow_module, "grpo_surrogate", poisoned)
    model = small_model(9)
    with pytest.raises(GrpoError):
        rlhf_train(
            model, TASK, tiny_config(iterations=5), None, SCHED,
            RngStream(55, ("t", "loop")), reward_fn=simple_reward,
        )
    after = model.store.snapshot()
    for name in good:
        assert np.array_equal(good[name], after[name])


def test_rlhf_collapse_guard_halts():
    model = small_model(10)
    config = tiny_config(iterations=40, collapse_window=5, lr=0.0)
    state = {"calls": 0}

    def staged_reward(prompt_id, x):
        iteration = state["calls"] // config.n_groups
        state["calls"] += 1
        level = 1.0 if iteration < 3 else 0.0
        return np.full(len(x), level)

    _, rows, status = rlhf_train(
        model, TASK, config, None, SCHED, RngStream(56, ("t", "loop")),
        reward_fn=staged_reward,
    )
    assert status["halted"]
    assert "collapse" in status["reason"]
    assert status["iterations_run"] == 8  # 3 good + 5 collapsed
    assert len(rows) == 8


def test_rlhf_improves_mean_reward_on_point_task():
    model = small_model(11)
    config = GrpoConfig(group_size=8, n_groups=4, clip_eps=0.2, lr=1e-2, iterations=80)
    _, rows, status = rlhf_train(
        model, TASK, config, None, SCHED, RngStream(57, ("t", "loop")),
        reward_fn=simple_reward,
    )
    assert not status["halted"]
    first = np.mean([r["mean_reward"] for r in rows[:8]])
    last = np.mean([r["mean_reward"] for r in rows[-8:]])
    assert last > first + 2.0

"""Reward components, aggregation, a learned ranking reward model, and GSB.

Four analytic proxies score a terminal sample against its prompt's target
law: alignment (distance to intent), video aesthetic (whole-sample log
density), image aesthetic (per-frame log density), and motion smoothness
(second differences). Components are z-normalized against statistics frozen
from a reference batch before weighting, since their raw scales differ by
orders of magnitude. A small RewardNet learns the same ordering from noisy
pairwise preferences so learned-reward runs stay possible, and gsb_compare
turns paired rewards into Good/Same/Bad fractions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpointio import Checkpoint
from .diffcore import (
    AdamState,
    ParamStore,
    RngStream,
    Tensor,
    adam_step,
    backward,
    concat_cols,
    exp,
    power,
    rows,
    slice_cols,
    softplus,
    sqrt,
    tanh,
    tmean,
)
from .flowsde import NoiseSchedule
from .genmodel import CircleLaw, FrameSequence, MixtureLaw, PromptSpec, Task, sample_terminal


class RewardError(ValueError):
    """Invalid reward query, weighting, or preference dataset."""


COMPONENT_NAMES = ("alignment", "video_aesthetic", "image_aesthetic", "motion")


# ------------------------------------------------------------- components


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def reward_alignment(x, prompt: PromptSpec) -> np.ndarray:
    """Negative squared distance to the nearest mode (points), or negative
    mean per-frame deviation from the analytic trajectory (sequences)."""
    xs = _as_batch(x)
    law = prompt.law
    if isinstance(law, CircleLaw):
        return -law.frame_deviation(xs)
    d2 = ((xs[:, None, :] - law.means[None, :, :]) ** 2).sum(axis=2)
    return -d2.min(axis=1)


def reward_aesthetic(x, prompt: PromptSpec) -> np.ndarray:
    """Whole-sample log density under the prompt's target law."""
    return prompt.law.logpdf(_as_batch(x))


def reward_image(x, prompt: PromptSpec) -> np.ndarray:
    """Mean per-frame log density; equals reward_aesthetic on the point task."""
    xs = _as_batch(x)
    law = prompt.law
    if isinstance(law, MixtureLaw):
        return law.logpdf(xs)
    frames = xs.reshape(xs.shape[0], law.frames, 2)
    d2 = ((frames - law.trajectory()) ** 2).sum(axis=2)
    var = law.noise ** 2
    logp = -np.log(2 * np.pi * var) - d2 / (2 * var)
    return logp.mean(axis=1)


def reward_motion(seq) -> np.ndarray | float:
    """Negative mean squared second difference of the frame positions."""
    if isinstance(seq, FrameSequence):
        frames = seq.frames[None, :, :]
        scalar = True
    else:
        frames = np.asarray(seq, dtype=np.float64)
        scalar = frames.ndim == 2
        if frames.ndim == 2:
            frames = frames[None, :, :]
    if frames.shape[1] < 3:
        raise RewardError("motion reward needs at least 3 frames")
    second = frames[:, 2:] - 2 * frames[:, 1:-1] + frames[:, :-2]
    out = -(second ** 2).sum(axis=2).mean(axis=1)
    return float(out[0]) if scalar else out


def component_matrix(task: Task, prompt_id: int, x) -> np.ndarray:
    """(n, 4) raw component rewards for samples of one prompt.

    Point-task motion is identically zero (a single frame has no motion);
    frozen normalization then keeps it out of the aggregate.
    """
    if not 0 <= prompt_id < task.num_prompts:
        raise RewardError(f"unknown prompt id {prompt_id}")
    prompt = task.prompt(prompt_id)
    xs = _as_batch(x)
    cols = [
        reward_alignment(xs, prompt),
        reward_aesthetic(xs, prompt),
        reward_image(xs, prompt),
    ]
    if task.frames >= 3:
        frames = xs.reshape(xs.shape[0], task.frames, -1)
        cols.append(reward_motion(frames))
    else:
        cols.append(np.zeros(xs.shape[0]))
    return np.stack(cols, axis=1)


# ------------------------------------------------------------ aggregation


@dataclass(frozen=True)
class RewardWeights:
    """Component weights plus the frozen z-normalization statistics."""

    weights: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.3, 0.2, 0.2]))
    mean: np.ndarray = field(default_factory=lambda: np.zeros(4))
    std: np.ndarray = field(default_factory=lambda: np.ones(4))

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if w.shape != (4,) or self.mean.shape != (4,) or self.std.shape != (4,):
            raise RewardError("weights and statistics must have 4 components")
        if (w < 0).any():
            raise RewardError("reward weights must be nonnegative")
        if not (w > 0).any():
            raise RewardError("at least one reward weight must be positive")
        if (self.std <= 0).any():
            raise RewardError("normalization stds must be positive")

    def aggregate(self, components: np.ndarray) -> np.ndarray:
        """Weighted sum of z-scored components; (n,4) -> (n,), (4,) -> scalar."""
        c = np.asarray(components, dtype=np.float64)
        scalar = c.ndim == 1
        z = (np.atleast_2d(c) - self.mean) / self.std
        out = z @ self.weights
        return float(out[0]) if scalar else out


@dataclass(frozen=True)
class RewardBundle:
    alignment: float
    video_aesthetic: float
    image_aesthetic: float
    motion: float
    aggregate: float


def bundle(task: Task, prompt_id: int, x, weights: RewardWeights) -> RewardBundle:
    comps = component_matrix(task, prompt_id, x)[0]
    return RewardBundle(*comps, aggregate=weights.aggregate(comps))


def freeze_reward_stats(
    task: Task,
    model,
    schedule: NoiseSchedule,
    stream: RngStream,
    weights: np.ndarray | None = None,
    n_reference: int = 1000,
) -> RewardWeights:
    """Compute normalization statistics from a reference batch of the given
    model (the SFT policy) and freeze them into a RewardWeights.

    Components that are constant over the reference batch (point-task motion)
    get unit std, so their z-score stays exactly zero.
    """
    per_prompt = max(1, n_reference // task.num_prompts)
    mats = []
    for pid in range(task.num_prompts):
        x = sample_terminal(model, pid, per_prompt, schedule, stream.child("ref", pid))
        mats.append(component_matrix(task, pid, x))
    all_comps = np.concatenate(mats)
    mean = all_comps.mean(axis=0)
    std = all_comps.std(axis=0)
    std = np.where(std < 1e-9, 1.0, std)
    w = np.array([0.3, 0.3, 0.2, 0.2]) if weights is None else np.asarray(weights, dtype=np.float64)
    return RewardWeights(weights=w, mean=mean, std=std)


def reward_fn_for(task: Task, weights: RewardWeights) -> Callable[[int, np.ndarray], np.ndarray]:
    """Aggregate reward closure used by the RL loops: (prompt_id, samples) -> (n,)."""

    def fn(prompt_id: int, x: np.ndarray) -> np.ndarray:
        return weights.aggregate(component_matrix(task, prompt_id, x))

    return fn


# ------------------------------------------------------------------- GSB


def gsb_compare(samples_a, samples_b, reward_fn, delta: float) -> tuple[float, float, float]:
    """Paired Good/Same/Bad fractions: good where r_A - r_B > delta, bad where
    < -delta, same otherwise. reward_fn maps a sample batch to scores."""
    if delta < 0:
        raise RewardError("GSB margin must be nonnegative")
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.shape != b.shape:
        raise RewardError(f"paired sample shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        raise RewardError("GSB needs at least one pair")
    diff = np.asarray(reward_fn(a)) - np.asarray(reward_fn(b))
    good = float((diff > delta).mean())
    bad = float((diff < -delta).mean())
    return good, 1.0 - good - bad, bad


# -------------------------------------------------------------- RewardNet


class RewardNet:
    """Learned reward: encoder over [sample | prompt embedding], head emitting
    (score, log-uncertainty). Uncertainty is exp(log-u), always positive."""

    EMB = 8

    def __init__(self, dim: int, num_prompts: int, hidden: int = 32, stream: RngStream | None = None):
        self.dim = dim
        self.num_prompts = num_prompts
        self.hidden = hidden
        self.store = ParamStore()
        stream = stream or RngStream(0, ("rewardnet", "init"))
        d_in = dim + self.EMB

        def init(name, shape, scale):
            self.store.create(name, scale * stream.normal(*shape))

        init("emb.prompt", (num_prompts, self.EMB), 0.5)
        init("e1.w", (d_in, hidden), 1.0 / np.sqrt(d_in))
        init("e1.b", (hidden,), 0.0)
        init("e2.w", (hidden, hidden), 1.0 / np.sqrt(hidden))
        init("e2.b", (hidden,), 0.0)
        init("head.w", (hidden, 2), 1.0 / np.sqrt(hidden))
        init("head.b", (2,), 0.0)

    def forward_graph(self, x: np.ndarray, pids) -> tuple[Tensor, Tensor]:
        x = _as_batch(x)
        n = x.shape[0]
        pids = np.full(n, pids, dtype=int) if np.isscalar(pids) else np.asarray(pids, dtype=int)
        s = self.store
        h = concat_cols([Tensor(x), rows(s["emb.prompt"], pids)])
        h = tanh(h @ s["e1.w"] + s["e1.b"])
        h = tanh(h @ s["e2.w"] + s["e2.b"])
        out = h @ s["head.w"] + s["head.b"]
        return slice_cols(out, 0, 1), slice_cols(out, 1, 2)

    def score_np(self, x: np.ndarray, pids) -> np.ndarray:
        x = _as_batch(x)
        n = x.shape[0]
        pids = np.full(n, pids, dtype=int) if np.isscalar(pids) else np.asarray(pids, dtype=int)
        s = self.store
        h = np.concatenate([x, s["emb.prompt"].data[pids]], axis=1)
        h = np.tanh(h @ s["e1.w"].data + s["e1.b"].data)
        h = np.tanh(h @ s["e2.w"].data + s["e2.b"].data)
        out = h @ s["head.w"].data + s["head.b"].data
        return out[:, 0]

    def uncertainty_np(self, x: np.ndarray, pids) -> np.ndarray:
        x = _as_batch(x)
        n = x.shape[0]
        pids = np.full(n, pids, dtype=int) if np.isscalar(pids) else np.asarray(pids, dtype=int)
        s = self.store
        h = np.concatenate([x, s["emb.prompt"].data[pids]], axis=1)
        h = np.tanh(h @ s["e1.w"].data + s["e1.b"].data)
        h = np.tanh(h @ s["e2.w"].data + s["e2.b"].data)
        out = h @ s["head.w"].data + s["head.b"].data
        return np.exp(out[:, 1])

    def to_checkpoint(self, **metadata: str) -> Checkpoint:
        meta = dict(
            model="rewardnet",
            dim=str(self.dim),
            num_prompts=str(self.num_prompts),
            hidden=str(self.hidden),
        )
        meta.update({k: str(v) for k, v in metadata.items()})
        return Checkpoint.from_store(self.store, **meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "RewardNet":
        meta = ckpt.metadata
        net = cls(int(meta["dim"]), int(meta["num_prompts"]), int(meta["hidden"]))
        ckpt.load_into(net.store)
        return net


def rank_loss(
    score_a: Tensor,
    score_b: Tensor,
    logu_a: Tensor,
    logu_b: Tensor,
    labels: np.ndarray,
) -> Tensor:
    """Uncertainty-scaled pairwise ranking loss, averaged over the batch.

    labels[i] = 0 means sample a is preferred, 1 means b. The margin
    (r_pref - r_other) is divided by s = sqrt(u_a^2 + u_b^2) before the
    logistic loss, so confidently wrong pairs cost more.
    """
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    sign = Tensor(1.0 - 2.0 * labels)  # +1 if a preferred, -1 if b
    s = sqrt(exp(logu_a * 2.0) + exp(logu_b * 2.0))
    margin = sign * (score_a - score_b) * power(s, -1.0)
    return tmean(softplus(-margin))


@dataclass(frozen=True)
class PreferencePair:
    """Two samples for one prompt; preferred is 0 (first) or 1 (second)."""

    x_a: np.ndarray
    x_b: np.ndarray
    prompt_id: int
    preferred: int

    def __post_init__(self):
        if self.preferred not in (0, 1):
            raise RewardError("preferred must be 0 or 1")


def make_preferences(
    samples_by_prompt: dict[int, np.ndarray],
    task: Task,
    weights: RewardWeights,
    stream: RngStream,
    label_noise: float = 0.1,
) -> list[PreferencePair]:
    """Pair consecutive samples per prompt and label by the analytic aggregate
    reward, flipping each label with probability label_noise."""
    pairs: list[PreferencePair] = []
    for pid in sorted(samples_by_prompt):
        x = np.asarray(samples_by_prompt[pid], dtype=np.float64)
        agg = weights.aggregate(component_matrix(task, pid, x))
        flips = stream.child("noise", pid).uniform(x.shape[0] // 2) < label_noise
        for i in range(x.shape[0] // 2):
            a, b = x[2 * i], x[2 * i + 1]
            pref = 0 if agg[2 * i] >= agg[2 * i + 1] else 1
            if flips[i]:
                pref = 1 - pref
            pairs.append(PreferencePair(x_a=a, x_b=b, prompt_id=pid, preferred=pref))
    return pairs


def preferences_to_checkpoint(pairs: Sequence[PreferencePair]) -> Checkpoint:
    return Checkpoint(
        metadata={"kind": "preferences", "count": str(len(pairs))},
        arrays={
            "x_a": np.stack([p.x_a for p in pairs]),
            "x_b": np.stack([p.x_b for p in pairs]),
            "prompt_id": np.array([p.prompt_id for p in pairs], dtype=np.float64),
            "preferred": np.array([p.preferred for p in pairs], dtype=np.float64),
        },
    )


def preferences_from_checkpoint(ckpt: Checkpoint) -> list[PreferencePair]:
    n = int(ckpt.metadata["count"])
    return [
        PreferencePair(
            x_a=ckpt.arrays["x_a"][i],
            x_b=ckpt.arrays["x_b"][i],
            prompt_id=int(ckpt.arrays["prompt_id"][i]),
            preferred=int(ckpt.arrays["preferred"][i]),
        )
        for i in range(n)
    ]


@dataclass(frozen=True)
class RewardTrainConfig:
    steps: int = 600
    batch: int = 32
    lr: float = 3e-3
    heldout_fraction: float = 0.2


def train_reward_model(
    pairs: Sequence[PreferencePair],
    task: Task,
    config: RewardTrainConfig,
    stream: RngStream,
) -> tuple[RewardNet, float]:
    """Fit a RewardNet on preference pairs; returns (net, held-out accuracy)."""
    if len(pairs) < 100:
        raise RewardError(f"need at least 100 preference pairs, got {len(pairs)}")
    n = len(pairs)
    perm = stream.child("split").choice(n, n, replace=False)
    n_held = max(1, int(round(config.heldout_fraction * n)))
    held_idx, train_idx = perm[:n_held], perm[n_held:]

    x_a = np.stack([p.x_a for p in pairs])
    x_b = np.stack([p.x_b for p in pairs])
    pids = np.array([p.prompt_id for p in pairs], dtype=int)
    labels = np.array([p.preferred for p in pairs], dtype=np.float64)

    net = RewardNet(task.dim, task.num_prompts, stream=stream.child("init"))
    opt = AdamState(lr=config.lr)
    for step in range(config.steps):
        s = stream.child("step", step)
        idx = train_idx[s.integers(0, len(train_idx), config.batch)]
        ra, ua = net.forward_graph(x_a[idx], pids[idx])
        rb, ub = net.forward_graph(x_b[idx], pids[idx])
        loss = rank_loss(ra, rb, ua, ub, labels[idx])
        if not np.isfinite(loss.item()):
            raise RewardError(f"non-finite ranking loss at step {step}")
        backward(loss, store=net.store)
        adam_step(net.store, opt)

    sa = net.score_np(x_a[held_idx], pids[held_idx])
    sb = net.score_np(x_b[held_idx], pids[held_idx])
    pred = (sb > sa).astype(np.float64)
    accuracy = float((pred == labels[held_idx]).mean())
    return net, accuracy

"""Toy conditional generators: target laws, the velocity MLP, pretraining and SFT.

Two tasks share one model family. The point task conditions a 2-D Gaussian
(mixture) location on a prompt id; the sequence task generates F stacked
2-D frames tracing a circular analytic trajectory, flattened to one vector
so a bidirectional model can denoise it jointly. Targets are described by
law objects that can sample, score and measure validity, which keeps the
reward layer and the evaluators independent of the trained networks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

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
    rows,
    square,
    tanh,
    tsum,
)
from .flowsde import NoiseSchedule, sample_batch


class GenModelError(ValueError):
    """Invalid task, dataset or training configuration."""


# ------------------------------------------------------------- target laws


def _logsumexp(a, axis=None):
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


@dataclass(frozen=True)
class MixtureLaw:
    """Mixture of Gaussians over R^d given as (means, covs, weights)."""

    means: np.ndarray  # (M, d)
    covs: np.ndarray  # (M, d, d)
    weights: np.ndarray  # (M,)

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        covs = np.asarray(self.covs, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "weights", weights)
        m, d = means.shape
        if covs.shape != (m, d, d) or weights.shape != (m,):
            raise GenModelError("mixture component shapes disagree")
        if not np.isclose(weights.sum(), 1.0) or (weights < 0).any():
            raise GenModelError("mixture weights must be nonnegative and sum to 1")
        for c in covs:
            if np.linalg.eigvalsh(c).min() <= 0:
                raise GenModelError("mixture covariances must be positive definite")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, stream: RngStream, n: int) -> np.ndarray:
        # inverse-CDF over component weights keeps draws stream-deterministic
        cum = np.cumsum(self.weights)
        comp = np.minimum(np.searchsorted(cum, stream.uniform(n)), len(cum) - 1)
        eps = stream.normal(n, self.dim)
        chols = np.linalg.cholesky(self.covs)
        return self.means[comp] + np.einsum("nij,nj->ni", chols[comp], eps)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d = self.dim
        parts = np.empty((x.shape[0], len(self.weights)))
        for i, (mu, cov, w) in enumerate(zip(self.means, self.covs, self.weights)):
            diff = x - mu
            inv = np.linalg.inv(cov)
            _, logdet = np.linalg.slogdet(cov)
            quad = np.einsum("ni,ij,nj->n", diff, inv, diff)
            parts[:, i] = np.log(w) - 0.5 * (d * np.log(2 * np.pi) + logdet + quad)
        return _logsumexp(parts, axis=1)

    def mahalanobis_min(self, x: np.ndarray) -> np.ndarray:
        """Distance to the nearest mode in that mode's own metric."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        dists = np.empty((x.shape[0], len(self.weights)))
        for i, (mu, cov) in enumerate(zip(self.means, self.covs)):
            diff = x - mu
            inv = np.linalg.inv(cov)
            dists[:, i] = np.sqrt(np.einsum("ni,ij,nj->n", diff, inv, diff))
        return dists.min(axis=1)

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        mean = self.weights @ self.means
        cov = np.zeros((self.dim, self.dim))
        for w, mu, c in zip(self.weights, self.means, self.covs):
            diff = mu - mean
            cov += w * (c + np.outer(diff, diff))
        return mean, cov


@dataclass(frozen=True)
class CircleLaw:
    """F frames on a circle: frame i sits at phase0 + omega*i, plus isotropic noise.

    Flattened to a single 2F-dim vector; the 'mode' of the induced Gaussian
    is the analytic trajectory.
    """

    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 1.5
    omega: float = 0.5
    phase0: float = 0.0
    frames: int = 8
    noise: float = 0.05

    def __post_init__(self):
        if self.frames < 2:
            raise GenModelError("sequence law needs at least 2 frames")
        if self.noise <= 0 or self.radius <= 0:
            raise GenModelError("radius and noise must be positive")

    @property
    def dim(self) -> int:
        return 2 * self.frames

    def trajectory(self) -> np.ndarray:
        """Analytic (F, 2) frame positions."""
        idx = np.arange(self.frames)
        ang = self.phase0 + self.omega * idx
        return np.asarray(self.center) + self.radius * np.stack(
            [np.cos(ang), np.sin(ang)], axis=1
        )

    def _as_mixture(self) -> MixtureLaw:
        mu = self.trajectory().reshape(-1)
        return MixtureLaw(
            means=mu[None, :],
            covs=(self.noise ** 2 * np.eye(self.dim))[None, :, :],
            weights=np.array([1.0]),
        )

    def sample(self, stream: RngStream, n: int) -> np.ndarray:
        mu = self.trajectory().reshape(-1)
        return mu + self.noise * stream.normal(n, self.dim)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        return self._as_mixture().logpdf(x)

    def mahalanobis_min(self, x: np.ndarray) -> np.ndarray:
        """Mean per-frame distance to the analytic trajectory in noise units.

        Averaging over frames (rather than pooling all 2F coordinates) keeps
        the 3-sigma validity convention meaningful for sequences.
        """
        dev = self.frame_deviation(x)
        return dev / self.noise

    def frame_deviation(self, x: np.ndarray) -> np.ndarray:
        """Mean per-frame Euclidean distance to the analytic trajectory."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        frames = x.reshape(x.shape[0], self.frames, 2)
        return np.linalg.norm(frames - self.trajectory(), axis=2).mean(axis=1)

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        return self._as_mixture().moments()


@dataclass(frozen=True)
class FrameSequence:
    """F stacked d-dimensional frames plus the prompt they were generated for."""

    frames: np.ndarray  # (F, d)
    prompt_id: int = 0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        object.__setattr__(self, "frames", frames)
        if frames.ndim != 2 or frames.shape[0] < 2:
            raise GenModelError("frame sequence needs a (F>=2, d) array")
        if not np.isfinite(frames).all():
            raise GenModelError("frame values must be finite")

    @classmethod
    def from_flat(cls, x: np.ndarray, frames: int, prompt_id: int = 0) -> "FrameSequence":
        x = np.asarray(x, dtype=np.float64).reshape(frames, -1)
        return cls(frames=x, prompt_id=prompt_id)

    def flat(self) -> np.ndarray:
        return self.frames.reshape(-1)


@dataclass(frozen=True)
class PromptSpec:
    """One conditioning value: an id, its target law and a curation flag."""

    prompt_id: int
    law: MixtureLaw | CircleLaw
    curated: bool = True

    def describe(self) -> str:
        kind = "point" if isinstance(self.law, MixtureLaw) else "sequence"
        return f"prompt {self.prompt_id}: kind={kind} dim={self.law.dim} curated={self.curated}"


@dataclass(frozen=True)
class Task:
    """A named prompt set with a shared state dimension."""

    name: str
    prompts: tuple[PromptSpec, ...]
    frames: int = 1

    def __post_init__(self):
        if not self.prompts:
            raise GenModelError("task needs at least one prompt")
        ids = [p.prompt_id for p in self.prompts]
        if ids != list(range(len(ids))):
            raise GenModelError("prompt ids must be 0..n-1 in order")
        dims = {p.law.dim for p in self.prompts}
        if len(dims) != 1:
            raise GenModelError("all prompts in a task must share one dimension")

    @property
    def dim(self) -> int:
        return self.prompts[0].law.dim

    @property
    def num_prompts(self) -> int:
        return len(self.prompts)

    def prompt(self, pid: int) -> PromptSpec:
        return self.prompts[pid]

    def curated_ids(self) -> list[int]:
        return [p.prompt_id for p in self.prompts if p.curated]


def point_task() -> Task:
    """Four single-mode 2-D prompts on a circle of radius 2.5; prompt 3 uncurated."""
    prompts = []
    for pid in range(4):
        ang = np.pi / 2 * pid
        mean = 2.5 * np.array([np.cos(ang), np.sin(ang)])
        law = MixtureLaw(
            means=mean[None, :],
            covs=(0.09 * np.eye(2))[None, :, :],
            weights=np.array([1.0]),
        )
        prompts.append(PromptSpec(prompt_id=pid, law=law, curated=pid < 3))
    return Task(name="point", prompts=tuple(prompts), frames=1)


def sequence_task(frames: int = 8) -> Task:
    """Four circular-motion prompts, F frames of 2-D positions; prompt 3 uncurated."""
    params = [
        dict(radius=1.5, omega=0.55, phase0=0.0),
        dict(radius=1.0, omega=-0.7, phase0=1.2),
        dict(radius=2.0, omega=0.35, phase0=-0.8),
        dict(radius=1.2, omega=0.9, phase0=2.0),
    ]
    prompts = [
        PromptSpec(prompt_id=i, law=CircleLaw(frames=frames, noise=0.05, **kw), curated=i < 3)
        for i, kw in enumerate(params)
    ]
    return Task(name="sequence", prompts=tuple(prompts), frames=frames)


def make_task(name: str, frames: int = 8) -> Task:
    if name == "point":
        return point_task()
    if name == "sequence":
        return sequence_task(frames)
    raise GenModelError(f"unknown task '{name}'")


# ---------------------------------------------------------------- FlowNet

TIME_FREQS = (1.0, 2.0, 4.0, 8.0)  # 4 frequencies * (sin, cos) = 8 features
EMB_DIM = 8


def time_features(t) -> np.ndarray:
    """(n, 8) sinusoidal embedding of times in [0, 1]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    cols = []
    for f in TIME_FREQS:
        cols.append(np.sin(2 * np.pi * f * t))
        cols.append(np.cos(2 * np.pi * f * t))
    return np.stack(cols, axis=1)


class FlowNet:
    """Velocity MLP v(x, t, prompt): [x | time features | prompt embedding] -> R^dim.

    Two forward paths share the same weights and operation order: a graph
    path for gradients and a plain-array path for cheap sampling. They must
    agree bit-for-bit, which the tests enforce.
    """

    def __init__(self, dim: int, num_prompts: int, hidden: int = 64, stream: RngStream | None = None):
        self.dim = dim
        self.num_prompts = num_prompts
        self.hidden = hidden
        self.store = ParamStore()
        stream = stream or RngStream(0, ("flownet", "init"))
        d_in = dim + len(TIME_FREQS) * 2 + EMB_DIM

        def init(name, shape, scale):
            self.store.create(name, scale * stream.normal(*shape))

        init("emb.prompt", (num_prompts, EMB_DIM), 0.5)
        init("l1.w", (d_in, hidden), 1.0 / np.sqrt(d_in))
        init("l1.b", (hidden,), 0.0)
        init("l2.w", (hidden, hidden), 1.0 / np.sqrt(hidden))
        init("l2.b", (hidden,), 0.0)
        init("out.w", (hidden, dim), 1.0 / np.sqrt(hidden))
        init("out.b", (dim,), 0.0)

    def clone(self) -> "FlowNet":
        other = FlowNet(self.dim, self.num_prompts, self.hidden, RngStream(0, ("flownet", "clone")))
        other.store.load(self.store.snapshot())
        return other

    def _inputs_np(self, x: np.ndarray, t, pids) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        tf = time_features(t)
        if tf.shape[0] == 1 and n > 1:
            tf = np.repeat(tf, n, axis=0)
        pids = np.full(n, pids, dtype=int) if np.isscalar(pids) else np.asarray(pids, dtype=int)
        emb = self.store["emb.prompt"].data[pids]
        return np.concatenate([x, tf, emb], axis=1)

    def forward_np(self, x: np.ndarray, t, pids) -> np.ndarray:
        """Plain-array forward; no graph, used for sampling loops."""
        s = self.store
        h = self._inputs_np(x, t, pids)
        h = np.tanh(h @ s["l1.w"].data + s["l1.b"].data)
        h = np.tanh(h @ s["l2.w"].data + s["l2.b"].data)
        out = h @ s["out.w"].data + s["out.b"].data
        return out if np.ndim(x) > 1 else out[0]

    def forward_graph(self, x: np.ndarray, t, pids) -> Tensor:
        """Differentiable forward; x, t, pids are constants, weights are leaves."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        tf = time_features(t)
        if tf.shape[0] == 1 and n > 1:
            tf = np.repeat(tf, n, axis=0)
        pids = np.full(n, pids, dtype=int) if np.isscalar(pids) else np.asarray(pids, dtype=int)
        s = self.store
        emb = rows(s["emb.prompt"], pids)
        h = concat_cols([Tensor(x), Tensor(tf), emb])
        h = tanh(h @ s["l1.w"] + s["l1.b"])
        h = tanh(h @ s["l2.w"] + s["l2.b"])
        return h @ s["out.w"] + s["out.b"]

    def velocity_fn(self, x: np.ndarray, t: float, prompt_id: int) -> np.ndarray:
        return self.forward_np(x, t, prompt_id)

    def to_checkpoint(self, **metadata: str) -> Checkpoint:
        meta = dict(
            model="flownet",
            dim=str(self.dim),
            num_prompts=str(self.num_prompts),
            hidden=str(self.hidden),
        )
        meta.update({k: str(v) for k, v in metadata.items()})
        return Checkpoint.from_store(self.store, **meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "FlowNet":
        meta = ckpt.metadata
        net = cls(
            dim=int(meta["dim"]),
            num_prompts=int(meta["num_prompts"]),
            hidden=int(meta["hidden"]),
            stream=RngStream(0, ("flownet", "load")),
        )
        ckpt.load_into(net.store)
        return net


# ----------------------------------------------------------- training ops


def flow_matching_loss(model: FlowNet, x0: np.ndarray, pids: np.ndarray, stream: RngStream) -> Tensor:
    """Rectified-flow regression: mean over the batch of |v(xt,t,c) - (eps - x0)|^2."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = x0.shape[0]
    if n == 0:
        raise GenModelError("flow matching needs a nonempty batch")
    t = stream.uniform(n)
    eps = stream.normal(n, x0.shape[1])
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * eps
    target = eps - x0
    v = model.forward_graph(xt, t, pids)
    diff = v + Tensor(-target)
    return tsum(square(diff)) * (1.0 / n)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch: int = 128
    lr: float = 2e-3
    corruption: float = 0.2
    samples_per_prompt: int = 1000
    distractor_scale: float = 4.0


def make_dataset(
    task: Task,
    stream: RngStream,
    samples_per_prompt: int = 1000,
    corruption: float = 0.0,
    distractor_scale: float = 4.0,
    prompt_ids: Sequence[int] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw (x0, prompt_id, corrupted) arrays; corrupted rows come from a broad
    zero-mean distractor Gaussian standing in for pretraining noise."""
    if not 0.0 <= corruption < 1.0:
        raise GenModelError("corruption fraction must be in [0, 1)")
    ids = list(prompt_ids) if prompt_ids is not None else list(range(task.num_prompts))
    if not ids:
        raise GenModelError("dataset needs at least one prompt")
    xs, ps, flags = [], [], []
    for pid in ids:
        law = task.prompt(pid).law
        s = stream.child("data", pid)
        x = law.sample(s, samples_per_prompt)
        bad = s.uniform(samples_per_prompt) < corruption
        n_bad = int(bad.sum())
        if n_bad:
            x[bad] = distractor_scale * s.normal(n_bad, task.dim)
        xs.append(x)
        ps.append(np.full(samples_per_prompt, pid))
        flags.append(bad)
    return np.concatenate(xs), np.concatenate(ps), np.concatenate(flags)


def _fit(
    model: FlowNet,
    x0: np.ndarray,
    pids: np.ndarray,
    config: TrainConfig,
    stream: RngStream,
    log_every: int = 100,
) -> list[dict]:
    """Adam on the flow-matching loss over minibatches; aborts on non-finite loss."""
    opt = AdamState(lr=config.lr)
    n = x0.shape[0]
    logs = []
    for step in range(config.steps):
        s = stream.child("step", step)
        idx = s.integers(0, n, min(config.batch, n))
        loss = flow_matching_loss(model, x0[idx], pids[idx], s.child("fm"))
        value = loss.item()
        if not np.isfinite(value):
            raise GenModelError(f"non-finite flow-matching loss at step {step}")
        backward(loss, store=model.store)
        adam_step(model.store, opt)
        if step % log_every == 0 or step == config.steps - 1:
            logs.append({"iter": step, "loss": value})
    return logs


def pretrain(task: Task, config: TrainConfig, stream: RngStream) -> tuple[FlowNet, list[dict]]:
    """Flow-matching training over all prompts with corrupted rows mixed in."""
    x0, pids, _ = make_dataset(
        task,
        stream.child("dataset"),
        samples_per_prompt=config.samples_per_prompt,
        corruption=config.corruption,
        distractor_scale=config.distractor_scale,
    )
    model = FlowNet(task.dim, task.num_prompts, stream=stream.child("init"))
    logs = _fit(model, x0, pids, config, stream.child("fit"))
    return model, logs


def sft(model: FlowNet, task: Task, config: TrainConfig, stream: RngStream) -> tuple[FlowNet, list[dict]]:
    """Fine-tune on clean samples from curated prompts only."""
    ids = task.curated_ids()
    if not ids:
        raise GenModelError("SFT needs at least one curated prompt")
    x0, pids, _ = make_dataset(
        task,
        stream.child("dataset"),
        samples_per_prompt=config.samples_per_prompt,
        corruption=0.0,
        prompt_ids=ids,
    )
    tuned = model.clone()
    logs = _fit(tuned, x0, pids, config, stream.child("fit"))
    return tuned, logs


def sample_terminal(
    model: FlowNet,
    prompt_id: int,
    n: int,
    schedule: NoiseSchedule,
    stream: RngStream,
    mode: str = "ode",
) -> np.ndarray:
    return sample_batch(model.velocity_fn, prompt_id, model.dim, n, schedule, stream, mode=mode)


def validity_of_samples(law: MixtureLaw | CircleLaw, x: np.ndarray) -> float:
    """Fraction within 3 units of nearest-mode Mahalanobis distance."""
    return float((law.mahalanobis_min(x) <= 3.0).mean())


def validity_rate(
    model: FlowNet,
    task: Task,
    schedule: NoiseSchedule,
    stream: RngStream,
    n_per_prompt: int = 200,
    prompt_ids: Sequence[int] | None = None,
) -> float:
    if n_per_prompt < 100:
        raise GenModelError("validity rate needs n >= 100 samples per prompt")
    ids = list(prompt_ids if prompt_ids is not None else range(task.num_prompts))
    hits = []
    for pid in ids:
        x = sample_terminal(model, pid, n_per_prompt, schedule, stream.child("validity", pid))
        hits.append(validity_of_samples(task.prompt(pid).law, x))
    return float(np.mean(hits))

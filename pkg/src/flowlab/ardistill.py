"""Three-stage distillation of a bidirectional flow teacher into a causal student.

Stage 1 trains a few-step bidirectional student by distribution matching: the
difference between a data score (frozen teacher, velocity converted to score)
and a generator score (a co-trained fake score net) acts as a detached
gradient signal on noised student outputs. Stage 2 switches the student to a
block-causal mixing mask and regresses full teacher ODE endpoints. Stage 3
trains in rollout mode: frames are generated sequentially against a cache of
the student's own previous frames, and the matching signal is applied to the
whole flattened sequence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

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
    grad_norm,
    rows,
    square,
    tanh,
    tsum,
)
from .flowsde import NoiseSchedule, ode_step, score_from_velocity
from .genmodel import EMB_DIM, FlowNet, FrameSequence, Task, flow_matching_loss, time_features
from .rewards import reward_motion

log = logging.getLogger(__name__)

MODES = ("bidirectional", "block-causal")


class DistillError(ValueError):
    """Incompatible networks, bad configuration, or aborted training run."""


# ----------------------------------------------------------------- teacher


class TeacherModel:
    """Frozen velocity net over flattened frame sequences.

    Holds a private clone of the network so later edits to the original
    cannot leak into distillation.
    """

    def __init__(self, net: FlowNet, frames: int):
        if frames < 1:
            raise DistillError("teacher needs at least 1 frame")
        if net.dim % frames != 0:
            raise DistillError(f"dim {net.dim} not divisible by {frames} frames")
        self._net = net.clone()
        self.frames = frames

    @property
    def dim(self) -> int:
        return self._net.dim

    @property
    def frame_dim(self) -> int:
        return self._net.dim // self.frames

    @property
    def num_prompts(self) -> int:
        return self._net.num_prompts

    def velocity(self, x: np.ndarray, t, pids) -> np.ndarray:
        return self._net.forward_np(x, t, pids)

    def score(self, x: np.ndarray, t: float, pids) -> np.ndarray:
        return score_from_velocity(x, self.velocity(x, t, pids), t)

    def snapshot(self) -> dict[str, np.ndarray]:
        return self._net.store.snapshot()


def teacher_ode_endpoints(
    teacher: TeacherModel, eps: np.ndarray, pids, schedule: NoiseSchedule
) -> np.ndarray:
    """Deterministic full-grid reverse integration from given noise."""
    x = np.array(eps, dtype=np.float64)
    for k in range(schedule.steps):
        t = schedule.time_at(k)
        x = ode_step(x, teacher.velocity(x, t, pids), schedule.dt)
    return x


def teacher_ode_samples(
    teacher: TeacherModel, prompt_id, n: int, schedule: NoiseSchedule, stream: RngStream
) -> np.ndarray:
    """n teacher samples for one prompt via the deterministic sweep."""
    eps = stream.normal(n, teacher.dim)
    return teacher_ode_endpoints(teacher, eps, prompt_id, schedule)


# ----------------------------------------------------------------- student


class StudentGenerator:
    """Few-step frame-sequence generator with a maskable mixing layer.

    Each frame is encoded independently (coordinates, time features, prompt
    and frame embeddings), then receives the masked mean of all frame
    encodings it is allowed to see: every frame in bidirectional mode, frames
    up to and including itself in block-causal mode. A decoder turns the
    mixed state into a per-frame velocity; sampling integrates that field in
    k coarse descending-time steps from pure noise.
    """

    def __init__(
        self,
        frames: int,
        frame_dim: int,
        num_prompts: int,
        k: int = 4,
        mode: str = "bidirectional",
        hidden: int = 32,
        stream: RngStream | None = None,
    ):
        if frames < 1 or frame_dim < 1 or num_prompts < 1:
            raise DistillError("frames, frame_dim and num_prompts must be positive")
        if k < 1:
            raise DistillError("need at least one denoising step")
        if mode not in MODES:
            raise DistillError(f"mode must be one of {MODES}, got '{mode}'")
        self.frames = frames
        self.frame_dim = frame_dim
        self.num_prompts = num_prompts
        self.k = k
        self.mode = mode
        self.hidden = hidden
        self.store = ParamStore()
        stream = stream or RngStream(0, ("student", "init"))
        d_in = frame_dim + len(time_features(0.0)[0]) + 2 * EMB_DIM

        def init(name, shape, scale):
            self.store.create(name, scale * stream.normal(*shape))

        init("emb.prompt", (num_prompts, EMB_DIM), 0.5)
        init("emb.frame", (frames, EMB_DIM), 0.5)
        init("enc.w", (d_in, hidden), 1.0 / np.sqrt(d_in))
        init("enc.b", (hidden,), 0.0)
        init("mix.self", (hidden, hidden), 1.0 / np.sqrt(hidden))
        init("mix.ctx", (hidden, hidden), 1.0 / np.sqrt(hidden))
        init("mix.b", (hidden,), 0.0)
        init("dec.w", (hidden, frame_dim), 1.0 / np.sqrt(hidden))
        init("dec.b", (frame_dim,), 0.0)

    @property
    def dim(self) -> int:
        return self.frames * self.frame_dim

    def mask(self) -> np.ndarray:
        """(F, F) row-normalized mixing weights for the current mode."""
        F = self.frames
        if self.mode == "bidirectional":
            return np.full((F, F), 1.0 / F)
        m = np.tril(np.ones((F, F)))
        return m / m.sum(axis=1, keepdims=True)

    def with_mode(self, mode: str) -> "StudentGenerator":
        """Same parameters under a different mixing mask."""
        other = StudentGenerator(
            self.frames, self.frame_dim, self.num_prompts, self.k, mode,
            self.hidden, RngStream(0, ("student", "remask")),
        )
        other.store.load(self.store.snapshot())
        return other

    def clone(self) -> "StudentGenerator":
        return self.with_mode(self.mode)

    # --------------------------------------------------- full-sequence paths

    def _row_indices(self, pids, n: int) -> tuple[np.ndarray, np.ndarray]:
        pids = np.full(n, pids, dtype=int) if np.isscalar(pids) else np.asarray(pids, dtype=int)
        return np.repeat(pids, self.frames), np.tile(np.arange(self.frames), n)

    def velocity_np(self, x: np.ndarray, t, pids) -> np.ndarray:
        """(n, F*d) -> (n, F*d) velocity, plain arrays."""
        s = self.store
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        F, df, H = self.frames, self.frame_dim, self.hidden
        x3 = x.reshape(n * F, df)
        tf = np.repeat(time_features(t), n * F, axis=0)
        pid_rows, frame_rows = self._row_indices(pids, n)
        inp = np.concatenate(
            [x3, tf, s["emb.prompt"].data[pid_rows], s["emb.frame"].data[frame_rows]], axis=1
        )
        h = np.tanh(inp @ s["enc.w"].data + s["enc.b"].data)
        m = np.einsum("fj,njh->nfh", self.mask(), h.reshape(n, F, H)).reshape(n * F, H)
        g = np.tanh(h @ s["mix.self"].data + m @ s["mix.ctx"].data + s["mix.b"].data)
        v = g @ s["dec.w"].data + s["dec.b"].data
        return v.reshape(n, F * df)

    def _velocity_graph(self, x: Tensor, t: float, pids, n: int) -> Tensor:
        """Velocity on an (n*F, d) state tensor; weights are graph leaves."""
        s = self.store
        F, H = self.frames, self.hidden
        tf = np.repeat(time_features(t), n * F, axis=0)
        pid_rows, frame_rows = self._row_indices(pids, n)
        inp = concat_cols(
            [x, Tensor(tf), rows(s["emb.prompt"], pid_rows), rows(s["emb.frame"], frame_rows)]
        )
        h = tanh(inp @ s["enc.w"] + s["enc.b"])
        mix = Tensor(np.kron(np.eye(n), self.mask()))
        m = mix @ h
        g = tanh(h @ s["mix.self"] + m @ s["mix.ctx"] + s["mix.b"])
        return g @ s["dec.w"] + s["dec.b"]

    def generate_np(self, eps: np.ndarray, pids) -> np.ndarray:
        """k-step samples from given noise: (n, F*d) -> (n, F*d)."""
        x = np.atleast_2d(np.asarray(eps, dtype=np.float64)).copy()
        dt = 1.0 / self.k
        for j in range(self.k):
            t = 1.0 - j * dt
            x = x + self.velocity_np(x, t, pids) * (-dt)
        return x

    def generate_graph(self, eps: np.ndarray, pids) -> Tensor:
        """Differentiable k-step generation; returns an (n*F, d) tensor."""
        eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
        n = eps.shape[0]
        x = Tensor(eps.reshape(n * self.frames, self.frame_dim))
        dt = 1.0 / self.k
        for j in range(self.k):
            t = 1.0 - j * dt
            x = x + self._velocity_graph(x, t, pids, n) * (-dt)
        return x

    # -------------------------------------------------- frame-by-frame paths

    def _encode_frame_np(self, x: np.ndarray, t: float, pids, frame_idx: int) -> np.ndarray:
        """(n, d) frame states -> (n, hidden) encodings at one time."""
        s = self.store
        n = x.shape[0]
        tf = np.repeat(time_features(t), n, axis=0)
        pids = np.full(n, pids, dtype=int) if np.isscalar(pids) else np.asarray(pids, dtype=int)
        fidx = np.full(n, frame_idx, dtype=int)
        inp = np.concatenate(
            [x, tf, s["emb.prompt"].data[pids], s["emb.frame"].data[fidx]], axis=1
        )
        return np.tanh(inp @ s["enc.w"].data + s["enc.b"].data)

    def context_hidden_sum(self, cache: "FrameCache", pids, n: int) -> np.ndarray:
        """Sum of clean-state encodings of all cached frames."""
        total = np.zeros((n, self.hidden))
        for j, frame in enumerate(cache.frames):
            total = total + self._encode_frame_np(frame, 0.0, pids, j)
        return total

    def frame_velocity_np(
        self, x: np.ndarray, frame_idx: int, ctx_sum: np.ndarray, t: float, pids
    ) -> np.ndarray:
        """Velocity of one frame given the summed clean context encodings."""
        if self.mode != "block-causal":
            raise DistillError("frame-by-frame generation needs a block-causal student")
        s = self.store
        h = self._encode_frame_np(x, t, pids, frame_idx)
        m = (h + ctx_sum) * (1.0 / (frame_idx + 1))
        g = np.tanh(h @ s["mix.self"].data + m @ s["mix.ctx"].data + s["mix.b"].data)
        return g @ s["dec.w"].data + s["dec.b"].data

    def _frame_velocity_graph(
        self, x: Tensor, frame_idx: int, ctx_sum: np.ndarray, t: float, pids, n: int
    ) -> Tensor:
        if self.mode != "block-causal":
            raise DistillError("frame-by-frame generation needs a block-causal student")
        s = self.store
        tf = np.repeat(time_features(t), n, axis=0)
        pid_rows = np.full(n, pids, dtype=int) if np.isscalar(pids) else np.asarray(pids, dtype=int)
        fidx = np.full(n, frame_idx, dtype=int)
        inp = concat_cols(
            [x, Tensor(tf), rows(s["emb.prompt"], pid_rows), rows(s["emb.frame"], fidx)]
        )
        h = tanh(inp @ s["enc.w"] + s["enc.b"])
        m = (h + Tensor(ctx_sum)) * (1.0 / (frame_idx + 1))
        g = tanh(h @ s["mix.self"] + m @ s["mix.ctx"] + s["mix.b"])
        return g @ s["dec.w"] + s["dec.b"]

    # ------------------------------------------------------------ plumbing

    def to_checkpoint(self, **metadata: str) -> Checkpoint:
        meta = dict(
            model="student",
            frames=str(self.frames),
            frame_dim=str(self.frame_dim),
            num_prompts=str(self.num_prompts),
            k=str(self.k),
            mode=self.mode,
            hidden=str(self.hidden),
        )
        meta.update({k: str(v) for k, v in metadata.items()})
        return Checkpoint.from_store(self.store, **meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "StudentGenerator":
        meta = ckpt.metadata
        student = cls(
            frames=int(meta["frames"]),
            frame_dim=int(meta["frame_dim"]),
            num_prompts=int(meta["num_prompts"]),
            k=int(meta["k"]),
            mode=meta["mode"],
            hidden=int(meta["hidden"]),
            stream=RngStream(0, ("student", "load")),
        )
        ckpt.load_into(student.store)
        return student


def make_fake_score(teacher: TeacherModel, stream: RngStream | None = None) -> FlowNet:
    """Generator-distribution score net, initialized as a copy of the teacher.

    Starting from the teacher's weights keeps the early matching signal small
    and stabilizes the alternating updates; all subsequent training uses
    generator outputs only.
    """
    del stream
    net = FlowNet(teacher.dim, teacher.num_prompts, hidden=teacher._net.hidden,
                  stream=RngStream(0, ("fake", "init")))
    net.store.load(teacher.snapshot())
    return net


def check_compatible(student: StudentGenerator, teacher: TeacherModel, fake: FlowNet) -> None:
    if teacher.dim != fake.dim or teacher.num_prompts != fake.num_prompts:
        raise DistillError(
            f"teacher ({teacher.dim}d, {teacher.num_prompts} prompts) and fake score "
            f"({fake.dim}d, {fake.num_prompts} prompts) do not match"
        )
    if student.dim != teacher.dim or student.num_prompts != teacher.num_prompts:
        raise DistillError(
            f"student ({student.dim}d, {student.num_prompts} prompts) does not match "
            f"teacher ({teacher.dim}d, {teacher.num_prompts} prompts)"
        )


# ------------------------------------------------------- matching gradient


def dmd_signal(
    out_flat: np.ndarray, teacher: TeacherModel, fake: FlowNet, t: float, pids
) -> np.ndarray:
    """Detached per-sample gradient signal: generator score minus data score."""
    s_data = teacher.score(out_flat, t, pids)
    s_gen = score_from_velocity(out_flat, fake.forward_np(out_flat, t, pids), t)
    return s_gen - s_data


def dmd_pseudo_objective(
    student: StudentGenerator,
    eps: np.ndarray,
    pids,
    t: float,
    noise: np.ndarray,
    signal: np.ndarray,
) -> Tensor:
    """Batch-mean inner product of the frozen signal with noised generations.

    The signal enters as a constant, so the backward pass produces exactly
    (1-t)/n times signal^T dG/dtheta: the matching gradient routed through
    the forward interpolation.
    """
    n = eps.shape[0]
    d = student.frame_dim
    g = student.generate_graph(eps, pids)
    psi = g * (1.0 - t) + Tensor((t * noise).reshape(n * student.frames, d))
    return tsum(psi * Tensor(np.asarray(signal).reshape(n * student.frames, d))) * (1.0 / n)


def dmd_grad(
    student: StudentGenerator,
    teacher: TeacherModel,
    fake: FlowNet,
    eps: np.ndarray,
    pids,
    schedule: NoiseSchedule,
    stream: RngStream,
) -> tuple[dict[str, np.ndarray], dict]:
    """One matching-gradient evaluation on a noise batch.

    Samples an interior grid time, noises the generated batch with fresh
    noise at that time, evaluates the detached score difference there, and
    backpropagates the pseudo-objective. Gradients are left in the student's
    store and returned as copies.
    """
    check_compatible(student, teacher, fake)
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    n = eps.shape[0]
    k_t = int(stream.integers(1, schedule.steps, 1)[0])
    t = schedule.time_at(k_t)
    noise = stream.normal(n, student.dim)

    g = student.generate_graph(eps, pids)
    out_flat = g.data.reshape(n, student.dim)
    signal = dmd_signal(out_flat, teacher, fake, t, pids)
    psi = g * (1.0 - t) + Tensor((t * noise).reshape(n * student.frames, student.frame_dim))
    obj = tsum(psi * Tensor(signal.reshape(n * student.frames, student.frame_dim))) * (1.0 / n)
    backward(obj, store=student.store)
    grads = {name: student.store[name].grad.copy() for name in student.store.names()}
    info = {"objective": float(obj.item()), "t": float(t), "k": k_t}
    return grads, info


# ----------------------------------------------------------------- stage 1


@dataclass(frozen=True)
class DistillConfig:
    student_k: int = 4
    hidden: int = 32
    batch: int = 64
    stage1_iters: int = 2000
    fake_ratio: int = 5
    gen_lr: float = 2e-3
    fake_lr: float = 2e-3
    pair_count: int = 2048
    stage2_iters: int = 600
    reg_batch: int = 64
    reg_lr: float = 2e-3
    stage3_iters: int = 300
    stage3_lr: float = 2e-4
    rollout_batch: int = 16

    def __post_init__(self):
        if self.student_k < 1 or self.fake_ratio < 1:
            raise DistillError("student_k and fake_ratio must be at least 1")
        if min(self.batch, self.reg_batch, self.rollout_batch, self.pair_count) < 2:
            raise DistillError("batch sizes and pair_count must be at least 2")
        if min(self.gen_lr, self.fake_lr, self.reg_lr, self.stage3_lr) < 0:
            raise DistillError("learning rates must be non-negative")
        if min(self.stage1_iters, self.stage2_iters, self.stage3_iters) < 0:
            raise DistillError("iteration counts must be non-negative")


def _train_fake(
    fake: FlowNet, out_flat: np.ndarray, pids, updates: int,
    opt: AdamState, stream: RngStream,
) -> float:
    """Flow-matching updates of the fake score on generator outputs."""
    value = 0.0
    for u in range(updates):
        loss = flow_matching_loss(fake, out_flat, pids, stream.child("fm", u))
        value = loss.item()
        if not np.isfinite(value):
            raise DistillError("non-finite fake-score loss")
        backward(loss, store=fake.store)
        adam_step(fake.store, opt)
    return value


def stage1_dmd(
    teacher: TeacherModel,
    task: Task,
    config: DistillConfig,
    schedule: NoiseSchedule,
    stream: RngStream,
) -> tuple[StudentGenerator, FlowNet, list[dict]]:
    """Distill the teacher into a few-step bidirectional student.

    Alternates fake-score flow-matching updates on the student's outputs
    (config.fake_ratio per iteration) with one matching-gradient update of
    the student. Aborts and restores the last finite state on divergence.
    """
    student = StudentGenerator(
        frames=task.frames,
        frame_dim=task.dim // task.frames,
        num_prompts=task.num_prompts,
        k=config.student_k,
        mode="bidirectional",
        hidden=config.hidden,
        stream=stream.child("student-init"),
    )
    fake = make_fake_score(teacher)
    check_compatible(student, teacher, fake)
    gen_opt = AdamState(lr=config.gen_lr)
    fake_opt = AdamState(lr=config.fake_lr)
    rows_out: list[dict] = []
    last_good = (student.store.snapshot(), fake.store.snapshot())

    for it in range(config.stage1_iters):
        s = stream.child("s1", it)
        pids = np.asarray(s.integers(0, task.num_prompts, config.batch), dtype=int)
        eps = s.normal(config.batch, student.dim)
        out_flat = student.generate_np(eps, pids)
        try:
            fake_loss = _train_fake(fake, out_flat, pids, config.fake_ratio, fake_opt, s)
            grads, info = dmd_grad(student, teacher, fake, eps, pids, schedule, s.child("dmd"))
        except DistillError:
            student.store.load(last_good[0])
            fake.store.load(last_good[1])
            raise DistillError(f"diverged at stage-1 iteration {it}; last good state restored")
        if not np.isfinite(info["objective"]):
            student.store.load(last_good[0])
            fake.store.load(last_good[1])
            raise DistillError(f"diverged at stage-1 iteration {it}; last good state restored")
        gnorm = grad_norm(student.store)
        # linear decay settles the student at the matching equilibrium
        gen_opt.lr = config.gen_lr * (1.0 - it / config.stage1_iters)
        adam_step(student.store, gen_opt)
        last_good = (student.store.snapshot(), fake.store.snapshot())
        rows_out.append(
            {
                "stage": "distill1",
                "iter": it,
                "objective": info["objective"],
                "fake_loss": fake_loss,
                "fake_updates": config.fake_ratio,
                "gen_updates": 1,
                "grad_norm": float(gnorm),
            }
        )
    return student, fake, rows_out


# ----------------------------------------------------------------- stage 2


@dataclass(frozen=True)
class OdePairs:
    """Frame-aligned (noise, teacher endpoint) pairs for causal regression."""

    noise: np.ndarray  # (n, F, d)
    endpoint: np.ndarray  # (n, F, d)
    prompt_ids: np.ndarray  # (n,)

    def __post_init__(self):
        if self.noise.shape != self.endpoint.shape or self.noise.ndim != 3:
            raise DistillError("noise and endpoint must share an (n, F, d) shape")
        if self.prompt_ids.shape != (self.noise.shape[0],):
            raise DistillError("need one prompt id per pair")

    def __len__(self) -> int:
        return self.noise.shape[0]


def collect_ode_pairs(
    teacher: TeacherModel,
    prompts,
    n: int,
    schedule: NoiseSchedule,
    stream: RngStream,
) -> OdePairs:
    """n deterministic (noise, endpoint) pairs, prompts cycled in order."""
    prompts = list(prompts)
    if not prompts or n < 1:
        raise DistillError("need at least one prompt and one pair")
    pids = np.asarray([prompts[i % len(prompts)] for i in range(n)], dtype=int)
    eps = stream.normal(n, teacher.dim)
    endpoint = teacher_ode_endpoints(teacher, eps, pids, schedule)
    F, d = teacher.frames, teacher.frame_dim
    return OdePairs(
        noise=eps.reshape(n, F, d), endpoint=endpoint.reshape(n, F, d), prompt_ids=pids
    )


def init_causal_student(student: StudentGenerator) -> StudentGenerator:
    """Block-causal twin of a trained student.

    The mixing mask is structural, not a parameter, so every weight carries
    over; only the visibility pattern changes.
    """
    return student.with_mode("block-causal")


def stage2_causal_regression(
    student: StudentGenerator,
    pairs: OdePairs,
    config: DistillConfig,
    stream: RngStream,
) -> tuple[StudentGenerator, list[dict]]:
    """Regress causal k-step generations onto teacher ODE endpoints.

    Uniform mean squared error over frames and coordinates; minibatches drawn
    with replacement from the pair set.
    """
    if student.mode != "block-causal":
        raise DistillError("stage 2 needs a block-causal student")
    n = len(pairs)
    opt = AdamState(lr=config.reg_lr)
    rows_out: list[dict] = []
    last_good = student.store.snapshot()
    for it in range(config.stage2_iters):
        s = stream.child("s2", it)
        idx = s.integers(0, n, min(config.reg_batch, n))
        b = len(idx)
        eps = pairs.noise[idx].reshape(b, student.dim)
        target = pairs.endpoint[idx].reshape(b * student.frames, student.frame_dim)
        pids = pairs.prompt_ids[idx]
        g = student.generate_graph(eps, pids)
        loss = tsum(square(g - Tensor(target))) * (1.0 / target.size)
        value = loss.item()
        if not np.isfinite(value):
            student.store.load(last_good)
            raise DistillError(f"diverged at stage-2 iteration {it}; last good state restored")
        backward(loss, store=student.store)
        gnorm = grad_norm(student.store)
        adam_step(student.store, opt)
        last_good = student.store.snapshot()
        rows_out.append(
            {"stage": "distill2", "iter": it, "loss": value, "grad_norm": float(gnorm)}
        )
    return student, rows_out


def regression_loss(student: StudentGenerator, pairs: OdePairs) -> float:
    """Full-dataset mean squared endpoint error of the student's generations."""
    n = len(pairs)
    out = student.generate_np(pairs.noise.reshape(n, student.dim), pairs.prompt_ids)
    return float(((out - pairs.endpoint.reshape(n, student.dim)) ** 2).mean())


# ----------------------------------------------------------------- rollout


class FrameCache:
    """Append-only store of finished frames for one rollout."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise DistillError("cache capacity must be positive")
        self.capacity = capacity
        self._frames: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._frames)

    @property
    def frames(self) -> tuple[np.ndarray, ...]:
        return tuple(self._frames)

    def append(self, frame: np.ndarray) -> None:
        frame = np.atleast_2d(np.asarray(frame, dtype=np.float64))
        if len(self._frames) >= self.capacity:
            raise DistillError(f"frame cache is full ({self.capacity} frames)")
        if self._frames and frame.shape != self._frames[0].shape:
            raise DistillError(
                f"frame shape {frame.shape} does not match cached {self._frames[0].shape}"
            )
        self._frames.append(frame)

    def stacked(self) -> np.ndarray:
        if not self._frames:
            raise DistillError("cache is empty")
        return np.stack(self._frames, axis=1)


def generate_frame(
    student: StudentGenerator, frame_idx: int, cache: FrameCache, eps: np.ndarray, pids
) -> np.ndarray:
    """Denoise one frame in k steps against the cached clean context."""
    if frame_idx != len(cache):
        raise DistillError(f"frame {frame_idx} needs exactly {frame_idx} cached frames")
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    ctx = student.context_hidden_sum(cache, pids, eps.shape[0])
    x = eps.copy()
    dt = 1.0 / student.k
    for j in range(student.k):
        t = 1.0 - j * dt
        x = x + student.frame_velocity_np(x, frame_idx, ctx, t, pids) * (-dt)
    return x


def rollout_batch(
    student: StudentGenerator, pids, n: int, stream: RngStream
) -> np.ndarray:
    """(n, F*d) sequences generated frame by frame against the cache."""
    cache = FrameCache(student.frames)
    for i in range(student.frames):
        eps = stream.normal(n, student.frame_dim)
        cache.append(generate_frame(student, i, cache, eps, pids))
    return cache.stacked().reshape(n, student.dim)


def self_forcing_rollout(
    student: StudentGenerator, prompt_id: int, stream: RngStream
) -> FrameSequence:
    """One autoregressive rollout: each frame conditions on its predecessors."""
    flat = rollout_batch(student, prompt_id, 1, stream)
    return FrameSequence(
        frames=flat.reshape(student.frames, student.frame_dim), prompt_id=prompt_id
    )


def _rollout_graph(
    student: StudentGenerator, pids, n: int, stream: RngStream
) -> tuple[list[Tensor], np.ndarray]:
    """Differentiable rollout; cached context frames enter as constants.

    Gradients flow through each frame's own denoising chain; the cache is
    detached, mirroring inference-time reuse of finished frames.
    """
    cache = FrameCache(student.frames)
    tensors: list[Tensor] = []
    dt = 1.0 / student.k
    for i in range(student.frames):
        eps = stream.normal(n, student.frame_dim)
        ctx = student.context_hidden_sum(cache, pids, n)
        x = Tensor(eps)
        for j in range(student.k):
            t = 1.0 - j * dt
            x = x + student._frame_velocity_graph(x, i, ctx, t, pids, n) * (-dt)
        tensors.append(x)
        cache.append(x.data.copy())
    return tensors, cache.stacked().reshape(n, student.dim)


# ----------------------------------------------------------------- stage 3


def stage3_self_forcing(
    student: StudentGenerator,
    teacher: TeacherModel,
    fake: FlowNet,
    task: Task,
    config: DistillConfig,
    schedule: NoiseSchedule,
    stream: RngStream,
) -> tuple[StudentGenerator, list[dict]]:
    """Train the causal student on its own rollouts with the matching signal.

    The detached score difference is evaluated on the noised full sequence,
    then applied frame-slice by frame-slice to the rollout graph. The fake
    score keeps co-training on rollout outputs.
    """
    if student.mode != "block-causal":
        raise DistillError("stage 3 needs a block-causal student")
    check_compatible(student, teacher, fake)
    gen_opt = AdamState(lr=config.stage3_lr)
    fake_opt = AdamState(lr=config.fake_lr)
    rows_out: list[dict] = []
    last_good = (student.store.snapshot(), fake.store.snapshot())
    n = config.rollout_batch
    F, d = student.frames, student.frame_dim

    for it in range(config.stage3_iters):
        s = stream.child("s3", it)
        pid = it % task.num_prompts
        tensors, flat = _rollout_graph(student, pid, n, s.child("roll"))
        try:
            fake_loss = _train_fake(fake, flat, pid, config.fake_ratio, fake_opt, s)
        except DistillError:
            student.store.load(last_good[0])
            fake.store.load(last_good[1])
            raise DistillError(f"diverged at stage-3 iteration {it}; last good state restored")

        k_t = int(s.integers(1, schedule.steps, 1)[0])
        t = schedule.time_at(k_t)
        noise = s.normal(n, student.dim)
        psi_np = (1.0 - t) * flat + t * noise
        signal = dmd_signal(psi_np, teacher, fake, t, pid).reshape(n, F, d)
        noise3 = noise.reshape(n, F, d)
        obj = None
        for i, frame in enumerate(tensors):
            psi_i = frame * (1.0 - t) + Tensor(t * noise3[:, i, :])
            term = tsum(psi_i * Tensor(signal[:, i, :]))
            obj = term if obj is None else obj + term
        obj = obj * (1.0 / n)
        value = obj.item()
        if not np.isfinite(value):
            student.store.load(last_good[0])
            fake.store.load(last_good[1])
            raise DistillError(f"diverged at stage-3 iteration {it}; last good state restored")
        backward(obj, store=student.store)
        gnorm = grad_norm(student.store)
        gen_opt.lr = config.stage3_lr * (1.0 - it / config.stage3_iters)
        adam_step(student.store, gen_opt)
        last_good = (student.store.snapshot(), fake.store.snapshot())
        # motion smoothness is only defined from 3 frames up
        r_motion = (
            float(np.mean(reward_motion(flat.reshape(n, F, d)))) if F >= 3 else 0.0
        )
        rows_out.append(
            {
                "stage": "distill3",
                "iter": it,
                "objective": value,
                "fake_loss": fake_loss,
                "r_motion": r_motion,
                "grad_norm": float(gnorm),
            }
        )
    return student, rows_out


# --------------------------------------------------------------- causality


@dataclass(frozen=True)
class FrameProbe:
    frame: int
    earlier_unchanged: bool
    frame_changed: bool


@dataclass(frozen=True)
class CausalityReport:
    mode: str
    probes: tuple[FrameProbe, ...]

    @property
    def passed(self) -> bool:
        return all(p.earlier_unchanged and p.frame_changed for p in self.probes)

    def summary(self) -> str:
        lines = [f"causality probe ({self.mode}): {'pass' if self.passed else 'FAIL'}"]
        for p in self.probes:
            lines.append(
                f"  frame {p.frame}: earlier_unchanged={p.earlier_unchanged} "
                f"frame_changed={p.frame_changed}"
            )
        return "\n".join(lines)


def causality_probe(
    student: StudentGenerator,
    prompt_id: int = 0,
    stream: RngStream | None = None,
    bump: float = 0.75,
) -> CausalityReport:
    """Perturb each frame's noise and check which output frames move.

    A block-causal student must leave frames before the perturbed index
    bit-identical while the perturbed frame itself responds; a bidirectional
    student fails by construction.
    """
    stream = stream or RngStream(0, ("probe", "causality"))
    F, d = student.frames, student.frame_dim
    eps = stream.normal(1, student.dim)
    base = student.generate_np(eps, prompt_id).reshape(F, d)
    probes = []
    for j in range(F):
        shifted = eps.copy()
        shifted[0, j * d:(j + 1) * d] += bump
        out = student.generate_np(shifted, prompt_id).reshape(F, d)
        earlier = all(np.array_equal(out[i], base[i]) for i in range(j))
        changed = not np.array_equal(out[j], base[j])
        probes.append(FrameProbe(frame=j, earlier_unchanged=earlier, frame_changed=changed))
    return CausalityReport(mode=student.mode, probes=tuple(probes))


# ------------------------------------------------------------ error growth


def frame_errors(flat: np.ndarray, law) -> np.ndarray:
    """(F,) mean per-frame distance to the analytic trajectory."""
    traj = law.trajectory()
    F = traj.shape[0]
    x = np.atleast_2d(np.asarray(flat, dtype=np.float64)).reshape(-1, F, traj.shape[1])
    return np.linalg.norm(x - traj, axis=2).mean(axis=0)


def error_growth_slope(errors: np.ndarray) -> float:
    """Least-squares slope of per-frame error against frame index."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size < 2:
        raise DistillError("need at least two frames to fit a slope")
    return float(np.polyfit(np.arange(errors.size), errors, 1)[0])


def exposure_profile(
    student: StudentGenerator, task: Task, prompt_id: int, n: int, stream: RngStream
) -> np.ndarray:
    """Per-frame rollout error against the prompt's analytic dynamics."""
    flat = rollout_batch(student, prompt_id, n, stream)
    return frame_errors(flat, task.prompt(prompt_id).law)


def paired_exposure_report(
    student_a: StudentGenerator,
    student_b: StudentGenerator,
    task: Task,
    n: int,
    stream: RngStream,
) -> dict:
    """Exposure-bias comparison of two students on identical rollout noise.

    Per-frame error profiles are averaged over all prompts; the headline
    slope for each student is the error-growth slope of that mean profile.
    """
    errs_a = np.zeros(task.frames)
    errs_b = np.zeros(task.frames)
    for pid in range(task.num_prompts):
        errs_a += exposure_profile(student_a, task, pid, n, stream.child("roll", pid))
        errs_b += exposure_profile(student_b, task, pid, n, stream.child("roll", pid))
    errs_a /= task.num_prompts
    errs_b /= task.num_prompts
    return {
        "n": n,
        "stage2_errors": errs_a,
        "stage3_errors": errs_b,
        "stage2_slope": error_growth_slope(errs_a),
        "stage3_slope": error_growth_slope(errs_b),
    }


# ------------------------------------------------------------ orchestration


@dataclass(frozen=True)
class DistillResult:
    stage1_student: StudentGenerator
    stage2_student: StudentGenerator
    student: StudentGenerator
    fake: FlowNet
    rows: list[dict] = field(default_factory=list)
    exposure: dict | None = None


def run_distillation(
    teacher: TeacherModel,
    task: Task,
    config: DistillConfig,
    schedule: NoiseSchedule,
    stream: RngStream,
) -> DistillResult:
    """Full three-stage distillation plus a paired exposure-bias comparison."""
    student1, fake, rows1 = stage1_dmd(teacher, task, config, schedule, stream.child("stage1"))
    pairs = collect_ode_pairs(
        teacher, range(task.num_prompts), config.pair_count, schedule, stream.child("pairs")
    )
    student2 = init_causal_student(student1)
    student2, rows2 = stage2_causal_regression(student2, pairs, config, stream.child("stage2"))
    stage2_frozen = student2.clone()
    student3, rows3 = stage3_self_forcing(
        student2, teacher, fake, task, config, schedule, stream.child("stage3")
    )

    # slope fits need at least two frames; single-frame tasks have no
    # autoregression to expose, so the report is omitted there
    exposure = None
    if task.frames >= 2:
        exposure = paired_exposure_report(
            stage2_frozen, student3, task, 256, stream.child("expo")
        )

    return DistillResult(
        stage1_student=student1,
        stage2_student=stage2_frozen,
        student=student3,
        fake=fake,
        rows=rows1 + rows2 + rows3,
        exposure=exposure,
    )

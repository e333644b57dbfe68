"""Paired Good-Same-Bad evaluation between two checkpoints.

Both arms integrate from the same per-prompt base noise, so reward
differences come from the models alone. The report covers the aggregate
reward and each component aspect; fractions are averaged over prompts with
equal pair counts, so good + same + bad stays exactly 1 per aspect.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..ardistill import FrameCache, StudentGenerator, generate_frame
from ..checkpointio import load_checkpoint
from ..diffcore import RngStream
from ..flowsde import NoiseSchedule, ode_step
from ..genmodel import FlowNet, Task
from ..promptenh import EnhancerPolicy, default_vocab, resolve_guidance, sample_enhanced
from ..rewards import component_matrix, gsb_compare
from .config import ExperimentConfig, PipelineError
from .stages import check_config_hash, frozen_weights

ASPECTS = ("aggregate", "alignment", "video", "image", "motion")


@dataclass(frozen=True)
class EvalReport:
    """GSB fractions per aspect plus the sampling setup that produced them."""

    name_a: str
    name_b: str
    aspects: dict
    pairs: int
    delta: float
    prompt_ids: tuple
    structure_valid_a: float | None = None
    structure_valid_b: float | None = None

    def gap(self, aspect: str) -> float:
        good, _, bad = self.aspects[aspect]
        return good - bad

    def to_csv(self) -> str:
        lines = ["aspect,good,same,bad"]
        for aspect in ASPECTS:
            good, same, bad = self.aspects[aspect]
            lines.append(f"{aspect},{repr(good)},{repr(same)},{repr(bad)}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        lines = [
            f"GSB evaluation: A = {self.name_a} vs B = {self.name_b}",
            f"prompts {','.join(str(p) for p in self.prompt_ids)}; "
            f"{self.pairs} pairs; margin delta = {self.delta:g}",
        ]
        for aspect in ASPECTS:
            good, same, bad = self.aspects[aspect]
            lines.append(
                f"  {aspect:<10} good {good:6.3f}  same {same:6.3f}  "
                f"bad {bad:6.3f}  (good-bad {good - bad:+.3f})"
            )
        if self.structure_valid_a is not None:
            lines.append(f"  structure-valid fraction (A) {self.structure_valid_a:.3f}")
        if self.structure_valid_b is not None:
            lines.append(f"  structure-valid fraction (B) {self.structure_valid_b:.3f}")
        return "\n".join(lines)


class _FlowNetArm:
    def __init__(self, net: FlowNet, task: Task, schedule: NoiseSchedule):
        if net.dim != task.dim or net.num_prompts != task.num_prompts:
            raise PipelineError("checkpoint dimensions do not match the task")
        self.net = net
        self.schedule = schedule
        self.structure_valid = None

    def sample(self, pid: int, base: np.ndarray, stream: RngStream) -> np.ndarray:
        x = base.copy()
        for k in range(self.schedule.steps):
            v = self.net.forward_np(x, self.schedule.time_at(k), pid)
            x = ode_step(x, v, self.schedule.dt)
        return x


class _EnhancerArm:
    """Enhanced sampling: tokens from the policy steer the generator.

    Token draws use a child stream keyed only by the prompt, so two arms
    holding identical policies draw identical sequences and compare as equal.
    """

    def __init__(self, policy, net: FlowNet, task: Task, schedule: NoiseSchedule, stream):
        if net.dim != task.dim or net.num_prompts != task.num_prompts:
            raise PipelineError("generator checkpoint does not match the task")
        if policy.num_prompts != task.num_prompts:
            raise PipelineError("enhancer checkpoint does not match the task")
        self.policy = policy
        self.net = net
        self.task = task
        self.schedule = schedule
        self.vocab = default_vocab(task.dim)
        fractions = []
        for pid in range(task.num_prompts):
            s = stream.child("structure", pid)
            draws = [sample_enhanced(policy, self.vocab, pid, s.child(i)) for i in range(50)]
            fractions.append(np.mean([d.structure_valid for d in draws]))
        self.structure_valid = float(np.mean(fractions))

    def sample(self, pid: int, base: np.ndarray, stream: RngStream) -> np.ndarray:
        enhanced = sample_enhanced(self.policy, self.vocab, pid, stream.child("tokens", pid))
        anchor = self.task.prompts[pid].law.moments()[0]
        pulls, noise_scale = resolve_guidance(self.vocab, enhanced.tokens, anchor)
        x = noise_scale * base
        for k in range(self.schedule.steps):
            v = self.net.forward_np(x, self.schedule.time_at(k), pid)
            for strength, target in pulls:
                v = v + strength * (x - target)
            x = ode_step(x, v, self.schedule.dt)
        return x


class _StudentArm:
    def __init__(self, student: StudentGenerator, task: Task):
        if student.dim != task.dim or student.num_prompts != task.num_prompts:
            raise PipelineError("student checkpoint does not match the task")
        self.student = student
        self.structure_valid = None

    def sample(self, pid: int, base: np.ndarray, stream: RngStream) -> np.ndarray:
        n = base.shape[0]
        pids = np.full(n, pid)
        if self.student.mode == "block-causal":
            eps = base.reshape(n, self.student.frames, self.student.frame_dim)
            cache = FrameCache(self.student.frames)
            for i in range(self.student.frames):
                cache.append(generate_frame(self.student, i, cache, eps[:, i, :], pids))
            return cache.stacked().reshape(n, self.student.dim)
        return self.student.generate_np(base, pids)


def _make_arm(path, config, task, schedule, out_dir, stream):
    ckpt = load_checkpoint(path)
    check_config_hash(ckpt, config, path)
    kind = ckpt.metadata.get("model", "")
    if kind == "flownet":
        return _FlowNetArm(FlowNet.from_checkpoint(ckpt), task, schedule)
    if kind == "enhancer":
        from .stages import checkpoint_file, load_flownet

        generator_path = checkpoint_file(out_dir, "rlhf")
        if not generator_path.exists():
            raise PipelineError("enhanced sampling requires stage: rlhf")
        net = load_flownet(generator_path, config)
        policy = EnhancerPolicy.from_checkpoint(ckpt)
        return _EnhancerArm(policy, net, task, schedule, stream)
    if kind == "student":
        return _StudentArm(StudentGenerator.from_checkpoint(ckpt), task)
    raise PipelineError(f"{path}: cannot evaluate checkpoints of model kind '{kind}'")


def _arm_name(path) -> str:
    return Path(path).stem


def evaluate_checkpoints(
    config: ExperimentConfig,
    path_a,
    path_b,
    out_dir=None,
    prompt_ids=None,
    pairs: int | None = None,
    delta: float | None = None,
    write_report: bool = True,
) -> EvalReport:
    """Compare two checkpoints with paired sampling and GSB fractions.

    pairs is the minimum total number of comparisons; it is split evenly
    across the prompt set (rounded up). Writes gsb_report.csv and
    gsb_summary.txt into the output directory unless write_report is False.
    """
    out = Path(out_dir) if out_dir is not None else Path(config.out_dir)
    task = config.task()
    schedule = config.schedule()
    ids = list(prompt_ids) if prompt_ids is not None else list(range(task.num_prompts))
    if not ids:
        raise PipelineError("prompt set is empty")
    for pid in ids:
        if not 0 <= pid < task.num_prompts:
            raise PipelineError(f"prompt id {pid} is not defined for task '{task.name}'")
    total = pairs if pairs is not None else config.eval_pairs
    if total < 1:
        raise PipelineError("need at least one comparison pair")
    margin = delta if delta is not None else config.eval_delta
    if margin < 0:
        raise PipelineError("GSB margin must be nonnegative")
    per_prompt = -(-total // len(ids))  # ceil division

    stream = RngStream(config.seed, ("eval",))
    arm_a = _make_arm(path_a, config, task, schedule, out, stream.child("arm", 0))
    arm_b = _make_arm(path_b, config, task, schedule, out, stream.child("arm", 1))
    weights = frozen_weights(config, task, schedule, out)

    triples = {aspect: [] for aspect in ASPECTS}
    for pid in ids:
        base = stream.child("noise", pid).normal(per_prompt, task.dim)
        x_a = arm_a.sample(pid, base, stream)
        x_b = arm_b.sample(pid, base, stream)
        scorers = {
            "aggregate": lambda x, p=pid: weights.aggregate(component_matrix(task, p, x)),
            "alignment": lambda x, p=pid: component_matrix(task, p, x)[:, 0],
            "video": lambda x, p=pid: component_matrix(task, p, x)[:, 1],
            "image": lambda x, p=pid: component_matrix(task, p, x)[:, 2],
            "motion": lambda x, p=pid: component_matrix(task, p, x)[:, 3],
        }
        for aspect in ASPECTS:
            triples[aspect].append(gsb_compare(x_a, x_b, scorers[aspect], margin))

    aspects = {}
    for aspect in ASPECTS:
        arr = np.asarray(triples[aspect])
        good = float(arr[:, 0].mean())
        bad = float(arr[:, 2].mean())
        aspects[aspect] = (good, 1.0 - good - bad, bad)

    report = EvalReport(
        name_a=_arm_name(path_a),
        name_b=_arm_name(path_b),
        aspects=aspects,
        pairs=per_prompt * len(ids),
        delta=margin,
        prompt_ids=tuple(ids),
        structure_valid_a=arm_a.structure_valid,
        structure_valid_b=arm_b.structure_valid,
    )
    if write_report:
        out.mkdir(parents=True, exist_ok=True)
        (out / "gsb_report.csv").write_text(report.to_csv(), encoding="utf-8")
        (out / "gsb_summary.txt").write_text(report.summary() + "\n", encoding="utf-8")
    return report

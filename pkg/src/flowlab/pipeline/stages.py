"""Stage execution: the pretrain -> sft -> rlhf -> {pe, distill} DAG.

Each stage reads only the checkpoints it declares, seeds every random draw
from the config seed under a stage-specific label, and writes its checkpoint
plus a metrics CSV into the output directory. Re-running a stage with the
same config overwrites both files with identical bytes.
"""

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..ardistill import TeacherModel, run_distillation
from ..checkpointio import Checkpoint, load_checkpoint, save_checkpoint
from ..diffcore import RngStream
from ..flowsde import NoiseSchedule
from ..genmodel import FlowNet, Task, pretrain, sft, validity_rate
from ..grpoflow import rlhf_train
from ..promptenh import default_vocab, make_enhancer, outcome_weights, pe_grpo_train
from ..rewards import RewardWeights, freeze_reward_stats
from .config import ExperimentConfig, PipelineError
from .metrics import write_metrics

STAGES = ("pretrain", "sft", "rlhf", "pe", "distill")

# prerequisite checkpoint per stage: supervised tuning grounds the RL phases,
# and both input-side enhancement and distillation start from the RL policy
REQUIRES = {
    "pretrain": None,
    "sft": "pretrain",
    "rlhf": "sft",
    "pe": "rlhf",
    "distill": "rlhf",
}


class ConfigHashWarning(UserWarning):
    """A checkpoint was produced under a different configuration."""


@dataclass(frozen=True)
class StageResult:
    stage: str
    checkpoint_path: Path
    metrics_path: Path
    rows: list = field(default_factory=list)
    status: dict = field(default_factory=dict)


def checkpoint_file(out_dir, stage: str) -> Path:
    return Path(out_dir) / f"{stage}.ckpt"


def metrics_file(out_dir, stage: str) -> Path:
    return Path(out_dir) / f"metrics_{stage}.csv"


def check_config_hash(ckpt: Checkpoint, config: ExperimentConfig, path) -> None:
    stored = ckpt.metadata.get("config_hash", "")
    if stored and stored != config.config_hash:
        warnings.warn(
            f"{path}: checkpoint config hash {stored} does not match the "
            f"current config ({config.config_hash})",
            ConfigHashWarning,
            stacklevel=3,
        )


def load_flownet(path, config: ExperimentConfig) -> FlowNet:
    ckpt = load_checkpoint(path)
    check_config_hash(ckpt, config, path)
    kind = ckpt.metadata.get("model", "")
    if kind != "flownet":
        raise PipelineError(f"{path}: expected a flownet checkpoint, found '{kind}'")
    return FlowNet.from_checkpoint(ckpt)


def frozen_weights(
    config: ExperimentConfig, task: Task, schedule: NoiseSchedule, out_dir
) -> RewardWeights:
    """Aggregate reward weights with z-statistics frozen on the supervised
    reference policy; raw weights when no reference checkpoint exists yet."""
    weights = np.asarray(config.reward_weight_values)
    sft_path = checkpoint_file(out_dir, "sft")
    if sft_path.exists():
        model = load_flownet(sft_path, config)
        return freeze_reward_stats(
            task,
            model,
            schedule,
            RngStream(config.seed, ("rewards", "freeze")),
            weights=weights,
        )
    return RewardWeights(weights=weights)


def _require(stage: str, out_dir: Path) -> None:
    required = REQUIRES[stage]
    if required is None:
        return
    if not checkpoint_file(out_dir, required).exists():
        raise PipelineError(f"stage '{stage}' requires stage: {required}")


def _loss_rows(stage: str, logs, validity: float) -> list[dict]:
    # supervised losses have no column in the shared schema; the rows still
    # record progress ticks, and the final row carries the validity rate
    rows = [{"stage": stage, "iter": int(entry["iter"])} for entry in logs]
    if rows:
        rows[-1]["validity"] = validity
    return rows


def _run_pretrain(config, task, schedule, out_dir):
    model, logs = pretrain(
        task, config.train_config("pretrain"), RngStream(config.seed, ("pretrain",))
    )
    validity = validity_rate(
        model, task, schedule, RngStream(config.seed, ("pretrain", "validity"))
    )
    rows = _loss_rows("pretrain", logs, validity)
    ckpt = model.to_checkpoint(
        stage="pretrain",
        iteration=str(config.get("pretrain", "steps")),
        config_hash=config.config_hash,
        task=task.name,
    )
    return ckpt, rows, {"validity": validity}


def _run_sft(config, task, schedule, out_dir):
    base = load_flownet(checkpoint_file(out_dir, "pretrain"), config)
    tuned, logs = sft(
        base, task, config.train_config("sft"), RngStream(config.seed, ("sft",))
    )
    validity = validity_rate(
        tuned, task, schedule, RngStream(config.seed, ("sft", "validity"))
    )
    rows = _loss_rows("sft", logs, validity)
    ckpt = tuned.to_checkpoint(
        stage="sft",
        iteration=str(config.get("sft", "steps")),
        config_hash=config.config_hash,
        task=task.name,
    )
    return ckpt, rows, {"validity": validity}


def _run_rlhf(config, task, schedule, out_dir):
    model = load_flownet(checkpoint_file(out_dir, "sft"), config)
    weights = frozen_weights(config, task, schedule, out_dir)
    model, rows, status = rlhf_train(
        model,
        task,
        config.grpo_config(),
        weights,
        schedule,
        RngStream(config.seed, ("rlhf",)),
    )
    rows = [dict(row) for row in rows]
    validity = validity_rate(
        model, task, schedule, RngStream(config.seed, ("rlhf", "validity"))
    )
    if rows:
        rows[-1]["validity"] = validity
    status = dict(status, validity=validity)
    ckpt = model.to_checkpoint(
        stage="rlhf",
        iteration=str(status.get("iterations_run", 0)),
        config_hash=config.config_hash,
        task=task.name,
        halted=str(bool(status.get("halted", False))),
    )
    return ckpt, rows, status


def _run_pe(config, task, schedule, out_dir):
    generator = load_flownet(checkpoint_file(out_dir, "rlhf"), config)
    vocab = default_vocab(task.dim)
    policy = make_enhancer(
        task.num_prompts, vocab, stream=RngStream(config.seed, ("pe", "init"))
    )
    # outcome weighting over alignment and video aesthetic, z-scored against
    # the generator the enhancer will steer
    weights = freeze_reward_stats(
        task,
        generator,
        schedule,
        RngStream(config.seed, ("rewards", "pe")),
        weights=outcome_weights().weights,
    )
    policy, rows, status = pe_grpo_train(
        policy,
        generator,
        task,
        vocab,
        config.pe_config(),
        weights,
        schedule,
        RngStream(config.seed, ("pe",)),
    )
    rows = [dict(row) for row in rows]
    ckpt = policy.to_checkpoint(
        stage="pe",
        iteration=str(status.get("iterations_run", 0)),
        config_hash=config.config_hash,
        task=task.name,
    )
    return ckpt, rows, status


def _run_distill(config, task, schedule, out_dir):
    net = load_flownet(checkpoint_file(out_dir, "rlhf"), config)
    teacher = TeacherModel(net, frames=task.frames)
    result = run_distillation(
        teacher,
        task,
        config.distill_config(),
        schedule,
        RngStream(config.seed, ("distill",)),
    )
    rows = [dict(row) for row in result.rows]
    dc = config.distill_config()
    total = dc.stage1_iters + dc.stage2_iters + dc.stage3_iters
    ckpt = result.student.to_checkpoint(
        stage="distill",
        iteration=str(total),
        config_hash=config.config_hash,
        task=task.name,
    )
    status = {"exposure": result.exposure}
    if result.exposure is not None:
        _write_exposure(Path(out_dir) / "exposure_bias.csv", result.exposure)
        status["stage2_slope"] = result.exposure["stage2_slope"]
        status["stage3_slope"] = result.exposure["stage3_slope"]
    return ckpt, rows, status


def _write_exposure(path: Path, exposure: dict) -> None:
    lines = ["frame,stage2_error,stage3_error"]
    errs2 = exposure["stage2_errors"]
    errs3 = exposure["stage3_errors"]
    for frame, (e2, e3) in enumerate(zip(errs2, errs3)):
        lines.append(f"{frame},{repr(float(e2))},{repr(float(e3))}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


_RUNNERS = {
    "pretrain": _run_pretrain,
    "sft": _run_sft,
    "rlhf": _run_rlhf,
    "pe": _run_pe,
    "distill": _run_distill,
}


def run_stage(stage: str, config: ExperimentConfig, out_dir=None) -> StageResult:
    """Run one stage end to end and write its artifacts.

    The prerequisite checkpoint must already exist in the output directory;
    a missing one is an error naming the stage that has to run first.
    """
    if stage not in _RUNNERS:
        raise PipelineError(f"unknown stage '{stage}' (expected one of {', '.join(STAGES)})")
    out = Path(out_dir) if out_dir is not None else Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _require(stage, out)
    task = config.task()
    schedule = config.schedule()
    ckpt, rows, status = _RUNNERS[stage](config, task, schedule, out)
    ckpt_path = checkpoint_file(out, stage)
    csv_path = metrics_file(out, stage)
    save_checkpoint(ckpt, ckpt_path)
    write_metrics(csv_path, rows)
    return StageResult(
        stage=stage,
        checkpoint_path=ckpt_path,
        metrics_path=csv_path,
        rows=rows,
        status=status,
    )


def run_pipeline(config: ExperimentConfig, out_dir=None, stages=STAGES) -> list[StageResult]:
    """Run the given stages in pipeline order."""
    order = [s for s in STAGES if s in stages]
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise PipelineError(f"unknown stage '{sorted(unknown)[0]}'")
    return [run_stage(stage, config, out_dir=out_dir) for stage in order]

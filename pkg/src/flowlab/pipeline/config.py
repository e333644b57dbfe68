"""Experiment configuration: flat `key = value` text with [section] headers.

The config carries one global seed, the task choice, the sampling schedule,
and per-stage hyperparameters. Unknown sections or keys fail at parse time
with the offending line number; silent typos in experiment configs are far
more expensive than a strict parser.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ..ardistill import DistillConfig
from ..flowsde import NoiseSchedule
from ..genmodel import Task, TrainConfig, make_task
from ..grpoflow import GrpoConfig
from ..promptenh import PeConfig


class PipelineError(ValueError):
    pass


TOP = ""  # section name for keys above the first header


def _parse_int(text: str) -> int:
    return int(text, 10)


def _parse_float(text: str) -> float:
    value = float(text)
    if not np.isfinite(value):
        raise ValueError("value must be finite")
    return value


def _parse_str(text: str) -> str:
    if not text:
        raise ValueError("value must be non-empty")
    return text


def _parse_weights(text: str) -> tuple[float, ...]:
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 4:
        raise ValueError("weights need exactly 4 comma-separated values")
    return tuple(float(p) for p in parts)


# (section, key) -> (parser, default). The parser also normalizes values
# arriving from CLI overrides, so every stored value has a canonical type.
SCHEMA: dict[str, dict[str, tuple]] = {
    TOP: {
        "seed": (_parse_int, 0),
        "task": (_parse_str, "point"),
        "frames": (_parse_int, 8),
        "out": (_parse_str, "runs/default"),
    },
    "schedule": {
        "steps": (_parse_int, 25),
        "eta": (_parse_float, 0.7),
        "t_min": (_parse_float, 0.04),
        "t_max": (_parse_float, 0.96),
    },
    "rewards": {
        "weights": (_parse_weights, (0.3, 0.3, 0.2, 0.2)),
    },
    "pretrain": {
        "steps": (_parse_int, 1500),
        "batch": (_parse_int, 128),
        "lr": (_parse_float, 2e-3),
        "corruption": (_parse_float, 0.2),
        "samples_per_prompt": (_parse_int, 1000),
        "distractor_scale": (_parse_float, 4.0),
    },
    "sft": {
        "steps": (_parse_int, 1500),
        "batch": (_parse_int, 128),
        "lr": (_parse_float, 2e-3),
        "samples_per_prompt": (_parse_int, 1000),
    },
    "rlhf": {
        "iterations": (_parse_int, 300),
        "group_size": (_parse_int, 8),
        "n_groups": (_parse_int, 8),
        "clip": (_parse_float, 0.2),
        "lr": (_parse_float, 1e-3),
        "inner_steps": (_parse_int, 1),
    },
    "pe": {
        "iterations": (_parse_int, 200),
        "group_size": (_parse_int, 8),
        "clip": (_parse_float, 0.2),
        "beta_kl": (_parse_float, 0.1),
        "lr": (_parse_float, 5e-3),
        "m_samples": (_parse_int, 64),
        "w_structure": (_parse_float, 2.0),
    },
    "distill": {
        "student_k": (_parse_int, 4),
        "hidden": (_parse_int, 32),
        "batch": (_parse_int, 64),
        "stage1_iters": (_parse_int, 2000),
        "fake_ratio": (_parse_int, 5),
        "gen_lr": (_parse_float, 2e-3),
        "fake_lr": (_parse_float, 2e-3),
        "pair_count": (_parse_int, 2048),
        "stage2_iters": (_parse_int, 600),
        "reg_batch": (_parse_int, 64),
        "reg_lr": (_parse_float, 2e-3),
        "stage3_iters": (_parse_int, 300),
        "stage3_lr": (_parse_float, 2e-4),
        "rollout_batch": (_parse_int, 16),
    },
    "eval": {
        "pairs": (_parse_int, 256),
        "delta": (_parse_float, 0.1),
    },
}


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    """Typed view over the full (section, key) -> value table."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        table = {}
        for section, keys in SCHEMA.items():
            for key, (_, default) in keys.items():
                table[(section, key)] = default
        for loc, value in self.values.items():
            if loc not in table:
                section, key = loc
                raise PipelineError(f"unknown config entry [{section}] {key}")
            table[loc] = value
        object.__setattr__(self, "values", table)
        self.validate()

    # ------------------------------------------------------------ access

    def get(self, section: str, key: str):
        try:
            return self.values[(section, key)]
        except KeyError:
            raise PipelineError(f"unknown config entry [{section}] {key}") from None

    @property
    def seed(self) -> int:
        return self.get(TOP, "seed")

    @property
    def task_name(self) -> str:
        return self.get(TOP, "task")

    @property
    def frames(self) -> int:
        return self.get(TOP, "frames")

    @property
    def out_dir(self) -> str:
        return self.get(TOP, "out")

    @property
    def reward_weight_values(self) -> tuple[float, ...]:
        return self.get("rewards", "weights")

    def task(self) -> Task:
        return make_task(self.task_name, frames=self.frames)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(
            steps=self.get("schedule", "steps"),
            eta=self.get("schedule", "eta"),
            t_min=self.get("schedule", "t_min"),
            t_max=self.get("schedule", "t_max"),
        )

    def train_config(self, stage: str) -> TrainConfig:
        if stage == "pretrain":
            return TrainConfig(
                steps=self.get("pretrain", "steps"),
                batch=self.get("pretrain", "batch"),
                lr=self.get("pretrain", "lr"),
                corruption=self.get("pretrain", "corruption"),
                samples_per_prompt=self.get("pretrain", "samples_per_prompt"),
                distractor_scale=self.get("pretrain", "distractor_scale"),
            )
        if stage == "sft":
            return TrainConfig(
                steps=self.get("sft", "steps"),
                batch=self.get("sft", "batch"),
                lr=self.get("sft", "lr"),
                corruption=0.0,
                samples_per_prompt=self.get("sft", "samples_per_prompt"),
            )
        raise PipelineError(f"no supervised training config for stage '{stage}'")

    def grpo_config(self) -> GrpoConfig:
        return GrpoConfig(
            group_size=self.get("rlhf", "group_size"),
            n_groups=self.get("rlhf", "n_groups"),
            clip_eps=self.get("rlhf", "clip"),
            lr=self.get("rlhf", "lr"),
            iterations=self.get("rlhf", "iterations"),
            inner_steps=self.get("rlhf", "inner_steps"),
        )

    def pe_config(self) -> PeConfig:
        return PeConfig(
            group_size=self.get("pe", "group_size"),
            clip_eps=self.get("pe", "clip"),
            beta_kl=self.get("pe", "beta_kl"),
            lr=self.get("pe", "lr"),
            iterations=self.get("pe", "iterations"),
            m_samples=self.get("pe", "m_samples"),
            w_structure=self.get("pe", "w_structure"),
        )

    def distill_config(self) -> DistillConfig:
        kwargs = {key: self.get("distill", key) for key in SCHEMA["distill"]}
        return DistillConfig(**kwargs)

    @property
    def eval_pairs(self) -> int:
        return self.get("eval", "pairs")

    @property
    def eval_delta(self) -> float:
        return self.get("eval", "delta")

    # -------------------------------------------------------- derivation

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """New config with (section, key) -> value entries replaced.

        String values go through the schema parser; typed values are
        normalized through it as well so CLI overrides hash identically to
        the same value written in a file.
        """
        merged = dict(self.values)
        for (section, key), value in overrides.items():
            keys = SCHEMA.get(section)
            if keys is None or key not in keys:
                raise PipelineError(f"unknown config entry [{section}] {key}")
            parser = keys[key][0]
            try:
                merged[(section, key)] = parser(
                    value if isinstance(value, str) else _format_value(value)
                )
            except ValueError as exc:
                raise PipelineError(f"bad value for [{section}] {key}: {exc}") from None
        return ExperimentConfig(values=merged)

    def canonical(self) -> str:
        """Deterministic full dump; the basis of the config hash."""
        lines = []
        for key in sorted(SCHEMA[TOP]):
            lines.append(f"{key} = {_format_value(self.get(TOP, key))}")
        for section in sorted(s for s in SCHEMA if s != TOP):
            lines.append(f"[{section}]")
            for key in sorted(SCHEMA[section]):
                lines.append(f"{key} = {_format_value(self.get(section, key))}")
        return "\n".join(lines) + "\n"

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:12]

    def validate(self) -> None:
        if self.seed < 0:
            raise PipelineError("seed must be nonnegative")
        if self.task_name not in ("point", "sequence"):
            raise PipelineError(f"unknown task '{self.task_name}'")
        if self.frames < 1:
            raise PipelineError("frames must be at least 1")
        if self.eval_pairs < 1:
            raise PipelineError("eval pairs must be at least 1")
        if self.eval_delta < 0:
            raise PipelineError("eval delta must be nonnegative")
        weights = np.asarray(self.reward_weight_values)
        if (weights < 0).any() or not (weights > 0).any():
            raise PipelineError("reward weights must be nonnegative with one positive")
        # constructing the stage configs surfaces bad numerics at load time
        try:
            self.schedule()
            self.train_config("pretrain")
            self.train_config("sft")
            self.grpo_config()
            self.pe_config()
            self.distill_config()
        except ValueError as exc:
            raise PipelineError(str(exc)) from None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse config text; any unknown section/key or bad value is an error
    naming the source line."""
    values: dict = {}
    section = TOP
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise PipelineError(f"{source}:{lineno}: unterminated section header")
            section = line[1:-1].strip()
            if section == TOP or section not in SCHEMA:
                raise PipelineError(f"{source}:{lineno}: unknown section '[{section}]'")
            continue
        if "=" not in line:
            raise PipelineError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        keys = SCHEMA[section]
        if key not in keys:
            where = f"section '[{section}]'" if section != TOP else "the top level"
            raise PipelineError(f"{source}:{lineno}: unknown key '{key}' in {where}")
        if (section, key) in values:
            raise PipelineError(f"{source}:{lineno}: duplicate key '{key}'")
        try:
            values[(section, key)] = keys[key][0](value)
        except ValueError as exc:
            raise PipelineError(f"{source}:{lineno}: bad value for '{key}': {exc}") from None
    return ExperimentConfig(values=values)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise PipelineError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, source=str(path))


def default_config() -> ExperimentConfig:
    return ExperimentConfig()

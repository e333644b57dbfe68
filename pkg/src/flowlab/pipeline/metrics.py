"""Fixed-schema metrics CSV shared by every stage.

One header for the whole pipeline keeps downstream tooling trivial; stages
that do not produce a given quantity write 0.0 in that column. Values are
serialized with repr so a re-run with the same seed reproduces the file byte
for byte; for the same reason the seconds column is always 0.0 (wall time is
the one quantity a deterministic re-run cannot reproduce).
"""

from pathlib import Path

from .config import PipelineError

METRICS_HEADER = (
    "stage",
    "iter",
    "seconds",
    "mean_reward",
    "r_align",
    "r_video",
    "r_image",
    "r_motion",
    "kl",
    "clip_frac",
    "grad_norm",
    "validity",
)


def rows_to_csv(rows) -> str:
    """Serialize metric rows (dicts keyed by column name) to CSV text.

    Missing columns default to 0.0. Iterations must be strictly increasing
    within each stage tag; rows are append-only.
    """
    lines = [",".join(METRICS_HEADER)]
    last_iter: dict[str, int] = {}
    for i, row in enumerate(rows):
        stage = str(row.get("stage", "")).strip()
        if not stage:
            raise PipelineError(f"metrics row {i} is missing its stage tag")
        if "," in stage:
            raise PipelineError(f"metrics row {i}: stage tag may not contain commas")
        iteration = int(row.get("iter", 0))
        if stage in last_iter and iteration <= last_iter[stage]:
            raise PipelineError(
                f"metrics row {i}: iteration {iteration} does not advance "
                f"stage '{stage}' past {last_iter[stage]}"
            )
        last_iter[stage] = iteration
        cells = [stage, str(iteration)]
        for column in METRICS_HEADER[2:]:
            value = float(row.get(column, 0.0))
            cells.append(repr(value))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_metrics(path, rows) -> None:
    Path(path).write_text(rows_to_csv(rows), encoding="utf-8")


def read_metrics(path) -> list[dict]:
    """Read a metrics CSV back into dict rows (floats except stage/iter)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or tuple(lines[0].split(",")) != METRICS_HEADER:
        raise PipelineError(f"{path}:1: not a metrics file (wrong header)")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(METRICS_HEADER):
            raise PipelineError(
                f"{path}:{lineno}: expected {len(METRICS_HEADER)} fields, "
                f"found {len(cells)}"
            )
        row: dict = {"stage": cells[0], "iter": int(cells[1])}
        for column, cell in zip(METRICS_HEADER[2:], cells[2:]):
            try:
                row[column] = float(cell)
            except ValueError:
                raise PipelineError(
                    f"{path}:{lineno}: bad number '{cell}' in column '{column}'"
                ) from None
        rows.append(row)
    return rows

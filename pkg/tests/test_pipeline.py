"""Pipeline orchestration: config parsing, stage DAG, evaluation, plotting."""

import numpy as np
import pytest

from flowlab.checkpointio import load_checkpoint, save_checkpoint
from flowlab.genmodel import FlowNet
from flowlab.pipeline import (
    METRICS_HEADER,
    ConfigHashWarning,
    PipelineError,
    checkpoint_file,
    default_config,
    evaluate_checkpoints,
    metrics_file,
    parse_config,
    read_metrics,
    render_plot,
    rows_to_csv,
    run_pipeline,
    run_stage,
)
from flowlab.pipeline.cli import _config_from_args, build_parser, main
from flowlab.pipeline.config import load_config
from flowlab.pipeline.plotsvg import plot_csv_file
from flowlab.pipeline.stages import load_flownet

SMALL_CFG = """
seed = 7
task = point
out = {out}

[pretrain]
steps = 300
[sft]
steps = 300
[rlhf]
iterations = 20
[pe]
iterations = 15
[distill]
stage1_iters = 150
stage2_iters = 100
stage3_iters = 50
pair_count = 256
[eval]
pairs = 200
"""


@pytest.fixture(scope="module")
def ran(tmp_path_factory):
    """One small full-pipeline run shared by the read-only tests."""
    out = tmp_path_factory.mktemp("pipe")
    cfg = parse_config(SMALL_CFG.format(out=out))
    results = run_pipeline(cfg)
    return cfg, out, {r.stage: r for r in results}


# ------------------------------------------------------------------ config


def test_default_config_values():
    cfg = default_config()
    assert cfg.seed == 0
    assert cfg.task_name == "point"
    assert cfg.get("rlhf", "iterations") == 300
    assert cfg.get("rlhf", "group_size") == 8
    assert cfg.get("pe", "beta_kl") == 0.1
    assert cfg.reward_weight_values == (0.3, 0.3, 0.2, 0.2)
    assert len(cfg.config_hash) == 12
    int(cfg.config_hash, 16)


def test_parse_sections_and_values():
    cfg = parse_config(
        "seed = 11\ntask = sequence\nframes = 4\n"
        "[schedule]\nsteps = 10\n[rlhf]\nclip = 0.3\n"
        "[rewards]\nweights = 0.4, 0.3, 0.2, 0.1\n"
    )
    assert cfg.seed == 11
    assert cfg.task().frames == 4
    assert cfg.schedule().steps == 10
    assert cfg.grpo_config().clip_eps == 0.3
    assert cfg.reward_weight_values == (0.4, 0.3, 0.2, 0.1)


def test_parse_ignores_comments_and_blanks():
    cfg = parse_config("# comment\n\n; also comment\nseed = 5\n")
    assert cfg.seed == 5


def test_unknown_key_names_line():
    with pytest.raises(PipelineError, match=r"<config>:2: unknown key 'bogus'"):
        parse_config("seed = 1\nbogus = 2\n")


def test_unknown_key_in_section_names_line():
    with pytest.raises(PipelineError, match=r":3: unknown key 'stepz' in section '\[rlhf\]'"):
        parse_config("seed = 1\n[rlhf]\nstepz = 10\n")


def test_unknown_section_rejected():
    with pytest.raises(PipelineError, match=r":1: unknown section '\[turbo\]'"):
        parse_config("[turbo]\nx = 1\n")


def test_duplicate_key_rejected():
    with pytest.raises(PipelineError, match=r":2: duplicate key 'seed'"):
        parse_config("seed = 1\nseed = 2\n")


def test_missing_equals_rejected():
    with pytest.raises(PipelineError, match=r":1: expected 'key = value'"):
        parse_config("seed 1\n")


def test_bad_value_names_line_and_key():
    with pytest.raises(PipelineError, match=r":1: bad value for 'seed'"):
        parse_config("seed = eleven\n")
    with pytest.raises(PipelineError, match=r"weights"):
        parse_config("[rewards]\nweights = 1, 2, 3\n")


def test_semantic_validation():
    with pytest.raises(PipelineError, match="clip epsilon"):
        parse_config("[rlhf]\nclip = 1.5\n")
    with pytest.raises(PipelineError, match="task"):
        parse_config("task = cinema\n")
    with pytest.raises(PipelineError, match="frames"):
        parse_config("frames = 0\n")
    with pytest.raises(PipelineError, match="seed"):
        parse_config("seed = -1\n")
    with pytest.raises(PipelineError, match="delta"):
        parse_config("[eval]\ndelta = -0.1\n")


def test_overrides_reparse_and_rehash():
    cfg = default_config()
    tweaked = cfg.with_overrides({("rlhf", "iterations"): 12, ("rewards", "weights"): "1,0,0,0"})
    assert tweaked.get("rlhf", "iterations") == 12
    assert tweaked.reward_weight_values == (1.0, 0.0, 0.0, 0.0)
    assert tweaked.config_hash != cfg.config_hash
    with pytest.raises(PipelineError, match="unknown config entry"):
        cfg.with_overrides({("rlhf", "bogus"): 1})


def test_canonical_roundtrip():
    cfg = parse_config("seed = 9\n[pe]\nbeta_kl = 0.5\n[distill]\nstudent_k = 2\n")
    again = parse_config(cfg.canonical())
    assert again == cfg
    assert again.config_hash == cfg.config_hash


def test_load_config_missing_file(tmp_path):
    with pytest.raises(PipelineError, match="cannot read config"):
        load_config(tmp_path / "nope.cfg")


# ----------------------------------------------------------------- metrics


def test_metrics_header_and_defaults():
    text = rows_to_csv([{"stage": "rlhf", "iter": 0, "mean_reward": 0.5}])
    lines = text.splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    cells = lines[1].split(",")
    assert cells[0] == "rlhf" and cells[1] == "0"
    assert cells[3] == "0.5"
    # unfilled columns read 0.0
    assert cells[2] == "0.0" and cells[-1] == "0.0"


def test_metrics_iteration_must_advance():
    rows = [{"stage": "a", "iter": 1}, {"stage": "a", "iter": 1}]
    with pytest.raises(PipelineError, match="does not advance"):
        rows_to_csv(rows)
    # distinct stage tags keep independent counters
    rows = [{"stage": "a", "iter": 3}, {"stage": "b", "iter": 0}]
    assert rows_to_csv(rows).count("\n") == 3


def test_metrics_row_needs_stage():
    with pytest.raises(PipelineError, match="missing its stage"):
        rows_to_csv([{"iter": 0}])


def test_read_metrics_roundtrip(tmp_path):
    rows = [
        {"stage": "pe", "iter": 0, "kl": 0.25, "validity": 1.0},
        {"stage": "pe", "iter": 1, "kl": 0.125},
    ]
    p = tmp_path / "m.csv"
    p.write_text(rows_to_csv(rows))
    back = read_metrics(p)
    assert [r["iter"] for r in back] == [0, 1]
    assert back[0]["kl"] == 0.25 and back[0]["validity"] == 1.0
    assert back[1]["validity"] == 0.0


def test_read_metrics_rejects_bad_files(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("not,a,metrics,header\n")
    with pytest.raises(PipelineError, match="wrong header"):
        read_metrics(p)
    p.write_text(",".join(METRICS_HEADER) + "\nrlhf,0\n")
    with pytest.raises(PipelineError, match=r":2: expected 12 fields"):
        read_metrics(p)


# ------------------------------------------------------------------ stages


def test_artifacts_written(ran):
    cfg, out, results = ran
    for stage in ("pretrain", "sft", "rlhf", "pe", "distill"):
        assert checkpoint_file(out, stage).exists()
        assert metrics_file(out, stage).exists()
        header = metrics_file(out, stage).read_text().splitlines()[0]
        assert header == ",".join(METRICS_HEADER)
    # single-frame task: no autoregression, no exposure report
    assert not (out / "exposure_bias.csv").exists()
    assert results["distill"].status["exposure"] is None


def test_missing_prerequisite_names_stage(ran, tmp_path):
    cfg, _, _ = ran
    with pytest.raises(PipelineError, match="requires stage: sft"):
        run_stage("rlhf", cfg, out_dir=tmp_path)
    with pytest.raises(PipelineError, match="requires stage: pretrain"):
        run_stage("sft", cfg, out_dir=tmp_path)
    with pytest.raises(PipelineError, match="requires stage: rlhf"):
        run_stage("pe", cfg, out_dir=tmp_path)
    with pytest.raises(PipelineError, match="requires stage: rlhf"):
        run_stage("distill", cfg, out_dir=tmp_path)


def test_unknown_stage_rejected(ran):
    cfg, _, _ = ran
    with pytest.raises(PipelineError, match="unknown stage 'deploy'"):
        run_stage("deploy", cfg)
    with pytest.raises(PipelineError, match="unknown stage"):
        run_pipeline(cfg, stages=("pretrain", "deploy"))


def test_rerun_overwrites_identical_bytes(ran):
    cfg, out, _ = ran
    before = {
        name: (out / name).read_bytes()
        for name in ("sft.ckpt", "metrics_sft.csv", "rlhf.ckpt", "metrics_rlhf.csv")
    }
    run_stage("sft", cfg)
    run_stage("rlhf", cfg)
    for name, blob in before.items():
        assert (out / name).read_bytes() == blob, name


def test_checkpoint_metadata_stamped(ran):
    cfg, out, _ = ran
    ckpt = load_checkpoint(checkpoint_file(out, "rlhf"))
    assert ckpt.metadata["stage"] == "rlhf"
    assert ckpt.metadata["model"] == "flownet"
    assert ckpt.metadata["config_hash"] == cfg.config_hash
    assert int(ckpt.metadata["iteration"]) == 20
    assert ckpt.metadata["task"] == "point"


def test_metrics_rows_carry_training_signal(ran):
    cfg, out, results = ran
    rlhf_rows = read_metrics(metrics_file(out, "rlhf"))
    assert len(rlhf_rows) == 20
    assert all(r["stage"] == "rlhf" for r in rlhf_rows)
    assert 0.0 <= rlhf_rows[-1]["validity"] <= 1.0
    assert rlhf_rows[-1]["validity"] > 0.5  # tiny run still samples mostly in-law
    pe_rows = read_metrics(metrics_file(out, "pe"))
    assert all(np.isfinite(r["kl"]) for r in pe_rows)
    distill_rows = read_metrics(metrics_file(out, "distill"))
    stages = {r["stage"] for r in distill_rows}
    assert stages == {"distill1", "distill2", "distill3"}


def test_config_hash_mismatch_warns(ran):
    cfg, out, _ = ran
    other = cfg.with_overrides({("rlhf", "iterations"): 21})
    with pytest.warns(ConfigHashWarning, match="does not match"):
        load_flownet(checkpoint_file(out, "sft"), other)


def test_loaded_checkpoint_reproduces_model(ran):
    cfg, out, _ = ran
    net = load_flownet(checkpoint_file(out, "sft"), cfg)
    again = load_flownet(checkpoint_file(out, "sft"), cfg)
    for name in net.store.names():
        np.testing.assert_array_equal(net.store[name].data, again.store[name].data)
    assert isinstance(net, FlowNet)


# ---------------------------------------------------------------- evaluate


def test_eval_identical_checkpoints_all_same(ran):
    cfg, out, _ = ran
    report = evaluate_checkpoints(
        cfg, checkpoint_file(out, "sft"), checkpoint_file(out, "sft"), write_report=False
    )
    for aspect, (good, same, bad) in report.aspects.items():
        assert (good, same, bad) == (0.0, 1.0, 0.0), aspect


def test_eval_fractions_partition_unity(ran):
    cfg, out, _ = ran
    report = evaluate_checkpoints(
        cfg, checkpoint_file(out, "rlhf"), checkpoint_file(out, "sft"), write_report=False
    )
    for aspect, (good, same, bad) in report.aspects.items():
        assert min(good, same, bad) >= 0.0
        assert abs(good + same + bad - 1.0) < 1e-12, aspect


def test_eval_writes_report_files(ran):
    cfg, out, _ = ran
    report = evaluate_checkpoints(cfg, checkpoint_file(out, "rlhf"), checkpoint_file(out, "sft"))
    csv_text = (out / "gsb_report.csv").read_text()
    lines = csv_text.splitlines()
    assert lines[0] == "aspect,good,same,bad"
    assert len(lines) == 6
    summary = (out / "gsb_summary.txt").read_text()
    assert "aggregate" in summary and "good-bad" in summary
    assert report.pairs >= 200


def test_eval_empty_prompt_set_rejected(ran):
    cfg, out, _ = ran
    with pytest.raises(PipelineError, match="prompt set is empty"):
        evaluate_checkpoints(
            cfg, checkpoint_file(out, "sft"), checkpoint_file(out, "sft"), prompt_ids=[]
        )


def test_eval_unknown_prompt_rejected(ran):
    cfg, out, _ = ran
    with pytest.raises(PipelineError, match="prompt id 9"):
        evaluate_checkpoints(
            cfg, checkpoint_file(out, "sft"), checkpoint_file(out, "sft"), prompt_ids=[9]
        )


def test_eval_pair_budget_split_evenly(ran):
    cfg, out, _ = ran
    report = evaluate_checkpoints(
        cfg,
        checkpoint_file(out, "sft"),
        checkpoint_file(out, "sft"),
        pairs=10,
        write_report=False,
    )
    assert report.pairs == 12  # ceil(10/4) per prompt, 4 prompts


def test_eval_enhancer_needs_generator(ran, tmp_path):
    cfg, out, _ = ran
    with pytest.raises(PipelineError, match="requires stage: rlhf"):
        evaluate_checkpoints(
            cfg, checkpoint_file(out, "pe"), checkpoint_file(out, "pe"), out_dir=tmp_path
        )


def test_eval_enhancer_reports_structure(ran):
    cfg, out, _ = ran
    report = evaluate_checkpoints(
        cfg,
        checkpoint_file(out, "pe"),
        checkpoint_file(out, "rlhf"),
        pairs=40,
        write_report=False,
    )
    assert report.structure_valid_a is not None
    assert 0.0 <= report.structure_valid_a <= 1.0
    assert report.structure_valid_b is None


def test_eval_student_checkpoint_supported(ran):
    cfg, out, _ = ran
    report = evaluate_checkpoints(
        cfg,
        checkpoint_file(out, "distill"),
        checkpoint_file(out, "rlhf"),
        pairs=40,
        write_report=False,
    )
    for aspect, (good, same, bad) in report.aspects.items():
        assert abs(good + same + bad - 1.0) < 1e-12


def test_eval_rejects_unknown_model_kind(ran, tmp_path):
    cfg, out, _ = ran
    ckpt = load_checkpoint(checkpoint_file(out, "sft"))
    ckpt.metadata["model"] = "mystery"
    odd = tmp_path / "odd.ckpt"
    save_checkpoint(ckpt, odd)
    with pytest.raises(PipelineError, match="model kind 'mystery'"):
        evaluate_checkpoints(cfg, odd, odd, write_report=False)


def test_eval_negative_delta_rejected(ran):
    cfg, out, _ = ran
    with pytest.raises(PipelineError, match="nonnegative"):
        evaluate_checkpoints(
            cfg, checkpoint_file(out, "sft"), checkpoint_file(out, "sft"), delta=-0.1
        )


# -------------------------------------------------------------------- plot


def test_plot_two_rows_single_segment():
    svg = render_plot("stage,iter,loss\na,0,1.0\na,10,0.5\n")
    polylines = [ln for ln in svg.splitlines() if "<polyline" in ln]
    assert len(polylines) == 1
    coords = polylines[0].split('points="')[1].split('"')[0].split()
    assert len(coords) == 2  # two points, one segment
    assert "iter" in svg and "value" in svg


def test_plot_deterministic_bytes(tmp_path):
    text = "stage,iter,a,b\nx,0,1.0,2.0\nx,1,0.5,1.5\nx,2,0.25,1.25\n"
    assert render_plot(text) == render_plot(text)
    p = tmp_path / "m.csv"
    p.write_text(text)
    first = plot_csv_file(p).read_bytes()
    second = plot_csv_file(p).read_bytes()
    assert first == second


def test_plot_malformed_names_line():
    with pytest.raises(PipelineError, match=r":3: expected 3 fields, found 2"):
        render_plot("stage,iter,a\nx,0,1.0\nx,1\n")


def test_plot_bad_number_names_line_and_column():
    with pytest.raises(PipelineError, match=r":2: bad number 'oops' in column 'a'"):
        render_plot("iter,a\n0,oops\n")


def test_plot_empty_column_noted_and_skipped():
    svg = render_plot("stage,iter,a,b\nx,0,1.0,\nx,5,2.0,\n")
    assert "note: column 'b' has no data, skipped" in svg
    assert svg.count("<polyline") == 1


def test_plot_without_iter_uses_row_index():
    svg = render_plot("frame,err\n0,1.0\n1,2.0\n2,4.0\n")
    assert svg.count("<polyline") == 2  # frame and err both plotted
    assert ">row</text>" in svg


def test_plot_single_point_gets_marker():
    svg = render_plot("iter,a\n3,1.5\n")
    assert "<circle" in svg


def test_plot_empty_input_rejected():
    with pytest.raises(PipelineError, match=":1: empty CSV"):
        render_plot("\n")
    with pytest.raises(PipelineError, match="unique non-empty"):
        render_plot("a,a\n1,2\n")


def test_plot_header_only_notes_all_columns():
    svg = render_plot("iter,a,b\n")
    assert svg.count("note:") >= 2


# --------------------------------------------------------------------- cli


def test_cli_flag_overrides_map_to_config():
    parser = build_parser()
    args = parser.parse_args(["rlhf", "--iters", "7", "--group-size", "4", "--clip", "0.3"])
    cfg = _config_from_args(args)
    assert cfg.get("rlhf", "iterations") == 7
    assert cfg.get("rlhf", "group_size") == 4
    assert cfg.get("rlhf", "clip") == 0.3
    args = parser.parse_args(["distill", "--iters", "9"])
    cfg = _config_from_args(args)
    for key in ("stage1_iters", "stage2_iters", "stage3_iters"):
        assert cfg.get("distill", key) == 9
    args = parser.parse_args(["pe", "--beta-kl", "0.5", "--seed", "99"])
    cfg = _config_from_args(args)
    assert cfg.get("pe", "beta_kl") == 0.5
    assert cfg.seed == 99


def test_cli_weights_override():
    args = build_parser().parse_args(["rlhf", "--weights", "0.4,0.3,0.2,0.1"])
    cfg = _config_from_args(args)
    assert cfg.reward_weight_values == (0.4, 0.3, 0.2, 0.1)


def test_cli_stage_and_plot_happy_path(ran, tmp_path, capsys):
    cfg, out, _ = ran
    csv = metrics_file(out, "rlhf")
    svg = tmp_path / "chart.svg"
    assert main(["plot", str(csv), "--svg", str(svg)]) == 0
    assert svg.exists() and "<svg" in svg.read_text()
    assert "wrote" in capsys.readouterr().out


def test_cli_eval_happy_path(ran, tmp_path, capsys):
    cfg, out, _ = ran
    cfg_path = tmp_path / "exp.cfg"
    cfg_path.write_text(SMALL_CFG.format(out=out))
    # the pair/delta overrides change the config hash, so the checkpoint
    # loads legitimately warn about the mismatch
    with pytest.warns(ConfigHashWarning):
        rc = main(
            [
                "eval",
                str(checkpoint_file(out, "rlhf")),
                str(checkpoint_file(out, "sft")),
                "--config",
                str(cfg_path),
                "--pairs",
                "40",
                "--delta",
                "0.05",
            ]
        )
    assert rc == 0
    captured = capsys.readouterr()
    assert "GSB evaluation" in captured.out
    assert (out / "gsb_report.csv").exists()


def test_cli_errors_exit_nonzero(ran, tmp_path, capsys):
    cfg, out, _ = ran
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("bogus = 1\n")
    assert main(["pretrain", "--config", str(bad_cfg)]) == 1
    assert "unknown key 'bogus'" in capsys.readouterr().err

    cfg_path = tmp_path / "fresh.cfg"
    cfg_path.write_text(f"out = {tmp_path / 'fresh'}\n")
    assert main(["rlhf", "--config", str(cfg_path)]) == 1
    assert "requires stage: sft" in capsys.readouterr().err

    bad_csv = tmp_path / "bad.csv"
    bad_csv.write_text("a,b\n1\n")
    assert main(["plot", str(bad_csv)]) == 1
    assert ":2:" in capsys.readouterr().err


def test_cli_runs_tiny_pretrain(tmp_path, capsys):
    cfg_path = tmp_path / "exp.cfg"
    cfg_path.write_text(f"seed = 3\nout = {tmp_path / 'run'}\n[pretrain]\nsteps = 120\n")
    assert main(["pretrain", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "run" / "pretrain.ckpt").exists()
    assert "pretrain: wrote" in capsys.readouterr().out

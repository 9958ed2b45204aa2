from __future__ import annotations

import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from wcslam import backend
from wcslam.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, main
from wcslam.graph_solver import SingularSystem

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL = """
[run]
seed = 5
[scene]
num_frames = 8
num_objects = 2
points_per_object = 40
num_static_points = 40
[noise]
sigma_pixel = {px}
sigma_depth = {depth}
"""


def write_config(tmp_path: Path, px=1.0, depth=0.01) -> Path:
    path = tmp_path / "run.toml"
    path.write_text(SMALL.format(px=px, depth=depth))
    return path


def test_dump_defaults(capsys):
    assert main(["--dump-defaults"]) == EXIT_OK
    assert "[solver]" in capsys.readouterr().out


def test_no_command_is_an_input_error():
    assert main([]) == EXIT_INPUT


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["generate", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "d")]) == EXIT_INPUT
    assert "not found" in capsys.readouterr().err


def test_generate_is_byte_identical(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["generate", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / "a")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "frames 8" in out and "objects 2" in out
    assert main(["generate", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("scene.json", "frames.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_noise_free_pipeline_scores_zero(tmp_path):
    cfg = write_config(tmp_path, px=0.0, depth=0.0)
    data, run, rep = tmp_path / "data", tmp_path / "run", tmp_path / "rep"
    assert main(["generate", "--config", str(cfg), "--out", str(data)]) == EXIT_OK
    assert main(["solve", "--data", str(data), "--config", str(cfg), "--out", str(run)]) == EXIT_OK
    for name in ("frontend.jsonl", "estimate.jsonl", "stats.json", "timing.json"):
        assert (run / name).is_file()
    frames = [json.loads(l) for l in (run / "estimate.jsonl").read_text().splitlines()]
    assert [r["frame"] for r in frames if r["record"] == "frame"] == list(range(8))
    assert main(["eval", "--estimate", str(run / "estimate.jsonl"), "--data", str(data), "--out", str(rep)]) == EXIT_OK
    rows = list(csv.DictReader((rep / "metrics.csv").open()))
    assert {r["metric"] for r in rows} == {"ate", "rpe", "me"}
    for r in rows:
        assert float(r["translation_m"]) < 1e-6 and float(r["rotation_deg"]) < 1e-6, r
    traces = list(csv.DictReader((rep / "me_samples.csv").open()))
    assert {r["stage"] for r in traces} == {"backend", "frontend"}
    assert all(float(r["me_t_m"]) < 1e-6 for r in traces)
    stats = json.loads((run / "stats.json").read_text())
    assert stats["status"] == "ok" and stats["formulation"] == "wcme"


def test_sliding_window_flags(tmp_path):
    cfg = write_config(tmp_path)
    data, run = tmp_path / "data", tmp_path / "run"
    main(["generate", "--config", str(cfg), "--out", str(data)])
    args = ["solve", "--data", str(data), "--formulation", "wcpe", "--window", "5", "--overlap", "1", "--out", str(run)]
    assert main(args) == EXIT_OK
    stats = json.loads((run / "stats.json").read_text())
    assert stats["formulation"] == "wcpe" and stats["window"] == 5
    assert stats["windows"] == [[0, 4], [4, 7]]


def test_corrupt_dataset_exits_2_with_line(tmp_path, capsys):
    cfg = write_config(tmp_path)
    data = tmp_path / "data"
    main(["generate", "--config", str(cfg), "--out", str(data)])
    path = data / "frames.jsonl"
    lines = path.read_text().splitlines()
    lines[2] = "{not json"
    path.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert main(["solve", "--data", str(data), "--out", str(tmp_path / "run")]) == EXIT_INPUT
    assert "frames.jsonl:3" in capsys.readouterr().err


def test_eval_rejects_other_sequence(tmp_path, capsys):
    cfg = write_config(tmp_path)
    main(["generate", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "d1")])
    main(["generate", "--config", str(cfg), "--seed", "2", "--out", str(tmp_path / "d2")])
    main(["solve", "--data", str(tmp_path / "d1"), "--out", str(tmp_path / "run")])
    capsys.readouterr()
    code = main(["eval", "--estimate", str(tmp_path / "run" / "estimate.jsonl"), "--data", str(tmp_path / "d2"), "--out", str(tmp_path / "rep")])
    assert code == EXIT_INPUT
    assert "does not match" in capsys.readouterr().err


def test_solver_failure_exits_3_with_partial_stats(tmp_path, monkeypatch):
    cfg = write_config(tmp_path)
    data, run = tmp_path / "data", tmp_path / "run"
    main(["generate", "--config", str(cfg), "--out", str(data)])

    def fail(*args, **kwargs):
        raise SingularSystem("forced")

    monkeypatch.setattr(backend, "run_batch", fail)
    assert main(["solve", "--data", str(data), "--out", str(run)]) == EXIT_NUMERIC
    stats = json.loads((run / "stats.json").read_text())
    assert stats["status"] == "failed" and "forced" in stats["error"]


def test_plotdata_schema(tmp_path):
    cfg = write_config(tmp_path)
    data = tmp_path / "data"
    main(["generate", "--config", str(cfg), "--out", str(data)])
    for name, extra in (("batch", []), ("window", ["--window", "4"])):
        main(["solve", "--data", str(data), "--out", str(tmp_path / name), *extra])
        main(["eval", "--estimate", str(tmp_path / name / "estimate.jsonl"), "--data", str(data), "--out", str(tmp_path / f"rep_{name}")])
    out = tmp_path / "plot"
    code = main(["plotdata", "--reports", str(tmp_path / "rep_batch"), str(tmp_path / "rep_window"), "--labels", "batch", "sw", "--out", str(out)])
    assert code == EXIT_OK
    rows = list(csv.DictReader((out / "me_per_frame.csv").open()))
    assert list(rows[0]) == ["frame", "object", "ME_t", "ME_r", "ME_t_frontend", "ME_r_frontend", "ME_t_sw", "ME_r_sw"]
    keys = [(int(r["frame"]), int(r["object"])) for r in rows]
    assert len(keys) == len(set(keys)) > 0
    assert all(r["ME_t"] != "" for r in rows)


def test_shipped_config_runs_as_module(tmp_path):
    cmd = [sys.executable, "-m", "wcslam", "generate", "--config", str(CONFIGS / "demo.toml"), "--seed", "3", "--out", str(tmp_path / "d")]
    res = subprocess.run(cmd, capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert res.stdout.startswith("sequence seq-3-")


@pytest.mark.parametrize("args", [["solve", "--data", "nowhere", "--out", "x"], ["eval", "--estimate", "e", "--data", "d", "--out", "x"]])
def test_missing_inputs_exit_2(tmp_path, monkeypatch, args):
    monkeypatch.chdir(tmp_path)
    assert main(args) == EXIT_INPUT

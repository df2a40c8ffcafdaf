import json
import subprocess
import sys
from importlib import resources
from pathlib import Path

import pytest

from shapepose import runner
from shapepose.cli import main
from shapepose.runner import EXIT_CONFIG, EXIT_INPUT, EXIT_OK, EXIT_RUNTIME

SMALL = {
    "synth": {"n_persons": 2, "n_cameras": 4, "n_frames": 3, "pixel_sigma": 2.0, "p_miss": 0.1, "p_fp": 0.05},
    "seed": 0,
}


def write_config(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data), encoding="utf-8")
    return p


def read_all(d):
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir())}


def test_run_writes_all_outputs(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert main(["run", "--config", str(cfg), "--out-dir", str(tmp_path / "out")]) == EXIT_OK
    assert set(read_all(tmp_path / "out")) == {"scene.json", "results.json", "metrics.json", "trace.csv"}
    metrics = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert metrics["frames_evaluated"] == 3 and metrics["frames_failed"] == 0
    assert 0.0 <= metrics["final"]["precision"] <= 1.0


def test_same_seed_gives_identical_files(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    for d in ("a", "b"):
        assert main(["run", "--config", str(cfg), "--seed", "7", "--out-dir", str(tmp_path / d)]) == EXIT_OK
    assert read_all(tmp_path / "a") == read_all(tmp_path / "b")
    assert main(["run", "--config", str(cfg), "--seed", "8", "--out-dir", str(tmp_path / "c")]) == EXIT_OK
    assert read_all(tmp_path / "c")["results.json"] != read_all(tmp_path / "a")["results.json"]


def test_parallel_matches_serial(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert main(["run", "--config", str(cfg), "--threads", "1", "--out-dir", str(tmp_path / "serial")]) == EXIT_OK
    assert main(["run", "--config", str(cfg), "--threads", "2", "--out-dir", str(tmp_path / "parallel")]) == EXIT_OK
    assert read_all(tmp_path / "serial") == read_all(tmp_path / "parallel")


def test_frame_range_is_half_open(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert main(["run", "--config", str(cfg), "--frames", "1..3", "--out-dir", str(tmp_path / "o")]) == EXIT_OK
    results = json.loads((tmp_path / "o" / "results.json").read_text())
    assert [f["frame"] for f in results["frames"]] == [1, 2]


def test_scene_file_input_and_eval(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    assert main(["synth", "--config", str(cfg), "--out-dir", str(tmp_path / "s")]) == EXIT_OK
    scene_cfg = write_config(tmp_path, {"scene": "s/scene.json", "out_dir": "r"}, "scene_cfg.json")
    assert main(["run", "--config", str(scene_cfg)]) == EXIT_OK
    assert not (tmp_path / "r" / "scene.json").exists()
    assert main(["run", "--config", str(cfg), "--out-dir", str(tmp_path / "direct")]) == EXIT_OK
    assert (tmp_path / "r" / "results.json").read_bytes() == (tmp_path / "direct" / "results.json").read_bytes()
    ev = tmp_path / "ev"
    args = ["eval", "--results", str(tmp_path / "r" / "results.json"), "--scene", str(tmp_path / "s" / "scene.json")]
    assert main(args + ["--out-dir", str(ev)]) == EXIT_OK
    assert (ev / "metrics.json").read_bytes() == (tmp_path / "r" / "metrics.json").read_bytes()


def test_trace_plot(tmp_path, capsys):
    cfg = write_config(tmp_path, SMALL)
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--out-dir", str(out)]) == EXIT_OK
    assert main(["trace-plot", "--out-dir", str(out), "--out", "-"]) == EXIT_OK
    assert capsys.readouterr().out == (out / "trace.csv").read_text()
    assert main(["trace-plot", "--out-dir", str(out), "--out", str(tmp_path / "t.csv")]) == EXIT_OK
    assert (tmp_path / "t.csv").read_text() == (out / "trace.csv").read_text()


def test_zero_detection_scene(tmp_path):
    cfg = write_config(tmp_path, {"synth": {"n_persons": 0, "n_frames": 2}})
    assert main(["run", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == EXIT_OK
    results = json.loads((tmp_path / "o" / "results.json").read_text())
    assert [f["instances"] for f in results["frames"]] == [[], []]
    metrics = json.loads((tmp_path / "o" / "metrics.json").read_text())
    for block in ("final", "initial"):
        for key in ("precision", "recall", "f1", "pcp", "mpjpe", "proposal_precision", "proposal_recall"):
            assert metrics[block][key] == 0.0


def test_failing_frame_is_skipped(tmp_path, monkeypatch):
    real = runner.process_frame
    calls = []

    def flaky(*args, **kw):
        calls.append(1)
        if len(calls) == 2:
            raise RuntimeError("synthetic failure")
        return real(*args, **kw)

    monkeypatch.setattr(runner, "process_frame", flaky)
    cfg = write_config(tmp_path, SMALL)
    assert main(["run", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == EXIT_OK
    results = json.loads((tmp_path / "o" / "results.json").read_text())
    status = [f["status"] for f in results["frames"]]
    assert status == ["ok", "failed", "ok"]
    assert "synthetic failure" in results["frames"][1]["error"]
    metrics = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert metrics["frames_failed"] == 1 and metrics["frames_evaluated"] == 3


@pytest.mark.parametrize(
    "data",
    [
        {"synth": {"n_persons": 2}, "bogus": 1},
        {"synth": {"n_persons": "two"}},
        {"synth": {"p_miss": 2.0}},
        {"synth": {}, "threads": 0},
        {"synth": {}, "refine": {"outer_iters": 0}},
        {"synth": {}, "proposal": {"rho": -1}},
        {"out_dir": "x"},
        {"synth": {"n_persons": 6, "area_radius": 0.5, "max_placement_tries": 10}},
    ],
)
def test_config_errors_exit_1(tmp_path, data):
    cfg = write_config(tmp_path, data)
    assert main(["run", "--config", str(cfg)]) == EXIT_CONFIG


def test_usage_and_missing_config_exit_1(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["run"]) == EXIT_CONFIG
    assert main(["frobnicate"]) == EXIT_CONFIG
    assert main(["run", "--config", "x", "--frames", "5..2"]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG


def test_malformed_scene_exit_2(tmp_path):
    (tmp_path / "scene.json").write_text('{"format": "shapepose-scene", "version": 1}', encoding="utf-8")
    cfg = write_config(tmp_path, {"scene": "scene.json"})
    assert main(["run", "--config", str(cfg)]) == EXIT_INPUT
    missing = write_config(tmp_path, {"scene": "nowhere.json"}, "m.json")
    assert main(["run", "--config", str(missing)]) == EXIT_INPUT
    assert main(["eval", "--out-dir", str(tmp_path / "empty")]) == EXIT_INPUT
    assert main(["trace-plot", "--results", str(tmp_path / "scene.json")]) == EXIT_INPUT


def test_unwritable_output_exit_3(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = write_config(tmp_path, SMALL)
    assert main(["run", "--config", str(cfg), "--out-dir", str(blocker / "sub")]) == EXIT_RUNTIME


def test_console_script_entry_point(tmp_path):
    cfg = write_config(tmp_path, {"synth": {"n_persons": 1, "n_frames": 1}})
    proc = subprocess.run(
        [sys.executable, "-m", "shapepose.cli", "run", "--config", str(cfg), "--out-dir", str(tmp_path / "o")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "shapepose.cli", "run", "--config", "nope.json"], capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
    assert "config error" in proc.stderr


def _assert_close(a, b, path=""):
    if isinstance(a, dict):
        assert set(a) == set(b), path
        for k in a:
            _assert_close(a[k], b[k], f"{path}.{k}")
    elif isinstance(a, float) or isinstance(b, float):
        assert abs(a - b) <= 1e-9, path
    else:
        assert a == b, path


def test_benchmark_matches_golden_metrics(tmp_path):
    data = resources.files("shapepose") / "data"
    golden = json.loads((data / "benchmark_metrics.json").read_text(encoding="utf-8"))
    with resources.as_file(data / "benchmark.json") as cfg:
        assert main(["run", "--config", str(cfg), "--out-dir", str(tmp_path)]) == EXIT_OK
    _assert_close(json.loads((tmp_path / "metrics.json").read_text()), golden)

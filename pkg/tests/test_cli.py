import json
import shutil

import pytest

from dynba.cli import EXIT_ERROR, EXIT_MAX_ITER, EXIT_OK, main
from dynba.evaluation import EVAL_KEYS
from dynba.scene import read_raster


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "scene"
    assert main(["gen", str(d), "--seed", "4", "--focal-error", "0.05"]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def finished(generated):
    assert main(["run", str(generated)]) == EXIT_OK
    return generated


def _copy(src, dst):
    shutil.copytree(src, dst, ignore=shutil.ignore_patterns("out", "run_timing.json"))
    return dst


def test_gen_writes_bundle_and_ground_truth(generated, capsys):
    assert (generated / "meta.json").exists() and (generated / "tracks.bin").exists()
    assert len(list((generated / "depth").glob("*.dvr"))) == 20
    gt = generated / "gt"
    assert (gt / "trajectory.tum").exists() and (gt / "camera.json").exists()
    cam = json.loads((generated / "meta.json").read_text())["intrinsics"]
    assert cam["fx"] == pytest.approx(56.0 * 1.05)


def test_gen_rejects_bad_noise(tmp_path, capsys):
    assert main(["gen", str(tmp_path / "x"), "--noise-depth", "-1"]) == EXIT_ERROR
    assert "ConfigError" in capsys.readouterr().err


def test_run_writes_outputs_and_figures(finished):
    out = finished / "out"
    report = json.loads((out / "report.json").read_text())
    assert report["termination"] == "converged"
    assert [s["name"] for s in report["stages"]] == ["masking", "init", "static_ba", "nonrigid_ba", "flow_refine"]
    for fig in ("trajectory.png", "cost_history.png"):
        assert (out / "figures" / fig).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert (finished / "run_timing.json").exists()
    assert not (out / "run_timing.json").exists()
    assert not (finished / ".dynba.lock").exists()


def test_eval_prints_every_metric(finished, capsys, tmp_path):
    assert main(["eval", "--est", str(finished / "out"), "--gt", str(finished / "gt"),
                 "--figures", str(tmp_path)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    values = dict(ln.split(" = ") for ln in lines[1:])
    assert list(values) == list(EVAL_KEYS)
    assert float(values["ate"]) < 1e-3
    assert float(values["rfe"]) < 1e-3
    assert (tmp_path / "trajectory_vs_gt.png").exists()


def test_missing_directory_exits_with_error(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nowhere")]) == EXIT_ERROR
    assert "MissingInput" in capsys.readouterr().err


def test_iteration_cap_exits_with_two(generated, tmp_path, capsys):
    d = _copy(generated, tmp_path / "scene")
    cfg = tmp_path / "short.cfg"
    cfg.write_text("max_iter = 1\n")
    assert main(["run", str(d), "--config", str(cfg), "--no-figures"]) == EXIT_MAX_ITER
    assert "termination = max_iter" in capsys.readouterr().out
    assert json.loads((d / "out" / "report.json").read_text())["termination"] == "max_iter"


def test_bad_config_value_exits_with_error(generated, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("tau = -3\n")
    assert main(["run", str(generated), "--config", str(cfg)]) == EXIT_ERROR
    assert "ConfigError" in capsys.readouterr().err


def test_mask_command(generated, tmp_path, capsys):
    d = _copy(generated, tmp_path / "scene")
    assert main(["mask", str(d)]) == EXIT_OK
    counts = dict(ln.split(" = ") for ln in capsys.readouterr().out.splitlines())
    assert int(counts["static_tracks"]) + int(counts["dynamic_tracks"]) == 480
    out = d / "out"
    assert len(list((out / "mask_combined").glob("*.dvr"))) == 20
    err = read_raster(out / "epipolar_error" / "000000.dvr")
    assert err.shape == (48, 64, 1) and (err >= 0).all()

import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from bevlocate import cli
from bevlocate.dataset import write_poses
from bevlocate.geometry import Pose2


def run(*argv):
    return cli.main(["-q", *argv])


def digest(root):
    return {p.relative_to(root): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("world")
    assert run("synth", "--out", str(out), "--seed", "4", "--size-m", "260", "--frames", "6",
               "--image-px", "16", "--search-m", "100") == 0
    return out


def map_args(d):
    return ["--map", str(d / "map.png"), "--meta", str(d / "map.json"), "--data", str(d / "seq")]


def test_synth_layout(world_dir):
    assert (world_dir / "map.png").exists() and (world_dir / "seq" / "poses.csv").exists()
    man = json.loads((world_dir / cli.MANIFEST_NAME).read_text())
    assert man["command"] == "synth" and man["seed"] == 4 and man["build"]


def test_oracle_localize_and_eval(world_dir, tmp_path, capsys):
    before = digest(world_dir)
    out = tmp_path / "loc"
    assert run("localize", *map_args(world_dir), "--out", str(out), "--oracle", "--search-m", "100",
               "--prior-drift-m", "20", "--require-match-rate", "1.0") == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["ape_median"] <= 0.229 and rep["match_rate"] == 1.0
    assert (out / cli.MANIFEST_NAME).exists()
    assert digest(world_dir) == before
    capsys.readouterr()
    assert run("eval", "--pred", str(out / "predictions.csv"), "--poses",
               str(world_dir / "seq" / "poses.csv"), "-v") == 0
    assert "match rate (<10 m)" in capsys.readouterr().out


def test_localize_is_deterministic(world_dir, tmp_path):
    for name in ("a", "b"):
        assert run("localize", *map_args(world_dir), "--out", str(tmp_path / name), "--oracle",
                   "--search-m", "80", "--noise-sigma", "0.1", "--prior-drift-m", "10", "--seed", "2",
                   "--jobs", "2") == 0
    assert (tmp_path / "a" / "predictions.csv").read_bytes() == (tmp_path / "b" / "predictions.csv").read_bytes()


def test_train_render_and_neural_localize(world_dir, tmp_path):
    ck = tmp_path / "train"
    assert run("train", *map_args(world_dir), "--out", str(ck), "--max-samples", "2", "--lr", "1e-3") == 0
    assert (ck / "checkpoint.brw").exists()
    assert (ck / "loss.csv").read_text().startswith("step,loss")
    rd = tmp_path / "render"
    assert run("render", "--weights", str(ck / "checkpoint.brw"), "--data", str(world_dir / "seq"),
               "--out", str(rd)) == 0
    assert len(list(rd.glob("*_bev.png"))) == 6
    loc = tmp_path / "loc"
    assert run("localize", *map_args(world_dir), "--out", str(loc), "--weights", str(ck / "checkpoint.brw"),
               "--search-m", "60") == 0
    assert len((loc / "predictions.csv").read_text().splitlines()) == 7


def test_eval_fixture_and_verification_failure(tmp_path, capsys):
    gts = [(i / 3.0, Pose2(500000.0 + i, 4480000.0, 0.0)) for i in range(5)]
    write_poses(tmp_path / "poses.csv", gts)
    rows = ["timestamp,pred_easting,pred_northing,peak_score,valid_flag"]
    for (t, p), e in zip(gts, [2.0, 15.0, 9.0, 11.0, 3.0]):
        rows.append(f"{t:.6f},{p.easting + e:.6f},{p.northing:.6f},0.9,1")
    (tmp_path / "pred.csv").write_text("\n".join(rows) + "\n")
    args = ["eval", "--pred", str(tmp_path / "pred.csv"), "--poses", str(tmp_path / "poses.csv")]
    assert run(*args, "--out", str(tmp_path / "ev")) == 0
    assert json.loads((tmp_path / "ev" / "report.json").read_text())["match_rate"] == pytest.approx(0.6)
    capsys.readouterr()
    assert run(*args, "--require-match-rate", "0.9") == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "verification"


def test_usage_errors_exit_one(tmp_path, capsys):
    assert cli.main(["localize", "--out", str(tmp_path)]) == 1
    line = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(line)["error"] == "usage"
    assert cli.main(["nonsense"]) == 1
    assert run("eval", "--pred", str(tmp_path / "missing.csv"), "--poses", str(tmp_path / "x.csv")) == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "FileNotFoundError"


def test_gradcheck_passes_and_repeats(tmp_path, capsys):
    assert run("gradcheck", "--probes", "5", "--out", str(tmp_path / "a")) == 0
    assert run("gradcheck", "--probes", "5", "--out", str(tmp_path / "b")) == 0
    a = json.loads((tmp_path / "a" / "gradcheck.json").read_text())
    b = json.loads((tmp_path / "b" / "gradcheck.json").read_text())
    assert a == b and all(r["passed"] for r in a)


def test_gradcheck_failure_exits_two(monkeypatch, capsys):
    import bevlocate.gradcheck as gc

    monkeypatch.setattr(gc, "OP_RTOL", -1.0)
    monkeypatch.setattr(gc, "COMPOSED_RTOL", -1.0)
    assert run("gradcheck", "--probes", "2") == 2


def test_thread_cap(monkeypatch):
    monkeypatch.delenv("BEVLOCATE_THREADS", raising=False)
    assert cli.thread_cap(None) == 1 and cli.thread_cap(6) == 6
    monkeypatch.setenv("BEVLOCATE_THREADS", "3")
    assert cli.thread_cap(None) == 3 and cli.thread_cap(6) == 3 and cli.thread_cap(2) == 2
    monkeypatch.setenv("BEVLOCATE_THREADS", "many")
    with pytest.raises(cli.UsageError):
        cli.thread_cap(None)


def test_bench_runs(capsys):
    med, best = cli.bench_ncc(region_px=120, template_px=40, repeats=2)
    assert 0 < best <= med
    assert run("bench", "--region", "100", "--template", "30", "--repeats", "1") == 0
    assert "median ms" in capsys.readouterr().out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "bevlocate", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("bevlocate")

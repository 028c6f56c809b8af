import json

import numpy as np
import pytest
from PIL import Image

from gancompose import cli
from conftest import SMALL_JOB


def run(*argv):
    return cli.run([str(a) for a in argv])


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_sample_writes_one_png_per_seed(tmp_path, small_job):
    out = tmp_path / "out"
    assert run("sample", "--config", small_job, "--seeds", "0..9", "--trunc", "adaptive", "--out", out) == 0
    pngs = sorted(p.name for p in out.glob("*.png"))
    assert pngs == [f"sample_{i:04d}.png" for i in range(10)]
    m = manifest(out)
    assert m["seeds"] == list(range(10)) and m["status"] == 0
    assert m["config"]["truncation"]["mode"] == "adaptive"
    img = np.asarray(Image.open(out / "sample_0003.png"))
    assert img.dtype == np.uint8 and img.shape == (128, 128, 3)


def test_png_quantization():
    img = np.array([[[0.0, 1.0, -0.5, 2.0, 0.5]]]).repeat(3, axis=0)
    out = cli.to_uint8(img)
    assert out.shape == (1, 5, 3)
    assert out[0, :, 0].tolist() == [0, 255, 0, 255, 128]


def test_raw_flag_writes_float_dumps(tmp_path, small_job):
    out = tmp_path / "out"
    assert run("sample", "--config", small_job, "--seeds", "2", "--raw", "--out", out) == 0
    raw = np.load(out / "sample_0002.npy")
    assert raw.dtype == np.float64
    assert np.array_equal(np.asarray(Image.open(out / "sample_0002.png")), cli.to_uint8(raw[:3]))


def test_negative_learning_rate_exits_1(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"schedule": {"lr_canvas": -0.05}}')
    assert run("refine", "--config", cfg, "--out", tmp_path / "o") == 1
    assert "lr_canvas" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("argv", [["paint"], ["sample", "--seeds", "a..b"], ["sample", "--trunc", "hard"]])
def test_bad_arguments_exit_1(tmp_path, argv):
    assert run(*argv, "--out", tmp_path / "o") == 1


def test_weight_override_reaches_manifest_and_trace(tmp_path):
    job = dict(SMALL_JOB, weights={"face.border_l1": 12345})
    cfg = tmp_path / "job.json"
    cfg.write_text(json.dumps(job))
    out = tmp_path / "out"
    assert run("refine", "--config", cfg, "--seeds", "1", "--out", out) == 0
    m = manifest(out)
    assert m["weights_override"] == {"face.border_l1": 12345.0}
    trace = (out / "refine_inset_0001_trace.csv").read_text().splitlines()
    assert "# weight.face.border_l1=12345.0" in trace
    assert f"# config_hash={m['config_hash']}" in trace
    assert {"refine_inset_0001_copy.png", "refine_inset_0001_composite.png"} <= set(m["files"])


def test_joint_and_montage_commands(tmp_path, small_job):
    for command, mode in (("joint", "joint_refine"), ("montage", "montage")):
        out = tmp_path / command
        assert run(command, "--config", small_job, "--seeds", "0", "--out", out) == 0
        rows = (out / f"{mode}_0000_trace.csv").read_text().splitlines()
        header = [r for r in rows if not r.startswith("#")][0].split(",")
        assert header[:4] == ["iteration", "phase", "reeval", "lr"] and header[-1] == "total"


def test_walk_command(tmp_path, small_job):
    out = tmp_path / "out"
    assert run("walk", "--config", small_job, "--seeds", "0", "--out", out) == 0
    assert len(list(out.glob("walk_0000_*.png"))) == 3
    lines = (out / "walk_0000_metrics.csv").read_text().splitlines()
    assert lines[0] == "frame,border_l1,temporal_delta" and len(lines) == 4


def test_eval_command(tmp_path, small_job):
    out = tmp_path / "out"
    assert run("eval", "--config", small_job, "--seeds", "0", "--out", out) == 0
    rows = (out / "eval_0000.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == [
        "fid_full", "precision_full", "recall_full", "fid_crop", "precision_crop", "recall_crop"]


def test_job_seeds_are_independent_of_batch(tmp_path, small_job):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("sample", "--config", small_job, "--seeds", "4", "--out", a) == 0
    assert run("sample", "--config", small_job, "--seeds", "0..5", "--out", b) == 0
    assert (a / "sample_0004.png").read_bytes() == (b / "sample_0004.png").read_bytes()


def test_worker_pool_matches_serial(tmp_path, small_job, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("sample", "--config", small_job, "--seeds", "0..3", "--out", a) == 0
    monkeypatch.setenv(cli.WORKERS_ENV, "2")
    assert run("sample", "--config", small_job, "--seeds", "0..3", "--out", b) == 0
    for p in a.iterdir():
        assert p.read_bytes() == (b / p.name).read_bytes()


def test_bad_worker_count(tmp_path, small_job, monkeypatch):
    monkeypatch.setenv(cli.WORKERS_ENV, "zero")
    assert run("sample", "--config", small_job, "--out", tmp_path / "o") == 1

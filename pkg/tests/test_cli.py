"""End-to-end CLI flows over a temporary dataset."""
import json

import numpy as np
import pytest

from stinterp.cli import main
from stinterp.ctf import read_ctf


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    main(["synth-data", "--out", str(root / "data"), "--genes", "6", "--size", "16",
          "--slices", "5", "--volumes", "4", "--seed", "3", "--deform", "1.5"])
    main(["train", "--dataset", str(root / "data"), "--checkpoint", str(root / "ckpt"),
          "--epochs", "2", "--batch-size", "4", "--s", "1", "--lr0", "1e-3",
          "--log-path", str(root / "train.log")])
    return root


def test_synth_data_layout(workspace):
    data = workspace / "data"
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["generator"]["genes"] == 6
    assert (data / "train" / "vol_0" / "st_0.ctf").exists()
    assert (data / "train" / "vol_0" / "he_0.ctf").exists()


def test_train_log_line_format(workspace):
    lines = (workspace / "train.log").read_text().strip().splitlines()
    assert lines, "log must not be empty"
    first = lines[0].split()
    assert first[0].startswith("step=") and first[1].startswith("lr=")
    assert first[2].startswith("l_sim=") and first[3].startswith("l_smo=")
    assert first[4].startswith("total=")


def test_evaluate_writes_reports(workspace, capsys):
    out = workspace / "report"
    main(["evaluate", "--ckpt", str(workspace / "ckpt" / "final"), "--dataset",
          str(workspace / "data"), "--split", "test", "--s", "1", "2", "--out", str(out)])
    captured = capsys.readouterr().out
    assert "PSNR" in captured and "baseline" in captured
    rows = json.loads((out / "report.json").read_text())
    assert {r["s"] for r in rows} == {1, 2}
    assert (out / "report.txt").read_text().startswith("row")


def test_interpolate_writes_slices_and_positions(workspace):
    out = workspace / "interp"
    main(["interpolate", "--ckpt", str(workspace / "ckpt" / "final"), "--tuple",
          str(workspace / "data" / "test" / "vol_3"), "--s", "3", "--alpha", "0.5",
          "--out", str(out)])
    manifest = json.loads((out / "positions.json").read_text())
    positions = [e["position"] for e in manifest["slices"]]
    assert len(positions) == 3
    assert all(0 < p < 1 for p in positions) and positions == sorted(positions)
    for entry in manifest["slices"]:
        arr = read_ctf(out / entry["file"])
        assert arr.shape == (6, 16, 16)
        assert arr.min() > 0 and arr.max() < 1


def test_interpolate_from_json_spec(workspace, tmp_path):
    vol = workspace / "data" / "test" / "vol_3"
    spec = tmp_path / "tuple.json"
    spec.write_text(json.dumps({
        "st0": str(vol / "st_0.ctf"), "st1": str(vol / "st_2.ctf"),
        "he0": str(vol / "he_0.ctf"), "he1": str(vol / "he_2.ctf"),
    }))
    out = tmp_path / "interp"
    main(["interpolate", "--ckpt", str(workspace / "ckpt" / "final"), "--tuple",
          str(spec), "--s", "1", "--out", str(out)])
    assert (out / "interp_1.ctf").exists()


def test_dump_graph(workspace, tmp_path):
    out = tmp_path / "graph.ctf"
    main(["dump-graph", "--dataset", str(workspace / "data"), "--split", "train",
          "--tuple", "0", "--out", str(out)])
    corr = read_ctf(out)
    assert corr.shape == (6, 6)
    assert np.allclose(np.diag(corr), 1.0)
    assert np.array_equal(corr, corr.T)


def test_ablate_cli(workspace, capsys):
    main(["ablate", "--variant", "no_mgc_graph", "--dataset", str(workspace / "data"),
          "--epochs", "1", "--batch-size", "4", "--s", "1"])
    assert "no_mgc_graph" in capsys.readouterr().out


def test_config_file_driving_train(workspace, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"epochs": 1, "batch_size": 4, "lr0": 1e-3, "s": 1}))
    main(["train", "--config", str(cfg), "--dataset", str(workspace / "data"),
          "--checkpoint", str(tmp_path / "ck")])
    assert (tmp_path / "ck" / "final" / "manifest.json").exists()


def test_thread_env_var_respected(workspace, monkeypatch):
    from stinterp.training import thread_count
    monkeypatch.setenv("STINTERP_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("STINTERP_THREADS", "junk")
    assert thread_count() == 1
    monkeypatch.delenv("STINTERP_THREADS")
    assert thread_count() == 1

"""End-to-end CLI runs on a deliberately tiny configuration."""

import json
import shutil

import numpy as np
import pytest

from mvvc.cli import main
from mvvc.config import config_from_dict
from mvvc.pipeline import STAGES, Workspace, run_stage
from mvvc.rasterio import read_pfm, read_pgm

MICRO = {
    "n_train_scenes": 0,
    "scene": {"extent": 32.0, "cell_size": 0.5, "n_water_bodies": 1},
    "render": {"image_size": 64, "gsd": 0.6},
    "sweep": {"levels": 1},
    "extract": {"samples_per_class": 60, "cell_size": 0.5, "polygons_per_class": 3},
    "schedule": {"total_steps": 4, "batch_size": 8},
    "train": {"steps_per_epoch": 2},
    "classify": {"stride": 4},
    "mask": {"cell_size": 1.0},
    "fill": {"shore_band": 4.0, "min_support": 10, "iterations": 50},
}


@pytest.fixture(scope="module")
def micro_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "micro.json"
    p.write_text(json.dumps(MICRO))
    return p


@pytest.fixture(scope="module")
def finished(micro_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["all", "--config", str(micro_cfg), "--out", str(out)]) == 0
    return out


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_all_writes_every_documented_output(finished, capsys):
    s0 = finished / "scenes" / "s0"
    for name in ("scene.json", "heightfield.pfm", "classes.pgm", "bodies.pgm", "poses.json"):
        assert (s0 / name).exists()
    for i in range(8):
        for name in (f"view_{i}.pgm", f"gt_depth_{i}.pfm", f"gt_class_{i}.pgm",
                     f"depth_{i}.pfm", f"labels_{i}.pgm"):
            assert (s0 / name).exists(), name
        assert (finished / f"prob_{i}.pfm").exists()
    for name in ("dataset.bin", "model_full.bin", "curves_full.csv", "curves_mosaic.csv",
                 "experiments.json", "mask.pgm", "mask.pfm", "water.pfm", "fill_report.json",
                 "eval_report.json", "eval_report.txt", "manifest.json"):
        assert (finished / name).exists(), name
    assert set(np.unique(read_pgm(finished / "mask.pgm"))) <= {0, 128, 255}
    assert read_pfm(finished / "water.pfm").shape == read_pgm(finished / "mask.pgm").shape


def test_report_contents(finished):
    rep = json.loads((finished / "eval_report.json").read_text())
    assert 0.0 <= rep["mask"]["iou_water"] <= 1.0
    assert isinstance(rep["experiments"]["ordering"]["full_gt_mosaic_gt_unrelated"], bool)
    assert rep["experiments"]["test_accesses"] == {"full": 1, "mosaic": 1, "unrelated": 1}
    assert rep["experiments"]["test_touched_once"]
    assert rep["config_hash"] == config_from_dict(MICRO).hash()
    text = (finished / "eval_report.txt").read_text()
    assert "ordering full > mosaic > unrelated" in text


def test_rerun_skips_fresh_stages(finished, micro_cfg, caplog):
    before = snapshot(finished)
    caplog.set_level("INFO", logger="mvvc")
    assert main(["all", "--config", str(micro_cfg), "--out", str(finished)]) == 0
    assert sum("up to date, skipping" in r.message for r in caplog.records) == len(STAGES)
    assert snapshot(finished) == before


def test_synth_rerun_is_byte_identical(micro_cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "--config", str(micro_cfg), "--out", str(a)]) == 0
    assert main(["synth", "--config", str(micro_cfg), "--out", str(b)]) == 0
    sa, sb = snapshot(a), snapshot(b)
    assert sa == sb
    assert main(["synth", "--config", str(micro_cfg), "--out", str(b), "--seed", "9"]) == 0
    assert snapshot(b)["scenes/s0/view_0.pgm"] != sa["scenes/s0/view_0.pgm"]


def test_cameras_flag(micro_cfg, tmp_path):
    assert main(["synth", "--config", str(micro_cfg), "--out", str(tmp_path), "--cameras", "4"]) == 0
    s0 = tmp_path / "scenes" / "s0"
    assert len(list(s0.glob("view_*.pgm"))) == 4
    assert len(json.loads((s0 / "poses.json").read_text())) == 4
    assert main(["sweep", "--config", str(micro_cfg), "--out", str(tmp_path), "--cameras", "4"]) == 2


def test_missing_upstream_names_the_command(micro_cfg, tmp_path, caplog):
    assert main(["extract", "--config", str(micro_cfg), "--out", str(tmp_path)]) == 3
    assert "mvvc synth" in caplog.text


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": True}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["synth", "--out", str(tmp_path), "--threads", "0"]) == 2
    with pytest.raises(SystemExit):
        main(["dance"])


def test_corrupt_dataset_is_reported(finished, micro_cfg, tmp_path, caplog):
    ws = tmp_path / "ws"
    shutil.copytree(finished, ws)
    data = bytearray((ws / "dataset.bin").read_bytes())
    data[:4] = b"JUNK"
    (ws / "dataset.bin").write_bytes(bytes(data))
    # the manifest notices the change and refuses to train on it
    assert main(["train", "--config", str(micro_cfg), "--out", str(ws)]) == 3
    assert "mvvc extract" in caplog.text
    from mvvc.errors import FormatError
    from mvvc.samples import Dataset
    with pytest.raises(FormatError, match="dataset.bin"):
        Dataset.load(ws / "dataset.bin")


def test_deleting_a_stage_and_rerunning_downstream_reproduces(finished, micro_cfg, tmp_path):
    ws_dir = tmp_path / "ws"
    shutil.copytree(finished, ws_dir)
    for p in ws_dir.glob("mask.*"):
        p.unlink()
    for stage in ("mask", "fill", "eval"):
        assert main([stage, "--config", str(micro_cfg), "--out", str(ws_dir)]) == 0
    for name in ("mask.pgm", "water.pfm", "eval_report.json"):
        assert (ws_dir / name).read_bytes() == (finished / name).read_bytes()


def test_config_change_reruns_only_affected_stages(finished, tmp_path):
    ws_dir = tmp_path / "ws"
    shutil.copytree(finished, ws_dir)
    cfg = config_from_dict({**MICRO, "fill": {**MICRO["fill"], "threshold": 0.3}})
    ws = Workspace(ws_dir, cfg)
    ran = [run_stage(s, ws) for s in STAGES]
    assert ran == [False] * STAGES.index("fill") + [True, True]


def test_threads_do_not_change_results(finished, micro_cfg, tmp_path):
    assert main(["all", "--config", str(micro_cfg), "--out", str(tmp_path), "--threads", "3"]) == 0
    a = json.loads((finished / "eval_report.json").read_text())
    b = json.loads((tmp_path / "eval_report.json").read_text())
    assert a == b
    for name in ("mask.pgm", "water.pfm", "model_full.bin"):
        assert (finished / name).read_bytes() == (tmp_path / name).read_bytes()

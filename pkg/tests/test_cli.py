import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from tofdenoise import pipeline
from tofdenoise.calib import CalibModel, save_calib
from tofdenoise.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, main
from tofdenoise.encode import EncoderParams
from tofdenoise.boundary import BoundaryModelSet, save_boundary_models
from tofdenoise.imagecore import AmplitudeImage, RangeImage, read_image, write_image
from tofdenoise.mlp import MlpModel, boundary_net, range_net
from tofdenoise.rangenet import RangeRecoveryModel, save_range_model

SMALL = {
    "simulation": {"width": 32, "height": 32, "n_train": 2, "n_test": 2, "n_scans": 5, "calib_frames": 6},
    "boundary_train": {"epochs": 2},
}


def write_config(path: Path, extra=None) -> Path:
    cfg = json.loads(json.dumps(SMALL))
    for k, v in (extra or {}).items():
        cfg.setdefault(k, {}).update(v)
    path.write_text(json.dumps(cfg))
    return path


def cli(cfg_path, run_dir, *args):
    return main([*args, "--config", str(cfg_path), "--run-dir", str(run_dir)])


def tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write_config(base / "cfg.json")
    run = base / "run"
    for args in (["simulate"], ["fit-calib"], ["train", "--target", "range"],
                 ["train", "--target", "boundary"], ["infer"], ["eval"]):
        assert cli(cfg, run, *args) == 0, args
    return cfg, run


def test_default_manifest_counts(tmp_path):
    cfg = pipeline.PipelineConfig(run_dir=str(tmp_path))
    assert (cfg.simulation.n_train, cfg.simulation.n_test) == (20, 8)
    assert (cfg.simulation.width, cfg.simulation.height) == (64, 64)
    assert cfg.geodesic.k == 81 and cfg.geodesic.sigma == 2.0
    assert list(cfg.eval.thresholds) == list(range(1, 16))


def test_manifest_lists_scenes(small_run):
    _, run = small_run
    m = json.loads((run / "data" / "manifest.json").read_text())
    assert [e["split"] for e in m["scenes"]] == ["train", "train", "test", "test"]
    assert [e["id"] for e in m["scenes"]] == ["train_000", "train_001", "test_000", "test_001"]
    for e in m["scenes"]:
        for rel in e["images"].values():
            assert (run / "data" / rel).exists()


def test_zero_scenes(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"simulation": {"n_train": 0, "n_test": 0}})
    assert cli(cfg, tmp_path / "run", "simulate") == 0
    assert json.loads((tmp_path / "run" / "data" / "manifest.json").read_text())["scenes"] == []


def test_simulate_is_byte_identical(small_run, tmp_path):
    cfg, run = small_run
    assert cli(cfg, tmp_path / "again", "simulate") == 0
    assert tree(tmp_path / "again" / "data") == tree(run / "data")


def test_train_outputs(small_run):
    _, run = small_run
    models = run / "models"
    assert sorted(p.name for p in models.glob("boundary_g*.tfr")) == [f"boundary_g{g}.tfr" for g in range(4)]
    rows = (models / "range_loss.csv").read_text().strip().splitlines()
    assert rows[0] == "epoch,loss" and len(rows) == 41
    assert len((models / "boundary_loss.csv").read_text().strip().splitlines()) == 3


def test_training_rerun_identical_models(small_run, tmp_path):
    cfg, run = small_run
    copy = tmp_path / "run"
    shutil.copytree(run / "data", copy / "data")
    shutil.copytree(run / "models", copy / "models_before")
    (copy / "models").mkdir()
    shutil.copy(run / "models" / "calib.tfc", copy / "models" / "calib.tfc")
    assert cli(cfg, copy, "train", "--target", "range") == 0
    assert cli(cfg, copy, "train", "--target", "boundary") == 0
    assert tree(copy / "models") == tree(run / "models")


def test_later_stages_do_not_touch_earlier_artifacts(small_run, tmp_path):
    cfg, run = small_run
    before = {k: tree(run / k) for k in ("data", "models")}
    assert cli(cfg, run, "infer") == 0
    assert cli(cfg, run, "eval") == 0
    assert {k: tree(run / k) for k in ("data", "models")} == before


def test_infer_outputs_and_border_flag(small_run):
    _, run = small_run
    out = run / "outputs"
    for sid in ("test_000", "test_001"):
        for suffix in ("calibrated", "rf", "edges", "orient", "rhat"):
            assert (out / f"{sid}_{suffix}.tfd").exists()
        rf = read_image(out / f"{sid}_rf.tfd")
        rhat = read_image(out / f"{sid}_rhat.tfd")
        assert not rf.valid_mask[:5].any() and not rf.valid_mask[:, -5:].any()
        assert np.array_equal(rhat.valid_mask, rf.valid_mask)


def test_report_schema(small_run):
    _, run = small_run
    rep = json.loads((run / "outputs" / "report.json").read_text())
    rows = rep["rows"]
    assert len(rows) == 8
    assert {(r["method"], r["region"]) for r in rows} == {
        (m, r) for m in ("distorted", "calibrated", "rf", "rhat") for r in ("all", "boundary")}
    acc = {(r["method"], r["region"]): r["accuracy_at_tau"] for r in rows}
    want = (acc["rhat", "all"] - acc["distorted", "all"]) / (1 - acc["distorted", "all"])
    assert rep["relative_improvement"] == pytest.approx(want)
    for r in rows:
        assert len(r["curve"]) == 15 and np.all(np.diff(r["curve"]) >= 0)
    assert set(rep["edge_pr"]) >= {"detector", "canny_on_calibrated", "canny_on_distorted"}
    assert (run / "outputs" / "accuracy.csv").exists() and (run / "outputs" / "edge_pr.csv").exists()


def test_eval_with_exact_estimates(small_run, tmp_path):
    cfg, run = small_run
    copy = tmp_path / "run"
    shutil.copytree(run, copy)
    m = json.loads((copy / "data" / "manifest.json").read_text())
    for e in m["scenes"]:
        if e["split"] != "test":
            continue
        ref = read_image(copy / "data" / e["images"]["reference_range"])
        write_image(ref, copy / "data" / e["images"]["distorted_range"])
        for suffix in ("calibrated", "rf", "rhat"):
            p = copy / "outputs" / f"{e['id']}_{suffix}.tfd"
            write_image(RangeImage(ref.data, read_image(p).valid_mask), p)
    assert cli(cfg, copy, "eval") == 0
    rep = json.loads((copy / "outputs" / "report.json").read_text())
    assert all(v == 1.0 for r in rep["rows"] for v in r["curve"])


def zero_models(shape):
    enc = EncoderParams().with_amplitude_span([0.0, 1.0])
    rnet = range_net()
    rnet = MlpModel([np.zeros_like(w) for w in rnet.weights], [np.zeros_like(b) for b in rnet.biases])
    bnets = [MlpModel([np.zeros_like(w) for w in n.weights], [np.zeros_like(b) for b in n.biases], "softmax2")
             for n in [boundary_net()] * 4]
    calib = CalibModel(np.ones(shape), np.zeros(shape), np.zeros(shape))
    return calib, RangeRecoveryModel(enc, rnet), BoundaryModelSet(enc, bnets)


def test_zero_weight_models_are_identity_on_constant_input(tmp_path, capsys):
    calib, rmodel, bmodels = zero_models((24, 24))
    models = tmp_path / "run" / "models"
    models.mkdir(parents=True)
    save_calib(calib, models / "calib.tfc")
    save_range_model(rmodel, models / "range.tfr")
    save_boundary_models(bmodels, models)
    write_image(RangeImage(np.full((24, 24), 275.0)), tmp_path / "r.tfd")
    write_image(AmplitudeImage(np.full((24, 24), 0.4)), tmp_path / "a.tfd")
    rc = main(["infer", "--run-dir", str(tmp_path / "run"), "--range", str(tmp_path / "r.tfd"),
               "--amplitude", str(tmp_path / "a.tfd"), "--out-prefix", str(tmp_path / "out" / "x")])
    assert rc == 0
    cal = read_image(tmp_path / "out" / "x_calibrated.tfd")
    rhat = read_image(tmp_path / "out" / "x_rhat.tfd")
    assert np.array_equal(rhat.data, cal.data)
    assert np.all(rhat.data == 275.0)
    text = capsys.readouterr().out
    for stage in ("calibrate", "range_nn", "boundary_nn", "geodesic_filter", "total"):
        assert f"{stage}=" in text


def test_timing_lines_printed(small_run, capsys):
    cfg, run = small_run
    assert cli(cfg, run, "infer") == 0
    out = capsys.readouterr().out
    assert "[infer]" in out and " ms" in out and "geodesic_filter=" in out


def test_config_errors(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    assert cli(cfg, tmp_path / "run", "simulate", "--set", "nonsense=1") == EXIT_CONFIG
    assert cli(cfg, tmp_path / "run", "show-config", "--set", "geodesic.k=0") == EXIT_CONFIG
    (tmp_path / "bad.json").write_text("{not json")
    assert cli(tmp_path / "bad.json", tmp_path / "run", "simulate") == EXIT_CONFIG
    assert cli(tmp_path / "missing.json", tmp_path / "run", "simulate") == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_data_errors(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    run = tmp_path / "run"
    assert cli(cfg, run, "fit-calib") == EXIT_DATA
    assert cli(cfg, run, "simulate") == 0
    assert cli(cfg, run, "train", "--target", "range") == EXIT_DATA
    assert cli(cfg, run, "fit-calib") == 0
    assert cli(cfg, run, "infer") == EXIT_DATA
    assert cli(cfg, run, "eval") == EXIT_DATA


def test_numeric_error(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"range_train": {"learning_rate": 1e12, "epochs": 5}})
    run = tmp_path / "run"
    assert cli(cfg, run, "simulate") == 0
    assert cli(cfg, run, "fit-calib") == 0
    assert cli(cfg, run, "train", "--target", "range") == EXIT_NUMERIC


def test_show_config_roundtrips(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    assert cli(cfg, tmp_path / "run", "show-config", "--set", "geodesic.sigma=3") == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown["geodesic"]["sigma"] == 3
    assert pipeline.config_from_dict(shown).to_dict() == shown

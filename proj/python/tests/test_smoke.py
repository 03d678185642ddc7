import json
import math
import os
from pathlib import Path

import numpy as np
import pytest

import spinecobb as sc

SOURCE = Path(os.environ.get("SPINECOBB_SOURCE_DIR", Path(__file__).resolve().parents[2]))


def test_smape_worked_example():
    v = sc.smape_loss((0.2, 0.4, 0.4), (0.4, 0.6, 0.2))
    assert v == pytest.approx(0.6 / (2.2 + 3e-8), abs=1e-15)


def test_seg_loss_worked_example():
    gt = np.zeros((2, 2))
    gt[0, 0] = 1.0
    v = sc.seg_loss(np.full((2, 2), 0.5), gt, 1.0)
    assert v == pytest.approx(2.0 / 3.0 + math.log(2.0), abs=1e-6)


def test_ar_loss_and_roie_identity():
    rng = np.random.default_rng(0)
    assert sc.ar_loss(np.ones((5, 3)), np.zeros((5, 3))) == 1.0
    f = rng.uniform(-1, 1, (3, 4, 5))
    np.testing.assert_array_equal(sc.roie_fuse(rng.uniform(size=(4, 5)), f, 0.0), f)
    np.testing.assert_allclose(sc.roie_fuse(np.full((4, 5), 0.5), f, 1.0), 1.5 * f, rtol=0, atol=1e-15)


def test_extract_cam_cancels():
    m = np.random.default_rng(1).uniform(-1, 1, (4, 3))
    assert not sc.extract_cam(np.stack([m, -m, np.zeros_like(m)])).any()


def test_seg_metrics_example():
    pred = np.array([[1.0, 1.0], [0.0, 0.0]])
    gt = np.array([[1.0, 0.0], [0.0, 0.0]])
    m = sc.seg_metrics(pred, gt)
    assert m["ja"] == pytest.approx(0.5)
    assert m["dice"] == pytest.approx(2 / 3)
    assert m["ac"] == pytest.approx(0.75)
    assert m["se"] == 1.0
    assert m["sp"] == pytest.approx(2 / 3)


def test_synthetic_angles_match_landmark_measurement():
    s = sc.generate_synthetic({"rows": 64, "cols": 32}, seed=3)
    assert s["image"].shape == (64, 32)
    assert s["landmarks"].shape == (68, 2)
    measured = sc.cobb_from_landmarks(s["landmarks"], 64, 32)
    assert np.allclose(measured, s["angles"], atol=1.0)
    assert sc.normalize_angles((45.0, 90.0, 9.0)) == pytest.approx((0.5, 1.0, 0.1))


def test_error_overlay_palette():
    image = np.full((1, 4), 100 / 255)
    pred = np.array([[1.0, 0.0, 1.0, 0.0]])
    gt = np.array([[1.0, 1.0, 0.0, 0.0]])
    rgb = sc.error_overlay(image, pred, gt)
    assert rgb.dtype == np.uint8
    assert rgb[0, 0].tolist() == [170, 152, 55]
    assert rgb[0, 1].tolist() == [170, 55, 55]
    assert rgb[0, 2].tolist() == [55, 134, 55]
    assert rgb[0, 3].tolist() == [100, 100, 100]


def test_bad_shapes_raise():
    with pytest.raises(sc.SpinecobbError):
        sc.ar_loss(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        sc.seg_metrics(np.zeros(4), np.zeros(4))


def test_cli_train_and_predict(tmp_path):
    cfg = {
        "data": {"rows": 64, "cols": 32, "augment": False, "synthetic": {"count": 12, "seed": 11}},
        "schedule": {"seed": 5, "stages": [{"epochs": 1}] * 5},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    code, out, err = sc.run_cli(["train", "--config", str(cfg_path), "--out", str(tmp_path / "run")])
    assert code == 0, err
    model = sc.Model(tmp_path / "run")
    assert model.stage == 5
    assert model.input_shape == (64, 32)
    image = sc.generate_synthetic({"rows": 64, "cols": 32}, seed=1)["image"]
    r = model.predict(image)
    assert r["mask"].shape == (64, 32)
    assert ((r["mask"] > 0) & (r["mask"] < 1)).all()
    assert all(0.0 < a < 90.0 for a in r["angles"])
    assert sc.config_hash(cfg_path) == sc.config_hash(cfg_path)

    code, _, err = sc.run_cli(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")])
    assert code == 2


def test_shipped_configs_parse():
    for name in ("desk.json", "paper.json"):
        assert len(sc.config_hash(SOURCE / "configs" / name)) == 16

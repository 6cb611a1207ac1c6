import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ropeinspect import metrics as M


def brute_f(pred, gt, beta_sq=0.3):
    out = []
    for k in range(1, 256):
        b = pred >= k / 255
        tp = np.sum(b & gt)
        p = tp / b.sum() if b.sum() else 0.0
        r = tp / gt.sum() if gt.sum() else 0.0
        out.append((1 + beta_sq) * p * r / (beta_sq * p + r) if beta_sq * p + r > 0 else 0.0)
    return np.array(out)


def brute_e(pred, gt):
    return np.array([M.enhanced_alignment(pred >= k / 255, gt) for k in range(1, 256)])


def test_thresholds():
    t = M.thresholds()
    assert len(t) == 255 and t[0] == 1 / 255 and t[-1] == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_f_curve_matches_brute_force_continuous(seed):
    rng = np.random.default_rng(seed)
    pred = rng.random((12, 9))
    gt = rng.random((12, 9)) > 0.6
    curve, mx, mean = M.f_measure_curve(pred, gt)
    ref = brute_f(pred, gt)
    np.testing.assert_allclose(curve, ref, atol=1e-12)
    assert mx == pytest.approx(ref.max(), abs=1e-12)
    assert mean == pytest.approx(ref.mean(), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_e_curve_matches_per_pixel_form(seed):
    rng = np.random.default_rng(seed)
    pred = rng.random((10, 7))
    gt = rng.random((10, 7)) > 0.5
    curve, _, _ = M.e_measure_curve(pred, gt)
    np.testing.assert_allclose(curve, brute_e(pred, gt), atol=1e-12)


def test_e_curve_degenerate_gt():
    pred = np.linspace(0, 1, 16).reshape(4, 4)
    for gt in (np.zeros((4, 4), bool), np.ones((4, 4), bool)):
        curve, _, _ = M.e_measure_curve(pred, gt)
        np.testing.assert_allclose(curve, brute_e(pred, gt), atol=1e-12)


def test_perfect_prediction():
    gt = np.zeros((20, 20), np.uint8)
    gt[5:12, 3:17] = 1
    s = M.seg_scores(gt.astype(float), gt)
    assert s["max_f"] == pytest.approx(1, abs=1e-6)
    assert s["mae"] == 0
    assert s["max_e"] == pytest.approx(1, abs=1e-6)
    assert s["s_measure"] == pytest.approx(1, abs=1e-6)


def test_inverted_prediction_scores_low():
    gt = np.zeros((20, 20), np.uint8)
    gt[5:12, 3:17] = 1
    s = M.seg_scores(1.0 - gt, gt)
    assert s["mae"] == 1 and s["max_f"] == 0 and s["s_measure"] < 0.05


def test_s_measure_degenerate_gt():
    pred = np.full((5, 5), 0.25)
    assert M.s_measure(pred, np.zeros((5, 5))) == pytest.approx(0.75)
    assert M.s_measure(pred, np.ones((5, 5))) == pytest.approx(0.25)


def test_s_object_reference_value():
    # foreground 0.5 +- 0 -> 2*.5/(1.25+1) ; background 1 -> 1
    gt = np.zeros((4, 4), bool)
    gt[:2] = True
    pred = np.where(gt, 0.5, 0.0)
    expect = 0.5 * (1.0 / 1.25) + 0.5 * (2 / 2)
    assert M.s_object(pred, gt) == pytest.approx(expect, rel=1e-12)


def test_block_ssim_identity():
    rng = np.random.default_rng(1)
    x = rng.random((6, 6))
    assert M._block_ssim(x, x) == pytest.approx(1, abs=1e-12)
    assert M._block_ssim(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_shape_mismatch_and_nonbinary_gt():
    with pytest.raises(ValueError, match="shape"):
        M.f_measure_curve(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError, match="binary"):
        M.s_measure(np.zeros((3, 3)), np.full((3, 3), 0.5))
    with pytest.raises(ValueError):
        M.mae(np.zeros(3), np.zeros(4))


def test_f_beta_zero_denominator():
    assert M.f_beta(0.0, 0.0) == 0.0
    assert M.f_beta(1.0, 1.0) == pytest.approx(1.0)


maps = arrays(np.float64, (6, 6), elements=st.floats(0, 1))
masks = arrays(np.bool_, (6, 6))


@settings(max_examples=60, deadline=None)
@given(maps, masks)
def test_scores_bounded(pred, gt):
    s = M.seg_scores(pred, gt)
    for k, v in s.items():
        assert -1e-12 <= v <= 1 + 1e-12, k


@settings(max_examples=60, deadline=None)
@given(maps, masks)
def test_mae_complement(pred, gt):
    assert M.mae(1 - pred, 1 - gt.astype(float)) == pytest.approx(M.mae(pred, gt), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(maps, masks)
def test_max_at_least_mean(pred, gt):
    _, mx, mean = M.f_measure_curve(pred, gt)
    assert mx >= mean - 1e-12
    _, mx, mean = M.e_measure_curve(pred, gt)
    assert mx >= mean - 1e-12


def test_classification_metrics():
    acc, f = M.classification_metrics(["abnormal", "normal", "abnormal", "normal"],
                                      ["abnormal", "abnormal", "normal", "normal"])
    assert acc == 0.5
    assert f == pytest.approx(0.5)
    acc, f = M.classification_metrics(["normal"] * 3, ["normal"] * 3)
    assert acc == 1.0
    with pytest.raises(ValueError):
        M.classification_metrics(["normal"], [])


def test_count_params_and_fps():
    import torch
    model = torch.nn.Conv2d(3, 4, 3)
    n, nbytes = M.count_params(model)
    assert n == 3 * 4 * 9 + 4 and nbytes == 4 * n
    r = M.measure_fps(model, (1, 3, 16, 16), warmup=1, iters=10)
    assert r.fps > 0 and r.iters == 10
    with pytest.raises(ValueError):
        M.measure_fps(model, (1, 3, 16, 16), iters=5)


def test_report_check_and_json(tmp_path):
    import json
    import jsonschema
    from ropeinspect.schemas import METRICS_REPORT

    rep = M.aggregate_seg([{"max_f": 1, "mean_f": .5, "mae": 0, "max_e": 1, "mean_e": .5, "s_measure": 1}])
    rep.check()
    rep.to_json(tmp_path / "r.json")
    jsonschema.validate(json.loads((tmp_path / "r.json").read_text()), METRICS_REPORT)
    rep.mae = 1.5
    with pytest.raises(ValueError):
        rep.check()


def test_evaluate_folders(tmp_path):
    import cv2
    (tmp_path / "p").mkdir()
    (tmp_path / "g").mkdir()
    gt = np.zeros((16, 16), np.uint8)
    gt[4:10, 2:12] = 255
    cv2.imwrite(str(tmp_path / "g" / "a.png"), gt)
    cv2.imwrite(str(tmp_path / "p" / "a.png"), gt)
    rep = M.evaluate_folders(tmp_path / "p", tmp_path / "g", out_csv=tmp_path / "x.csv")
    assert rep.mae == 0 and rep.max_f == pytest.approx(1) and rep.n_images == 1
    assert (tmp_path / "x.csv").read_text().startswith("image,")

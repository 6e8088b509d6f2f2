import numpy as np
import pytest

from crlstereo.metrics import (
    CameraGeometry,
    SampleResult,
    depth_to_disparity,
    disparity_to_depth,
    epe,
    evaluate_sample,
    make_report,
    parse_csv,
    render_csv,
    render_table,
    three_pixel_error,
)


def test_epe_constant_offset():
    gt = np.random.default_rng(0).random((4, 5))
    assert epe(gt + 1, gt) == pytest.approx(1.0, abs=1e-12)


def test_tpe_boundary_excluded_in_plain_mode():
    gt = np.zeros((1, 4))
    pred = np.array([[3.0, 3.0000001, 0, 0]])
    assert three_pixel_error(pred, gt) == 25.0


def test_kitti_mode_relative_clause():
    gt = np.array([[10.0, 100.0]])
    pred = gt + 3.5
    assert three_pixel_error(pred, gt, mode="plain") == 100.0
    # 3.5 < 5% of 100, so only the small-gt pixel is bad
    assert three_pixel_error(pred, gt, mode="kitti") == 50.0


def test_no_valid_pixels_is_undefined():
    z = np.zeros((2, 2))
    m = np.zeros((2, 2), bool)
    assert epe(z, z, m) is None and three_pixel_error(z, z, m) is None


def test_shape_mismatch():
    with pytest.raises(ValueError):
        epe(np.zeros((2, 2)), np.zeros((2, 3)))


def test_depth_relation():
    cam = CameraGeometry(700.0, 0.5)
    assert disparity_to_depth(35.0, cam) == pytest.approx(10.0)
    assert depth_to_disparity(10.0, cam) == pytest.approx(35.0)
    with pytest.raises(ValueError):
        disparity_to_depth(0.0, cam)


def test_report_is_pixel_weighted_and_roundtrips():
    a = evaluate_sample("m", "a", np.ones((2, 2)), np.zeros((2, 2)))
    b = evaluate_sample("m", "b", np.full((1, 2), 4.0), np.zeros((1, 2)))
    [r] = make_report([a, b])
    assert r.epe == pytest.approx((4 * 1 + 2 * 4) / 6)
    assert r.tpe == pytest.approx(100 * 2 / 6)
    text = render_csv([r])
    assert text.splitlines()[0] == "method,sample,epe,3pe,valid_pixels,seconds"
    assert text.splitlines()[-1].startswith("m,ALL,")
    [back] = parse_csv(text)
    assert back.epe == r.epe and back.valid_pixels == 6
    assert "m" in render_table([back])


def test_report_keeps_undefined_entries():
    u = SampleResult("m", "u", None, None, 0)
    d = evaluate_sample("m", "d", np.ones((1, 1)), np.zeros((1, 1)))
    [r] = make_report([u, d])
    assert r.epe == 1.0
    assert "undefined" in render_csv([r])
    [only] = make_report([u])
    assert only.epe is None


def test_empty_report_raises():
    with pytest.raises(ValueError):
        make_report([])

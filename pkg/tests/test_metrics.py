import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from obiformer.data import LUMA, SampleRecord, make_synthetic_pairs
from obiformer.errors import ConfigurationError, ShapeError
from obiformer.metrics import MetricsReport, evaluate, psnr, ssim
from obiformer.model import ModelConfig, build_model


def ssim_window_oracle(x, y, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Loop over every fully-contained window with explicit weighted moments."""
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            a, b = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
            ma, mb = (g * a).sum(), (g * b).sum()
            va, vb = (g * (a - ma) ** 2).sum(), (g * (b - mb) ** 2).sum()
            cov = (g * (a - ma) * (b - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def reference_ssim(a, b):
    la, lb = np.tensordot(LUMA, a, axes=1), np.tensordot(LUMA, b, axes=1)
    return structural_similarity(la, lb, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False, K1=0.01, K2=0.03)


def test_psnr_identical_is_capped():
    a = np.random.default_rng(0).random((3, 8, 8))
    assert psnr(a, a) == 80.0


def test_psnr_constant_offset():
    a = np.zeros((3, 8, 8))
    assert psnr(a + 0.5, a) == pytest.approx(6.0206, abs=1e-4)


@given(seed=st.integers(0, 2 ** 31), noise=st.floats(1e-3, 0.5))
def test_psnr_matches_reference(seed, noise):
    rng = np.random.default_rng(seed)
    a = rng.random((3, 16, 16))
    b = np.clip(a + noise * rng.normal(size=a.shape), 0, 1)
    assert abs(psnr(a, b) - peak_signal_noise_ratio(a, b, data_range=1.0)) < 1e-6


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


def test_ssim_identical_is_one():
    a = np.random.default_rng(0).random((3, 20, 20))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_mean_shift_matches_window_oracle():
    rng = np.random.default_rng(1)
    a = rng.random((3, 16, 14)) * 0.5
    b = a + 0.4
    la, lb = np.tensordot(LUMA, a, axes=1), np.tensordot(LUMA, b, axes=1)
    value = ssim(a, b)
    assert value < 1.0
    assert abs(value - ssim_window_oracle(la, lb)) < 1e-6


@given(seed=st.integers(0, 2 ** 31), noise=st.floats(1e-3, 0.5))
def test_ssim_matches_references(seed, noise):
    rng = np.random.default_rng(seed)
    a = rng.random((3, 16, 16))
    b = np.clip(a + noise * rng.normal(size=a.shape), 0, 1)
    value = ssim(a, b)
    assert abs(value - reference_ssim(a, b)) < 1e-4
    assert abs(value - ssim_window_oracle(np.tensordot(LUMA, a, axes=1), np.tensordot(LUMA, b, axes=1))) < 1e-9


def test_ssim_accepts_grey_layouts():
    a = np.random.default_rng(0).random((12, 12))
    b = a * 0.9
    assert ssim(a, b) == pytest.approx(ssim(a[None], b[None]))


def test_ssim_small_image_raises():
    with pytest.raises(ConfigurationError):
        ssim(np.zeros((3, 10, 20)), np.zeros((3, 10, 20)))


def test_ssim_range():
    rng = np.random.default_rng(3)
    a = rng.random((3, 16, 16))
    assert -1 <= ssim(a, 1 - a) <= 1


# -- evaluate ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def records():
    return make_synthetic_pairs(3, size=16, seed=2)


def test_bypass_equals_direct_metrics(records):
    report = evaluate(None, records, bypass=True)
    assert report.mean_psnr == pytest.approx(np.mean([psnr(r.noisy, r.clean) for r in records]), abs=0)
    assert report.mean_ssim == pytest.approx(np.mean([ssim(r.noisy, r.clean) for r in records]), abs=0)
    assert report.model_tag == "raw"


def test_aggregates_equal_row_means(records):
    model = build_model(ModelConfig(encoder_depth=1, base_channels=4))
    report = evaluate(model, records)
    assert report.count == len(records)
    assert report.mean_psnr == pytest.approx(np.mean([r[1] for r in report.rows]))
    assert report.mean_ssim == pytest.approx(np.mean([r[2] for r in report.rows]))
    assert [r[0] for r in report.rows] == [r.id for r in records]


def test_single_image_aggregate(records):
    report = evaluate(None, records[:1], bypass=True)
    assert report.mean_psnr == report.rows[0][1] and report.mean_ssim == report.rows[0][2]


def test_evaluate_uses_eval_mode(records):
    model = build_model(ModelConfig(encoder_depth=1, base_channels=4))
    model.train()
    a = evaluate(model, records)
    b = evaluate(model, records)
    assert a.rows == b.rows and not model.training


def test_empty_split_raises():
    with pytest.raises(ConfigurationError):
        evaluate(None, [], bypass=True)


def test_report_csv(tmp_path):
    report = MetricsReport([("a", 10.0, 0.5), ("b", 20.0, 0.7)], "m")
    path = report.to_csv(tmp_path / "m.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "id,psnr_db,ssim"
    assert lines[1] == "a,10.000000,0.500000"
    assert lines[-1] == "mean,15.000000,0.600000"

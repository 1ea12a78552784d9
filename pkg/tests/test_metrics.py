import math

import numpy as np
import pytest

from fpdmnet.autodiff import ShapeError, Tensor
from fpdmnet.data import generate_ridge_pattern
from fpdmnet.metrics import (
    PSNR_CAP_DB,
    LossConfig,
    MetricsReport,
    SsimConfig,
    combined_loss,
    gaussian_kernel,
    l1_loss,
    ms_ssim,
    mse,
    psnr,
    psnr_from_mse,
    ssim,
)

C1 = 0.01 ** 2


@pytest.fixture
def pair():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(40, 48))
    return a, np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)


def test_mse_examples(pair):
    a, b = pair
    assert mse(a, a) == 0
    assert mse(np.zeros((4, 4)), np.ones((4, 4))) == 1.0
    assert mse(a, b) == pytest.approx(sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size, abs=1e-12)
    assert mse(a, b) == pytest.approx(mse(b, a), abs=1e-12)


def test_l1_examples(pair):
    a, b = pair
    assert l1_loss(a, a) == 0
    assert l1_loss(np.zeros((4, 4)), np.full((4, 4), 0.5)) == 0.5
    assert l1_loss(a, b) == pytest.approx(math.fsum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size, abs=1e-12)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        mse(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ShapeError):
        l1_loss(np.zeros((4, 4)), np.zeros((5, 4)))


def test_psnr_values(pair):
    a, _ = pair
    assert psnr_from_mse(0.01) == 20.0
    assert psnr_from_mse(0.0268) == pytest.approx(15.7187, abs=5e-5)
    assert psnr(a, a) == PSNR_CAP_DB
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-12)


def test_mean_of_per_image_psnr_differs_from_psnr_of_mean_mse():
    # averaging per image is what lets mean MSE 0.0268 coexist with mean PSNR above 15.72 dB
    errs = [0.01, 0.0436]
    per_image = sum(psnr_from_mse(e) for e in errs) / 2
    assert per_image > psnr_from_mse(sum(errs) / 2)


def test_ssim_identity_and_constants(pair):
    a, b = pair
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    assert ssim(np.full((20, 20), 0.3), np.full((20, 20), 0.3)) == pytest.approx(1.0, abs=1e-12)
    assert ssim(np.zeros((20, 20)), np.ones((20, 20))) == pytest.approx(C1 / (1 + C1), abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 <= ssim(a, b) < 1


def test_ssim_matches_direct_window_oracle():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(size=(13, 14)), rng.uniform(size=(13, 14))
    g = np.outer(gaussian_kernel(11, 1.5), gaussian_kernel(11, 1.5))
    c2 = 0.03 ** 2
    vals = []
    for i in range(3):
        for j in range(4):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (g * pa).sum(), (g * pb).sum()
            va, vb = (g * pa * pa).sum() - ma * ma, (g * pb * pb).sum() - mb * mb
            cov = (g * pa * pb).sum() - ma * mb
            vals.append((2 * ma * mb + C1) * (2 * cov + c2) / ((ma * ma + mb * mb + C1) * (va + vb + c2)))
    assert ssim(a, b) == pytest.approx(np.mean(vals), abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(ShapeError):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))


def test_loss_config_defaults_and_validation():
    cfg = LossConfig()
    assert cfg.delta == 0.85 and cfg.scales == 3
    canonical = np.array([0.0448, 0.2856, 0.3001])
    np.testing.assert_allclose(cfg.scale_weights, canonical / canonical.sum(), rtol=1e-15)
    np.testing.assert_allclose(cfg.scale_weights, [0.0710, 0.4530, 0.4760], atol=1e-4)
    assert sum(cfg.scale_weights) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        LossConfig(delta=1.5)
    with pytest.raises(ValueError):
        LossConfig(scale_weights=(0.5, 0.4))
    with pytest.raises(ValueError):
        SsimConfig(window_size=10)


def test_ms_ssim_basics(pair):
    a, b = pair
    assert ms_ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    assert ms_ssim(a, b) <= 1 + 1e-9
    one_scale = LossConfig(scale_weights=(1.0,))
    assert ms_ssim(a, b, one_scale) == pytest.approx(ssim(a, b), abs=1e-12)


def test_ms_ssim_too_small():
    with pytest.raises(ShapeError):
        ms_ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ms_ssim_decreases_with_noise():
    clean = generate_ridge_pattern(3)[100:228, 120:248]
    for seed in range(10):
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(clean.shape)
        scores = [ms_ssim(np.clip(clean + s * noise, 0, 1), clean) for s in (0.01, 0.05, 0.1)]
        assert scores[0] > scores[1] > scores[2]


def test_combined_loss_closed_forms(pair):
    a, b = pair
    assert combined_loss(a, a) == pytest.approx(0.0, abs=1e-9)
    assert combined_loss(a, b, LossConfig(delta=0.0)) == l1_loss(a, b)
    zeros, ones = np.zeros((32, 32)), np.ones((32, 32))
    w = LossConfig().scale_weights
    # constant images: contrast-structure is exactly 1 at every scale, luminance is C1 / (1 + C1)
    ms_const = (C1 / (1 + C1)) ** w[-1]
    assert ms_ssim(zeros, ones) == pytest.approx(ms_const, rel=1e-12)
    assert combined_loss(zeros, ones) == pytest.approx(0.85 * (1 - ms_const) + 0.15, rel=1e-12)


def test_tensor_inputs_give_differentiable_scalars(pair):
    a, b = pair
    p = Tensor(a[None, None].copy(), requires_grad=True)
    loss = combined_loss(p, b[None, None])
    assert isinstance(loss, Tensor) and loss.shape == ()
    loss.backward()
    assert p.grad.shape == p.shape and np.any(p.grad != 0)


def test_batched_metrics_average_per_image(pair):
    a, b = pair
    batch_p, batch_r = np.stack([a, b])[:, None], np.stack([b, b])[:, None]
    assert ssim(batch_p, batch_r) == pytest.approx((ssim(a, b) + 1.0) / 2, abs=1e-12)


def test_report_means_and_csv(tmp_path, pair):
    a, b = pair
    rng = np.random.default_rng(3)
    report = MetricsReport()
    for i in range(5):
        report.add(f"img{i}", np.clip(b + rng.normal(0, 0.02 * i, b.shape), 0, 1), b)
    rows = report.rows
    mean = report.mean
    assert mean.mse == pytest.approx(sum(r.mse for r in rows) / 5, abs=1e-9)
    assert mean.psnr_db == pytest.approx(sum(r.psnr_db for r in rows) / 5, abs=1e-9)
    assert mean.ssim == pytest.approx(sum(r.ssim for r in rows) / 5, abs=1e-9)
    assert rows[0].psnr_db == PSNR_CAP_DB and rows[0].ssim == pytest.approx(1.0)

    path = tmp_path / "m.csv"
    report.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "id,mse,psnr_db,ssim"
    assert lines[-1].startswith("mean,") and len(lines) == 7
    again = MetricsReport.from_csv(path)
    assert [r.mse for r in again.rows] == [r.mse for r in rows]


def test_empty_report_has_no_mean():
    with pytest.raises(ValueError):
        MetricsReport().mean

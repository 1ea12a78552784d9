import numpy as np
import pytest

from fpdmnet import autodiff as ad
from fpdmnet.autodiff import Tensor
from fpdmnet.gradcheck import CHECKS, grad_check, run_suite


def test_sum_passes_with_rounding_level_error():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    report = grad_check(lambda t: t.sum(), x, op_name="sum")
    assert report.passed
    assert report.max_rel_error < 1e-9


def test_sigmoid_sum_passes_tight_tolerance():
    x = Tensor(np.random.default_rng(1).standard_normal((2, 5)))
    assert grad_check(lambda t: ad.sigmoid(t).sum(), x, tolerance=1e-4).passed


def test_negated_gradient_fails():
    x = Tensor(np.random.default_rng(2).standard_normal((2, 5)))
    f = lambda t: ad.sigmoid(t).sum()  # noqa: E731
    s = 1.0 / (1.0 + np.exp(-x.data))
    report = grad_check(f, x, analytic_override=[-(s * (1 - s))])
    assert not report.passed
    assert report.max_rel_error > 1.0


def test_small_gradient_error_is_detected():
    x = Tensor(np.random.default_rng(3).standard_normal(6))
    wrong = 2 * x.data * (1 + 1e-2)
    assert not grad_check(lambda t: (t * t).sum(), x, analytic_override=[wrong]).passed


def test_kinks_are_skipped_not_failed():
    # a ReLU input sitting exactly on the kink
    x = Tensor(np.array([0.0, 0.5, -0.5, 1.0]))
    report = grad_check(lambda t: ad.relu(t).sum(), x)
    assert report.skipped == 1 and report.checked == 3 and report.passed


def test_too_many_skips_fail():
    x = Tensor(np.zeros(4))
    assert not grad_check(lambda t: ad.relu(t).sum(), x).passed


def test_report_row_mentions_status():
    r = grad_check(lambda t: t.sum(), Tensor(np.ones(2)), op_name="sum")
    assert r.row().startswith("sum") and "PASS" in r.row()
    assert r.passed == (r.max_rel_error <= r.tolerance)


@pytest.mark.parametrize("name", [n for n in CHECKS if not n.startswith("model")])
def test_op_suite(name):
    (report,) = run_suite([name])
    assert report.passed, report.row()
    assert report.max_rel_error <= 1e-3


def test_suite_lists_every_differentiable_op():
    expected = {"conv2d", "maxpool2x2", "upsample2x", "relu", "sigmoid", "dropout", "concat_channels",
                "batchnorm_train", "batchnorm_infer", "l1_loss", "ssim", "ms_ssim", "combined_loss",
                "model_mnet_b", "model_mnet_a", "model_unet"}
    assert expected <= set(CHECKS)


def test_unknown_check_name():
    with pytest.raises(KeyError):
        run_suite(["nope"])

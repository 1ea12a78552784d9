"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .metrics import LossConfig, SsimConfig, combined_loss, gaussian_kernel, l1_loss, ms_ssim, ssim
from .model import ModelConfig, build


@dataclass
class GradReport:
    op_name: str
    max_rel_error: float
    passed: bool
    worst: Tuple[int, Tuple[int, ...]]  # (input index, element index)
    tolerance: float
    checked: int = 0
    skipped: int = 0

    def row(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{self.op_name:<16} {status:<5} max_rel_err={self.max_rel_error:.3e} "
            f"tol={self.tolerance:.0e} checked={self.checked} skipped={self.skipped} "
            f"worst=input{self.worst[0]}{list(self.worst[1])}"
        )


def grad_check(
    function: Callable[..., Tensor],
    inputs: Union[Tensor, Sequence[Tensor]],
    step: float = 1e-4,
    tolerance: float = 1e-3,
    op_name: str = "function",
    floor: float = 1e-6,
    max_coords: Optional[int] = None,
    seed: int = 0,
    analytic_override: Optional[Sequence[np.ndarray]] = None,
    max_skip_fraction: float = 0.25,
) -> GradReport:
    """Compare the reverse-mode gradient of ``function(*inputs)`` with central
    differences.

    Each coordinate is probed at ``step`` and ``step / 2``. For a smooth
    function the two central differences agree to O(step**2) and the one-sided
    gap ``f'(+) - f'(-)`` halves with the step. A kink (ReLU zero, max-pool
    tie) inside the step breaks one of the two relations, whatever its
    position, so such coordinates are skipped and counted rather than
    compared. Otherwise the Richardson combination of the two central
    differences is the numeric derivative.

    The relative error of an element is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_coords`` caps the coordinates probed per input (sampled with
    ``seed``). ``analytic_override`` replaces the reverse-mode gradient and
    exists to confirm that a wrong gradient is caught.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)

    backward(function(*inputs))
    if analytic_override is not None:
        analytic = [np.asarray(a, dtype=np.float64) for a in analytic_override]
    else:
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]

    def probe(flat, i, h) -> Tuple[float, float]:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(function(*inputs).data)
        flat[i] = orig - h
        fm = float(function(*inputs).data)
        flat[i] = orig
        central = (fp - fm) / (2.0 * h)
        gap = (fp - f0) / h - (f0 - fm) / h
        return central, gap

    f0 = float(function(*inputs).data)
    rng = np.random.default_rng(seed)
    worst_err, worst_at = 0.0, (0, ())
    checked = skipped = 0
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = analytic[k].reshape(-1)
        for i in coords:
            coarse, gap_coarse = probe(flat, i, step)
            fine, gap_fine = probe(flat, i, step / 2.0)
            budget = tolerance * max(abs(coarse), abs(fine), floor)
            if abs(coarse - fine) > budget or abs(gap_coarse - 2.0 * gap_fine) > budget:
                skipped += 1
                continue
            checked += 1
            numeric = (4.0 * fine - coarse) / 3.0
            err = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), floor)
            if err > worst_err:
                worst_err = err
                worst_at = (k, tuple(int(v) for v in np.unravel_index(i, t.shape)))

    total = checked + skipped
    passed = worst_err <= tolerance and checked > 0 and skipped <= max_skip_fraction * total
    return GradReport(op_name, worst_err, passed, worst_at, tolerance, checked, skipped)


# ---------------------------------------------------------------------------
# the standard suite: one check per differentiable operation
# ---------------------------------------------------------------------------


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * weights).sum()


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    # distinct values spaced far apart relative to the FD step, so no max-pool ties
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * 0.01 - 0.005 * n).reshape(shape)


def _check_conv2d(rng, k=3):
    x = Tensor(rng.standard_normal((2, 3, 6, 6)))
    w = Tensor(rng.standard_normal((4, 3, k, k)))
    b = Tensor(rng.standard_normal(4))
    r = rng.standard_normal((2, 4, 6, 6))
    return grad_check(lambda x, w, b: _weighted_sum(ad.conv2d(x, w, b), r), [x, w, b],
                      op_name="conv2d" if k == 3 else f"conv2d_{k}x{k}")


def _check_maxpool(rng):
    x = Tensor(_distinct(rng, (2, 2, 6, 8)))
    r = rng.standard_normal((2, 2, 3, 4))
    return grad_check(lambda x: _weighted_sum(ad.maxpool2x2(x), r), x, op_name="maxpool2x2")


def _check_avgpool(rng):
    x = Tensor(rng.standard_normal((2, 2, 6, 8)))
    r = rng.standard_normal((2, 2, 3, 4))
    return grad_check(lambda x: _weighted_sum(ad.avgpool2x2(x), r), x, op_name="avgpool2x2")


def _check_upsample(rng):
    x = Tensor(rng.standard_normal((2, 2, 3, 4)))
    r = rng.standard_normal((2, 2, 6, 8))
    return grad_check(lambda x: _weighted_sum(ad.upsample2x(x), r), x, op_name="upsample2x")


def _check_relu(rng):
    x = Tensor(_away_from_zero(rng, (2, 3, 4, 4)))
    r = rng.standard_normal((2, 3, 4, 4))
    return grad_check(lambda x: _weighted_sum(ad.relu(x), r), x, op_name="relu")


def _check_sigmoid(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)) * 3)
    r = rng.standard_normal((2, 3, 4, 4))
    return grad_check(lambda x: _weighted_sum(ad.sigmoid(x), r), x, op_name="sigmoid")


def _check_dropout(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    r = rng.standard_normal((2, 3, 4, 4))
    return grad_check(lambda x: _weighted_sum(ad.dropout(x, 0.2, "train", rng=5), r), x, op_name="dropout")


def _check_concat(rng):
    a = Tensor(rng.standard_normal((2, 2, 4, 4)))
    b = Tensor(rng.standard_normal((2, 3, 4, 4)))
    r = rng.standard_normal((2, 5, 4, 4))
    return grad_check(lambda a, b: _weighted_sum(ad.concat_channels(a, b), r), [a, b], op_name="concat_channels")


def _check_batchnorm(rng, mode="train"):
    c = 3
    x = Tensor(rng.standard_normal((2, c, 4, 4)) * 2 + 1)
    gamma = Tensor(rng.uniform(0.5, 1.5, c))
    beta = Tensor(rng.standard_normal(c))
    r = rng.standard_normal((2, c, 4, 4))
    rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)

    def f(x, gamma, beta):
        return _weighted_sum(ad.batchnorm(x, gamma, beta, rm.copy(), rv.copy(), mode=mode), r)

    return grad_check(f, [x, gamma, beta], op_name=f"batchnorm_{mode}")


def _check_gaussian(rng):
    x = Tensor(rng.standard_normal((2, 1, 14, 13)))
    g = gaussian_kernel(11, 1.5)
    r = rng.standard_normal((2, 1, 4, 3))
    return grad_check(lambda x: _weighted_sum(ad.separable_filter_valid(x, g), r), x, op_name="gaussian_filter")


def _check_l1(rng):
    ref = rng.uniform(0, 1, (2, 1, 8, 8))
    pred = Tensor(np.clip(ref + _away_from_zero(rng, ref.shape, 0.02) * 0.2, -1, 2))
    return grad_check(lambda p: l1_loss(p, ref), pred, op_name="l1_loss")


def _check_ssim(rng):
    ref = rng.uniform(0, 1, (2, 1, 16, 16))
    pred = Tensor(np.clip(ref + 0.1 * rng.standard_normal(ref.shape), 0, 1))
    return grad_check(lambda p: ssim(p, ref, SsimConfig()), pred, op_name="ssim")


def _check_ms_ssim(rng):
    ref = rng.uniform(0, 1, (1, 1, 32, 32))
    pred = Tensor(np.clip(ref + 0.1 * rng.standard_normal(ref.shape), 0, 1))
    return grad_check(lambda p: ms_ssim(p, ref, LossConfig()), pred, op_name="ms_ssim")


def _check_combined(rng):
    ref = rng.uniform(0, 1, (1, 1, 32, 32))
    pred = Tensor(np.clip(ref + _away_from_zero(rng, ref.shape, 0.02) * 0.2, 0, 1))
    pred.data[pred.data == ref] += 0.01
    return grad_check(lambda p: combined_loss(p, ref, LossConfig()), pred, op_name="combined_loss")


def _check_model(rng, arch="fpd-mnet", bn_order="before", max_coords=24):
    cfg = ModelConfig(depth=2, base=2, dropout=0.2, bn_order=bn_order, arch=arch, input_size=(16, 16))
    model = build(cfg, seed=int(rng.integers(1 << 31))).astype(np.float64)
    x = Tensor(rng.uniform(0, 1, (2, 1, 16, 16)))
    ref = rng.uniform(0, 1, (2, 1, 16, 16))
    names = list(model.params)
    loss_cfg = LossConfig()

    def f(x, *params):
        out = model.forward(x, mode="train", rng=np.random.default_rng(11))
        return combined_loss(out, ref, loss_cfg)

    label = {"fpd-mnet": "model_mnet_" + ("b" if bn_order == "before" else "a"), "unet": "model_unet"}[arch]
    return grad_check(f, [x] + [model.params[n] for n in names], op_name=label, max_coords=max_coords)


CHECKS: Dict[str, Callable[[np.random.Generator], GradReport]] = {
    "conv2d": _check_conv2d,
    "conv2d_1x1": lambda rng: _check_conv2d(rng, k=1),
    "maxpool2x2": _check_maxpool,
    "avgpool2x2": _check_avgpool,
    "upsample2x": _check_upsample,
    "relu": _check_relu,
    "sigmoid": _check_sigmoid,
    "dropout": _check_dropout,
    "concat_channels": _check_concat,
    "batchnorm_train": _check_batchnorm,
    "batchnorm_infer": lambda rng: _check_batchnorm(rng, mode="infer"),
    "gaussian_filter": _check_gaussian,
    "l1_loss": _check_l1,
    "ssim": _check_ssim,
    "ms_ssim": _check_ms_ssim,
    "combined_loss": _check_combined,
    "model_mnet_b": _check_model,
    "model_mnet_a": lambda rng: _check_model(rng, bn_order="after"),
    "model_unet": lambda rng: _check_model(rng, arch="unet"),
}


def run_suite(names: Optional[Sequence[str]] = None, seed: int = 0) -> List[GradReport]:
    names = list(CHECKS) if names is None else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradient check(s): {', '.join(unknown)}")
    keys = list(CHECKS)
    # seed by registry position so a check behaves the same alone or in the full suite
    return [CHECKS[n](np.random.default_rng([seed, keys.index(n)])) for n in names]

"""Reference-based image quality metrics and the L1 + MS-SSIM training loss.

Every function accepts plain arrays or :class:`~fpdmnet.autodiff.Tensor`
values. With array inputs the result is a Python float; when ``pred`` is a
Tensor the result is a scalar Tensor attached to the graph, so the same code
serves evaluation and training.

Images are H x W, or batched as N x 1 x H x W. For batches, SSIM-type scores
are computed per image and averaged.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

PSNR_CAP_DB = 100.0

# canonical five-scale MS-SSIM exponents (Wang, Simoncelli & Bovik 2003)
MS_SSIM_WEIGHTS_5 = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _three_scale_weights() -> Tuple[float, ...]:
    head = MS_SSIM_WEIGHTS_5[:3]
    total = sum(head)
    return tuple(w / total for w in head)


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd, got {self.window_size}")
        if self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0:
            raise ValueError("k1, k2 and dynamic_range must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


@dataclass(frozen=True)
class LossConfig:
    delta: float = 0.85
    scale_weights: Tuple[float, ...] = field(default_factory=_three_scale_weights)
    ssim: SsimConfig = field(default_factory=SsimConfig)

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        if not self.scale_weights:
            raise ValueError("at least one scale is required")
        if abs(sum(self.scale_weights) - 1.0) > 1e-9:
            raise ValueError(f"scale weights must sum to 1, got {sum(self.scale_weights)}")

    @property
    def scales(self) -> int:
        return len(self.scale_weights)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _as_batch(x):
    """Reshape H x W (or C x H x W) input to N x C x H x W."""
    if isinstance(x, Tensor):
        if x.ndim == 2:
            return ad.reshape(x, (1, 1) + x.shape)
        if x.ndim == 3:
            return ad.reshape(x, (1,) + x.shape)
        return x
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    return Tensor(x)


def _prepare(pred, ref):
    wants_tensor = isinstance(pred, Tensor) or isinstance(ref, Tensor)
    p, r = _as_batch(pred), _as_batch(ref)
    if p.shape != r.shape:
        raise ShapeError(f"pred shape {p.shape} does not match ref shape {r.shape}")
    if r.dtype != p.dtype and not r.requires_grad:
        r = Tensor(r.data.astype(p.dtype))
    return p, r, wants_tensor


def _finish(value: Tensor, wants_tensor: bool):
    return value if wants_tensor else float(value.data)


# ---------------------------------------------------------------------------
# pixel metrics
# ---------------------------------------------------------------------------


def mse(pred, ref):
    p, r, wants = _prepare(pred, ref)
    d = p - r
    return _finish((d * d).mean(), wants)


def l1_loss(pred, ref):
    p, r, wants = _prepare(pred, ref)
    return _finish(ad.absolute(p - r).mean(), wants)


def psnr_from_mse(err: float, peak: float = 1.0, cap: float = PSNR_CAP_DB) -> float:
    if err <= 0.0:
        return cap
    return min(10.0 * math.log10(peak * peak / err), cap)


def psnr(pred, ref, peak: float = 1.0, cap: float = PSNR_CAP_DB) -> float:
    """PSNR in dB; identical images report ``cap`` instead of infinity."""
    return psnr_from_mse(float(mse(np.asarray(_raw(pred)), np.asarray(_raw(ref)))), peak, cap)


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


# ---------------------------------------------------------------------------
# structural similarity
# ---------------------------------------------------------------------------


def _ssim_maps(x: Tensor, y: Tensor, cfg: SsimConfig, window: int) -> Tuple[Tensor, Tensor]:
    """Luminance and contrast-structure maps over all valid window positions."""
    g = gaussian_kernel(window, cfg.window_sigma)
    blur = lambda t: ad.separable_filter_valid(t, g)  # noqa: E731
    mu_x, mu_y = blur(x), blur(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = blur(x * x) - mu_xx
    var_y = blur(y * y) - mu_yy
    cov = blur(x * y) - mu_xy
    lum = (2.0 * mu_xy + cfg.c1) / (mu_xx + mu_yy + cfg.c1)
    cs = (2.0 * cov + cfg.c2) / (var_x + var_y + cfg.c2)
    return lum, cs


def _per_image_mean(t: Tensor) -> Tensor:
    return t.mean(axis=(1, 2, 3))


def ssim(pred, ref, cfg: Optional[SsimConfig] = None):
    """Mean SSIM with a Gaussian window, over valid window positions only."""
    cfg = cfg or SsimConfig()
    p, r, wants = _prepare(pred, ref)
    h, w = p.shape[2:]
    if min(h, w) < cfg.window_size:
        raise ShapeError(f"image {h}x{w} is smaller than the {cfg.window_size}px SSIM window")
    lum, cs = _ssim_maps(p, r, cfg, cfg.window_size)
    return _finish(_per_image_mean(lum * cs).mean(), wants)


def _scale_window(size: int, h: int, w: int) -> int:
    limit = min(h, w)
    limit -= 1 - limit % 2  # largest odd number not above the shorter side
    return min(size, limit)


def ms_ssim(pred, ref, cfg: Optional[LossConfig] = None, min_size: int = 3):
    """Multi-scale SSIM: contrast-structure terms at every scale and the full
    SSIM term at the coarsest, combined as a weighted geometric product.

    Scales are produced by 2x2 mean pooling. When a coarse scale is narrower
    than the SSIM window, the window shrinks to the largest odd size that
    fits (keeping its sigma). Per-scale terms are floored at a small positive
    value before exponentiation so the product stays real.
    """
    cfg = cfg or LossConfig()
    p, r, wants = _prepare(pred, ref)
    h, w = p.shape[2:]
    coarse = min(h, w) >> (cfg.scales - 1)
    if coarse < min_size:
        raise ShapeError(
            f"image {h}x{w} is too small for {cfg.scales} scales (coarsest side {coarse} < {min_size})"
        )
    floor = 1e-6
    result = None
    for j, weight in enumerate(cfg.scale_weights):
        hj, wj = p.shape[2:]
        lum, cs = _ssim_maps(p, r, cfg.ssim, _scale_window(cfg.ssim.window_size, hj, wj))
        last = j == cfg.scales - 1
        term = _per_image_mean(lum * cs if last else cs)
        term = ad.clip_min(term, floor) ** weight
        result = term if result is None else result * term
        if not last:
            p, r = ad.avgpool2x2(p), ad.avgpool2x2(r)
    return _finish(result.mean(), wants)


def combined_loss(pred, ref, cfg: Optional[LossConfig] = None):
    """delta * (1 - MS-SSIM) + (1 - delta) * L1."""
    cfg = cfg or LossConfig()
    p, r, wants = _prepare(pred, ref)
    pixel = ad.absolute(p - r).mean()
    if cfg.delta == 0.0:
        return _finish(pixel, wants)
    structural = 1.0 - ms_ssim(p, r, cfg)
    return _finish(cfg.delta * structural + (1.0 - cfg.delta) * pixel, wants)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class MetricsRow:
    id: str
    mse: float
    psnr_db: float
    ssim: float


@dataclass
class MetricsReport:
    rows: List[MetricsRow] = field(default_factory=list)

    def add(self, image_id: str, pred: np.ndarray, ref: np.ndarray, cfg: Optional[SsimConfig] = None) -> MetricsRow:
        err = float(mse(pred, ref))
        row = MetricsRow(image_id, err, psnr_from_mse(err), float(ssim(pred, ref, cfg)))
        self.rows.append(row)
        return row

    @property
    def mean(self) -> MetricsRow:
        if not self.rows:
            raise ValueError("empty report")
        n = len(self.rows)
        return MetricsRow(
            "mean",
            math.fsum(r.mse for r in self.rows) / n,
            math.fsum(r.psnr_db for r in self.rows) / n,
            math.fsum(r.ssim for r in self.rows) / n,
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "mse", "psnr_db", "ssim"])
            for r in list(self.rows) + [self.mean]:
                writer.writerow([r.id, repr(r.mse), repr(r.psnr_db), repr(r.ssim)])

    @classmethod
    def from_csv(cls, path) -> "MetricsReport":
        with open(path, newline="") as fh:
            rows = [
                MetricsRow(rec["id"], float(rec["mse"]), float(rec["psnr_db"]), float(rec["ssim"]))
                for rec in csv.DictReader(fh)
            ]
        return cls([r for r in rows if r.id != "mean"])

    def format(self) -> str:
        lines = [f"# psnr_db of an exact match is capped at {PSNR_CAP_DB:g}",
                 f"{'id':<24} {'mse':>10} {'psnr_db':>10} {'ssim':>8}"]
        for r in list(self.rows) + [self.mean]:
            lines.append(f"{r.id:<24} {r.mse:>10.5f} {r.psnr_db:>10.4f} {r.ssim:>8.4f}")
        return "\n".join(lines)


def summarize(pairs: Iterable[Tuple[str, np.ndarray, np.ndarray]], cfg: Optional[SsimConfig] = None) -> MetricsReport:
    report = MetricsReport()
    for image_id, pred, ref in pairs:
        report.add(image_id, pred, ref, cfg)
    return report

"""Padding, synthetic fingerprints, degradation and dataset manifests.

The synthetic generator is a stand-in for a real fingerprint generator: an
orientation field built from core/delta singularities plus smooth noise, and
ridges grown from noise by repeated orientation-tuned Gabor filtering.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np
from scipy import fft, ndimage

from .imageio import load_image, save_image

NATIVE_SHAPE = (275, 400)
PADDED_SHAPE = (368, 496)
DEFAULT_MULTIPLE = 16


# ---------------------------------------------------------------------------
# padding
# ---------------------------------------------------------------------------


def padding_for(shape: Tuple[int, int], multiple: int = DEFAULT_MULTIPLE) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    """Return ((top, bottom), (left, right)) edge padding for ``shape``.

    Native 275 x 400 images go to 368 x 496 when that is divisible by
    ``multiple``; any other size goes to the next multiple of ``multiple``.
    Padding is centred with the odd pixel at the bottom/right.
    """
    h, w = shape
    if (h, w) == NATIVE_SHAPE and all(s % multiple == 0 for s in PADDED_SHAPE):
        th, tw = PADDED_SHAPE
    else:
        th, tw = (-(-h // multiple) * multiple, -(-w // multiple) * multiple)
    dh, dw = th - h, tw - w
    return (dh // 2, dh - dh // 2), (dw // 2, dw - dw // 2)


def pad_edge(image: np.ndarray, multiple: int = DEFAULT_MULTIPLE) -> np.ndarray:
    """Edge-replicate the last two axes up to the padded size."""
    lead = ((0, 0),) * (np.ndim(image) - 2)
    return np.pad(image, lead + padding_for(np.shape(image)[-2:], multiple), mode="edge")


def unpad(image: np.ndarray, original_shape: Tuple[int, int] = NATIVE_SHAPE,
          multiple: int = DEFAULT_MULTIPLE) -> np.ndarray:
    (top, bottom), (left, right) = padding_for(original_shape, multiple)
    h, w = original_shape
    if image.shape[-2:] != (h + top + bottom, w + left + right):
        raise ValueError(f"image {image.shape[-2:]} is not a padded {h}x{w} image")
    return image[..., top:top + h, left:left + w]


# ---------------------------------------------------------------------------
# synthetic ridge patterns
# ---------------------------------------------------------------------------


def _smooth_noise(rng, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    return f / (np.abs(f).max() + 1e-12)


def orientation_field(shape, rng, smoothness: float = 40.0) -> np.ndarray:
    """Ridge direction (radians, mod pi) from core/delta singularities and noise."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    z = xx + 1j * yy
    kind = rng.choice(["arch", "loop", "whorl"], p=[0.2, 0.5, 0.3])
    cy, cx = h * rng.uniform(0.35, 0.5), w * rng.uniform(0.42, 0.58)
    theta = np.zeros(shape)
    if kind == "arch":
        theta += 0.5 * np.sin(2 * np.pi * (xx - cx) / (w * rng.uniform(1.0, 1.6))) * np.exp(-((yy - cy) / h) ** 2)
    else:
        cores = [complex(cx, cy)]
        deltas = [complex(cx + rng.choice([-1, 1]) * w * rng.uniform(0.15, 0.3), cy + h * rng.uniform(0.3, 0.45))]
        if kind == "whorl":
            cores.append(complex(cx + rng.uniform(-8, 8), cy + h * rng.uniform(0.06, 0.12)))
            deltas.append(complex(2 * cx - deltas[0].real, deltas[0].imag))
        for c in cores:
            theta += 0.5 * np.angle(z - c)
        for d in deltas:
            theta -= 0.5 * np.angle(z - d)
    theta += rng.uniform(-0.2, 0.2)
    # perturb in the doubled-angle domain so the field stays smooth mod pi
    vec = np.exp(2j * theta) + 0.35 * (_smooth_noise(rng, shape, smoothness) + 1j * _smooth_noise(rng, shape, smoothness))
    return 0.5 * np.angle(vec)


def _gabor_bank(period: float, n_orient: int) -> List[np.ndarray]:
    sigma = 0.5 * period
    r = int(math.ceil(3 * sigma))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    env = np.exp(-(xx ** 2 + yy ** 2) / (2 * sigma ** 2))
    bank = []
    for k in range(n_orient):
        t = np.pi * k / n_orient
        normal = -xx * np.sin(t) + yy * np.cos(t)  # distance across ridges running along t
        g = env * np.cos(2 * np.pi * normal / period)
        bank.append(g - g.mean())
    return bank


def _grow_ridges(theta: np.ndarray, period: float, rng, iterations: int = 10, n_orient: int = 16) -> np.ndarray:
    h, w = theta.shape
    bank = _gabor_bank(period, n_orient)
    ksz = bank[0].shape[0]
    fshape = (fft.next_fast_len(h + ksz - 1), fft.next_fast_len(w + ksz - 1))
    kf = [fft.rfft2(np.pad(g, ((0, fshape[0] - ksz), (0, fshape[1] - ksz))), fshape) for g in bank]
    off = ksz // 2

    pos = (np.mod(theta, np.pi) / np.pi) * n_orient
    lo = np.floor(pos).astype(int) % n_orient
    hi = (lo + 1) % n_orient
    frac = pos - np.floor(pos)

    img = rng.standard_normal((h, w))
    for _ in range(iterations):
        src = fft.rfft2(img, fshape)
        resp = np.stack([fft.irfft2(src * k, fshape)[off:off + h, off:off + w] for k in kf])
        picked = (1 - frac) * np.take_along_axis(resp, lo[None], 0)[0] + frac * np.take_along_axis(resp, hi[None], 0)[0]
        img = np.tanh(2.0 * picked / (picked.std() + 1e-12))
    return img


def print_mask(shape, rng) -> np.ndarray:
    """Soft elliptical fingerprint support in [0, 1]."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = h * rng.uniform(0.47, 0.53), w * rng.uniform(0.45, 0.55)
    ay, ax = h * rng.uniform(0.40, 0.46), w * rng.uniform(0.24, 0.30)
    r = np.sqrt(((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2)
    return np.clip((1.0 - r) / 0.08, 0.0, 1.0)


def generate_ridge_pattern(
    seed: int,
    ridge_period: float = 9.0,
    smoothness: float = 40.0,
    shape: Tuple[int, int] = NATIVE_SHAPE,
) -> np.ndarray:
    """Clean synthetic print: dark ridges on a white (1.0) background."""
    if ridge_period < 2:
        raise ValueError(f"ridge period must be >= 2 pixels, got {ridge_period}")
    rng = np.random.default_rng(seed)
    theta = orientation_field(shape, rng, smoothness)
    ridges = _grow_ridges(theta, ridge_period, rng)
    mask = print_mask(shape, rng)
    intensity = 0.5 - 0.5 * ridges  # ridge crests (positive response) are dark
    return np.clip(mask * intensity + (1.0 - mask), 0.0, 1.0)


# ---------------------------------------------------------------------------
# degradation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DistortionConfig:
    blur_sigma: float = 0.0
    brightness_delta: float = 0.0
    contrast_gain: float = 1.0
    elastic_alpha: float = 0.0  # peak displacement, pixels
    elastic_sigma: float = 8.0  # smoothing of the displacement field, pixels
    occlusion_fraction: float = 0.0
    occluder_value: float = 1.0
    scratch_count: int = 0
    rotation_deg: float = 0.0
    background_blend: float = 0.0
    resolution_factor: float = 1.0  # downscale-then-upscale factor in [1, 2]
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.blur_sigma >= 0, "blur_sigma >= 0"),
            (self.contrast_gain > 0, "contrast_gain > 0"),
            (self.elastic_alpha >= 0 and self.elastic_sigma > 0, "elastic_alpha >= 0, elastic_sigma > 0"),
            (0.0 <= self.occlusion_fraction <= 1.0, "occlusion_fraction in [0, 1]"),
            (0.0 <= self.occluder_value <= 1.0, "occluder_value in [0, 1]"),
            (self.scratch_count >= 0, "scratch_count >= 0"),
            (0.0 <= self.background_blend <= 1.0, "background_blend in [0, 1]"),
            (1.0 <= self.resolution_factor <= 2.0, "resolution_factor in [1, 2]"),
        ]
        bad = [msg for ok, msg in checks if not ok]
        if bad:
            raise ValueError("invalid distortion config: " + "; ".join(bad))


def rotate(img, degrees):
    return ndimage.rotate(img, degrees, reshape=False, order=1, mode="constant", cval=1.0)


def elastic(img, alpha, sigma, rng):
    h, w = img.shape
    dy = _smooth_noise(rng, img.shape, sigma) * alpha
    dx = _smooth_noise(rng, img.shape, sigma) * alpha
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return ndimage.map_coordinates(img, [yy + dy, xx + dx], order=1, mode="nearest")


def change_resolution(img, factor):
    h, w = img.shape
    small = ndimage.zoom(img, 1.0 / factor, order=1, mode="nearest", grid_mode=True)
    sh, sw = small.shape
    yy = (np.arange(h) + 0.5) * sh / h - 0.5
    xx = (np.arange(w) + 0.5) * sw / w - 0.5
    grid = np.meshgrid(yy, xx, indexing="ij")
    return ndimage.map_coordinates(small, grid, order=1, mode="nearest")


def background_texture(shape, rng) -> np.ndarray:
    """Light procedural clutter in [0, 1]: blotches, a shading ramp and strokes."""
    h, w = shape
    tex = 1.0 - 0.35 * np.abs(_smooth_noise(rng, shape, rng.uniform(6, 25)))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx / w + np.sin(angle) * yy / h)
    tex -= 0.25 * (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
    strokes = np.zeros(shape)
    for _ in range(int(rng.integers(4, 12))):
        y0, x0 = rng.uniform(0, h), rng.uniform(0, w)
        length, ang = rng.uniform(10, 40), rng.uniform(0, np.pi)
        strokes = np.maximum(strokes, _segment_alpha(yy, xx, (y0, x0), (y0 + length * np.sin(ang), x0 + length * np.cos(ang)), rng.uniform(1, 3)))
    tex -= 0.4 * strokes
    return np.clip(tex, 0.0, 1.0)


def _segment_alpha(yy, xx, p0, p1, width) -> np.ndarray:
    (y0, x0), (y1, x1) = p0, p1
    vy, vx = y1 - y0, x1 - x0
    denom = vy * vy + vx * vx + 1e-12
    t = np.clip(((yy - y0) * vy + (xx - x0) * vx) / denom, 0.0, 1.0)
    dist = np.hypot(yy - (y0 + t * vy), xx - (x0 + t * vx))
    return np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)


def scratches(img, count, rng):
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = img.copy()
    for _ in range(count):
        p0 = (rng.uniform(0, h), rng.uniform(0, w))
        length, ang = rng.uniform(0.2, 0.8) * max(h, w), rng.uniform(0, np.pi)
        p1 = (p0[0] + length * np.sin(ang), p0[1] + length * np.cos(ang))
        a = _segment_alpha(yy, xx, p0, p1, rng.uniform(1.0, 3.0)) * rng.uniform(0.6, 1.0)
        value = float(rng.integers(0, 2))
        out = out * (1.0 - a) + value * a
    return out


def occlusion_mask(shape, fraction, rng, blob_sigma: float = 12.0) -> np.ndarray:
    """Blobby boolean mask covering ``round(fraction * size)`` pixels."""
    if fraction <= 0:
        return np.zeros(shape, dtype=bool)
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), blob_sigma, mode="reflect")
    n = int(round(fraction * field_.size))
    mask = np.zeros(field_.size, dtype=bool)
    mask[np.argsort(field_, axis=None, kind="stable")[field_.size - n:]] = True
    return mask.reshape(shape)


def _streams(seed):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)]


def warp(clean: np.ndarray, cfg: DistortionConfig) -> np.ndarray:
    """The geometric part of ``degrade``: rotation then elastic warp.

    Used to build the ground truth of a training pair, so that target ridges
    sit exactly where the distorted input shows them.
    """
    return _warp(clean, cfg, _streams(cfg.seed)[0])


def _warp(clean, cfg, rng):
    img = np.array(clean, dtype=np.float64, copy=True)
    if cfg.rotation_deg:
        img = rotate(img, cfg.rotation_deg)
    if cfg.elastic_alpha > 0:
        img = elastic(img, cfg.elastic_alpha, cfg.elastic_sigma, rng)
    return img


def degrade(clean: np.ndarray, cfg: DistortionConfig, return_mask: bool = False):
    """Apply rotation, elastic warp, blur, resolution loss, brightness and
    contrast, background overlay, scratches and occlusion, in that order.

    Each stage draws from its own child stream of ``cfg.seed``, so disabling a
    stage leaves the randomness of the others untouched. The input is never
    modified. With ``return_mask`` the occlusion mask is returned as well.
    """
    streams = _streams(cfg.seed)
    img = _warp(clean, cfg, streams[0])
    if cfg.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, cfg.blur_sigma, mode="nearest")
    if cfg.resolution_factor > 1.0:
        img = change_resolution(img, cfg.resolution_factor)
    if cfg.contrast_gain != 1.0 or cfg.brightness_delta:
        img = img + (cfg.contrast_gain - 1.0) * (img - 0.5) + cfg.brightness_delta
    if cfg.background_blend > 0:
        bg = background_texture(img.shape, streams[1])
        img = img * (1.0 - cfg.background_blend * (1.0 - bg))
    if cfg.scratch_count:
        img = scratches(img, cfg.scratch_count, streams[2])
    mask = occlusion_mask(img.shape, cfg.occlusion_fraction, streams[3])
    img[mask] = cfg.occluder_value
    img = np.clip(img, 0.0, 1.0)
    return (img, mask) if return_mask else img


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DistortionRanges:
    """Closed sampling intervals for per-pair distortion parameters."""

    blur_sigma: Tuple[float, float] = (0.0, 1.2)
    brightness_delta: Tuple[float, float] = (-0.1, 0.1)
    contrast_gain: Tuple[float, float] = (0.6, 1.0)
    elastic_alpha: Tuple[float, float] = (0.0, 4.0)
    elastic_sigma: Tuple[float, float] = (8.0, 12.0)
    occlusion_fraction: Tuple[float, float] = (0.0, 0.15)
    scratch_count: Tuple[int, int] = (0, 3)
    rotation_deg: Tuple[float, float] = (-8.0, 8.0)
    background_blend: Tuple[float, float] = (0.0, 0.6)
    resolution_factor: Tuple[float, float] = (1.0, 1.4)
    ridge_period: Tuple[float, float] = (8.0, 11.0)

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DistortionRanges":
        return cls(**{k: tuple(v) for k, v in d.items()})


def pair_seeds(seed: int, index: int) -> Tuple[int, int]:
    """(pattern seed, distortion seed) for pair ``index`` of a dataset."""
    a, b = np.random.SeedSequence([seed, index]).generate_state(2)
    return int(a), int(b)


def sample_distortion(ranges: DistortionRanges, seed: int, index: int) -> Tuple[DistortionConfig, float]:
    """Draw the distortion config and ridge period for pair ``index``."""
    _, dseed = pair_seeds(seed, index)
    rng = np.random.default_rng([seed, index, 1])
    values = {}
    for f in fields(DistortionRanges):
        lo, hi = getattr(ranges, f.name)
        if f.name == "scratch_count":
            values[f.name] = int(rng.integers(lo, hi + 1))
        else:
            values[f.name] = float(rng.uniform(lo, hi))
    period = values.pop("ridge_period")
    return DistortionConfig(seed=dseed, **values), period


@dataclass
class ManifestEntry:
    id: str
    distorted: Path
    clean: Optional[Path]


@dataclass
class DatasetManifest:
    root: Path
    entries: List[ManifestEntry] = field(default_factory=list)
    seed: Optional[int] = None
    config: Optional[dict] = None

    FILENAME = "manifest.csv"

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    @property
    def has_ground_truth(self) -> bool:
        return all(e.clean is not None for e in self.entries)

    def save(self, path: Optional[Path] = None) -> Path:
        """Write the CSV and, next to it, a text header with seed and config."""
        path = Path(path) if path else self.root / self.FILENAME
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids must be unique")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "distorted_path", "clean_path"])
            for e in self.entries:
                writer.writerow([e.id, _rel(e.distorted, self.root), "" if e.clean is None else _rel(e.clean, self.root)])
        with open(_header_path(path), "w") as fh:
            fh.write("fpdmnet synthetic fingerprint dataset\n")
            fh.write(f"seed={self.seed}\n")
            fh.write(f"config={json.dumps(self.config, sort_keys=True)}\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / cls.FILENAME
        root = path.parent
        seed, config = None, None
        header = _header_path(path)
        if header.exists():
            for line in header.read_text().splitlines():
                key, _, value = line.partition("=")
                if key == "seed":
                    seed = None if value == "None" else int(value)
                elif key == "config":
                    config = json.loads(value)
        with open(path, newline="") as fh:
            records = list(csv.DictReader(fh))
        entries = []
        for rec in records:
            clean = rec.get("clean_path") or None
            entries.append(ManifestEntry(rec["id"], root / rec["distorted_path"], None if clean is None else root / clean))
        if len({e.id for e in entries}) != len(entries):
            raise ValueError(f"{path}: duplicate ids")
        missing = [str(p) for e in entries for p in (e.distorted, e.clean) if p is not None and not p.exists()]
        if missing:
            raise FileNotFoundError(f"manifest references missing files: {missing[:3]}")
        return cls(root, entries, seed, config)

    @classmethod
    def from_directory(cls, directory) -> "DatasetManifest":
        """Manifest for a bare folder of images (no ground truth)."""
        from .imageio import list_images

        root = Path(directory)
        return cls(root, [ManifestEntry(p.stem, p, None) for p in list_images(root)])

    def load_pair(self, i: int) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        e = self.entries[i]
        return load_image(e.distorted), (None if e.clean is None else load_image(e.clean))


def _header_path(manifest_path: Path) -> Path:
    return manifest_path.with_name(manifest_path.stem + "_header.txt")


def _rel(p: Path, root: Path) -> str:
    try:
        return str(Path(p).relative_to(root))
    except ValueError:
        return str(p)


def make_pair(seed: int, index: int, ranges: DistortionRanges, shape=NATIVE_SHAPE):
    pattern_seed, _ = pair_seeds(seed, index)
    cfg, period = sample_distortion(ranges, seed, index)
    clean = generate_ridge_pattern(pattern_seed, ridge_period=period, shape=shape)
    return degrade(clean, cfg), np.clip(warp(clean, cfg), 0.0, 1.0), cfg


def make_dataset(
    count: int,
    seed: int,
    out_dir,
    ranges: Optional[DistortionRanges] = None,
    fmt: str = "pgm",
    shape: Tuple[int, int] = NATIVE_SHAPE,
) -> DatasetManifest:
    """Write ``count`` (distorted, clean) pairs and a manifest to ``out_dir``."""
    if fmt not in ("pgm", "png"):
        raise ValueError(f"unknown image format {fmt!r}")
    ranges = ranges or DistortionRanges()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(out, seed=seed, config={"shape": list(shape), "ranges": ranges.to_dict()})
    width = max(5, len(str(count - 1)))
    for i in range(count):
        distorted, clean, _ = make_pair(seed, i, ranges, shape)
        pid = f"fp_{i:0{width}d}"
        dpath, cpath = out / f"{pid}_distorted.{fmt}", out / f"{pid}_clean.{fmt}"
        save_image(distorted, dpath)
        save_image(clean, cpath)
        manifest.entries.append(ManifestEntry(pid, dpath, cpath))
    manifest.save()
    return manifest

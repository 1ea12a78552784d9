"""Two-phase Nesterov SGD training, binary checkpoints and dataset evaluation."""
from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import Tensor, backward
from .data import DatasetManifest, pad_edge, padding_for, unpad
from .metrics import LossConfig, MetricsReport, SsimConfig, combined_loss
from .model import ConfigError, ModelConfig, Network, build

CHECKPOINT_MAGIC = b"FPDM"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    """Checkpoint file is malformed, truncated or incompatible."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 75
    batch_size: int = 8
    lr_phase1: float = 0.1
    lr_phase2: float = 0.01
    momentum_phase1: float = 0.75
    momentum_phase2: float = 0.95
    phase_boundary: int = 50
    decay: float = 1e-5
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if min(self.lr_phase1, self.lr_phase2) <= 0 or self.decay < 0:
            raise ConfigError("learning rates must be > 0 and decay >= 0")
        if not (0 <= self.momentum_phase1 < 1 and 0 <= self.momentum_phase2 < 1):
            raise ConfigError("momenta must lie in [0, 1)")
        if self.phase_boundary < 0:
            raise ConfigError("phase_boundary must be >= 0")

    def to_dict(self) -> dict:
        d = {f: getattr(self, f) for f in (
            "epochs", "batch_size", "lr_phase1", "lr_phase2", "momentum_phase1",
            "momentum_phase2", "phase_boundary", "decay", "seed")}
        d["loss"] = {
            "delta": self.loss.delta,
            "scale_weights": list(self.loss.scale_weights),
            "ssim": vars(self.loss.ssim).copy(),
        }
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = d.pop("loss", None)
        model = d.pop("model", None)
        if loss is not None:
            d["loss"] = LossConfig(
                delta=loss["delta"],
                scale_weights=tuple(loss["scale_weights"]),
                ssim=SsimConfig(**loss["ssim"]),
            )
        if model is not None:
            d["model"] = ModelConfig.from_dict(model)
        return cls(**d)


def lr_schedule(epoch: int, update_count: int, cfg: TrainConfig) -> Tuple[float, float]:
    """(learning rate, momentum) for a 0-based epoch and global update index.

    The base rate switches at ``cfg.phase_boundary``; time-based decay
    ``base / (1 + decay * t)`` runs on the global update counter across both
    phases.
    """
    if epoch < 0 or update_count < 0:
        raise ValueError("epoch and update_count must be >= 0")
    if epoch < cfg.phase_boundary:
        base, momentum = cfg.lr_phase1, cfg.momentum_phase1
    else:
        base, momentum = cfg.lr_phase2, cfg.momentum_phase2
    return base / (1.0 + cfg.decay * update_count), momentum


def sgd_nesterov_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    velocities: Sequence[np.ndarray],
    lr: float,
    momentum: float,
) -> None:
    """In place: v <- m*v - lr*g, then theta <- theta + m*v - lr*g."""
    if not len(params) == len(grads) == len(velocities):
        raise ValueError("params, grads and velocities must have equal length")
    for p, g, v in zip(params, grads, velocities):
        if not p.shape == g.shape == v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        step = lr * g
        v *= momentum
        v -= step
        p += momentum * v - step


# ---------------------------------------------------------------------------
# training log
# ---------------------------------------------------------------------------


@dataclass
class LogRow:
    epoch: int
    step: int
    lr: float
    loss: float


@dataclass
class TrainLog:
    rows: List[LogRow] = field(default_factory=list)

    HEADER = ("epoch", "step", "lr", "loss")

    def epoch_means(self) -> Dict[int, float]:
        out: Dict[int, List[float]] = {}
        for r in self.rows:
            out.setdefault(r.epoch, []).append(r.loss)
        return {e: math.fsum(v) / len(v) for e, v in out.items()}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HEADER)
            for r in self.rows:
                w.writerow([r.epoch, r.step, repr(r.lr), repr(r.loss)])

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        with open(path, newline="") as fh:
            return cls([
                LogRow(int(r["epoch"]), int(r["step"]), float(r["lr"]), float(r["loss"]))
                for r in csv.DictReader(fh)
            ])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2, np.dtype("<i8"): 3}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass
class Checkpoint:
    """Model config, parameters, optimizer velocities and BN running stats.

    ``params`` and ``velocities`` are stored as paired tensor records; BN
    running statistics follow in a separate buffer section.
    """

    model_config: ModelConfig
    params: Dict[str, np.ndarray]
    velocities: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    updates: int = 0
    train_config: Optional[dict] = None
    version: int = CHECKPOINT_VERSION

    @property
    def entry_count(self) -> int:
        return len(self.params) + len(self.velocities)

    @classmethod
    def from_model(cls, model: Network, velocities=None, epoch=0, updates=0, train_config=None) -> "Checkpoint":
        params = {k: t.data.copy() for k, t in model.params.items()}
        if velocities is None:
            velocities = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(
            model.config, params, {k: np.array(v, copy=True) for k, v in velocities.items()},
            {k: v.copy() for k, v in model.buffers.items()}, epoch, updates, train_config,
        )

    def to_model(self) -> Network:
        net = build(self.model_config)
        expected = {k: t.shape for k, t in net.params.items()}
        got = {k: v.shape for k, v in self.params.items()}
        if expected != got:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            bad = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
            raise CheckpointError(f"parameters do not match the model: missing {missing[:3]}, "
                                  f"unexpected {extra[:3]}, wrong shape {bad[:3]}")
        if set(self.buffers) != set(net.buffers):
            raise CheckpointError("batch-norm buffers do not match the model")
        net.load_state(self.params, self.buffers)
        return net.eval()


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if np.dtype(dt) not in _DTYPE_TAGS:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    raw = np.ascontiguousarray(arr, dtype=np.dtype(dt).newbyteorder("<")).tobytes()
    key = name.encode("utf-8")
    head = struct.pack("<I", len(key)) + key + struct.pack("<BI", _DTYPE_TAGS[np.dtype(dt)], arr.ndim)
    return head + struct.pack(f"<{arr.ndim}I", *arr.shape) + raw


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically: magic, u32 version, u32-length JSON config block,
    u32 record count, tensor records, u32 buffer count, buffer records."""
    meta = {
        "model": ckpt.model_config.to_dict(),
        "train": ckpt.train_config,
        "epoch": ckpt.epoch,
        "updates": ckpt.updates,
    }
    block = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(block)), block]
    records = [(k, v) for k, v in ckpt.params.items()] + [(f"velocity/{k}", v) for k, v in ckpt.velocities.items()]
    parts.append(struct.pack("<I", len(records)))
    parts.extend(_tensor_record(k, v) for k, v in records)
    parts.append(struct.pack("<I", len(ckpt.buffers)))
    parts.extend(_tensor_record(k, v) for k, v in ckpt.buffers.items())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def record(self) -> Tuple[str, np.ndarray]:
        (n,) = self.unpack("<I")
        try:
            name = self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{self.source}: bad tensor name at byte {self.pos}") from None
        tag, rank = self.unpack("<BI")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{self.source}: unknown dtype tag {tag} for {name}")
        if rank > 8:
            raise CheckpointError(f"{self.source}: implausible rank {rank} for {name}")
        shape = self.unpack(f"<{rank}I")
        dt = _TAG_DTYPES[tag]
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape)
        return name, arr.astype(dt.newbyteorder("="), copy=True)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    r = _Reader(path.read_bytes(), str(path))
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n).decode("utf-8"))
        model_cfg = ModelConfig.from_dict(meta["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config block ({exc})") from None
    params, velocities, buffers = {}, {}, {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        name, arr = r.record()
        if name.startswith("velocity/"):
            velocities[name[len("velocity/"):]] = arr
        else:
            params[name] = arr
    (count,) = r.unpack("<I")
    for _ in range(count):
        name, arr = r.record()
        buffers[name] = arr
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    if set(velocities) != set(params) or any(velocities[k].shape != params[k].shape for k in params):
        raise CheckpointError(f"{path}: velocities do not match parameters")
    return Checkpoint(model_cfg, params, velocities, buffers, int(meta.get("epoch", 0)),
                      int(meta.get("updates", 0)), meta.get("train"), version)


def latest_checkpoint(directory) -> Path:
    found = sorted(Path(directory).glob("epoch_*.fpdm"))
    if not found:
        raise FileNotFoundError(f"no checkpoints in {directory}")
    return found[-1]


def load_model(path) -> Network:
    """Network from a checkpoint file, or from the newest one in a run directory."""
    path = Path(path)
    if path.is_dir():
        path = latest_checkpoint(path)
    return load_checkpoint(path).to_model()


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _pad_multiple(cfg: ModelConfig) -> int:
    return 2 ** cfg.depth


def _batch(images: Iterable[np.ndarray], multiple: int, dtype) -> np.ndarray:
    return np.stack([pad_edge(im, multiple) for im in images])[:, None].astype(dtype)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: TrainLog
    checkpoint_paths: List[Path]
    model: Network


def train(cfg: TrainConfig, manifest: DatasetManifest, out_dir=None, progress: Optional[Callable[[LogRow], None]] = None) -> TrainResult:
    """Train from scratch on ``manifest``.

    Each epoch visits the pairs in a seeded random order in mini-batches (the
    last one may be short). With ``out_dir`` set, a checkpoint
    ``epoch_XXXX.fpdm`` is written after every epoch and the log goes to
    ``train_log.csv``; the last epoch's checkpoint is the final model.
    """
    if len(manifest) == 0:
        raise TrainingError("dataset is empty")
    if not manifest.has_ground_truth:
        raise TrainingError("training needs clean targets for every pair")
    pairs = [manifest.load_pair(i) for i in range(len(manifest))]
    shape = pairs[0][0].shape
    if any(d.shape != shape or c.shape != shape for d, c in pairs):
        raise TrainingError("all training images must share one size")

    multiple = _pad_multiple(cfg.model)
    padded = tuple(s + sum(p) for s, p in zip(shape, padding_for(shape, multiple)))
    model_cfg = cfg.model if cfg.model.input_size == padded else replace(cfg.model, input_size=padded)
    cfg = replace(cfg, model=model_cfg)
    model = build(model_cfg, seed=cfg.seed).train()
    names = list(model.params)
    params = [model.params[k] for k in names]
    velocities = [np.zeros_like(p.data) for p in params]

    order_rng = np.random.default_rng([cfg.seed, 0])
    dropout_rng = np.random.default_rng([cfg.seed, 1])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    log = TrainLog()
    paths: List[Path] = []
    updates = 0
    ckpt = None
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(pairs))
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x = _batch((pairs[i][0] for i in idx), multiple, model.dtype)
            y = _batch((pairs[i][1] for i in idx), multiple, model.dtype)
            lr, momentum = lr_schedule(epoch, updates, cfg)
            model.zero_grad()
            pred = model.forward(x, mode="train", rng=dropout_rng)
            loss = combined_loss(pred, Tensor(y), cfg.loss)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, step {updates} (lr {lr})")
            backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            sgd_nesterov_step([p.data for p in params], grads, velocities, lr, momentum)
            row = LogRow(epoch, updates, lr, value)
            log.rows.append(row)
            if progress is not None:
                progress(row)
            updates += 1
        ckpt = Checkpoint.from_model(model, dict(zip(names, velocities)), epoch + 1, updates, cfg.to_dict())
        if out is not None:
            paths.append(save_checkpoint(ckpt, out / f"epoch_{epoch + 1:04d}.fpdm"))
            log.to_csv(out / "train_log.csv")
    model.zero_grad()
    return TrainResult(ckpt, log, paths, model.eval())


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------


def predict(model: Union[Network, Callable[[np.ndarray], np.ndarray]], image: np.ndarray) -> np.ndarray:
    """Clean one H x W image in [0, 1]: pad, infer-mode forward, unpad.

    A plain callable is applied to the image directly, which makes identity
    or constant predictors usable in :func:`evaluate`.
    """
    if not isinstance(model, Network):
        return np.asarray(model(image), dtype=np.float64)
    multiple = _pad_multiple(model.config)
    x = _batch([image], multiple, model.dtype)
    y = model.forward(x, mode="infer", strict=False).data[0, 0]
    return unpad(y, image.shape, multiple).astype(np.float64)


def evaluate(model, manifest: DatasetManifest, ssim_cfg: Optional[SsimConfig] = None) -> MetricsReport:
    """Per-image MSE / PSNR / SSIM of the model's output against the clean targets."""
    if not manifest.has_ground_truth:
        raise ValueError("evaluation needs a clean target for every pair")
    report = MetricsReport()
    for i, entry in enumerate(manifest):
        distorted, clean = manifest.load_pair(i)
        report.add(entry.id, predict(model, distorted), clean, ssim_cfg)
    return report

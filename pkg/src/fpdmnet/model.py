"""FPD-M-net and baseline U-net built on the autodiff core.

Both networks share the same encoder/decoder ladder: level ``i`` has
``base * 2**i`` feature maps, ``depth`` 2x2 max-pool steps lead to a
bottleneck block, and the decoder mirrors the encoder with nearest-neighbour
upsampling and encoder-to-decoder skips. FPD-M-net adds

* within-block concatenation of the two conv units' outputs,
* the left leg: the input image max-pooled to every coarser level and
  concatenated onto that level's encoder input,
* the right leg: every decoder level below full resolution projected by a
  1x1 conv and upsampled to full size, then fused with the last decoder
  output by the final 1x1 conv + sigmoid.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ARCHS = ("fpd-mnet", "unet")
BN_ORDERS = ("before", "after")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    base: int = 64
    dropout: float = 0.2
    bn_order: str = "before"  # "before": Conv-BN-ReLU (variant B), "after": Conv-ReLU-BN (variant A)
    arch: str = "fpd-mnet"
    input_size: Tuple[int, int] = (368, 496)
    bn_eps: float = 1e-5
    bn_momentum: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.bn_order not in BN_ORDERS:
            raise ConfigError(f"bn_order must be one of {BN_ORDERS}, got {self.bn_order!r}")
        if self.depth < 0 or self.base < 1:
            raise ConfigError("depth must be >= 0 and base >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        m = 2 ** self.depth
        h, w = self.input_size
        if h % m or w % m:
            raise ConfigError(f"input size {h}x{w} is not divisible by 2**depth = {m}")

    @property
    def leg_width(self) -> int:
        return max(1, self.base // 4)

    def width(self, level: int) -> int:
        return self.base * 2 ** level

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerInfo:
    name: str
    kind: str
    in_channels: int
    out_channels: int
    params: int
    resolution: int  # downsampling factor relative to the input


class Network:
    """A built network: ordered layer table, named parameters, BN buffers."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.layers: List[LayerInfo] = []
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.mode = "train"

    # -- construction helpers ----------------------------------------------
    def _param(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name}")
        t = Tensor(value.astype(np.float32), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _add_conv(self, name: str, cin: int, cout: int, k: int, res: int, rng) -> None:
        std = np.sqrt(2.0 / (cin * k * k))  # He normal
        self._param(f"{name}.weight", rng.standard_normal((cout, cin, k, k)) * std)
        self._param(f"{name}.bias", np.zeros(cout))
        self.layers.append(LayerInfo(name, f"conv{k}x{k}", cin, cout, cout * cin * k * k + cout, res))

    def _add_bn(self, name: str, c: int, res: int) -> None:
        self._param(f"{name}.gamma", np.ones(c))
        self._param(f"{name}.beta", np.zeros(c))
        self.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=np.float32)
        self.buffers[f"{name}.running_var"] = np.ones(c, dtype=np.float32)
        self.layers.append(LayerInfo(name, "batchnorm", c, c, 2 * c, res))

    def _add_block(self, name: str, cin: int, f: int, res: int, rng) -> int:
        self._add_conv(f"{name}.conv1", cin, f, 3, res, rng)
        self._add_bn(f"{name}.bn1", f, res)
        self.layers.append(LayerInfo(f"{name}.dropout", "dropout", f, f, 0, res))
        self._add_conv(f"{name}.conv2", f, f, 3, res, rng)
        self._add_bn(f"{name}.bn2", f, res)
        return 2 * f if self.is_mnet else f

    @property
    def is_mnet(self) -> bool:
        return self.config.arch == "fpd-mnet"

    # -- execution ------------------------------------------------------------
    def _unit(self, block: str, k: int, x: Tensor, mode: str) -> Tensor:
        cfg = self.config
        p = self.params
        conv, bn = f"{block}.conv{k}", f"{block}.bn{k}"
        y = ad.conv2d(x, p[f"{conv}.weight"], p[f"{conv}.bias"])

        def norm(t):
            return ad.batchnorm(
                t, p[f"{bn}.gamma"], p[f"{bn}.beta"],
                self.buffers[f"{bn}.running_mean"], self.buffers[f"{bn}.running_var"],
                mode=mode, eps=cfg.bn_eps, momentum=cfg.bn_momentum,
            )

        if cfg.bn_order == "before":
            return ad.relu(norm(y))
        return norm(ad.relu(y))

    def _block(self, name: str, x: Tensor, mode: str, rng) -> Tensor:
        u1 = self._unit(name, 1, x, mode)
        d = ad.dropout(u1, self.config.dropout, mode, rng=rng)
        u2 = self._unit(name, 2, d, mode)
        return ad.concat_channels(u1, u2) if self.is_mnet else u2

    def forward(self, x, mode: Optional[str] = None, rng=None, strict: bool = True) -> Tensor:
        """Run the network on an N x 1 x H x W batch.

        ``strict`` requires H x W to equal the configured input size; with
        ``strict=False`` any size divisible by ``2**depth`` is accepted.
        ``rng`` (Generator or seed) drives dropout in train mode.
        """
        cfg = self.config
        mode = mode or self.mode
        x = ad.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ad.ShapeError(f"expected N x 1 x H x W input, got {x.shape}")
        h, w = x.shape[2:]
        m = 2 ** cfg.depth
        if strict and (h, w) != cfg.input_size:
            raise ad.ShapeError(f"input {h}x{w} does not match configured size {cfg.input_size}")
        if h % m or w % m:
            raise ad.ShapeError(f"input {h}x{w} is not divisible by {m}")
        if x.dtype != self.dtype and not x.requires_grad:
            x = Tensor(x.data.astype(self.dtype))
        rng = np.random.default_rng(rng)

        skips = []
        feat, leg_in = x, x
        for level in range(cfg.depth + 1):
            if level > 0:
                feat = ad.maxpool2x2(skips[-1])
                if self.is_mnet:
                    leg_in = ad.maxpool2x2(leg_in)
                    feat = ad.concat_channels(feat, leg_in)
            name = f"enc{level}" if level < cfg.depth else "bottleneck"
            skips.append(self._block(name, feat, mode, rng))

        out = skips.pop()
        right_leg = []
        for level in range(cfg.depth - 1, -1, -1):
            up = ad.upsample2x(out)
            out = self._block(f"dec{level}", ad.concat_channels(up, skips[level]), mode, rng)
            if self.is_mnet and level > 0:
                # a 1x1 conv commutes with nearest upsampling, so project first
                leg = ad.conv2d(out, self.params[f"leg{level}.weight"], self.params[f"leg{level}.bias"])
                for _ in range(level):
                    leg = ad.upsample2x(leg)
                right_leg.append(leg)
        if right_leg:
            out = ad.concat_channels(*right_leg, out)
        return ad.sigmoid(ad.conv2d(out, self.params["head.weight"], self.params["head.bias"]))

    __call__ = forward

    # -- bookkeeping -------------------------------------------------------------
    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Network":
        for t in self.params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(dtype)
        return self

    def train(self) -> "Network":
        self.mode = "train"
        return self

    def eval(self) -> "Network":
        self.mode = "infer"
        return self

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state(self) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_state(self, params: Dict[str, np.ndarray], buffers: Optional[Dict[str, np.ndarray]] = None) -> None:
        for name, t in self.params.items():
            if name not in params:
                raise KeyError(f"missing parameter {name}")
            value = np.asarray(params[name])
            if value.shape != t.shape:
                raise ValueError(f"parameter {name}: shape {value.shape} != {t.shape}")
            t.data = value.copy()
        for name in self.buffers:
            if buffers is not None and name in buffers:
                self.buffers[name] = np.asarray(buffers[name]).copy()

    def summary(self) -> str:
        lines = [f"{'layer':<22} {'kind':<10} {'in':>5} {'out':>5} {'scale':>6} {'params':>9}"]
        for layer in self.layers:
            lines.append(
                f"{layer.name:<22} {layer.kind:<10} {layer.in_channels:>5} {layer.out_channels:>5} "
                f"{'1/' + str(layer.resolution):>6} {layer.params:>9}"
            )
        lines.append(f"total parameters: {param_count(self)}")
        return "\n".join(lines)


def build(cfg: ModelConfig, seed: int = 0) -> Network:
    """Build either architecture with He-normal conv weights drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    net = Network(cfg)
    mnet = net.is_mnet

    enc_out = []
    cin = 1
    for level in range(cfg.depth + 1):
        if level > 0:
            cin = enc_out[-1] + (1 if mnet else 0)
            net.layers.append(LayerInfo(f"pool{level}", "maxpool", enc_out[-1], enc_out[-1], 0, 2 ** level))
        name = f"enc{level}" if level < cfg.depth else "bottleneck"
        enc_out.append(net._add_block(name, cin, cfg.width(level), 2 ** level, rng))

    prev = enc_out.pop()
    fused = 0
    for level in range(cfg.depth - 1, -1, -1):
        net.layers.append(LayerInfo(f"up{level}", "upsample", prev, prev, 0, 2 ** level))
        prev = net._add_block(f"dec{level}", prev + enc_out[level], cfg.width(level), 2 ** level, rng)
        if mnet and level > 0:
            net._add_conv(f"leg{level}", prev, cfg.leg_width, 1, 2 ** level, rng)
            fused += cfg.leg_width
    net._add_conv("head", prev + fused, 1, 1, 1, rng)
    net.layers.append(LayerInfo("sigmoid", "sigmoid", 1, 1, 0, 1))
    return net


def build_fpd_mnet(cfg: ModelConfig, seed: int = 0) -> Network:
    if cfg.arch != "fpd-mnet":
        cfg = ModelConfig(**{**cfg.to_dict(), "arch": "fpd-mnet"})
    return build(cfg, seed)


def build_unet(cfg: ModelConfig, seed: int = 0) -> Network:
    if cfg.arch != "unet":
        cfg = ModelConfig(**{**cfg.to_dict(), "arch": "unet"})
    return build(cfg, seed)


def forward(model: Network, batch, mode: str = "infer", rng=None) -> Tensor:
    return model.forward(batch, mode=mode, rng=rng)


def param_count(model) -> int:
    params = model.params if hasattr(model, "params") else model
    return int(sum(t.size for t in params.values()))

import numpy as np
import pytest

from fpdmnet.autodiff import ShapeError, Tensor
from fpdmnet.metrics import combined_loss
from fpdmnet.model import ConfigError, ModelConfig, build, build_fpd_mnet, build_unet, forward, param_count


def analytic_params(depth, base, mnet):
    """Per-layer formula: k*k*Cin*Cout + Cout per conv, 2*C per batch norm."""
    def conv(ci, co, k):
        return k * k * ci * co + co

    def block(ci, f):
        return conv(ci, f, 3) + 2 * f + conv(f, f, 3) + 2 * f

    widen = 2 if mnet else 1
    total, outs = 0, []
    for level in range(depth + 1):
        f = base * 2 ** level
        cin = 1 if level == 0 else outs[-1] + (1 if mnet else 0)
        total += block(cin, f)
        outs.append(widen * f)
    prev, legs = outs.pop(), 0
    for level in reversed(range(depth)):
        f = base * 2 ** level
        total += block(prev + outs[level], f)
        prev = widen * f
        if mnet and level > 0:
            total += conv(prev, max(1, base // 4), 1)
            legs += max(1, base // 4)
    return total + conv(prev + legs, 1, 1)


def tiny(arch="fpd-mnet", bn_order="before", depth=2, base=2, size=(16, 16), dropout=0.2):
    return ModelConfig(depth=depth, base=base, arch=arch, bn_order=bn_order, input_size=size, dropout=dropout)


def test_hand_derived_counts():
    # worked out on paper: enc0 204, enc1 1272, bottleneck 4848, dec1 4080, dec0 1032, leg 17, head 10
    assert param_count(build(tiny(depth=2, base=4))) == 11463
    # enc0 66, bottleneck 240, dec0 156, head 3
    assert param_count(build(tiny("unet", depth=1, base=2))) == 465


@pytest.mark.parametrize("depth,base", [(1, 2), (2, 4), (3, 3), (4, 8)])
@pytest.mark.parametrize("arch", ["fpd-mnet", "unet"])
def test_param_count_matches_formula(arch, depth, base):
    cfg = tiny(arch, depth=depth, base=base, size=(2 ** depth, 2 ** depth))
    assert param_count(build(cfg)) == analytic_params(depth, base, arch == "fpd-mnet")


def test_param_count_trivial_cases():
    assert param_count({}) == 0
    single = {"w": Tensor(np.zeros((1, 1, 3, 3))), "b": Tensor(np.zeros(1))}
    assert param_count(single) == 10


def test_unet_smaller_and_variants_equal():
    cfg = tiny(depth=2, base=4)
    mnet_b = param_count(build_fpd_mnet(cfg))
    assert param_count(build_unet(cfg)) < mnet_b
    assert param_count(build(tiny(bn_order="after", depth=2, base=4))) == mnet_b


def test_full_size_config_builds():
    net = build(ModelConfig())
    assert net.config.input_size == (368, 496) and net.config.depth == 4 and net.config.base == 64
    assert param_count(net) == analytic_params(4, 64, True)


def test_parameter_names_unique_and_float32():
    net = build(tiny(depth=3, base=4, size=(16, 16)))
    names = [n for n in net.params]
    assert len(names) == len(set(names))
    assert all(t.dtype == np.float32 for t in net.params.values())
    assert net.layers[-1].kind == "sigmoid"


def test_config_errors():
    with pytest.raises(ConfigError):
        ModelConfig(depth=4, input_size=(370, 496))
    with pytest.raises(ConfigError):
        ModelConfig(base=0)
    with pytest.raises(ConfigError):
        ModelConfig(dropout=1.0)
    with pytest.raises(ConfigError):
        ModelConfig(arch="resnet")
    with pytest.raises(ConfigError):
        ModelConfig(bn_order="sideways")


@pytest.mark.parametrize("arch,order", [("fpd-mnet", "before"), ("fpd-mnet", "after"), ("unet", "before")])
def test_forward_shape_range_and_determinism(arch, order):
    cfg = tiny(arch, order, depth=3, base=3, size=(24, 40))
    net = build(cfg, seed=1)
    x = np.random.default_rng(0).uniform(size=(2, 1, 24, 40))
    out = forward(net, x)
    assert out.shape == (2, 1, 24, 40)
    assert np.all((out.data > 0) & (out.data < 1))
    np.testing.assert_array_equal(out.data, forward(net, x).data)


def test_forward_size_checks():
    net = build(tiny(size=(16, 16)))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 1, 16, 20)))
    assert net.forward(np.zeros((1, 1, 16, 20)), mode="infer", strict=False).shape == (1, 1, 16, 20)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 1, 18, 20)), mode="infer", strict=False)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 2, 16, 16)))


def test_dropout_zero_train_forward_is_deterministic():
    net = build(tiny(dropout=0.0))
    x = np.random.default_rng(1).uniform(size=(2, 1, 16, 16))
    a = net.forward(x, mode="train", rng=1).data
    b = net.forward(x, mode="train", rng=2).data
    np.testing.assert_array_equal(a, b)


def test_dropout_train_forward_depends_on_rng():
    net = build(tiny(dropout=0.3))
    x = np.random.default_rng(1).uniform(size=(2, 1, 16, 16))
    assert not np.array_equal(net.forward(x, mode="train", rng=1).data, net.forward(x, mode="train", rng=2).data)


@pytest.mark.parametrize("arch", ["fpd-mnet", "unet"])
def test_every_parameter_receives_gradient(arch):
    net = build(tiny(arch, depth=2, base=3))
    rng = np.random.default_rng(5)
    x, y = rng.uniform(size=(2, 1, 16, 16)), rng.uniform(size=(2, 1, 16, 16))
    combined_loss(net.forward(x, mode="train", rng=0), y).backward()
    for name, p in net.params.items():
        assert p.grad is not None, name
        assert np.any(p.grad != 0), name


def test_summary_and_state_round_trip():
    net = build(tiny(depth=2, base=4))
    text = net.summary()
    assert "total parameters: 11463" in text and "leg1" in text
    other = build(tiny(depth=2, base=4), seed=9)
    other.load_state(net.state(), net.buffers)
    x = np.random.default_rng(2).uniform(size=(1, 1, 16, 16))
    np.testing.assert_array_equal(other.forward(x, mode="infer").data, net.forward(x, mode="infer").data)


def test_train_mode_updates_running_stats_only():
    net = build(tiny())
    before = {k: v.copy() for k, v in net.buffers.items()}
    x = np.random.default_rng(3).uniform(size=(2, 1, 16, 16))
    net.forward(x, mode="infer")
    assert all(np.array_equal(before[k], net.buffers[k]) for k in before)
    net.forward(x, mode="train", rng=0)
    assert any(not np.array_equal(before[k], net.buffers[k]) for k in before)

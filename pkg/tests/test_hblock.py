
import numpy as np
import pytest

from hoblock import nn
from hoblock.analysis import probe_hblock, probe_receptive_field
from hoblock.autodiff import Var, no_tape
from hoblock.hblock import (
    CONTEXT_MENU,
    KERNEL_MENU,
    ConvNetGenerator,
    GeneratorPlan,
    HBlock,
    HBlockConfig,
    SingleConvGenerator,
    convnet_param_count,
    dynamic_depthwise_apply,
    generate_weights_convnet,
    generate_weights_singleconv,
    singleconv_param_count,
)
from hoblock.tensor import ConfigurationError, OffsetGrid
from oracles import conv3d_naive, dynamic_apply_naive, singleconv_naive

G333 = OffsetGrid.from_shape("3x3x3")


def box_average(x, shape):
    C = x.shape[1]
    k = np.ones((C, 1) + tuple(shape)) / np.prod(shape)
    return nn.conv3d(Var(x), Var(k), groups=C).value


def test_one_hot_center_is_identity(rng):
    x = rng.standard_normal((2, 3, 3, 4, 4))
    w = np.zeros((2, 27 * 3, 3, 4, 4))
    center = G333.offsets.index((0, 0, 0))
    w[:, center * 3 : center * 3 + 3] = 1.0
    np.testing.assert_array_equal(dynamic_depthwise_apply(Var(x), Var(w), G333).value, x)


def test_uniform_weights_box_average(rng):
    x = rng.standard_normal((1, 2, 4, 5, 5))
    w = np.full((1, 27 * 2, 4, 5, 5), 1 / 27)
    y = dynamic_depthwise_apply(Var(x), Var(w), G333).value
    np.testing.assert_allclose(y, box_average(x, (3, 3, 3)), rtol=0, atol=1e-15)


@pytest.mark.parametrize("shape", ["3x3x3", "1x3x3", "3x5x5"])
def test_dynamic_apply_matches_naive(rng, shape):
    grid = OffsetGrid.from_shape(shape)
    x = rng.standard_normal((2, 3, 4, 5, 5))
    w = rng.standard_normal((2, len(grid) * 3, 4, 5, 5))
    y = dynamic_depthwise_apply(Var(x), Var(w), grid).value
    np.testing.assert_allclose(y, dynamic_apply_naive(x, w, grid.shape), rtol=0, atol=1e-12)


def test_singleconv_matches_naive(rng):
    x = rng.standard_normal((1, 2, 3, 3, 3))
    theta = rng.standard_normal((27 * 2, 2, 3, 3, 3))
    logits = generate_weights_singleconv(Var(x), Var(theta)).value
    np.testing.assert_allclose(logits, singleconv_naive(x, theta, 27, (3, 3, 3)), rtol=0, atol=1e-12)


def test_singleconv_param_count_example():
    gen = SingleConvGenerator(4, G333, OffsetGrid.from_shape("5x5x5"))
    assert gen.num_params() == singleconv_param_count(4, G333, OffsetGrid.from_shape("5x5x5")) == 54000


def test_zero_theta_gives_uniform_weights(rng):
    cfg = HBlockConfig(2, kernel="3x3x3", context="3x3x3", generator="single-conv")
    block = HBlock(cfg)
    w = block.weights(Var(rng.standard_normal((1, 2, 2, 3, 3)))).value
    np.testing.assert_allclose(w, 1 / 27, atol=1e-16)


def test_convnet_plan_for_64_channels():
    plan = GeneratorPlan.build(64, G333, OffsetGrid.from_shape("5x5x5"))
    l1, l2, l3 = plan.layers
    assert [str(l.grid) for l in plan.layers] == ["1x3x3", "3x3x3", "3x1x1"]
    assert (l1.in_channels, l1.out_channels) == (64, 64)
    assert (l2.in_channels, l2.out_channels) == (64, 54)
    assert (l3.in_channels, l3.out_channels, l3.groups) == (54, 1728, 27)
    assert not l3.bias and l1.bias and l2.bias


def test_kernel_volume_comparison():
    plan = GeneratorPlan.build(64, G333, OffsetGrid.from_shape("5x5x5"))
    assert plan.kernel_volumes == (9, 27, 3)
    assert sum(plan.kernel_volumes) == 39
    assert len(OffsetGrid.from_shape("5x5x5")) == 125


def test_integer_division_channel_plan():
    plan = GeneratorPlan.build(19, OffsetGrid.from_shape("1x3x3"), OffsetGrid.from_shape("3x3x3"))
    assert 19 // 9 == 2
    assert plan.layers[1].out_channels == 18
    assert plan.layers[2].weight_shape == (171, 2, 1, 1, 1)


def test_too_few_channels_names_constraint():
    with pytest.raises(ConfigurationError, match=r"C // \|R\|"):
        HBlock(HBlockConfig(4, kernel="3x3x3", context="5x5x5"))


def test_convnet_logits_match_module(rng):
    plan = GeneratorPlan.build(9, OffsetGrid.from_shape("1x3x3"), OffsetGrid.from_shape("3x3x3"))
    gen = ConvNetGenerator(plan, rng, init="uniform")
    x = Var(rng.standard_normal((1, 9, 3, 4, 4)))
    params = [p for _, p in gen.named_parameters()]
    np.testing.assert_array_equal(generate_weights_convnet(x, plan, params).value, gen(x).value)


@pytest.mark.parametrize("kernel,context", [(k, c) for k in KERNEL_MENU for c in CONTEXT_MENU
                                            if OffsetGrid.from_shape(c).covers(OffsetGrid.from_shape(k))])
@pytest.mark.parametrize("channels", [27, 64])
def test_param_ledger_menu(kernel, context, channels):
    R, Rc = OffsetGrid.from_shape(kernel), OffsetGrid.from_shape(context)
    single = HBlock(HBlockConfig(channels, R, Rc, generator="single-conv"), init="meta")
    assert single.num_params() == singleconv_param_count(channels, R, Rc)
    if channels >= len(R):
        conv = HBlock(HBlockConfig(channels, R, Rc), init="meta")
        assert conv.num_params() == convnet_param_count(channels, R, Rc)


@pytest.mark.parametrize("context", CONTEXT_MENU)
def test_generator_support_equals_context(context):
    plan = GeneratorPlan.build(27, G333, OffsetGrid.from_shape(context))
    assert plan.context == OffsetGrid.from_shape(context).shape
    assert probe_receptive_field(plan.layers) == OffsetGrid.from_shape(context).shape


def test_probe_examples():
    one = [nn.ConvSpec(1, 1, OffsetGrid.from_shape("1x3x3"))]
    assert probe_receptive_field(one) == (1, 3, 3)
    stack = [nn.ConvSpec(1, 1, OffsetGrid.from_shape(s)) for s in ("1x3x3", "3x3x3", "3x1x1")]
    assert probe_receptive_field(stack) == (5, 5, 5)
    assert probe_receptive_field([nn.ConvSpec(1, 1, G333)] * 3) == (7, 7, 7)


def test_probe_at_border_is_contract_error():
    from hoblock.autodiff import ContractError

    with pytest.raises(ContractError):
        probe_receptive_field([nn.ConvSpec(1, 1, G333)] * 3, volume=(7, 7, 7))


def _random_block(rng, generator="convnet", activation="softmax", residual=False, kernel="3x3x3", context="5x5x5"):
    C = 27 if generator == "convnet" else 2
    block = HBlock(HBlockConfig(C, kernel, context, generator, activation, residual), rng, init="uniform")
    return block, C


@pytest.mark.parametrize("generator", ["convnet", "single-conv"])
def test_softmax_normalization(rng, generator):
    block, C = _random_block(rng, generator)
    w = block.weights(Var(rng.standard_normal((2, C, 3, 4, 4)))).value
    sums = w.reshape(2, 27, C, 3, 4, 4).sum(axis=1)
    assert np.abs(sums - 1).max() <= 1e-12


def test_zero_generator_is_box_average(rng):
    block = HBlock(HBlockConfig(27, "3x3x3", "5x5x5", residual=False))  # layer 3 zero-initialized
    x = rng.standard_normal((1, 27, 3, 4, 4))
    np.testing.assert_allclose(block(Var(x)).value, box_average(x, (3, 3, 3)), rtol=0, atol=1e-12)


def test_constant_input_interior(rng):
    block, C = _random_block(rng, "single-conv", context="3x3x3")
    x = np.full((1, C, 5, 5, 5), 2.5)
    y = block(Var(x)).value
    np.testing.assert_allclose(y[:, :, 1:4, 1:4, 1:4], 2.5, atol=1e-12)


def test_position_constant_weights_equal_static_depthwise(rng):
    C, grid = 3, OffsetGrid.from_shape("3x5x5")
    K = len(grid)
    wq = rng.standard_normal((K, C))
    x = rng.standard_normal((2, C, 3, 6, 6))
    frozen = np.broadcast_to(wq.reshape(1, K * C, 1, 1, 1), (2, K * C, 3, 6, 6)).copy()
    y = dynamic_depthwise_apply(Var(x), Var(frozen), grid).value
    static = wq.T.reshape(C, 1, *grid.shape)
    np.testing.assert_allclose(y, conv3d_naive(x, static, groups=C), rtol=0, atol=1e-12)


@pytest.mark.parametrize("kernel,context", [("3x3x3", "5x5x5"), ("1x3x3", "3x5x5"), ("3x1x1", "3x3x3")])
def test_locality(rng, kernel, context):
    block, C = _random_block(rng, "single-conv", kernel=kernel, context=context)
    half = OffsetGrid.from_shape(context).extents
    kh = OffsetGrid.from_shape(kernel).extents
    shape = (1, C, 9, 11, 11)
    x = rng.standard_normal(shape)
    p = (4, 5, 5)
    with no_tape():
        y0 = block(Var(x)).value[(0, slice(None)) + p]
        for axis in range(3):
            for dist in (half[axis] + 1, half[axis] + kh[axis] + 1):
                pos = list(p)
                pos[axis] += dist
                if pos[axis] >= shape[2 + axis]:
                    continue
                xp = x.copy()
                xp[(0, slice(None)) + tuple(pos)] += 10.0
                y1 = block(Var(xp)).value[(0, slice(None)) + p]
                np.testing.assert_array_equal(y0, y1)
            # just inside the context field the output does change
            pos = list(p)
            pos[axis] += half[axis]
            xp = x.copy()
            xp[(0, slice(None)) + tuple(pos)] += 10.0
            assert not np.allclose(block(Var(xp)).value[(0, slice(None)) + p], y0)


@pytest.mark.parametrize("context", CONTEXT_MENU)
def test_block_support(context):
    res = probe_hblock(HBlockConfig(27, "3x3x3", context))
    assert res["generator"] == res["context"]
    # content reads span the kernel, context reads span the context field, which covers it
    assert res["block"] == tuple(max(a, b) for a, b in zip(res["kernel"], res["context"]))


def test_config_menu_validation():
    with pytest.raises(ConfigurationError):
        HBlockConfig(8, kernel="5x5x5")
    with pytest.raises(ConfigurationError):
        HBlockConfig(8, kernel="3x5x5", context="3x3x3")
    with pytest.raises(ConfigurationError):
        HBlockConfig(8, activation="sigmoid")


def test_residual_adds_input(rng):
    block = HBlock(HBlockConfig(27, "3x3x3", "3x3x3"))
    x = rng.standard_normal((1, 27, 2, 3, 3))
    np.testing.assert_allclose(block(Var(x)).value, box_average(x, (3, 3, 3)) + x, atol=1e-12)

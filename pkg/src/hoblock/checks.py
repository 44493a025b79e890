"""Finite-difference verification of every differentiable op and of complete H-blocks."""

from __future__ import annotations

import numpy as np

from . import nn
from .autodiff import Parameter, Var, gradcheck
from .hblock import HBlock, HBlockConfig, dynamic_depthwise_apply, softmax_over_offsets
from .tensor import OffsetGrid


def _p(rng, shape, name, scale=1.0):
    return Parameter(rng.standard_normal(shape) * scale, name=name)


def op_cases(seed: int = 0):
    """Yield ``(name, f, params)`` triples covering every differentiable op."""
    rng = np.random.default_rng(seed)

    def case(name, build, params):
        proj = np.random.default_rng([seed, len(name)])
        w = {}

        def f():
            y = build()
            if y.value.size == 1:
                return y
            if "r" not in w:
                w["r"] = Var(proj.standard_normal(y.shape))
            return nn.sum_all(nn.mul(y, w["r"]))

        return name, f, params

    x = _p(rng, (2, 4, 3, 5, 5), "x")
    w = _p(rng, (3, 4, 3, 3, 3), "w", 0.3)
    b = _p(rng, (1, 3, 1, 1, 1), "b")
    yield case("conv3d", lambda: nn.conv3d(x, w, b), [x, w, b])

    xg = _p(rng, (2, 4, 3, 5, 5), "x")
    wg = _p(rng, (6, 2, 3, 1, 3), "w", 0.3)
    yield case("conv3d_grouped", lambda: nn.conv3d(xg, wg, groups=2), [xg, wg])

    xs = _p(rng, (1, 2, 4, 5, 6), "x")
    ws = _p(rng, (3, 2, 3, 3, 3), "w", 0.3)
    yield case("conv3d_strided", lambda: nn.conv3d(xs, ws, strides=(2, 2, 2)), [xs, ws])

    for name, fn in (("selu", nn.selu), ("relu", nn.relu), ("tanh", nn.tanh)):
        xa = _p(rng, (2, 3, 2, 3, 3), "x")
        yield case(name, lambda fn=fn, xa=xa: fn(xa), [xa])

    k = 27
    z = _p(rng, (2, k * 2, 2, 3, 3), "logits")
    yield case("softmax_over_offsets", lambda: softmax_over_offsets(z, k), [z])

    xp = _p(rng, (2, 2, 4, 6, 6), "x")
    yield case("maxpool3d", lambda: nn.maxpool3d(xp, (3, 3, 3), (2, 2, 2)), [xp])

    xq = _p(rng, (2, 3, 3, 4, 4), "x")
    yield case("global_avg_pool", lambda: nn.global_avg_pool(xq), [xq])

    xl = _p(rng, (3, 5, 1, 1, 1), "x")
    wl = _p(rng, (4, 5, 1, 1, 1), "w")
    bl = _p(rng, (1, 4, 1, 1, 1), "b")
    yield case("linear", lambda: nn.linear(xl, wl, bl), [xl, wl, bl])

    logits = _p(rng, (4, 3, 1, 1, 1), "logits")
    labels = np.array([0, 2, 1, 2])
    yield case("cross_entropy", lambda: nn.cross_entropy(logits, labels), [logits])
    targets = rng.integers(0, 2, size=(4, 3)).astype(float)
    yield case("binary_sigmoid", lambda: nn.binary_sigmoid(logits, targets), [logits])

    xb = _p(rng, (2, 3, 2, 3, 3), "x")
    gamma = _p(rng, (1, 3, 1, 1, 1), "scale")
    beta = _p(rng, (1, 3, 1, 1, 1), "shift")
    yield case("batchnorm_train", lambda: nn.BatchNormTrain.apply(xb, gamma, beta), [xb, gamma, beta])
    mean = rng.standard_normal((1, 3, 1, 1, 1))
    var = rng.uniform(0.5, 2.0, (1, 3, 1, 1, 1))
    yield case(
        "batchnorm_eval", lambda: nn.BatchNormEval.apply(xb, gamma, beta, mean=mean, var=var), [xb, gamma, beta]
    )

    xe = _p(rng, (2, 3, 2, 3, 3), "a")
    ye = _p(rng, (2, 3, 2, 3, 3), "b")
    yield case("add", lambda: nn.add(xe, ye), [xe, ye])
    yield case("mul", lambda: nn.mul(xe, ye), [xe, ye])
    yield case("scale", lambda: nn.scale(xe, -1.7), [xe])
    yield case("sum", lambda: nn.sum_all(xe), [xe])
    yield case("mean", lambda: nn.mean_all(xe), [xe])

    grid = OffsetGrid.from_shape("3x3x3")
    xd = _p(rng, (2, 3, 3, 4, 4), "x")
    wd = _p(rng, (2, 27 * 3, 3, 4, 4), "w")
    yield case("dynamic_depthwise", lambda: dynamic_depthwise_apply(xd, wd, grid), [xd, wd])


def hblock_case(generator: str, activation: str, seed: int = 0, residual: bool = False):
    """``(name, f, params)`` for ``mean(hblock(x))`` on a (2, 4, 3, 5, 5) input with random parameters.

    The convnet generator needs ``C >= |R|``, so with 4 channels it uses the
    3x1x1 kernel; the single-conv generator uses the 3x3x3 kernel.
    """
    rng = np.random.default_rng([seed, len(generator), len(activation)])
    kernel = "3x1x1" if generator == "convnet" else "3x3x3"
    cfg = HBlockConfig(4, kernel=kernel, context="3x3x3", generator=generator, activation=activation, residual=residual)
    block = HBlock(cfg, rng, init="uniform")
    for p in block.parameters():
        p.value = rng.standard_normal(p.shape) * 0.5
    x = Parameter(rng.standard_normal((2, 4, 3, 5, 5)), name="x")
    params = [x] + block.parameters()
    names = ["x"] + [n for n, _ in block.named_parameters()]
    return f"hblock[{generator},{activation}]", (lambda: nn.mean_all(block(x))), params, names


def run_gradchecks(seed: int = 0, tol: float = 1e-4, h: float = 1e-5) -> dict:
    reports = {}
    for name, f, params in op_cases(seed):
        reports[name] = gradcheck(f, params, h=h, tol=tol, seed=seed)
    for gen in ("convnet", "single-conv"):
        for act in ("softmax", "relu", "tanh"):
            name, f, params, names = hblock_case(gen, act, seed)
            reports[name] = gradcheck(f, params, h=h, tol=tol, seed=seed, names=names)
    return reports

"""Differentiable building blocks and the small layer/module system built on them.

All convolutions use centered "same" zero padding: output position ``o`` reads
input positions ``stride * o + q`` for every offset ``q`` of the kernel grid,
so output lengths are ``ceil(input / stride)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import ContractError, Function, Parameter, Var
from .tensor import OffsetGrid, ShapeError, ConfigurationError, out_size, pad_same

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# -- kernels ---------------------------------------------------------------


def _extents(kshape):
    return tuple((k - 1) // 2 for k in kshape)


def _windows(xp, kshape, strides, out_sp):
    v = sliding_window_view(xp, kshape, axis=(2, 3, 4))
    (st, sh, sw), (To, Ho, Wo) = strides, out_sp
    return v[:, :, : To * st : st, : Ho * sh : sh, : Wo * sw : sw]


def _col2im(dcols, xp_shape, kshape, strides, out_sp, dtype):
    """Scatter-add window gradients ``(N, To, Ho, Wo, C, kt, kh, kw)`` back to the padded input."""
    gxp = np.zeros(xp_shape, dtype=dtype)
    (st, sh, sw), (To, Ho, Wo) = strides, out_sp
    kt, kh, kw = kshape
    for a in range(kt):
        for b in range(kh):
            for d in range(kw):
                gxp[:, :, a : a + To * st : st, b : b + Ho * sh : sh, d : d + Wo * sw : sw] += np.moveaxis(
                    dcols[..., a, b, d], 4, 1
                )
    return gxp


def _crop(gxp, extents, shape):
    kt, kh, kw = extents
    _, _, T, H, W = shape
    return np.ascontiguousarray(gxp[:, :, kt : kt + T, kh : kh + H, kw : kw + W])


class Conv3d(Function):
    """``y_p = sum_q W_q x_{p+q} (+ b)`` with grouped channels and per-axis stride."""

    @staticmethod
    def forward(ctx, x, w, b=None, *, strides=(1, 1, 1), groups=1):
        N, Cin, T, H, W = x.shape
        Cout, Cin_g, kt, kh, kw = w.shape
        G = groups
        if Cin != Cin_g * G or Cout % G:
            raise ShapeError(f"conv3d: input has {Cin} channels, weight {w.shape} with groups={G}")
        kshape = (kt, kh, kw)
        ext = _extents(kshape)
        out_sp = tuple(out_size(s, st) for s, st in zip((T, H, W), strides))
        xp = pad_same(x, ext, strides)
        win = _windows(xp, kshape, strides, out_sp)
        win = win.reshape((N, G, Cin_g) + win.shape[2:]).transpose(1, 0, 3, 4, 5, 2, 6, 7, 8)
        M = N * out_sp[0] * out_sp[1] * out_sp[2]
        K = Cin_g * kt * kh * kw
        Cout_g = Cout // G
        # (G, M, K) im2col buffer, reused by the backward pass
        cols = np.ascontiguousarray(win).reshape(G, M, K)
        wg = w.reshape(G, Cout_g, K)
        y = np.matmul(cols, wg.transpose(0, 2, 1))  # (G, M, Cout_g)
        y = y.transpose(1, 0, 2).reshape((N,) + out_sp + (Cout,))
        y = np.ascontiguousarray(np.moveaxis(y, 4, 1))
        if b is not None:
            y += b
        ctx.save(cols, w)
        ctx.meta = (x.shape, xp.shape, kshape, ext, tuple(strides), out_sp, G, b is not None)
        return y

    @staticmethod
    def backward(ctx, g):
        cols, w = ctx.saved
        x_shape, xp_shape, kshape, ext, strides, out_sp, G, has_bias = ctx.meta
        N, Cin = x_shape[:2]
        Cout, Cin_g = w.shape[:2]
        Cout_g = Cout // G
        M = cols.shape[1]
        gm = np.moveaxis(g, 1, 4).reshape(M, G, Cout_g).transpose(1, 0, 2)  # (G, M, Cout_g)
        wg = w.reshape(G, Cout_g, -1)
        gw = np.matmul(gm.transpose(0, 2, 1), cols).reshape(w.shape)
        dcols = np.matmul(gm, wg)  # (G, M, K)
        dcols = dcols.transpose(1, 0, 2).reshape((N,) + out_sp + (Cin,) + kshape)
        gxp = _col2im(dcols, xp_shape, kshape, strides, out_sp, g.dtype)
        gx = _crop(gxp, ext, x_shape)
        if has_bias:
            return gx, gw, g.sum(axis=(0, 2, 3, 4), keepdims=True)
        return gx, gw


class MaxPool3d(Function):
    @staticmethod
    def forward(ctx, x, *, window=(1, 3, 3), strides=(1, 2, 2)):
        N, C, T, H, W = x.shape
        ext = _extents(window)
        if any(k > s + 2 * e for k, s, e in zip(window, (T, H, W), ext)):
            raise ShapeError(f"maxpool window {window} larger than padded input {x.shape}")
        out_sp = tuple(out_size(s, st) for s, st in zip((T, H, W), strides))
        xp = pad_same(x, ext, strides, value=-np.inf)
        win = _windows(xp, window, strides, out_sp)
        win = win.reshape(win.shape[:5] + (-1,))
        arg = np.argmax(win, axis=-1)
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        ctx.save(arg)
        ctx.meta = (x.shape, xp.shape, tuple(window), ext, tuple(strides), out_sp)
        return np.ascontiguousarray(y)

    @staticmethod
    def backward(ctx, g):
        (arg,) = ctx.saved
        x_shape, xp_shape, window, ext, strides, out_sp = ctx.meta
        gxp = np.zeros(xp_shape, dtype=g.dtype)
        (st, sh, sw), (To, Ho, Wo) = strides, out_sp
        k = 0
        for a in range(window[0]):
            for b in range(window[1]):
                for d in range(window[2]):
                    gxp[:, :, a : a + To * st : st, b : b + Ho * sh : sh, d : d + Wo * sw : sw] += np.where(
                        arg == k, g, 0.0
                    )
                    k += 1
        return (_crop(gxp, ext, x_shape),)


class GlobalAvgPool(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.meta = x.shape
        return x.mean(axis=(2, 3, 4), keepdims=True)

    @staticmethod
    def backward(ctx, g):
        shape = ctx.meta
        return (np.broadcast_to(g / (shape[2] * shape[3] * shape[4]), shape).copy(),)


class Selu(Function):
    @staticmethod
    def forward(ctx, x):
        neg = SELU_SCALE * SELU_ALPHA * np.expm1(np.minimum(x, 0.0))
        ctx.save(x, neg)
        return np.where(x > 0, SELU_SCALE * x, neg).astype(x.dtype, copy=False)

    @staticmethod
    def backward(ctx, g):
        x, neg = ctx.saved
        return (g * np.where(x > 0, SELU_SCALE, neg + SELU_SCALE * SELU_ALPHA),)


class Relu(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save(x > 0)
        return np.maximum(x, 0.0).astype(x.dtype, copy=False)

    @staticmethod
    def backward(ctx, g):
        (mask,) = ctx.saved
        return (g * mask,)


class Tanh(Function):
    @staticmethod
    def forward(ctx, x):
        y = np.tanh(x)
        ctx.save(y)
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved
        return (g * (1.0 - y * y),)


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
        return a + b

    @staticmethod
    def backward(ctx, g):
        return g, g


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
        ctx.save(a, b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        return g * b, g * a


class Scale(Function):
    @staticmethod
    def forward(ctx, a, *, factor):
        ctx.meta = factor
        return a * a.dtype.type(factor)

    @staticmethod
    def backward(ctx, g):
        return (g * g.dtype.type(ctx.meta),)


class Sum(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.meta = a.shape
        return a.sum().reshape(1, 1, 1, 1, 1)

    @staticmethod
    def backward(ctx, g):
        return (np.broadcast_to(g.reshape(()), ctx.meta).copy(),)


class Mean(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.meta = a.shape
        return a.mean().reshape(1, 1, 1, 1, 1)

    @staticmethod
    def backward(ctx, g):
        shape = ctx.meta
        return (np.broadcast_to(g.reshape(()) / np.prod(shape), shape).astype(g.dtype),)


class BatchNormTrain(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta):
        mean = x.mean(axis=(0, 2, 3, 4), keepdims=True)
        var = x.var(axis=(0, 2, 3, 4), keepdims=True)
        invstd = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean) * invstd
        ctx.save(xhat, invstd, gamma)
        return xhat * gamma + beta

    @staticmethod
    def backward(ctx, g):
        xhat, invstd, gamma = ctx.saved
        axes = (0, 2, 3, 4)
        m = g.size // g.shape[1]
        dgamma = (g * xhat).sum(axis=axes, keepdims=True)
        dbeta = g.sum(axis=axes, keepdims=True)
        dxhat = g * gamma
        dx = invstd / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx, dgamma, dbeta


class BatchNormEval(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, *, mean, var):
        invstd = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean) * invstd
        ctx.save(xhat, invstd, gamma)
        return (xhat * gamma + beta).astype(x.dtype, copy=False)

    @staticmethod
    def backward(ctx, g):
        xhat, invstd, gamma = ctx.saved
        axes = (0, 2, 3, 4)
        return g * gamma * invstd, (g * xhat).sum(axis=axes, keepdims=True), g.sum(axis=axes, keepdims=True)


def _labels(labels, n, classes):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"got {labels.shape[0]} labels for batch of {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= classes:
        raise ContractError(f"label out of range [0, {classes})")
    return labels


class CrossEntropy(Function):
    """Mean over the batch of ``-log softmax(logits)[label]``."""

    @staticmethod
    def forward(ctx, logits, *, labels):
        n, k = logits.shape[:2]
        if logits.shape[2:] != (1, 1, 1):
            raise ShapeError(f"cross_entropy expects logits of shape (n, classes, 1, 1, 1), got {logits.shape}")
        labels = _labels(labels, n, k)
        z = logits.reshape(n, k)
        z = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        loss = (lse - z[np.arange(n), labels]).mean()
        p = np.exp(z - lse[:, None])
        ctx.save(p, labels)
        return np.asarray(loss, dtype=logits.dtype).reshape(1, 1, 1, 1, 1)

    @staticmethod
    def backward(ctx, g):
        p, labels = ctx.saved
        n, k = p.shape
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return ((d * (g.reshape(()) / n)).reshape(n, k, 1, 1, 1),)


class BinarySigmoid(Function):
    """Mean binary cross-entropy of independent sigmoids (multi-label loss)."""

    @staticmethod
    def forward(ctx, logits, *, targets):
        n, k = logits.shape[:2]
        z = logits.reshape(n, k)
        y = np.asarray(targets, dtype=logits.dtype).reshape(n, k)
        loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()
        ctx.save(z, y)
        return np.asarray(loss, dtype=logits.dtype).reshape(1, 1, 1, 1, 1)

    @staticmethod
    def backward(ctx, g):
        z, y = ctx.saved
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (((sig - y) * (g.reshape(()) / z.size)).reshape(z.shape + (1, 1, 1)),)


# -- functional wrappers ---------------------------------------------------


def conv3d(x: Var, w: Var, b: Var | None = None, strides=(1, 1, 1), groups=1) -> Var:
    inputs = (x, w) if b is None else (x, w, b)
    return Conv3d.apply(*inputs, strides=tuple(strides), groups=groups)


def selu(x: Var) -> Var:
    return Selu.apply(x)


def relu(x: Var) -> Var:
    return Relu.apply(x)


def tanh(x: Var) -> Var:
    return Tanh.apply(x)


def add(a: Var, b: Var) -> Var:
    return Add.apply(a, b)


def mul(a: Var, b: Var) -> Var:
    return Mul.apply(a, b)


def scale(a: Var, factor: float) -> Var:
    return Scale.apply(a, factor=factor)


def sum_all(a: Var) -> Var:
    return Sum.apply(a)


def mean_all(a: Var) -> Var:
    return Mean.apply(a)


def maxpool3d(x: Var, window, strides) -> Var:
    return MaxPool3d.apply(x, window=tuple(window), strides=tuple(strides))


def global_avg_pool(x: Var) -> Var:
    return GlobalAvgPool.apply(x)


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    """Fully connected layer on ``(n, features, 1, 1, 1)``; ``w`` is ``(out, features, 1, 1, 1)``."""
    if x.shape[2:] != (1, 1, 1):
        raise ShapeError(f"linear expects (n, features, 1, 1, 1), got {x.shape}")
    return conv3d(x, w, b)


def cross_entropy(logits: Var, labels) -> Var:
    return CrossEntropy.apply(logits, labels=labels)


def binary_sigmoid(logits: Var, targets) -> Var:
    return BinarySigmoid.apply(logits, targets=targets)


# -- modules ---------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    grid: OffsetGrid
    groups: int = 1
    stride: tuple[int, int, int] = (1, 1, 1)
    bias: bool = False

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigurationError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible by groups={self.groups}"
            )

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels // self.groups) + self.grid.shape

    @property
    def num_params(self) -> int:
        n = self.out_channels * (self.in_channels // self.groups) * len(self.grid)
        return n + (self.out_channels if self.bias else 0)

    def out_shape(self, in_shape):
        n, c, *sp = in_shape
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {c}")
        return (n, self.out_channels) + tuple(out_size(s, st) for s, st in zip(sp, self.stride))

    def macs(self, in_shape) -> int:
        o = self.out_shape(in_shape)
        return int(np.prod(o)) * (self.in_channels // self.groups) * len(self.grid)


@dataclass
class CostRow:
    name: str
    op: str
    out_shape: tuple
    params: int
    macs: int = 0
    elementwise: int = 0

    def flops(self, mac_factor: int = 1) -> int:
        return self.macs * mac_factor + self.elementwise


class Module:
    """Minimal container: ordered parameters, buffers and child modules."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, Module] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self.training = True

    def add_param(self, name, value, decay=True) -> Parameter:
        p = Parameter(value, name=name, decay=decay)
        self._params[name] = p
        return p

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix="") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix="") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def load_state(self, state: dict) -> None:
        """Copy checkpoint arrays into parameters and buffers; names and shapes must match exactly."""
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
            raise ShapeError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in state.items():
            target = params[name].value if name in params else buffers[name]
            if arr.shape != target.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {target.shape}")
        for name, arr in state.items():
            if name in params:
                params[name].value = arr.astype(params[name].value.dtype)
            else:
                buffers[name][...] = arr

    def train(self, mode: bool = True):
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, x: Var) -> Var:
        return self.forward(x)

    def forward(self, x: Var) -> Var:
        raise NotImplementedError

    def trace(self, shape, rows: list, prefix: str):
        """Append cost rows for input ``shape`` and return the output shape."""
        raise NotImplementedError


def init_weight(shape, rng, kind: str, dtype):
    """``he``: N(0, 2/fan_in); ``uniform``: U(+-1/sqrt(fan_in)); ``zero``; ``meta``: shape-only.

    Without an explicit generator the draw is seeded with 0.
    """
    if kind == "meta":
        return np.broadcast_to(np.zeros((), dtype=dtype), shape)
    if rng is None:
        rng = np.random.default_rng(0)
    fan_in = int(np.prod(shape[1:]))
    if kind == "he":
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    if kind == "uniform":
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)
    if kind == "zero":
        return np.zeros(shape, dtype=dtype)
    raise ValueError(f"unknown init {kind!r}")


def _fill(shape, value, dtype, meta):
    if meta:
        return np.broadcast_to(np.asarray(value, dtype=dtype), shape)
    return np.full(shape, value, dtype=dtype)


class Conv(Module):
    def __init__(self, spec: ConvSpec, rng=None, init="he", dtype=np.float64):
        super().__init__()
        self.spec = spec
        self.weight = self.add_param("weight", init_weight(spec.weight_shape, rng, init, dtype))
        self.bias = None
        if spec.bias:
            self.bias = self.add_param(
                "bias", _fill((1, spec.out_channels, 1, 1, 1), 0.0, dtype, init == "meta"), decay=False
            )

    def forward(self, x):
        return conv3d(x, self.weight, self.bias, self.spec.stride, self.spec.groups)

    def trace(self, shape, rows, prefix):
        out = self.spec.out_shape(shape)
        rows.append(CostRow(prefix, f"conv{self.spec.grid}/g{self.spec.groups}", out, self.spec.num_params, self.spec.macs(shape)))
        return out


class BatchNorm(Module):
    """Per-channel batch normalization, or the identity when ``mode == "off"``."""

    def __init__(self, channels, mode="batch", zero_scale=False, dtype=np.float64, meta=False):
        super().__init__()
        if mode not in ("batch", "off"):
            raise ValueError(f"normalization mode must be 'batch' or 'off', got {mode!r}")
        self.mode = mode
        self.channels = channels
        if mode == "batch":
            shape = (1, channels, 1, 1, 1)
            self.gamma = self.add_param("scale", _fill(shape, 0.0 if zero_scale else 1.0, dtype, meta), decay=False)
            self.beta = self.add_param("shift", _fill(shape, 0.0, dtype, meta), decay=False)
            self._buffers["running_mean"] = np.zeros(shape, dtype=dtype)
            self._buffers["running_var"] = np.ones(shape, dtype=dtype)

    def forward(self, x):
        if self.mode == "off":
            return x
        if self.training:
            v = x.value
            mean = v.mean(axis=(0, 2, 3, 4), keepdims=True)
            m = v.size // v.shape[1]
            var = v.var(axis=(0, 2, 3, 4), keepdims=True) * (m / max(m - 1, 1))
            rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
            rm *= 1 - BN_MOMENTUM
            rm += BN_MOMENTUM * mean
            rv *= 1 - BN_MOMENTUM
            rv += BN_MOMENTUM * var
            return BatchNormTrain.apply(x, self.gamma, self.beta)
        return BatchNormEval.apply(
            x, self.gamma, self.beta, mean=self._buffers["running_mean"], var=self._buffers["running_var"]
        )

    def trace(self, shape, rows, prefix):
        if self.mode != "off":
            rows.append(CostRow(prefix, "batchnorm", tuple(shape), 2 * self.channels, 0, int(np.prod(shape))))
        return tuple(shape)


def batchnorm_or_identity(x: Var, module: BatchNorm) -> Var:
    return module(x)


class Activation(Module):
    def __init__(self, kind="relu"):
        super().__init__()
        self.kind = kind
        self.fn = {"relu": relu, "selu": selu, "tanh": tanh, "identity": lambda v: v}[kind]

    def forward(self, x):
        return self.fn(x)

    def trace(self, shape, rows, prefix):
        if self.kind != "identity":
            rows.append(CostRow(prefix, self.kind, tuple(shape), 0, 0, int(np.prod(shape))))
        return tuple(shape)


class MaxPool(Module):
    def __init__(self, window, stride):
        super().__init__()
        self.window = tuple(window)
        self.stride = tuple(stride)

    def forward(self, x):
        return maxpool3d(x, self.window, self.stride)

    def out_shape(self, shape):
        n, c, *sp = shape
        return (n, c) + tuple(out_size(s, st) for s, st in zip(sp, self.stride))

    def trace(self, shape, rows, prefix):
        out = self.out_shape(shape)
        rows.append(CostRow(prefix.rstrip("."), "maxpool" + "x".join(map(str, self.window)), out, 0, 0, int(np.prod(out))))
        return out

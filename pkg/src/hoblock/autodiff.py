"""Define-by-run reverse-mode differentiation.

Operations are subclasses of :class:`Function`.  Calling ``Op.apply`` inside a
``with Tape() as tape:`` block appends a node to the tape; ``backward(tape,
loss)`` then walks the tape in reverse node order and calls each node's
``backward`` rule exactly once.  Outside a tape, ``apply`` only computes the
forward value.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .tensor import as_tensor5, read_hot1, write_hot1

_ACTIVE: list["Tape"] = []


class Var:
    """A value flowing through the graph."""

    __slots__ = ("value", "requires_grad", "grad", "_tape", "_node", "__weakref__")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None
        self._node = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype})"


class Parameter(Var):
    """Trainable leaf.  ``decay`` marks whether weight decay applies to it."""

    __slots__ = ("name", "decay")

    def __init__(self, value, name: str = "", decay: bool = True):
        super().__init__(as_tensor5(value), requires_grad=True)
        self.name = name
        self.decay = decay
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)


class Context:
    def __init__(self):
        self.saved = ()

    def save(self, *arrays):
        self.saved = arrays


class Function:
    """Base class for differentiable ops.

    ``forward(ctx, *arrays, **attrs)`` returns an array; ``backward(ctx, grad)``
    returns one gradient (or None) per array input.
    """

    @staticmethod
    def forward(ctx, *args, **attrs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Var, **attrs) -> Var:
        ctx = Context()
        out = Var(cls.forward(ctx, *(v.value for v in inputs), **attrs))
        tape = current_tape()
        if tape is not None and any(v.requires_grad for v in inputs):
            tape._record(cls, inputs, ctx, out)
        return out


@dataclass
class Node:
    op: type | None
    inputs: tuple
    ctx: Context | None
    leaf: Var | None = None


@dataclass
class Tape:
    """Append-only record of op applications; node ids are list positions."""

    nodes: list = field(default_factory=list)
    _leaf_ids: dict = field(default_factory=dict)

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def _node_of(self, v: Var):
        if not v.requires_grad:
            return None
        if v._tape is self:
            return v._node
        key = id(v)
        if key not in self._leaf_ids:
            self._leaf_ids[key] = len(self.nodes)
            self.nodes.append(Node(None, (), None, leaf=v))
        return self._leaf_ids[key]

    def _record(self, op, inputs, ctx, out: Var):
        ids = tuple(self._node_of(v) for v in inputs)
        out.requires_grad = True
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(Node(op, ids, ctx))

    @property
    def leaves(self) -> list[Var]:
        return [n.leaf for n in self.nodes if n.leaf is not None]


def current_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


@contextlib.contextmanager
def no_tape():
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


class ContractError(RuntimeError):
    pass


def backward(tape: Tape, loss: Var) -> dict:
    """Populate ``.grad`` of every leaf that requires grad and return ``{leaf: grad}``.

    Gradients are accumulated in reverse node order, inputs left to right.
    """
    if loss.value.size != 1 or loss.value.ndim != 5:
        raise ContractError(f"loss must be scalar-shaped (1,1,1,1,1), got {loss.shape}")
    leaves = tape.leaves
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.value)
    if loss._tape is not tape:
        return {leaf: leaf.grad for leaf in leaves}
    grads = {loss._node: np.ones_like(loss.value)}
    for nid in range(loss._node, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.leaf is not None:
            node.leaf.grad = g
            continue
        in_grads = node.op.backward(node.ctx, g)
        for iid, ig in zip(node.inputs, in_grads):
            if iid is None or ig is None:
                continue
            grads[iid] = grads[iid] + ig if iid in grads else ig
    return {leaf: leaf.grad for leaf in leaves}


# -- gradient checking -----------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_err: float
    per_param: dict
    tol: float
    coords_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __str__(self):
        lines = [f"{name}\t{err:.3e}" for name, err in self.per_param.items()]
        lines.append(f"max\t{self.max_rel_err:.3e}\t{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def gradcheck(
    f: Callable[[], Var],
    params: Sequence[Var],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int = 500,
    seed: int = 0,
    floor: float = 1e-6,
    names: Sequence[str] | None = None,
) -> GradcheckReport:
    """Compare tape gradients of the scalar ``f()`` with central differences.

    ``f`` rebuilds the graph from the current values of ``params`` on every call.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.  When a
    parameter has more than ``max_coords`` coordinates, a fixed-seed uniform
    sample of ``max_coords`` of them is checked.
    """
    for p in params:
        if p.value.dtype != np.float64:
            raise ContractError("gradcheck requires f64 values")
        p.value = np.ascontiguousarray(p.value)
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    analytic = [np.array(p.grad, copy=True) for p in params]

    def evaluate() -> float:
        with no_tape():
            v = float(f().value.reshape(-1)[0])
        return v

    rng = np.random.default_rng(seed)
    total = sum(p.value.size for p in params)
    per_param = {}
    checked = 0
    for i, p in enumerate(params):
        name = names[i] if names else (getattr(p, "name", "") or f"input{i}")
        flat = p.value.reshape(-1)
        if total <= max_coords:
            coords = np.arange(flat.size)
        else:
            k = max(1, max_coords * flat.size // total)
            coords = np.sort(rng.choice(flat.size, size=min(k, flat.size), replace=False))
        worst = 0.0
        for j in coords:
            orig = flat[j]
            flat[j] = orig + h
            fp = evaluate()
            flat[j] = orig - h
            fm = evaluate()
            flat[j] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite evaluation at {name}[{tuple(int(i) for i in np.unravel_index(j, p.shape))}]")
            num = (fp - fm) / (2 * h)
            a = analytic[i].reshape(-1)[j]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        per_param[name] = worst
        checked += len(coords)
    return GradcheckReport(max(per_param.values(), default=0.0), per_param, tol, checked)


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(directory, params, buffers: dict | None = None) -> None:
    """One HOT1 file per parameter (and buffer) plus ``manifest.txt`` listing names in order.

    ``params`` is a ``{qualified_name: Parameter}`` mapping or an iterable of
    parameters with unique ``name`` attributes.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    items = params.items() if isinstance(params, dict) else [(p.name, p) for p in params]
    names = []
    for name, p in items:
        if name in names:
            raise ValueError(f"duplicate checkpoint entry {name!r}")
        write_hot1(directory / f"{name}.hot1", p.value)
        names.append(name)
    for name, arr in (buffers or {}).items():
        write_hot1(directory / f"{name}.hot1", arr)
        names.append(name)
    (directory / "manifest.txt").write_text("".join(n + "\n" for n in names))


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    names = (directory / "manifest.txt").read_text().split()
    return {n: read_hot1(directory / f"{n}.hot1") for n in names}

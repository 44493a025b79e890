"""SGD training, evaluation and the higher-order vs first-order comparison."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Parameter, Tape, Var, backward, no_tape, save_checkpoint
from .models import BackboneSpec, InsertionPlan, Model, build_model
from .nn import binary_sigmoid, cross_entropy
from .synth import normalize_clips

LOSSES = ("cross-entropy", "binary-sigmoid")
LOG_HEADER = "epoch\tlr\ttrain_loss\ttrain_acc\teval_acc"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.01
    lr_steps: tuple[int, ...] = (15,)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    loss: str = "cross-entropy"

    def __post_init__(self):
        object.__setattr__(self, "lr_steps", tuple(int(s) for s in self.lr_steps))
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.lr * 0.1 ** sum(epoch >= s for s in self.lr_steps)


class SGD:
    """Momentum SGD with L2 decay folded into the velocity: ``v = m*v + g + wd*p; p -= lr*v``.

    Decay applies only to parameters flagged ``decay`` (conv and linear weights).
    """

    def __init__(self, params: list[Parameter], momentum=0.9, weight_decay=1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr: float):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
        for p, v in zip(self.params, self.velocity):
            sgd_step(p, v, lr, self.momentum, self.weight_decay if p.decay else 0.0)


def sgd_step(p: Parameter, velocity: np.ndarray, lr: float, momentum: float, weight_decay: float) -> None:
    """In-place update of one parameter and its velocity buffer."""
    velocity *= momentum
    velocity += p.grad
    if weight_decay:
        velocity += weight_decay * p.value
    p.value = p.value - lr * velocity


def loss_fn(kind: str, logits: Var, labels: np.ndarray) -> Var:
    if kind == "cross-entropy":
        return cross_entropy(logits, labels)
    targets = np.eye(logits.shape[1])[labels]
    return binary_sigmoid(logits, targets)


def predict(model: Model, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    with no_tape():
        for s in range(0, len(x), batch_size):
            out.append(model(Var(x[s : s + batch_size].astype(model.dtype, copy=False))).value[:, :, 0, 0, 0])
    return np.concatenate(out)


def evaluate(model: Model, x: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(model, x, batch_size).argmax(axis=1) == labels))


def _fmt(v: float) -> str:
    return repr(float(v))


@dataclass
class TrainResult:
    log: list[tuple] = field(default_factory=list)
    eval_acc: float = float("nan")
    seconds: float = 0.0

    def lines(self) -> list[str]:
        return [LOG_HEADER] + ["\t".join([str(r[0])] + [_fmt(v) for v in r[1:]]) for r in self.log]


def train(
    model: Model,
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    cfg: TrainConfig,
    out_dir=None,
    echo: Callable[[str], None] | None = print,
) -> TrainResult:
    """Train on standardized clips; one log row per epoch (row 0 evaluates the untrained model when epochs == 0)."""
    t0 = time.perf_counter()
    train_x = normalize_clips(train_x).astype(model.dtype)
    test_x = normalize_clips(test_x).astype(model.dtype)
    params = model.parameters()
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult()
    if echo:
        echo(LOG_HEADER)
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "log.tsv", "w")
        log_file.write(LOG_HEADER + "\n")

    def emit(row):
        result.log.append(row)
        line = result.lines()[-1]
        if echo:
            echo(line)
        if log_file:
            log_file.write(line + "\n")
            log_file.flush()

    try:
        if cfg.epochs == 0:
            emit((0, cfg.lr_at(0), float("nan"), float("nan"), evaluate(model, test_x, test_y)))
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            model.train()
            order = rng.permutation(len(train_y))
            total_loss, correct = 0.0, 0
            for s in range(0, len(order), cfg.batch_size):
                idx = order[s : s + cfg.batch_size]
                xb = Var(train_x[idx])
                with Tape() as tape:
                    logits = model(xb)
                    loss = loss_fn(cfg.loss, logits, train_y[idx])
                backward(tape, loss)
                opt.step(lr)
                total_loss += float(loss.value.reshape(())) * len(idx)
                correct += int(np.sum(logits.value[:, :, 0, 0, 0].argmax(axis=1) == train_y[idx]))
            n = len(order)
            emit((epoch + 1, lr, total_loss / n, correct / n, evaluate(model, test_x, test_y)))
    finally:
        if log_file:
            log_file.close()
    result.eval_acc = result.log[-1][4] if result.log else float("nan")
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint", dict(model.named_parameters()), dict(model.named_buffers()))
    result.seconds = time.perf_counter() - t0
    return result


@dataclass
class CompareReport:
    higher_order_acc: float
    static_acc: float
    higher_order_log: list
    static_log: list

    @property
    def gap(self) -> float:
        return self.higher_order_acc - self.static_acc

    def __str__(self):
        return (
            f"higher-order\t{self.higher_order_acc:.4f}\n"
            f"static\t{self.static_acc:.4f}\n"
            f"gap\t{self.gap:+.4f}"
        )


def compare_orders(
    spec: BackboneSpec,
    plan: InsertionPlan,
    data: tuple,
    cfg: TrainConfig,
    init_seed: int = 0,
    dtype=np.float64,
    out_dir=None,
    echo=None,
) -> CompareReport:
    """Train the H-block model and its static-depthwise twin under identical seeds and data."""
    train_x, train_y, test_x, test_y = data
    results = {}
    for tag, static in (("higher_order", False), ("static", True)):
        model = build_model(spec, plan, seed=init_seed, static=static, dtype=dtype)
        sub = None if out_dir is None else Path(out_dir) / tag
        results[tag] = train(model, train_x, train_y, test_x, test_y, cfg, sub, echo)
    return CompareReport(
        results["higher_order"].eval_acc,
        results["static"].eval_acc,
        results["higher_order"].log,
        results["static"].log,
    )

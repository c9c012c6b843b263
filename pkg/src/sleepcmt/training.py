"""Loss, optimiser and the training loop."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import ops
from .autograd import Tape, Tensor
from .errors import ConfigError, InputError
from .nn import Module, Parameter

log = logging.getLogger(__name__)

CLASS_WEIGHTS = (1.0, 2.0, 1.0, 2.0, 2.0)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int = 32
    class_weights: list[float] = field(default_factory=lambda: list(CLASS_WEIGHTS))
    max_epochs: int = 10
    max_steps: int | None = None
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 = only at training-epoch ends

    def __post_init__(self) -> None:
        self.class_weights = [float(w) for w in self.class_weights]
        if len(self.class_weights) != 5 or min(self.class_weights) <= 0:
            raise ConfigError(f"class_weights must be 5 positive numbers, got {self.class_weights}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def weighted_cross_entropy(logits: Tensor, labels, weights) -> Tensor:
    """Class-weighted mean cross-entropy: sum_n w[y_n] * nll_n / sum_n w[y_n].

    ``logits`` may be (N, C) or (..., C); leading axes are flattened.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64)
    c = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    flat = ops.reshape(logits, (-1, c))
    if flat.shape[0] != labels.size:
        raise InputError(f"{flat.shape[0]} logit rows but {labels.size} labels")
    nll = ops.scale(ops.pick(ops.log_softmax(flat, -1), labels), -1.0)
    w = weights[labels]
    per = ops.mul(nll, Tensor(w.astype(logits.dtype)))
    return ops.scale(ops.sum(per), 1.0 / float(w.sum()))


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Parameter], state: OptimizerState, cfg: TrainConfig) -> None:
    """One Adam update with L2-coupled weight decay (g <- g + wd * theta).

    Parameters without a gradient are left untouched.
    """
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        denom = np.sqrt(v) / np.sqrt(bc2) + cfg.adam_eps
        p.data -= (cfg.lr / bc1) * m / denom


class Adam:
    def __init__(self, model: Module, cfg: TrainConfig):
        self.params = dict(model.named_parameters())
        self.cfg = cfg
        self.state = OptimizerState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state, self.cfg)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.state.m.items():
            out[f"m.{name}"] = arr
            out[f"v.{name}"] = self.state.v[name]
        return out

    def load_state(self, step: int, arrays: dict[str, np.ndarray]) -> None:
        self.state = OptimizerState(step=step)
        for key, arr in arrays.items():
            kind, name = key.split(".", 1)
            if name not in self.params:
                raise KeyError(f"optimizer state for unknown parameter {name}")
            target = self.state.m if kind == "m" else self.state.v
            target[name] = np.array(arr, dtype=self.params[name].dtype)


def train_step(model: Module, opt: Adam, x: np.ndarray, y: np.ndarray, weights) -> float:
    """Forward, weighted loss, backward and one optimiser update; returns the loss."""
    model.train()
    opt.zero_grad()
    with Tape() as tape:
        logits, _ = model.forward(Tensor(x))
        loss = weighted_cross_entropy(logits, y, weights)
    tape.backward(loss)
    opt.step()
    return loss.item()


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one pass; the last short batch is kept.

    The permutation depends only on (seed, epoch) so a resumed run replays
    the same order.
    """
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class FitProgress:
    epoch: int = 0          # training epochs fully completed
    step: int = 0           # optimiser steps taken
    losses: list[tuple[int, float]] = field(default_factory=list)


def fit(model: Module, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, opt: Adam | None = None,
        progress: FitProgress | None = None,
        on_step: Callable[[FitProgress], bool | None] | None = None,
        on_epoch_end: Callable[[FitProgress], None] | None = None) -> FitProgress:
    """Mini-batch training over ``x``/``y`` (epoch or sequence arrays).

    Stops after ``cfg.max_epochs`` passes or ``cfg.max_steps`` steps.  A
    truthy return from ``on_step`` stops early.  Passing the ``progress`` of
    an interrupted run resumes mid-epoch at the next unseen batch.
    """
    if len(x) == 0:
        raise ConfigError("training set is empty")
    opt = opt or Adam(model, cfg)
    prog = progress or FitProgress()
    per_epoch = -(-len(x) // cfg.batch_size)
    while prog.epoch < cfg.max_epochs:
        batches = epoch_batches(len(x), cfg.batch_size, cfg.seed, prog.epoch)
        done_in_epoch = prog.step - prog.epoch * per_epoch
        for idx in batches[done_in_epoch:]:
            if cfg.max_steps is not None and prog.step >= cfg.max_steps:
                return prog
            loss = train_step(model, opt, x[idx], y[idx], cfg.class_weights)
            prog.step += 1
            prog.losses.append((prog.step, loss))
            if on_step is not None and on_step(prog):
                return prog
        prog.epoch += 1
        if on_epoch_end is not None:
            on_epoch_end(prog)
    return prog

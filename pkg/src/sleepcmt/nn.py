"""Parameter containers and layers built on :mod:`sleepcmt.ops`."""

from __future__ import annotations

import logging
import math
from typing import Iterator

import numpy as np

from . import ops
from .autograd import Tensor

log = logging.getLogger(__name__)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=np.float32, name: str | None = None):
        super().__init__(np.asarray(data, dtype=dtype), requires_grad=True, name=name)


class Module:
    """Minimal module tree: parameters, buffers and a train/eval flag.

    Parameters and child modules are discovered from instance attributes
    (including lists of modules), in attribute-definition order, so names are
    stable across runs.
    """

    def __init__(self) -> None:
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        yield f"{prefix}{key}.{i}", item
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in self.buffers().items():
            yield prefix + key, val
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and float buffers in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            m._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        pass

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for name, p in params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name}")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)
        owners = {}
        for prefix, m in self._prefixed_modules(""):
            for key in m.buffers():
                owners[prefix + key] = (m, key)
        for name, (m, key) in owners.items():
            if name not in state:
                raise KeyError(f"missing buffer {name}")
            m.load_buffer(key, np.asarray(state[name]))
        extra = set(state) - set(params) - set(owners)
        if extra:
            raise KeyError(f"unexpected entries: {sorted(extra)[:5]}")

    def _prefixed_modules(self, prefix: str):
        yield prefix, self
        for key, child in self._children():
            yield from child._prefixed_modules(f"{prefix}{key}.")


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Parameter(_uniform(rng, (out_features, in_features), bound))
        self.bias = Parameter(_uniform(rng, (out_features,), bound)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int,
                 rng: np.random.Generator):
        super().__init__()
        self.stride = stride
        bound = 1.0 / math.sqrt(in_channels * kernel)
        self.weight = Parameter(_uniform(rng, (out_channels, in_channels, kernel), bound))
        self.bias = Parameter(_uniform(rng, (out_channels,), bound))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias, self.stride)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm1d(Module):
    """Batch normalisation over the channel (last) axis.

    Running variance tracks the population (biased) batch variance, so with
    ``momentum=1`` eval mode reproduces the last training batch exactly.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.num_batches = 0
        self._warned = False

    def buffers(self) -> dict[str, np.ndarray]:
        return {
            "running_mean": self.running_mean,
            "running_var": self.running_var,
            "num_batches": np.array([self.num_batches], dtype=np.float32),
        }

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        if name == "num_batches":
            self.num_batches = int(value.reshape(-1)[0])
        elif name in ("running_mean", "running_var"):
            cur = getattr(self, name)
            if value.shape != cur.shape:
                raise ValueError(f"{name}: shape {value.shape} != {cur.shape}")
            setattr(self, name, np.ascontiguousarray(value, dtype=cur.dtype))
        else:
            raise KeyError(name)

    def _cast_buffers(self, dtype) -> None:
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            out, mu, var = ops.batch_norm(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var).astype(self.running_var.dtype)
            self.num_batches += 1
            return out
        if self.num_batches == 0 and not self._warned:
            log.warning("event=batchnorm_uninitialized msg=\"eval before any training step; using identity statistics\"")
            self._warned = True
        inv = (1.0 / np.sqrt(self.running_var + self.eps)).astype(x.dtype)
        xhat = ops.mul(ops.sub(x, Tensor(self.running_mean.astype(x.dtype))), Tensor(inv))
        return ops.add(ops.mul(xhat, self.gamma), self.beta)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def weights(self) -> dict:
        return {
            "wq": self.q.weight, "bq": self.q.bias,
            "wk": self.k.weight, "bk": self.k.bias,
            "wv": self.v.weight, "bv": self.v.bias,
            "wo": self.o.weight, "bo": self.o.bias,
        }

    def forward(self, q: Tensor, k: Tensor, v: Tensor):
        """Returns ``(output, attention_weights)`` with weights (..., heads, S, S)."""
        return ops.multi_head_attention(q, k, v, self.weights(), self.heads, return_weights=True)

"""Central finite-difference verification of every differentiable op.

The error reported per op is the worst, over inputs and seeds, of

    max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-10)

computed per input tensor.  Element-wise relative error is unusable for
entries whose true gradient is ~0, where finite-difference noise dominates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .autograd import Tape, Tensor

H = 1e-5
TOLERANCE = 1e-4
NOISE_FLOOR = 1e-10

Case = tuple[Callable[[], Tensor], list[Tensor]]


def _rand(rng: np.random.Generator, *shape, away_from_zero: bool = False) -> Tensor:
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.05, np.sign(x + 1e-12) * 0.05 + x, x)
    return Tensor(x.astype(np.float64), requires_grad=True)


def _project(out: Tensor, rng_seed: int) -> Tensor:
    """Reduce a tensor to a scalar with fixed random weights."""
    r = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return ops.sum(ops.mul(out, Tensor(r)))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|).

    Callers pass the gradients of all inputs of a case concatenated: some
    parameters (attention key biases, for one) have an identically zero
    gradient, and dividing their finite-difference roundoff by their own
    scale would report noise as error.
    """
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    denom = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), NOISE_FLOOR)
    return float(diff / denom)


def check_gradients(fn: Callable[[], Tensor], inputs: list[Tensor], h: float = H,
                    max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` must rebuild its scalar output from the current ``.data`` of
    ``inputs``.  With ``max_coords`` only that many randomly chosen entries
    per input are perturbed.
    """
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic_all, numeric_all = [], []
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        numeric = np.zeros(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            f_plus = fn().item()
            flat[c] = orig - h
            f_minus = fn().item()
            flat[c] = orig
            numeric[j] = (f_plus - f_minus) / (2 * h)
        analytic_all.append(analytic.reshape(-1)[coords])
        numeric_all.append(numeric)
    if not analytic_all:
        return 0.0
    return relative_error(np.concatenate(analytic_all), np.concatenate(numeric_all))


def _case_add(rng):
    a, b = _rand(rng, 3, 4), _rand(rng, 4)
    return lambda: _project(ops.add(a, b), 1), [a, b]


def _case_sub(rng):
    a, b = _rand(rng, 2, 3, 4), _rand(rng, 3, 4)
    return lambda: _project(ops.sub(a, b), 2), [a, b]


def _case_mul(rng):
    a, b = _rand(rng, 3, 5), _rand(rng, 3, 5)
    return lambda: _project(ops.mul(a, b), 3), [a, b]


def _case_scale(rng):
    a = _rand(rng, 4, 2)
    c = float(rng.uniform(-2, 2))
    return lambda: _project(ops.scale(a, c), 4), [a]


def _case_matmul(rng):
    n, k, m = rng.integers(1, 5, size=3)
    a, b = _rand(rng, 2, n, k), _rand(rng, k, m)
    return lambda: _project(ops.matmul(a, b), 5), [a, b]


def _case_linear(rng):
    x, w, b = _rand(rng, 2, 3, 4), _rand(rng, 5, 4), _rand(rng, 5)
    return lambda: _project(ops.linear(x, w, b), 6), [x, w, b]


def _case_leaky_relu(rng):
    x = _rand(rng, 3, 6, away_from_zero=True)
    return lambda: _project(ops.leaky_relu(x, 0.01), 7), [x]


def _case_relu(rng):
    x = _rand(rng, 3, 6, away_from_zero=True)
    return lambda: _project(ops.relu(x), 8), [x]


def _case_softmax(rng):
    x = _rand(rng, 3, int(rng.integers(2, 7)))
    return lambda: _project(ops.softmax(x, -1), 9), [x]


def _case_log_softmax(rng):
    x = _rand(rng, 4, int(rng.integers(2, 7)))
    return lambda: _project(ops.log_softmax(x, -1), 10), [x]


def _case_layer_norm(rng):
    e = int(rng.integers(2, 8))
    x, g, b = _rand(rng, 3, e), _rand(rng, e), _rand(rng, e)
    return lambda: _project(ops.layer_norm(x, g, b, 1e-5), 11), [x, g, b]


def _case_batch_norm(rng):
    c = int(rng.integers(1, 4))
    x, g, b = _rand(rng, 2, 5, c), _rand(rng, c), _rand(rng, c)
    return lambda: _project(ops.batch_norm(x, g, b, 1e-5)[0], 12), [x, g, b]


def _case_conv1d(rng):
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.integers(1, 5))
    stride = int(rng.integers(1, 4))
    t = int(rng.integers(k, k + 10))
    x, w, b = _rand(rng, 2, t, c_in), _rand(rng, c_out, c_in, k), _rand(rng, c_out)
    return lambda: _project(ops.conv1d(x, w, b, stride), 13), [x, w, b]


def _case_concat(rng):
    a, b = _rand(rng, 2, 3), _rand(rng, 2, 4)
    return lambda: _project(ops.concat([a, b], axis=-1), 14), [a, b]


def _case_stack(rng):
    a, b = _rand(rng, 2, 3), _rand(rng, 2, 3)
    return lambda: _project(ops.stack([a, b], axis=1), 15), [a, b]


def _case_getitem(rng):
    x = _rand(rng, 4, 5)
    return lambda: _project(ops.getitem(x, (slice(1, 3), 0)), 16), [x]


def _case_reshape(rng):
    x = _rand(rng, 2, 6)
    return lambda: _project(ops.reshape(x, (3, 4)), 17), [x]


def _case_swapaxes(rng):
    x = _rand(rng, 2, 3, 4)
    return lambda: _project(ops.swapaxes(x, 0, 2), 18), [x]


def _case_sum(rng):
    x = _rand(rng, 3, 4)
    axis = int(rng.integers(0, 2))
    return lambda: _project(ops.sum(x, axis), 19), [x]


def _case_mean(rng):
    x = _rand(rng, 3, 4)
    return lambda: _project(ops.mean(x, -1), 20), [x]


def _case_pick(rng):
    x = _rand(rng, 4, 5)
    idx = rng.integers(0, 5, size=4)
    return lambda: _project(ops.pick(x, idx), 21), [x]


def _case_multi_head_attention(rng):
    heads = int(rng.choice([1, 2]))
    e = 2 * heads * int(rng.integers(1, 3))
    s = int(rng.integers(2, 5))  # with one position the q/k gradients vanish identically
    q, k, v = _rand(rng, 2, s, e), _rand(rng, 2, s, e), _rand(rng, 2, s, e)
    w = {}
    for n in "qkvo":
        w["w" + n] = _rand(rng, e, e)
        w["b" + n] = _rand(rng, e)
    inputs = [q, k, v] + list(w.values())
    return lambda: _project(ops.multi_head_attention(q, k, v, w, heads), 22), inputs


CASES: dict[str, Callable[[np.random.Generator], Case]] = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale": _case_scale,
    "matmul": _case_matmul,
    "linear": _case_linear,
    "leaky_relu": _case_leaky_relu,
    "relu": _case_relu,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "layer_norm": _case_layer_norm,
    "batch_norm": _case_batch_norm,
    "conv1d": _case_conv1d,
    "concat": _case_concat,
    "stack": _case_stack,
    "getitem": _case_getitem,
    "reshape": _case_reshape,
    "swapaxes": _case_swapaxes,
    "sum": _case_sum,
    "mean": _case_mean,
    "pick": _case_pick,
    "multi_head_attention": _case_multi_head_attention,
}


def epoch_model_case(rng: np.random.Generator):
    """Full epoch-model forward + weighted loss, float64, tiny widths."""
    from .model import EpochCmt, ModelConfig
    from .training import weighted_cross_entropy

    cfg = ModelConfig(embed_dim=8, ff_dim=16, heads=2, path_channels=4)
    model = EpochCmt(cfg, seed=int(rng.integers(0, 2**31))).astype(np.float64)
    model.train()
    x = Tensor(rng.standard_normal((2, cfg.epoch_samples, len(cfg.modalities))), requires_grad=True)
    y = rng.integers(0, 5, size=2)
    weights = np.array([1.0, 2.0, 1.0, 2.0, 2.0])

    def fn():
        logits, _ = model.forward(x)
        return weighted_cross_entropy(logits, y, weights)

    return fn, model.parameters()


@dataclass
class GradcheckResult:
    op: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_suite(seed: int = 0, n_seeds: int = 10, include_model: bool = True,
              model_coords: int = 6) -> list[GradcheckResult]:
    results = []
    for name in sorted(CASES):
        worst = 0.0
        for s in range(n_seeds):
            rng = np.random.default_rng([seed, s, len(name)])
            fn, inputs = CASES[name](rng)
            worst = max(worst, check_gradients(fn, inputs))
        results.append(GradcheckResult(name, worst))
    if include_model:
        worst = 0.0
        for s in range(n_seeds):
            rng = np.random.default_rng([seed, s, 999])
            fn, inputs = epoch_model_case(rng)
            worst = max(worst, check_gradients(fn, inputs, max_coords=model_coords, rng=rng))
        results.append(GradcheckResult("epoch_cmt", worst))
    return results

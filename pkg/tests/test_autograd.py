import numpy as np
import pytest

from sleepcmt import ops
from sleepcmt.autograd import Tape, Tensor, backward, set_debug
from sleepcmt.errors import UsageError


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def test_sum_of_squares_grad_is_2x():
    x = leaf([1.0, -2.0, 3.5])
    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_fan_out_accumulates():
    x = leaf([3.0])
    with Tape() as tape:
        loss = ops.sum(ops.add(x, x))
    tape.backward(loss)
    assert x.grad.tolist() == [2.0]


def test_grads_accumulate_across_backward_calls():
    x = leaf([1.0, 2.0])
    for _ in range(2):
        with Tape() as tape:
            loss = ops.sum(ops.scale(x, 3.0))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [6.0, 6.0])


def test_non_scalar_loss_rejected():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = ops.scale(x, 2.0)
    with pytest.raises(UsageError):
        tape.backward(y)


def test_loss_from_other_tape_rejected():
    x = leaf([1.0])
    with Tape():
        loss = ops.sum(x)
    with pytest.raises(UsageError):
        backward(loss, Tape())


def test_no_recording_outside_tape():
    x = leaf([1.0])
    y = ops.scale(x, 2.0)
    assert not y.requires_grad


def test_tape_nodes_are_topologically_ordered():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        a = ops.scale(x, 2.0)
        b = ops.mul(a, x)
        ops.sum(ops.add(a, b))
    seen = {id(x)}
    for node in tape.nodes:
        assert all(id(t) in seen for t in node.inputs)
        seen.add(id(node.output))


def test_unreached_leaf_keeps_no_grad():
    x, z = leaf([1.0]), leaf([5.0])
    with Tape() as tape:
        loss = ops.sum(ops.scale(x, 2.0))
        ops.scale(z, 2.0)
    tape.backward(loss)
    assert z.grad is None


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_flags_nonfinite():
    x = Tensor(np.array([1e308, 1e308]), requires_grad=True)
    set_debug(True)
    try:
        with Tape():
            with pytest.raises(FloatingPointError):
                ops.scale(x, 10.0)
    finally:
        set_debug(False)


_BINARY = ["add", "mul", "sub"]
_UNARY = ["scale", "relu", "square"]


def _random_graph(rng, n_leaves=3, n_nodes=5):
    spec = []
    for i in range(n_nodes):
        avail = n_leaves + i
        if rng.random() < 0.6:
            spec.append((str(rng.choice(_BINARY)), int(rng.integers(avail)), int(rng.integers(avail))))
        else:
            spec.append((str(rng.choice(_UNARY)), int(rng.integers(avail)), None))
    return spec


def _eval(spec, leaves, memo):
    n_leaves = len(leaves)

    def node(j):
        if j < n_leaves:
            return leaves[j]
        if memo is not None and j in memo:
            return memo[j]
        op, a, b = spec[j - n_leaves]
        if op == "add":
            out = ops.add(node(a), node(b))
        elif op == "mul":
            out = ops.mul(node(a), node(b))
        elif op == "sub":
            out = ops.sub(node(a), node(b))
        elif op == "scale":
            out = ops.scale(node(a), 1.7)
        elif op == "relu":
            out = ops.relu(node(a))
        else:
            t = node(a)
            out = ops.mul(t, t)
        if memo is not None:
            memo[j] = out
        return out

    total = None
    for j in range(n_leaves, n_leaves + len(spec)):
        s = ops.sum(node(j))
        total = s if total is None else ops.add(total, s)
    return total


@pytest.mark.parametrize("seed", range(20))
def test_dag_backward_matches_unrolled_tree(seed):
    rng = np.random.default_rng(seed)
    spec = _random_graph(rng)
    base = [rng.standard_normal(4) for _ in range(3)]

    grads = []
    for memo in ({}, None):
        leaves = [leaf(b.copy()) for b in base]
        with Tape() as tape:
            loss = _eval(spec, leaves, memo)
        tape.backward(loss)
        grads.append([np.zeros(4) if l.grad is None else l.grad for l in leaves])
    for g_dag, g_tree in zip(*grads):
        np.testing.assert_allclose(g_dag, g_tree, rtol=1e-12, atol=1e-12)

import numpy as np
import pytest

from unigen import tensor as T
from unigen.models import Mlp, RngStream
from unigen.tensor import DomainError, ShapeError, Tape, TapeError, Tensor, gradcheck


def test_forward_examples():
    out = T.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])
    assert T.sigmoid(0.0).item() == 0.5
    assert T.sum(T.log(T.exp([0.3, -1.2]))).item() == pytest.approx(-0.9, abs=1e-12)


def test_backward_linear_and_sigmoid():
    with Tape() as tape:
        w = tape.watch([2.0, 3.0], "w")
        root = T.sum(w * Tensor([1.0, 1.0]))
    assert np.array_equal(tape.backward(root)["w"], [1.0, 1.0])

    with Tape() as tape:
        s = tape.watch(0.0, "s")
        root = T.sigmoid(s)
    assert tape.backward(root)["s"] == pytest.approx(0.25)


def test_tensor_rejects_non_finite():
    with pytest.raises(DomainError):
        Tensor([1.0, np.nan])
    with pytest.raises(DomainError):
        Tensor([np.inf])


def test_log_of_non_positive_is_a_domain_error():
    with pytest.raises(DomainError):
        T.log([1.0, 0.0])
    with pytest.raises(DomainError):
        T.log([-2.0])


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"add: shapes \(2, 3\) and \(3, 2\)"):
        T.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_leading_batch_and_scalar_broadcast():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(T.add(a, [1.0, 1.0, 1.0]).data, a + 1.0)
    assert np.array_equal(T.mul(a, 2.0).data, a * 2.0)
    with pytest.raises(ShapeError):
        T.add(np.ones((2, 3)), np.ones((2, 1)))


def test_backward_errors():
    tape = Tape()
    with pytest.raises(TapeError):
        tape.backward(Tensor(1.0))
    with tape:
        x = tape.watch([1.0, 2.0], "x")
        root = T.sum(x * x)
        vec = x * 2.0
    with pytest.raises(ShapeError):
        tape.backward(vec)
    tape.backward(root)
    with pytest.raises(TapeError):
        tape.backward(root)
    tape.reset()
    assert tape.nodes == []


def test_duplicate_leaf_names_rejected():
    with Tape() as tape:
        tape.watch(1.0, "a")
        with pytest.raises(TapeError):
            tape.watch(2.0, "a")


def test_unreachable_and_detached_leaves_get_zero_gradient():
    with Tape() as tape:
        a = tape.watch([1.0, 2.0], "a")
        b = tape.watch([3.0, 4.0], "b")
        c = tape.watch([5.0], "c")
        root = T.sum(a.detach() * b)
    grads = tape.backward(root)
    assert np.array_equal(grads["a"], [0.0, 0.0])
    assert np.array_equal(grads["b"], [1.0, 2.0])
    assert np.array_equal(grads["c"], [0.0])


def test_no_grad_keeps_values_and_records_nothing():
    x0 = np.array([[0.5, -1.0], [2.0, 0.1]])
    with Tape() as tape:
        x = tape.watch(x0, "x")
        tracked = T.tanh(T.matmul(x, x))
        before = len(tape.nodes)
        with T.no_grad():
            plain = T.tanh(T.matmul(x, x))
        assert len(tape.nodes) == before
    assert np.array_equal(tracked.data, plain.data)
    assert not plain.requires_grad


def test_backward_is_linear():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(3, 2))

    def grad_of(fn):
        with Tape() as tape:
            x = tape.watch(x0, "x")
            root = fn(x)
        return tape.backward(root)["x"]

    f = lambda x: T.sum(T.tanh(x))  # noqa: E731
    g = lambda x: T.mean(T.exp(x) * x)  # noqa: E731
    combined = grad_of(lambda x: f(x) * 2.0 + g(x) * -3.0)
    assert np.allclose(combined, 2.0 * grad_of(f) - 3.0 * grad_of(g), atol=1e-12)


def test_unknown_op():
    with pytest.raises(KeyError):
        T.forward_op("conv2d", [1.0])


OP_CASES = {
    "add": (lambda t: T.sum(T.tanh(t["a"] + t["b"])), {"a": (4, 3), "b": (3,)}),
    "mul": (lambda t: T.sum(t["a"] * t["b"]), {"a": (4, 3), "b": (4, 3)}),
    "neg": (lambda t: T.sum(T.exp(-t["a"])), {"a": (3, 2)}),
    "matmul": (lambda t: T.sum(T.tanh(T.matmul(t["a"], t["b"]))), {"a": (4, 3), "b": (3, 2)}),
    "exp": (lambda t: T.mean(T.exp(t["a"])), {"a": (5,)}),
    "log": (lambda t: T.sum(T.log(T.exp(t["a"]) + 0.5)), {"a": (5,)}),
    "sigmoid": (lambda t: T.sum(T.sigmoid(t["a"]) * t["a"]), {"a": (2, 3)}),
    "tanh": (lambda t: T.sum(T.tanh(t["a"]) * t["a"]), {"a": (2, 3)}),
    "relu": (lambda t: T.sum(T.relu(t["a"]) * t["a"]), {"a": (2, 3)}),
    "softplus": (lambda t: T.sum(T.softplus(t["a"]) * t["a"]), {"a": (6,)}),
    "log_sigmoid": (lambda t: T.sum(T.log_sigmoid(t["a"] * 3.0)), {"a": (6,)}),
    "clip": (lambda t: T.sum(T.clip(t["a"], -0.5, 0.5) * t["a"]), {"a": (6,)}),
    "sum_axis": (lambda t: T.sum(T.tanh(T.sum(t["a"], axis=1))), {"a": (3, 4)}),
    "mean_axis": (lambda t: T.sum(T.exp(T.mean(t["a"], axis=0))), {"a": (3, 4)}),
    "broadcast": (lambda t: T.sum(T.tanh(T.broadcast(t["a"], (4, 3)))), {"a": (3,)}),
    "reshape": (lambda t: T.sum(T.tanh(T.reshape(t["a"], (3, 2))) * Tensor(np.arange(6.0).reshape(3, 2))), {"a": (6,)}),
    "concat": (lambda t: T.sum(T.tanh(T.concat([t["a"], t["b"]], axis=1))), {"a": (2, 3), "b": (2, 1)}),
    "slice": (lambda t: T.sum(T.exp(T.slice_(t["a"], 1, 3, axis=-1))), {"a": (2, 4)}),
}


@pytest.mark.parametrize("case", sorted(OP_CASES))
def test_every_op_matches_central_differences(case):
    fn, shapes = OP_CASES[case]
    rng = np.random.default_rng(sorted(OP_CASES).index(case))
    inputs = {name: rng.normal(size=shape) for name, shape in shapes.items()}
    report = gradcheck(fn, inputs)
    assert report.passed, (case, report.worst, report.max_rel_err)


@pytest.mark.parametrize("seed", range(5))
def test_mlp_loss_gradients_match_finite_differences(seed):
    net = Mlp("net", (3, 5, 4, 2), ("tanh", "relu"))
    params = net.init(RngStream(seed, "net"))
    x = np.random.default_rng(seed).normal(size=(7, 3))

    def loss(w):
        out = net.forward(w, Tensor(x))
        return T.mean(T.sum(out * out, axis=-1)) + T.mean(T.softplus(out))

    report = gradcheck(loss, params)
    assert report.passed, (report.worst, report.max_rel_err)

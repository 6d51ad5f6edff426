import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridlab.errors import DimensionError, NonFiniteError
from hybridlab.tensor import (
    Tensor,
    concat,
    cumsum,
    embedding,
    gradcheck,
    layer_norm,
    log_softmax,
    no_grad,
    softmax,
    stack,
)


def leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def probe_loss(fn, rng, out_shape):
    r = rng.normal(size=out_shape)
    return lambda: (fn() * r).sum()


UNARY = {
    "exp": lambda t: t.exp(),
    "log": lambda t: t.log(),
    "sqrt": lambda t: t.sqrt(),
    "square": lambda t: t.square(),
    "sigmoid": lambda t: t.sigmoid(),
    "silu": lambda t: t.silu(),
    "softplus": lambda t: t.softplus(),
    "neg": lambda t: -t,
    "norm": lambda t: t.norm(axis=-1),
    "mean": lambda t: t.mean(axis=0),
    "transpose": lambda t: t.T,
    "reshape": lambda t: t.reshape(12),
    "cumsum": lambda t: cumsum(t, axis=1),
    "softmax": lambda t: softmax(t, axis=-1),
    "log_softmax": lambda t: log_softmax(t, axis=-1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    x = leaf(rng, 3, 4, positive=name in ("log", "sqrt"))
    fn = UNARY[name]
    out_shape = fn(x).shape
    assert gradcheck(probe_loss(lambda: fn(x), rng, out_shape), [x]) < 1e-6


@pytest.mark.parametrize(
    "a_shape,b_shape",
    [((3, 4), (3, 4)), ((3, 4), (4,)), ((2, 3, 4), (3, 1)), ((1, 4), (5, 1))],
)
@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_broadcast_binary_gradients(op, a_shape, b_shape, rng):
    a = leaf(rng, *a_shape)
    b = leaf(rng, *b_shape, positive=op == "div")
    f = {"add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: a * b, "div": lambda: a / b}[op]
    assert gradcheck(probe_loss(f, rng, f().shape), [a, b]) < 1e-6


def test_scalar_operands_on_either_side(rng):
    a = leaf(rng, 3)
    out = 2.0 - a * 3.0 + 1.0 / (a.square() + 1.0)
    expected = 2.0 - a.data * 3.0 + 1.0 / (a.data**2 + 1.0)
    np.testing.assert_allclose(out.data, expected)


@pytest.mark.parametrize("a_shape,b_shape", [((3, 4), (4, 5)), ((2, 3, 4), (4, 2)), ((2, 1, 3, 4), (5, 4, 2))])
def test_matmul_broadcast_gradients(a_shape, b_shape, rng):
    a, b = leaf(rng, *a_shape), leaf(rng, *b_shape)
    f = lambda: a @ b  # noqa: E731
    np.testing.assert_allclose(f().data, a.data @ b.data)
    assert gradcheck(probe_loss(f, rng, f().shape), [a, b]) < 1e-6


def test_matmul_rejects_vectors(rng):
    with pytest.raises(DimensionError):
        leaf(rng, 3) @ leaf(rng, 3, 2)


def test_getitem_basic_and_fancy_indexing(rng):
    x = leaf(rng, 5, 4)
    assert gradcheck(probe_loss(lambda: x[1:4, ::2], rng, (3, 2)), [x]) < 1e-6
    idx = np.array([0, 2, 2, 4])
    assert gradcheck(probe_loss(lambda: x[idx], rng, (4, 4)), [x]) < 1e-6


def test_repeated_use_accumulates_gradient(rng):
    x = leaf(rng, 3)
    (x * x + x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_embedding_scatter_adds_repeated_ids(rng):
    w = leaf(rng, 5, 3)
    ids = np.array([[1, 1, 4]])
    embedding(w, ids).sum().backward()
    np.testing.assert_array_equal(w.grad[:, 0], [0, 2, 0, 0, 1])


def test_layer_norm_gradients_and_stats(rng):
    x, g, b = leaf(rng, 2, 3, 6), leaf(rng, 6), leaf(rng, 6)
    y = layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1, rtol=1e-4)
    assert gradcheck(probe_loss(lambda: layer_norm(x, g, b), rng, (2, 3, 6)), [x, g, b]) < 1e-6


def test_masked_softmax_zeroes_masked_entries(rng):
    x = leaf(rng, 3, 3)
    mask = np.tril(np.ones((3, 3), dtype=bool))
    p = softmax(x, mask=mask)
    assert np.all(p.data[~mask] == 0)
    np.testing.assert_allclose(p.data.sum(-1), 1)
    assert gradcheck(probe_loss(lambda: softmax(x, mask=mask), rng, (3, 3)), [x]) < 1e-6


def test_concat_and_stack_gradients(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 1)
    assert gradcheck(probe_loss(lambda: concat([a, b], axis=1), rng, (2, 4)), [a, b]) < 1e-6
    c = leaf(rng, 2, 3)
    assert gradcheck(probe_loss(lambda: stack([a, c], axis=0), rng, (2, 2, 3)), [a, c]) < 1e-6


def test_norm_subgradient_is_zero_at_origin():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    x.norm(axis=-1).sum().backward()
    np.testing.assert_array_equal(x.grad, 0)


def test_no_grad_builds_no_graph(rng):
    x = leaf(rng, 3)
    with no_grad():
        y = (x * 2).exp()
    assert not y.requires_grad and y._parents == ()


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
        Tensor(np.array([-1.0])).log()


def test_integer_input_is_promoted_to_float():
    assert Tensor([1, 2]).dtype == np.float32


def test_gradcheck_catches_a_wrong_backward(rng):
    from hybridlab.tensor import function

    x = leaf(rng, 4)

    def bad_square():
        return function(x.data**2, (x,), lambda g: (g * x.data,))  # missing factor 2

    assert gradcheck(lambda: bad_square().sum(), [x]) > 0.1


@settings(max_examples=30, deadline=None)
@given(
    shape=st.lists(st.integers(1, 4), min_size=1, max_size=3),
    seed=st.integers(0, 2**16),
)
def test_sum_and_mean_gradients_any_shape(shape, seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.normal(size=shape), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones(shape))
    x.grad = None
    x.mean().backward()
    np.testing.assert_allclose(x.grad, np.full(shape, 1.0 / x.size))

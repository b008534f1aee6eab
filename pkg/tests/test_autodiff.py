import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attriprompt import autodiff as ad
from attriprompt.autodiff import Tape, Tensor, backward, finite_diff_check, finite_diff_errors, no_grad
from attriprompt.errors import ContractError, DegenerateInputError, DeterminismError, DimensionError, ReplayError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def grad_of(fn, *params):
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    return [p.grad.copy() for p in params]


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(eye, m).data, m.data)
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    assert finite_diff_check(lambda: ad.tsum(ad.matmul(a, b)), [a, b]) <= 1e-6


def test_softmax_rows_examples():
    assert np.allclose(ad.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]], atol=1e-15)
    e = math.e
    expected = [e / (e + 1), 1 / (e + 1)]
    assert np.allclose(ad.softmax_rows(Tensor([[1.0, 0.0]])).data, [expected], atol=1e-12)
    big = ad.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(big))
    assert np.allclose(big, [[1.0, 0.0]], atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-1e6, 1e6)))
def test_softmax_rows_sum_to_one(x):
    rows = ad.softmax_rows(Tensor(x)).data
    assert np.all(np.abs(rows.sum(axis=1) - 1.0) <= 1e-12)


def test_cosine_rows_examples():
    assert ad.cosine_rows(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0]])).item() == 1.0
    assert ad.cosine_rows(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).item() == 0.0
    assert abs(ad.cosine_rows(Tensor([[3.0, 4.0]]), Tensor([[4.0, 3.0]])).item() - 24 / 25) <= 1e-15


def test_cosine_rows_zero_row_is_degenerate():
    with pytest.raises(DegenerateInputError, match="row 1"):
        ad.cosine_rows(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[1.0, 1.0]]))


@given(
    arrays(np.float64, (3, 4), elements=finite),
    arrays(np.float64, (2, 4), elements=finite),
    st.floats(1e-3, 1e3),
)
def test_cosine_rows_scale_invariant_and_bounded(a, b, lam):
    if np.any(np.linalg.norm(a, axis=1) < 1e-6) or np.any(np.linalg.norm(b, axis=1) < 1e-6):
        return
    c = ad.cosine_rows(Tensor(a), Tensor(b)).data
    assert np.all(np.abs(c) <= 1.0)
    assert np.allclose(ad.cosine_rows(Tensor(lam * a), Tensor(b)).data, c, atol=1e-12, rtol=0)
    assert np.allclose(ad.cosine_rows(Tensor(a), Tensor(lam * b)).data, c, atol=1e-12, rtol=0)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert np.allclose(ad.layer_norm(Tensor([5.0, 5.0, 5.0]), one, zero).data, 0.0)
    out = ad.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12).data
    assert np.allclose(out, [1.0, -1.0], atol=1e-9)


def test_layer_norm_gradient():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    g = Tensor(rng.normal(size=4), requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 4)))
    assert finite_diff_check(lambda: ad.tsum(ad.mul(ad.layer_norm(x, g, b), w)), [x, g, b]) <= 1e-5


def test_backward_examples():
    x = Tensor([3.0], requires_grad=True)
    (gx,) = grad_of(lambda: ad.tsum(ad.mul(x, x)), x)
    assert gx.tolist() == [6.0]
    a = Tensor([0.3, -1.2], requires_grad=True)
    (ga,) = grad_of(lambda: ad.tsum(ad.softmax(a)), a)
    assert np.allclose(ga, 0.0, atol=1e-15)


def test_backward_rejects_non_scalar_and_replay():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ContractError):
        backward(y, tape)
    with Tape() as tape:
        loss = ad.tsum(ad.mul(x, x))
    backward(loss, tape)
    with pytest.raises(ReplayError):
        backward(loss, tape)


def test_shared_operand_gradients_sum():
    x = Tensor([2.0, -1.0], requires_grad=True)
    (g,) = grad_of(lambda: ad.tsum(ad.add(ad.mul(x, x), ad.scale(x, 3.0))), x)
    assert np.array_equal(g, 2 * x.data + 3.0)


def test_leaf_grads_accumulate_and_constants_stay_empty():
    x = Tensor([1.0], requires_grad=True)
    c = Tensor([5.0])
    for _ in range(2):
        with Tape() as tape:
            loss = ad.tsum(ad.mul(x, c))
        backward(loss, tape)
    assert x.grad.tolist() == [10.0]
    assert c.grad is None


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        with no_grad():
            y = ad.mul(x, x)
    assert not tape.nodes and not y.requires_grad


@settings(max_examples=30)
@given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)))
def test_backward_is_linear(x0):
    x = Tensor(x0, requires_grad=True)
    f = lambda: ad.tsum(ad.quick_gelu(x))
    g = lambda: ad.tsum(ad.mul(ad.softmax_rows(x), x))
    (gf,) = grad_of(f, x)
    (gg,) = grad_of(g, x)
    (gs,) = grad_of(lambda: ad.add(f(), g()), x)
    assert np.allclose(gs, gf + gg, atol=1e-12, rtol=0)


def test_reverse_pass_leaves_forward_values_alone():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    with Tape() as tape:
        h = ad.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        loss = ad.tsum(ad.quick_gelu(h))
    before = (x.data.copy(), h.data.copy(), loss.data.copy())
    backward(loss, tape)
    assert all(np.array_equal(a, b) for a, b in zip(before, (x.data, h.data, loss.data)))


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
    first = ad.softmax_rows(ad.matmul(Tensor(a), Tensor(b))).data
    again = ad.softmax_rows(ad.matmul(Tensor(a), Tensor(b))).data
    assert first.tobytes() == again.tobytes()


OPS = {
    "bmm": lambda x, y: ad.bmm(ad.reshape(x, (2, 2, 3)), ad.reshape(y, (2, 3, 2))),
    "sub": lambda x, y: ad.sub(x, y),
    "mul_vec": lambda x, y: ad.mul(x, ad.reshape(ad.slice_axis(y, 0, 0, 1), (6,))),
    "abs": lambda x, y: ad.tabs(ad.shift(x, 0.05)),
    "permute": lambda x, y: ad.mul(ad.permute(ad.reshape(x, (2, 2, 3)), (2, 0, 1)), ad.reshape(y, (3, 2, 2))),
    "concat": lambda x, y: ad.mul(ad.concat([x, y], axis=0), ad.concat([y, x], axis=0)),
    "take_rows": lambda x, y: ad.take_rows(ad.mul(x, y), [1, 0, 1]),
    "expand": lambda x, y: ad.mul(ad.expand(x, 3), ad.expand(y, 3)),
    "log_softmax": lambda x, y: ad.mul(ad.log_softmax(x), y),
    "cosine_pairs": lambda x, y: ad.cosine_pairs(x, y),
    "mean": lambda x, y: ad.mean(ad.mul(x, y)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 6)) + 0.3, requires_grad=True)
    y = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
    w = rng.normal(size=OPS[name](x, y).shape)
    err = finite_diff_check(lambda: ad.tsum(ad.mul(OPS[name](x, y), Tensor(w))), [x, y])
    assert err <= 1e-6


def test_finite_diff_examples():
    p = Tensor([1.0], requires_grad=True)
    assert finite_diff_check(lambda: ad.tsum(ad.mul(p, p)), [p]) <= 1e-9
    q = Tensor([0.5, 2.0], requires_grad=True)
    assert finite_diff_check(lambda: Tensor(3.0), [q]) == 0.0


def test_finite_diff_restores_parameters_exactly():
    rng = np.random.default_rng(5)
    p = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    before = p.data.tobytes()
    finite_diff_errors(lambda: ad.tsum(ad.quick_gelu(p)), {"p": p})
    assert p.data.tobytes() == before


def test_finite_diff_rejects_nondeterministic_fn():
    p = Tensor([1.0], requires_grad=True)
    rng = np.random.default_rng(6)
    with pytest.raises(DeterminismError):
        finite_diff_check(lambda: ad.tsum(ad.shift(p, float(rng.normal()))), [p])

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attriprompt import autodiff as ad
from attriprompt.autodiff import Tape, Tensor
from attriprompt.errors import ConfigError, ContractError, DegenerateInputError, DimensionError
from attriprompt.heads import ChannelAffineHead, align_loss, fuse_predictions, predict, transform
from attriprompt.objectives import LossBreakdown, LossWeights, batch_ce_loss, ce_loss, combine, consistency_loss, total_loss

LN_0_73106 = -math.log(math.e / (math.e + 1))  # 0.31326...


def test_ce_loss_examples():
    assert abs(ce_loss(Tensor([1.0, 2.0]), Tensor([[0.5, 0.5], [0.5, 0.5]]), 0, 0.07).item() - math.log(2)) <= 1e-12
    f = Tensor([1.0, 0.0])
    g = Tensor([[1.0, 0.0], [0.0, 1.0]])
    assert abs(ce_loss(f, g, 0, 1.0).item() - LN_0_73106) <= 1e-12
    assert abs(LN_0_73106 - 0.31326) < 1e-5
    assert abs(ce_loss(Tensor([7.0, 0.0]), g, 0, 1.0).item() - ce_loss(f, g, 0, 1.0).item()) <= 1e-12


def test_ce_loss_invalid_label():
    with pytest.raises(ContractError):
        ce_loss(Tensor([1.0]), Tensor([[1.0]]), 1, 1.0)


@settings(max_examples=50)
@given(arrays(np.float64, (4,), elements=st.floats(-3, 3)), arrays(np.float64, (5, 4), elements=st.floats(-3, 3)), st.integers(0, 4))
def test_ce_loss_nonnegative(f, g, label):
    if np.linalg.norm(f) < 1e-3 or np.any(np.linalg.norm(g, axis=1) < 1e-3):
        return
    assert ce_loss(Tensor(f), Tensor(g), label, 0.07).item() >= 0.0


def test_batch_ce_is_mean():
    g = Tensor([[1.0, 0.0], [0.0, 1.0]])
    fs = [Tensor([1.0, 0.0]), Tensor([1.0, 1.0])]
    expect = (LN_0_73106 + math.log(2)) / 2
    assert abs(batch_ce_loss(fs, [g, g], [0, 1], 1.0).item() - expect) <= 1e-12


def test_consistency_loss_examples():
    g = Tensor([[0.3, -0.2]])
    assert consistency_loss(g, g).item() == 0.0
    assert consistency_loss(Tensor([[1.0, 2.0]]), Tensor([[0.0, 0.0]])).item() == 3.0
    two = consistency_loss(Tensor([[1.0, 2.0], [0.5, -0.5]]), Tensor([[0.0, 0.0], [0.0, 0.0]]))
    assert abs(two.item() - 2.0) <= 1e-12
    with pytest.raises(DimensionError):
        consistency_loss(Tensor([[1.0]]), Tensor([[1.0, 2.0]]))


@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_consistency_loss_symmetric_and_zero_iff_equal(a, b):
    ab = consistency_loss(Tensor(a), Tensor(b)).item()
    assert ab == consistency_loss(Tensor(b), Tensor(a)).item()
    assert (ab == 0.0) == np.array_equal(a, b)


def test_total_loss_examples():
    w = LossWeights()
    assert total_loss(1.0, 0.0, 0.0, 0.0, 0.0, w).total == 0.5
    assert abs(total_loss(0.6931, 0.6931, 0, 0, 0, w).total - 0.6931) <= 1e-12
    out = total_loss(1.0, 2.0, 0.1, 0.2, 3.0, w)
    assert abs(out.total - 3.99) <= 1e-12
    assert out.as_list() == [1.0, 2.0, 0.1, 0.2, 3.0, out.total]


def test_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(lambda1=1.5).validate()
    with pytest.raises(ConfigError):
        LossWeights(lambda3=-0.1).validate()


def test_breakdown_log_line():
    line = LossBreakdown(1 / 3, 0.5, 2.0, 0.0, -1e-12, 12345.678901234).format_line(7)
    assert line == "7 0.333333333 0.5 2 0 -1e-12 12345.6789"


def test_total_gradient_is_weighted_sum_of_terms():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=4), requires_grad=True)
    g = Tensor(rng.normal(size=(3, 4)))
    terms = {
        "ce": lambda: ce_loss(x, g, 1, 0.5),
        "align": lambda: ce_loss(ad.mul(x, x), g, 2, 0.5),
        "cc": lambda: consistency_loss(ad.reshape(x, (1, 4)), Tensor(np.zeros((1, 4)))),
        "div": lambda: ad.tsum(ad.quick_gelu(x)),
        "match": lambda: ad.tsum(ad.mul(x, x)),
    }
    w = LossWeights(0.3, 2.0, 0.7, 0.4)

    def grad(fn):
        x.grad = None
        with Tape() as tape:
            loss = fn()
        ad.backward(loss, tape)
        return x.grad.copy()

    full = grad(lambda: combine(**{k: f() for k, f in terms.items()}, weights=w))
    coeff = {"ce": 1 - w.lambda1, "align": w.lambda1, "cc": w.lambda2, "div": w.lambda3, "match": -w.lambda4}
    summed = sum(coeff[k] * grad(f) for k, f in terms.items())
    assert np.max(np.abs(full - summed)) <= 1e-10


# -- heads -----------------------------------------------------------------


def test_transform_examples():
    head = ChannelAffineHead.identity(2, "h")
    v = Tensor([3.0, 4.0])
    assert np.array_equal(transform(v, head).data, v.data)
    head.alpha.data[:] = [2.0, 1.0]
    head.beta.data[:] = [0.0, 1.0]
    assert transform(v, head).data.tolist() == [6.0, 5.0]
    with pytest.raises(DimensionError):
        transform(Tensor([1.0, 2.0, 3.0]), head)


def test_transform_gradients():
    head = ChannelAffineHead.identity(3, "h")
    v = Tensor([0.5, -2.0, 4.0])
    with Tape() as tape:
        loss = ad.tsum(transform(v, head))
    ad.backward(loss, tape)
    assert np.max(np.abs(head.alpha.grad - v.data)) <= 1e-10
    assert np.max(np.abs(head.beta.grad - 1.0)) <= 1e-10


def test_align_loss_examples():
    rng = np.random.default_rng(1)
    f, g = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=(3, 4)))
    hv, ht = ChannelAffineHead.identity(4, "v"), ChannelAffineHead.identity(4, "t")
    assert align_loss(transform(f, hv), transform(g, ht), 2, 0.07).item() == ce_loss(f, g, 2, 0.07).item()
    assert abs(align_loss(f, Tensor(np.tile([1.0, 2, 3, 4], (3, 1))), 0, 0.07).item() - math.log(3)) <= 1e-12
    assert abs(align_loss(Tensor([1.0, 0.0]), Tensor([[1.0, 0.0], [0.0, 1.0]]), 0, 1.0).item() - LN_0_73106) <= 1e-12
    with pytest.raises(DegenerateInputError):
        align_loss(Tensor([0.0, 0.0]), Tensor([[1.0, 0.0]]), 0, 1.0)


def test_align_loss_head_gradients():
    rng = np.random.default_rng(2)
    f, g = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=(3, 4)))
    hv, ht = ChannelAffineHead.identity(4, "v"), ChannelAffineHead.identity(4, "t")
    params = {"va": hv.alpha, "vb": hv.beta, "ta": ht.alpha, "tb": ht.beta}
    err = ad.finite_diff_check(lambda: align_loss(transform(f, hv), transform(g, ht), 1, 0.5), params)
    assert err <= 1e-4


def test_fuse_predictions_examples():
    p, q = np.array([0.8, 0.2]), np.array([0.4, 0.6])
    assert np.array_equal(fuse_predictions(p, q, 0.0), p)
    assert np.array_equal(fuse_predictions(p, q, 1.0), q)
    assert np.allclose(fuse_predictions(p, q, 0.5), [0.6, 0.4], atol=1e-15)
    with pytest.raises(ContractError):
        fuse_predictions(np.array([0.8, 0.3]), q, 0.5)
    assert predict(np.array([0.4, 0.4, 0.2])) == 0


probability = arrays(np.float64, (5,), elements=st.floats(0.0, 1.0)).filter(lambda a: a.sum() > 1e-3).map(lambda a: a / a.sum())


@given(probability, probability, st.floats(0.0, 1.0))
def test_fusion_is_a_probability_vector(p, q, lam):
    out = fuse_predictions(p, q, lam)
    assert abs(out.sum() - 1.0) <= 1e-9 and np.all(out >= 0)


@given(probability, st.floats(0.0, 1.0))
def test_identical_branches_predict_like_ce(p, lam):
    assert predict(fuse_predictions(p, p, lam)) == predict(p)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from resprobe import autodiff as ad
from resprobe.autodiff import OPS, Tape, Tensor
from resprobe.gradcheck import GRAD_TOL, _primitive_cases, check_primitive


def test_every_registered_op_has_a_gradient_case():
    covered = {kind for _, kind, _, _ in _primitive_cases(np.random.default_rng(0))}
    assert covered == set(OPS)


@pytest.mark.parametrize("case", _primitive_cases(np.random.default_rng(7)), ids=lambda c: c[0])
def test_primitive_backward_matches_finite_differences(case):
    name, kind, values, attrs = case
    res = check_primitive(name, kind, values, attrs, np.random.default_rng(3))
    assert res.passed, res.line()


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 3), c_in=st.integers(1, 3), c_out=st.integers(1, 3),
    size=st.integers(3, 6), k=st.sampled_from([1, 3]), stride=st.integers(1, 2), seed=st.integers(0, 2**16),
)
def test_conv2d_matches_loop_oracle(n, c_in, c_out, size, k, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c_in, size, size))
    w = rng.normal(size=(c_out, c_in, k, k))
    b = rng.normal(size=c_out)
    pad = k // 2
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, ad.conv2d_loops(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_batchnorm_batch_mode_against_hand_formula(rng):
    x = rng.normal(2.0, 3.0, size=(8, 3, 2, 2))
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    out = ad.forward_op("batchnorm", [Tensor(x), Tensor(gamma), Tensor(beta)], {"mode": "batch", "eps": 1e-5}).data
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    ref = gamma[None, :, None, None] * (x - mu) / np.sqrt(var + 1e-5) + beta[None, :, None, None]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_softmax_cross_entropy_value(rng):
    z = rng.normal(size=(6, 4))
    y = rng.integers(4, size=6)
    loss = ad.softmax_cross_entropy(Tensor(z), y)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    ref = -np.log(p[np.arange(6), y])
    np.testing.assert_allclose(loss.per_sample, ref, rtol=1e-12)
    assert abs(loss.total.item() - ref.mean()) < 1e-12


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    with Tape() as tape:
        y = ad.reduce_sum(ad.add(ad.mul(x, x), x))
    tape.backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_watch_only_tape_leaves_parameters_untouched(rng):
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    h = Tensor(rng.normal(size=(4, 3)))
    with Tape(watch_leaves=False) as tape:
        tape.watch(h)
        loss = ad.reduce_sum(ad.matmul(h, w))
    tape.backward(loss)
    assert w.grad is None
    np.testing.assert_allclose(h.grad, np.tile(w.data.sum(axis=1), (4, 1)))


def test_retain_grad_on_intermediate(rng):
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    with Tape() as tape:
        h = ad.retain_grad(ad.scale(x, 2.0))
        loss = ad.reduce_sum(ad.mul(h, h))
    tape.backward(loss)
    np.testing.assert_allclose(ad.grad_wrt(h), 2 * h.data)


def test_tape_is_single_use(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with Tape() as tape:
        loss = ad.reduce_sum(x)
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_shape_checks_reject_bad_inputs():
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))
    with pytest.raises(ValueError):
        ad.forward_op("nope", [Tensor(np.zeros(2))])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e3, 1e3)))
def test_relative_error_is_zero_on_self_and_symmetric(a):
    b = a[::-1].copy()
    assert ad.relative_error(a, a) == 0.0
    assert ad.relative_error(a, b) == ad.relative_error(b, a)
    assert ad.relative_error(a, b) <= 2.0


def test_finite_diff_on_quadratic():
    a = np.array([[2.0, 0.5], [0.5, 1.0]])
    x = np.array([0.3, -0.7])
    g = ad.finite_diff_grad(lambda v: 0.5 * v @ a @ v, x)
    np.testing.assert_allclose(g, a @ x, atol=1e-9)

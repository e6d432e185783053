import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import rel_err
from potgui.errors import InvalidInputError
from potgui.numerics import (AdamHyper, AdamState, adam_update, ce_logit_gradient,
                             cross_entropy, finite_diff_gradient, one_hot, softmax)

logit_arrays = arrays(
    np.float64,
    st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(2, 6)),
    elements=st.floats(-50, 50),
)


def mp_softmax(row):
    ex = [mpmath.exp(mpmath.mpf(v)) for v in row]
    z = mpmath.fsum(ex)
    return [float(e / z) for e in ex]


def test_softmax_uniform():
    np.testing.assert_array_equal(softmax(np.array([0.0, 0.0])), [0.5, 0.5])


def test_softmax_ln2_against_high_precision():
    row = [float(mpmath.log(2)), 0.0]
    np.testing.assert_allclose(softmax(np.array(row)), mp_softmax(row), rtol=1e-15)
    np.testing.assert_allclose(softmax(np.array(row)), [2 / 3, 1 / 3], rtol=1e-15)


@pytest.mark.parametrize("c", [-1e4, -3.0, 0.5, 1e4])
def test_softmax_shift_invariance(c):
    x = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(softmax(x + c), softmax(x), atol=1e-12)


def test_softmax_large_logits_do_not_overflow():
    p = softmax(np.array([1e4, -1e4, 0.0]))
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [1.0, 0.0, 0.0])


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(InvalidInputError):
        softmax(np.array([0.0, bad]))


@given(logit_arrays)
@settings(max_examples=200, deadline=None)
def test_softmax_is_on_simplex(x):
    p = softmax(x)
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_cross_entropy_uniform_is_ln2():
    loss = cross_entropy(np.array([[0]]), np.array([[[0.0, 0.0]]]))
    assert loss == pytest.approx(float(mpmath.log(2)), abs=1e-15)


def test_cross_entropy_two_pixels_matches_high_precision():
    expected = float((mpmath.log(1 + mpmath.exp(-1)) + mpmath.log(1 + mpmath.exp(1))) / 2)
    logits = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    assert cross_entropy(np.array([[0, 0]]), logits) == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.813262, abs=1e-6)


def test_cross_entropy_decreases_with_margin():
    margins = [0.0, 1.0, 5.0, 20.0, 100.0, 800.0]
    losses = [cross_entropy(np.array([0]), np.array([[m, 0.0]])) for m in margins]
    assert all(a > b for a, b in zip(losses, losses[1:]) if a > 0)
    assert losses[-1] == 0.0
    assert all(v >= 0 for v in losses)


def test_cross_entropy_shape_mismatch():
    with pytest.raises(InvalidInputError):
        cross_entropy(np.zeros((1, 3), dtype=int), np.zeros((1, 2, 4)))


def test_gradient_zero_at_target():
    labels = np.array([[1, 0]])
    # +-800 saturates softmax to an exact one-hot in double precision
    logits = np.where(one_hot(labels, 3) > 0, 800.0, -800.0)
    np.testing.assert_array_equal(softmax(logits), one_hot(labels, 3))
    np.testing.assert_array_equal(ce_logit_gradient(labels, logits), 0.0)


def test_gradient_hand_value():
    g = ce_logit_gradient(np.array([[0]]), np.array([[[0.0, 0.0]]]))
    np.testing.assert_array_equal(g, [[[-0.5, 0.5]]])


@given(logit_arrays, st.data())
@settings(max_examples=100, deadline=None)
def test_gradient_sums_to_zero_per_pixel(x, data):
    labels = data.draw(arrays(np.int64, x.shape[:-1], elements=st.integers(0, x.shape[-1] - 1)))
    g = ce_logit_gradient(labels, x)
    np.testing.assert_allclose(g.sum(axis=-1), 0.0, atol=1e-9)


def test_gradient_shape_mismatch():
    with pytest.raises(InvalidInputError):
        ce_logit_gradient(np.zeros((2,), dtype=int), np.zeros((3, 2)))


@pytest.mark.parametrize("seed", range(100))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    c = 2 + seed % 5
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)))
    x = rng.normal(scale=2.0, size=shape + (c,))
    y = rng.integers(0, c, size=shape)
    fd = finite_diff_gradient(lambda z: cross_entropy(y, z), x, 1e-6)
    assert rel_err(ce_logit_gradient(y, x), fd) <= 1e-5


def test_shift_invariance_of_loss_and_gradient(rng):
    x = rng.normal(size=(2, 5, 4))
    y = rng.integers(0, 4, size=(2, 5))
    shift = rng.normal(scale=10, size=(2, 5, 1))
    assert abs(cross_entropy(y, x + shift) - cross_entropy(y, x)) <= 1e-9
    np.testing.assert_allclose(ce_logit_gradient(y, x + shift), ce_logit_gradient(y, x),
                               atol=1e-9)


def test_fd_quadratic_and_constant():
    np.testing.assert_allclose(
        finite_diff_gradient(lambda v: float((v ** 2).sum()), np.array([1.0, 2.0]), 1e-5),
        [2.0, 4.0], rtol=1e-8)
    np.testing.assert_array_equal(
        finite_diff_gradient(lambda v: 3.0, np.array([1.0, 2.0, 3.0])), 0.0)
    with pytest.raises(InvalidInputError):
        finite_diff_gradient(lambda v: 0.0, np.zeros(2), 0.0)


def test_adam_zero_gradient_is_identity():
    p = np.array([0.3, -1.5, 2.0])
    new, state = adam_update(p, np.zeros(3), AdamState.fresh(p))
    np.testing.assert_array_equal(new, p)
    assert state.step_count == 1


def test_adam_first_step_hand_value():
    hyper = AdamHyper(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
    p = np.array([0.0])
    new, state = adam_update(p, np.array([1.0]), AdamState.fresh(p, hyper))
    # m_hat = v_hat = 1 after bias correction
    assert new[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
    assert state.step_count == 1
    assert np.all(state.second_moment >= 0)


def test_adam_is_deterministic_and_counts_steps(rng):
    p = rng.normal(size=(4, 3))
    g = rng.normal(size=(4, 3))
    s = AdamState.fresh(p, AdamHyper(weight_decay=1e-4))
    a = adam_update(p, g, s)
    b = adam_update(p, g, s)
    assert a[0].tobytes() == b[0].tobytes()
    assert adam_update(a[0], g, a[1])[1].step_count == 2


def test_adam_weight_decay_is_coupled():
    hyper = AdamHyper(lr=0.1, weight_decay=0.5)
    p = np.array([2.0])
    # coupled L2: g_eff = 0 + 0.5 * 2 = 1, so the first step is -lr
    new, _ = adam_update(p, np.array([0.0]), AdamState.fresh(p, hyper))
    assert new[0] == pytest.approx(2.0 - 0.1, rel=1e-7)


def test_adam_shape_mismatch():
    with pytest.raises(InvalidInputError):
        adam_update(np.zeros(3), np.zeros(2), AdamState.fresh(np.zeros(3)))

import numpy as np
import pytest

from conftest import rel_err
from potgui.errors import ContractError, DivergenceError, InvalidInputError
from potgui.numerics import ce_logit_gradient, cross_entropy, finite_diff_gradient
from potgui.potgen import (ONE_PARAM, TWO_PARAM, PotStack, init_stack, pot_backward,
                           pot_forward)


def random_instance(seed, n=1, p=4, c=3, scale=1.0):
    rng = np.random.default_rng(seed)
    return rng.normal(scale=scale, size=(n, p, c)), rng.integers(0, c, size=(n, p))


def unroll_reference(o0, y, steps):
    """Plain loop over the update rule, independent of pot_forward's bookkeeping."""
    o = o0.copy()
    for s in steps:
        o = o - s * ce_logit_gradient(y, o)
    return o


def test_init_stack_defaults():
    s = init_stack(3)
    np.testing.assert_array_equal(s.alpha, [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(s.eta, [1.0, 1.0, 1.0])
    assert s.mode == TWO_PARAM and s.tape_length == 0


def test_init_stack_one_param_and_empty():
    s = init_stack(2, ONE_PARAM, alpha0=1.0)
    assert list(zip(s.alpha, s.eta)) == [(1.0, 1.0), (1.0, 1.0)]
    assert init_stack(0).K == 0
    with pytest.raises(InvalidInputError):
        init_stack(-1)


def test_k0_forward_is_identity():
    o, y = random_instance(0)
    out = pot_forward(o, y, init_stack(0))
    np.testing.assert_array_equal(out.guided_logits, o)
    assert out.per_layer_loss == [cross_entropy(y, o)]


def test_one_step_hand_value():
    out = pot_forward(np.array([[[0.0, 0.0]]]), np.array([[0]]), init_stack(1))
    np.testing.assert_allclose(out.guided_logits, [[[0.5, -0.5]]], atol=1e-15)


def test_two_steps_hand_value():
    out = pot_forward(np.array([[[0.0, 0.0]]]), np.array([[0]]), init_stack(2))
    s = 1.0 / (1.0 + np.exp(-1.0))
    np.testing.assert_allclose(out.guided_logits, [[[1.5 - s, s - 1.5]]], atol=1e-15)
    np.testing.assert_allclose(out.guided_logits, [[[0.7689, -0.7689]]], atol=1e-4)


def test_forward_matches_reference_loop():
    o, y = random_instance(3, n=2, p=5, c=4)
    stack = PotStack([0.5, 2.0, 1.5], [1.0, -0.3, 2.0])
    out = pot_forward(o, y, stack)
    np.testing.assert_allclose(out.guided_logits, unroll_reference(o, y, stack.steps),
                               rtol=0, atol=1e-14)
    assert out.per_layer_loss[0] == pytest.approx(cross_entropy(y, o), abs=1e-14)
    assert len(out.per_layer_loss) == 4


def test_tape_length():
    o, y = random_instance(1)
    s = init_stack(4)
    pot_forward(o, y, s)
    assert s.tape_length == 0
    pot_forward(o, y, s, record_tape=True)
    assert s.tape_length == 4


@pytest.mark.parametrize("seed", range(50))
def test_unit_steps_strictly_descend(seed):
    o, y = random_instance(seed, n=2, p=3, c=2 + seed % 5, scale=2.0)
    losses = pot_forward(o, y, init_stack(10)).per_layer_loss
    assert all(b < a - 1e-12 for a, b in zip(losses, losses[1:]))


@pytest.mark.parametrize("seed", range(10))
def test_long_unroll_fixes_every_pixel(seed):
    o, y = random_instance(seed, n=1, p=4, c=2 + seed % 5)
    out = pot_forward(o, y, init_stack(200))
    np.testing.assert_array_equal(out.guided_logits.argmax(-1), y)


def test_shift_invariance_of_trajectory(rng):
    o, y = random_instance(5, n=2, p=3, c=4)
    shift = rng.normal(scale=5.0, size=(2, 3, 1))
    a = pot_forward(o, y, init_stack(6)).guided_logits - o
    b = pot_forward(o + shift, y, init_stack(6)).guided_logits - (o + shift)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_divergence_reports_layer():
    o, y = random_instance(2)
    stack = PotStack([1.0, 1e308, 1e308], [1.0, 1e10, 1e10])
    with np.errstate(over="ignore"), pytest.raises(DivergenceError) as err:
        pot_forward(o, y, stack)
    assert err.value.layer == 2


def test_backward_k0_is_identity(rng):
    o, y = random_instance(0)
    s = init_stack(0)
    pot_forward(o, y, s, record_tape=True)
    up = rng.normal(size=o.shape)
    g, ga, ge = pot_backward(s, y, up)
    np.testing.assert_array_equal(g, up)
    assert ga.size == 0 and ge.size == 0


def test_backward_requires_tape():
    o, y = random_instance(0)
    s = init_stack(2)
    with pytest.raises(ContractError):
        pot_backward(s, y, np.ones_like(o))
    pot_forward(o, y, s, record_tape=True)
    pot_backward(s, y, np.ones_like(o))
    with pytest.raises(ContractError):  # consumed
        pot_backward(s, y, np.ones_like(o))


def test_backward_rejects_stale_tape():
    o, y = random_instance(0)
    s = init_stack(2)
    pot_forward(o, y, s, record_tape=True)
    s.alpha[0] = 3.0
    with pytest.raises(ContractError):
        pot_backward(s, y, np.ones_like(o))


def pipeline_grads_fd(o0, y, alpha, eta, weight, mode=TWO_PARAM):
    def loss_o(o):
        return float((weight * pot_forward(o, y, PotStack(alpha, eta, mode)).guided_logits).sum())

    def loss_a(a):
        return float((weight * pot_forward(o0, y, PotStack(a, eta, mode)).guided_logits).sum())

    def loss_e(e):
        return float((weight * pot_forward(o0, y, PotStack(alpha, e, mode)).guided_logits).sum())

    eps = 1e-6
    return (finite_diff_gradient(loss_o, o0, eps), finite_diff_gradient(loss_a, alpha, eps),
            finite_diff_gradient(loss_e, eta, eps))


@pytest.mark.parametrize("K", [1, 3, 10])
@pytest.mark.parametrize("seed", range(4))
def test_backward_matches_finite_differences(K, seed):
    rng = np.random.default_rng(100 + seed)
    o0, y = random_instance(seed, n=1, p=4, c=3, scale=1.5)
    alpha = rng.uniform(0.5, 2.0, K)
    eta = rng.uniform(0.5, 2.0, K)
    weight = rng.normal(size=o0.shape)
    stack = PotStack(alpha, eta)
    pot_forward(o0, y, stack, record_tape=True)
    g, ga, ge = pot_backward(stack, y, weight)
    fo, fa, fe = pipeline_grads_fd(o0, y, alpha, eta, weight)
    assert rel_err(g, fo) <= 1e-5
    assert rel_err(ga, fa) <= 1e-5
    assert rel_err(ge, fe) <= 1e-5


def test_one_param_gradient_is_tied_chain():
    o0, y = random_instance(7, n=2, p=3, c=4)
    gamma = np.array([0.7, 1.3, 2.1])
    weight = np.random.default_rng(7).normal(size=o0.shape)
    one = PotStack(gamma, np.ones(3), ONE_PARAM)
    pot_forward(o0, y, one, record_tape=True)
    _, g_gamma, g_eta = pot_backward(one, y, weight)
    np.testing.assert_array_equal(g_eta, 0.0)

    # the two-parameter chain at (gamma, 1): d/dgamma = d/dalpha since eta = 1
    two = PotStack(gamma, np.ones(3), TWO_PARAM)
    pot_forward(o0, y, two, record_tape=True)
    _, g_alpha, _ = pot_backward(two, y, weight)
    np.testing.assert_allclose(g_gamma, g_alpha, rtol=1e-14)

    _, fd_gamma, _ = pipeline_grads_fd(o0, y, gamma, np.ones(3), weight, ONE_PARAM)
    assert rel_err(g_gamma, fd_gamma) <= 1e-5

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from acids.errors import EmptyBatch, EmptyDomain, ShapeMismatch
from acids.prob_core import (
    JointDistribution,
    PredictionBatch,
    SmoothedJointState,
    adaptation_joint,
    confident_mask,
    domain_joint,
    joint_from_predictions,
    mutual_information,
    prediction_entropy,
    sharpen_predictions,
    smooth_joint,
    thresholded_entropy,
)
from fdcheck import central_difference, max_relative_error


def scalar_mi(p):
    """Loop-based MI oracle on nested lists."""
    rows = [sum(r) for r in p]
    cols = [sum(p[i][j] for i in range(len(p))) for j in range(len(p[0]))]
    total = 0.0
    for i, r in enumerate(p):
        for j, v in enumerate(r):
            if v > 0:
                total += v * math.log(v / (rows[i] * cols[j]))
    return total


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def _probs(rng, n, c):
    x = rng.random((n, c)) + 1e-3
    return x / x.sum(axis=1, keepdims=True)


# --- joint_from_predictions -------------------------------------------------

def test_joint_identity_one_hot():
    z = t([[1, 0], [0, 1]])
    j = joint_from_predictions(PredictionBatch.single_domain(z, z), symmetrize=True)
    assert torch.equal(j.p, t([[0.5, 0], [0, 0.5]]))


def test_joint_independence():
    z = torch.full((5, 2), 0.5, dtype=torch.float64)
    j = joint_from_predictions(PredictionBatch.single_domain(z, z))
    assert torch.allclose(j.p, torch.full((2, 2), 0.25, dtype=torch.float64))


def test_joint_brute_force_example():
    z = t([[0.8, 0.2], [0.3, 0.7]])
    zp = t([[0.9, 0.1], [0.2, 0.8]])
    j = joint_from_predictions(PredictionBatch.single_domain(z, zp), symmetrize=True)
    # frozen from a loop over per-sample outer products
    assert torch.allclose(j.p, t([[0.39, 0.16], [0.16, 0.29]]), atol=1e-12)


def test_joint_marginals_are_row_and_column_sums():
    rng = np.random.default_rng(0)
    b = PredictionBatch.single_domain(_probs(rng, 7, 3), _probs(rng, 7, 3))
    j = joint_from_predictions(b, symmetrize=False)
    assert torch.equal(j.row_marginal, j.p.sum(1))
    assert torch.equal(j.col_marginal, j.p.sum(0))
    assert j.is_valid()


def test_joint_errors():
    with pytest.raises(EmptyBatch):
        joint_from_predictions(PredictionBatch.single_domain(torch.zeros(0, 2), torch.zeros(0, 2)))
    with pytest.raises(ShapeMismatch):
        joint_from_predictions(PredictionBatch(t([[1, 0]]), t([[1, 0, 0]]), [0], 1))


def test_prediction_batch_validate():
    PredictionBatch(t([[0.2, 0.8]]), t([[1.0, 0.0]]), [0], 1).validate()
    with pytest.raises(ValueError):
        PredictionBatch(t([[0.2, 0.9]]), t([[1.0, 0.0]]), [0], 1).validate()
    with pytest.raises(ShapeMismatch):
        PredictionBatch(t([[0.2, 0.8]]), t([[1.0, 0.0]]), [0, 1], 2).validate()


# --- mutual_information -----------------------------------------------------

@pytest.mark.parametrize("c", [2, 3, 7])
def test_mi_identity_is_log_c(c):
    assert float(mutual_information(JointDistribution(torch.eye(c, dtype=torch.float64) / c))) == pytest.approx(
        math.log(c), abs=1e-9
    )


def test_mi_uniform_is_zero():
    assert abs(float(mutual_information(JointDistribution(torch.full((4, 4), 1 / 16, dtype=torch.float64))))) < 1e-9


def test_mi_hand_computed():
    p = [[0.4, 0.1], [0.1, 0.4]]
    assert scalar_mi(p) == pytest.approx(0.19274475702175753, abs=1e-15)
    assert float(mutual_information(JointDistribution(t(p)))) == pytest.approx(scalar_mi(p), abs=1e-9)


def test_mi_zero_cells_finite():
    p = t([[0.5, 0.0], [0.0, 0.5]])
    p.requires_grad_(True)
    mi = mutual_information(JointDistribution(p))
    mi.backward()
    assert torch.isfinite(p.grad).all()


joint_matrices = arrays(
    np.float64, (3, 3), elements=st.one_of(st.just(0.0), st.floats(1e-6, 1))
).filter(lambda a: a.sum() > 1e-3)


@settings(max_examples=200, deadline=None)
@given(joint_matrices)
def test_mi_nonnegative(a):
    p = a / a.sum()
    assert float(mutual_information(JointDistribution(p))) >= -1e-9
    assert float(mutual_information(JointDistribution(p))) == pytest.approx(scalar_mi(p.tolist()), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(joint_matrices, st.permutations(range(3)))
def test_mi_permutation_invariance_symmetric(a, perm):
    p = a + a.T
    p = p / p.sum()
    q = p[np.ix_(perm, perm)]
    assert float(mutual_information(JointDistribution(p))) == pytest.approx(
        float(mutual_information(JointDistribution(q))), abs=1e-12
    )


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_joint_order_invariance_and_symmetry(seed, n):
    rng = np.random.default_rng(seed)
    z, zp = _probs(rng, n, 3), _probs(rng, n, 3)
    perm = rng.permutation(n)
    a = joint_from_predictions(PredictionBatch.single_domain(z, zp))
    b = joint_from_predictions(PredictionBatch.single_domain(z[perm], zp[perm]))
    assert torch.allclose(a.p, b.p, atol=1e-14)
    assert torch.equal(a.p, a.p.T)


@pytest.mark.parametrize("seed", range(3))
def test_mi_joint_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    z = torch.tensor(_probs(rng, 6, 3), requires_grad=True)
    zp = torch.tensor(_probs(rng, 6, 3), requires_grad=True)

    def f():
        return mutual_information(joint_from_predictions(PredictionBatch.single_domain(z, zp), symmetrize=True))

    analytic = torch.autograd.grad(f(), [z, zp])
    with torch.no_grad():
        numeric = central_difference(f, [z, zp])
    assert max_relative_error(analytic, numeric) < 1e-4


# --- domain_joint -----------------------------------------------------------

def test_domain_joint_independent():
    z = torch.full((6, 2), 0.5, dtype=torch.float64)
    j = domain_joint(z, [0, 0, 0, 1, 1, 1], 2)
    assert abs(float(mutual_information(j))) < 1e-12


def test_domain_joint_pure_domains():
    z = t([[1, 0], [1, 0], [0, 1]])
    j = domain_joint(z, [0, 0, 1], 2)
    assert torch.allclose(j.p, t([[0.5, 0], [0, 0.5]]))
    assert float(mutual_information(j)) == pytest.approx(math.log(2), abs=1e-12)


def test_domain_joint_unbalanced_example():
    z = t([[0.9, 0.1], [0.7, 0.3], [0.2, 0.8]])
    j = domain_joint(z, [0, 0, 1], 2)
    assert torch.allclose(j.p, t([[0.4, 0.1], [0.1, 0.4]]), atol=1e-12)
    assert j.is_valid()


def test_domain_joint_missing_domain():
    with pytest.raises(EmptyDomain):
        domain_joint(t([[0.5, 0.5]]), [0], 2)


def test_domain_joint_single_column_has_zero_mi():
    rng = np.random.default_rng(1)
    j = domain_joint(_probs(rng, 10, 4), np.zeros(10, dtype=int), 1)
    assert j.shape == (4, 1)
    assert abs(float(mutual_information(j))) < 1e-12


# --- smoothing --------------------------------------------------------------

def test_smooth_alpha_one_is_exact():
    rng = np.random.default_rng(2)
    state = SmoothedJointState(alpha=1.0)
    for _ in range(3):
        cur = joint_from_predictions(PredictionBatch.single_domain(_probs(rng, 5, 3), _probs(rng, 5, 3)))
        assert torch.equal(smooth_joint(cur, state).p, cur.p)


def test_smooth_convex_combination():
    state = SmoothedJointState(alpha=0.7, p_hat=torch.full((2, 2), 0.25, dtype=torch.float64))
    out = smooth_joint(JointDistribution(t([[0.5, 0], [0, 0.5]])), state)
    assert torch.allclose(out.p, t([[0.425, 0.075], [0.075, 0.425]]), atol=1e-15)
    assert torch.equal(state.p_hat, out.p)


def test_smooth_first_call_initializes():
    state = SmoothedJointState(alpha=0.3)
    cur = JointDistribution(t([[0.5, 0], [0, 0.5]]))
    assert torch.equal(smooth_joint(cur, state).p, cur.p)
    assert state.initialized
    state.reset()
    assert not state.initialized


def test_smooth_fixed_point():
    state = SmoothedJointState(alpha=0.1, p_hat=torch.full((2, 2), 0.25, dtype=torch.float64))
    target = t([[0.4, 0.1], [0.1, 0.4]])
    for _ in range(200):
        out = smooth_joint(JointDistribution(target), state)
    assert float((out.p - target).abs().max()) < 1e-6


def test_smooth_gradient_only_through_current():
    p = torch.full((2, 2), 0.25, dtype=torch.float64, requires_grad=True)
    state = SmoothedJointState(alpha=0.4, p_hat=torch.eye(2, dtype=torch.float64) / 2)
    out = smooth_joint(JointDistribution(p), state)
    (g,) = torch.autograd.grad(out.p.sum(), [p])
    assert torch.allclose(g, torch.full((2, 2), 0.4, dtype=torch.float64))
    assert not state.p_hat.requires_grad


@settings(max_examples=100, deadline=None)
@given(joint_matrices, joint_matrices, st.floats(0.01, 1.0))
def test_smooth_stays_on_simplex(a, b, alpha):
    state = SmoothedJointState(alpha=alpha, p_hat=torch.tensor(b / b.sum()))
    assert smooth_joint(JointDistribution(a / a.sum()), state).is_valid()


def test_smooth_rejects_bad_alpha():
    with pytest.raises(ValueError):
        SmoothedJointState(alpha=0.0)


# --- sharpening and adaptation joint ---------------------------------------

def test_sharpen_confident_row():
    z = t([[0.95, 0.05]]).requires_grad_(True)
    out = sharpen_predictions(z, 0.9)
    assert torch.equal(out.detach(), t([[1, 0]]))
    (g,) = torch.autograd.grad(out.sum() + (out * out).sum(), [z])
    assert torch.equal(g, torch.zeros_like(g))


def test_sharpen_unconfident_row_keeps_gradient():
    z = t([[0.6, 0.4]]).requires_grad_(True)
    out = sharpen_predictions(z, 0.9)
    assert torch.equal(out.detach(), t([[0.6, 0.4]]))
    (g,) = torch.autograd.grad((out * out).sum(), [z])
    assert torch.allclose(g, 2 * z.detach())


def test_sharpen_tie_breaks_low():
    assert torch.equal(sharpen_predictions(t([[0.5, 0.5]]), 0.5), t([[1, 0]]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.34, 1.0))
def test_sharpen_idempotent(seed, eps):
    z = torch.tensor(_probs(np.random.default_rng(seed), 8, 3))
    once = sharpen_predictions(z, eps)
    assert torch.equal(sharpen_predictions(once, eps), once)


def test_adaptation_joint_confident_diagonal():
    z = torch.eye(3, dtype=torch.float64)
    j = adaptation_joint(z, z, 0.9)
    assert float(mutual_information(j)) == pytest.approx(math.log(3), abs=1e-12)


def test_adaptation_joint_unreachable_threshold_matches_plain():
    rng = np.random.default_rng(3)
    z, zp = torch.tensor(_probs(rng, 9, 4)), torch.tensor(_probs(rng, 9, 4))
    a = adaptation_joint(z, zp, 1.0 + 1e-9)
    b = joint_from_predictions(PredictionBatch.single_domain(z, zp), symmetrize=False)
    assert torch.equal(a.p, b.p)


def test_adaptation_joint_example():
    j = adaptation_joint(t([[0.95, 0.05]]), t([[0.7, 0.3]]), 0.9)
    assert torch.allclose(j.p, t([[0.7, 0.3], [0, 0]]))


def test_adaptation_joint_zero_gradient_on_sharpened_rows():
    rng = np.random.default_rng(4)
    logits = torch.tensor(rng.normal(size=(6, 3)) * 0.5, requires_grad=True)
    with torch.no_grad():
        logits[0] = torch.tensor([6.0, 0.0, 0.0])
        logits[3] = torch.tensor([0.0, 0.0, 7.0])
    zp = torch.tensor(_probs(rng, 6, 3))
    z = torch.softmax(logits, dim=1)
    mask = confident_mask(z, 0.9)
    assert mask.tolist() == [True, False, False, True, False, False]
    (g,) = torch.autograd.grad(mutual_information(adaptation_joint(z, zp, 0.9)), [logits])
    assert torch.equal(g[mask], torch.zeros_like(g[mask]))
    assert bool((g[~mask] != 0).any())


def test_adaptation_joint_errors():
    with pytest.raises(EmptyBatch):
        adaptation_joint(torch.zeros(0, 2), torch.zeros(0, 2), 0.9)
    with pytest.raises(ShapeMismatch):
        adaptation_joint(t([[1, 0]]), t([[1, 0, 0]]), 0.9)


# --- entropy ----------------------------------------------------------------

def test_entropy_values():
    assert float(prediction_entropy(torch.eye(3, dtype=torch.float64))) == 0.0
    assert float(prediction_entropy(torch.full((4, 2), 0.5, dtype=torch.float64))) == pytest.approx(math.log(2))
    expected = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
    assert expected == pytest.approx(0.3250829733914482, abs=1e-15)
    assert float(prediction_entropy(t([[0.9, 0.1]]))) == pytest.approx(expected, abs=1e-12)


def test_thresholded_entropy():
    assert float(thresholded_entropy(t([[0.5, 0.5]]), 0.9)) == pytest.approx(math.log(2))
    z = t([[0.99, 0.01], [0.95, 0.05]]).requires_grad_(True)
    loss = thresholded_entropy(z, 0.9)
    (g,) = torch.autograd.grad(loss, [z])
    assert float(loss.detach()) == 0.0 and torch.equal(g, torch.zeros_like(g))
    # uniform rows just above 1/C: every row participates
    u = torch.full((5, 4), 0.25, dtype=torch.float64)
    assert float(thresholded_entropy(u, 0.25 + 1e-6)) == pytest.approx(math.log(4))

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riskcap import (
    Measure, OutcomeSpace, Payoff, RiskSpec, ScenarioSet, canonical_capacity,
    entropic_oracle, entropic_spec, expectation, maximizer, minimal_penalties, penalty,
    reference_measure, rerepresent, rho, rho_min, rho_min_diagnostic, riskless, verify_axioms,
)
from riskcap.capacity import capacity
from riskcap.risk import LAMBDA_GRID, NotNormalizedError, simplex_grid, simplex_resolution
from helpers import payoffs_on, random_payoff, random_spec, space

AB = OutcomeSpace(["a", "b"])


def two_member():
    return RiskSpec.from_members([Measure(AB, [1, 0]), Measure(AB, [0, 1])], [0.0, 1.0])


def X_(*v, sp=AB):
    return Payoff(sp, np.array(v, dtype=float))


@st.composite
def specs(draw, max_outcomes=6, max_members=5):
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    return random_spec(rng, draw(st.integers(1, max_outcomes)), draw(st.integers(1, max_members)))


def grid_penalty_oracle(spec: RiskSpec, q: np.ndarray, step: int = 64) -> float:
    """Smallest cost over simplex-grid mixtures that reproduce q exactly (1e-12)."""
    W, alpha = spec._W, spec._alpha
    best = math.inf
    for lam in simplex_grid(W.shape[0], step):
        if np.max(np.abs(lam @ W - q)) <= 1e-12:
            best = min(best, float(lam @ alpha))
    return best


# ---------------------------------------------------------------- rho / maximizer


def test_rho_examples():
    spec = two_member()
    assert rho(spec, X_(0, 0)) == 0.0
    assert rho(spec, X_(2, -2)) == 1.0
    assert rho(spec, X_(3, -1)) == 0.0


def test_maximizer_examples():
    spec = two_member()
    assert maximizer(spec, X_(2, -2))[0] == 1  # second member, 0-based
    assert maximizer(spec, X_(0, 0))[0] == 0
    single = RiskSpec.from_members([Measure.uniform(AB)])
    for v in ([1, 2], [-5, 3], [0, 0]):
        assert maximizer(single, X_(*v))[0] == 0


def test_maximizer_ties_lowest_index():
    spec = RiskSpec.from_members([Measure.uniform(AB)] * 3)
    assert maximizer(spec, X_(1, -4))[0] == 0


def test_infinite_penalty_members_are_skipped():
    spec = RiskSpec(ScenarioSet(AB, (Measure(AB, [1, 0]), Measure(AB, [0, 1])), [0.0, math.inf]))
    assert rho(spec, X_(5, -100)) == -5.0
    assert maximizer(spec, X_(5, -100))[0] == 0


def test_normalization_is_enforced():
    with pytest.raises(NotNormalizedError):
        RiskSpec.from_members([Measure.uniform(AB)], [0.5])
    spec = RiskSpec.from_members([Measure.uniform(AB)], [0.5], normalized=False)
    with pytest.raises(NotNormalizedError):
        rho_min(spec, X_(1, 1))


@settings(max_examples=200)
@given(specs(), st.data())
def test_attainment_is_exact(spec, data):
    X = data.draw(payoffs_on(spec.space))
    i, Q = maximizer(spec, X)
    assert rho(spec, X) == expectation(Q, -X, signed=True) - spec.scenarios.penalties[i]


# ---------------------------------------------------------------- penalty


def test_penalty_examples():
    spec = two_member()
    assert penalty(spec, Measure(AB, [1, 0])) == 0.0
    assert penalty(spec, Measure(AB, [0.5, 0.5])) == pytest.approx(0.5, abs=1e-12)
    assert grid_penalty_oracle(spec, np.array([0.5, 0.5])) == 0.5
    sp = OutcomeSpace("abc")
    spec3 = RiskSpec.from_members([Measure(sp, [1, 0, 0]), Measure(sp, [0, 1, 0])])
    assert penalty(spec3, Measure(sp, [0, 0, 1])) == math.inf


def test_penalty_requires_probability():
    with pytest.raises(ValueError):
        penalty(two_member(), Measure(AB, [0.5, 0.2]))


@settings(max_examples=40, deadline=None)
@given(specs(max_members=4), st.data())
def test_penalty_matches_grid_oracle(spec, data):
    n = len(spec.finite_index)
    lam = simplex_grid(n, 64)[data.draw(st.integers(0, math.comb(64 + n - 1, n - 1) - 1))]
    q = lam @ spec._W
    Q = Measure(spec.space, q)
    oracle = grid_penalty_oracle(spec, q)
    got = penalty(spec, Q)
    assert got <= float(lam @ spec._alpha) + 1e-10
    assert got <= oracle + 1e-10


@settings(max_examples=60, deadline=None)
@given(specs(max_members=6), st.data())
def test_enumeration_and_lp_agree(spec, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 999)))
    n = len(spec.finite_index)
    lam = rng.dirichlet(np.ones(n))
    Q = Measure(spec.space, lam @ spec._W)
    a = penalty(spec, Q, method="enumerate")
    b = penalty(spec, Q, method="lp")
    assert a == pytest.approx(b, abs=1e-8)


@settings(max_examples=100, deadline=None)
@given(specs(), st.data())
def test_rerepresentation_fixed_point(spec, data):
    mins = minimal_penalties(spec)
    fin = spec.scenarios.finite_mask
    assert np.all(mins[fin] <= spec.scenarios.penalties[fin] + 1e-10)
    spec2 = rerepresent(spec)
    for _ in range(5):
        X = data.draw(payoffs_on(spec.space))
        assert abs(rho(spec2, X) - rho(spec, X)) <= 1e-10 * max(1.0, np.abs(X.values).max())


# ---------------------------------------------------------------- rho_min and c_rho


def test_rho_min_examples():
    spec = two_member()
    assert rho_min(spec, X_(2, -2)) == 2.0
    diag = rho_min_diagnostic(spec, X_(2, -2))
    assert diag.converged
    assert max(diag.ratios) <= 2.0
    assert rho_min(spec, X_(0, 0)) == 0.0


@settings(max_examples=100)
@given(specs(), st.data())
def test_rho_min_equals_rho_when_sublinear(spec, data):
    spec0 = RiskSpec(spec.scenarios.with_penalties(np.zeros(len(spec.scenarios))))
    X = data.draw(payoffs_on(spec.space))
    assert rho_min(spec0, X) == rho(spec0, X)


@settings(max_examples=200)
@given(specs(), st.data(), st.floats(0.01, 100))
def test_rho_min_majorizes_and_is_sublinear(spec, data, lam):
    X = data.draw(payoffs_on(spec.space))
    Y = data.draw(payoffs_on(spec.space))
    scale = 1e-12 * (1 + np.abs(X.values).max() + np.abs(Y.values).max())
    assert rho_min(spec, X) >= rho(spec, X) - scale
    assert rho_min(spec, lam * X) == pytest.approx(lam * rho_min(spec, X), rel=1e-12, abs=lam * scale)
    assert rho_min(spec, X + Y) <= rho_min(spec, X) + rho_min(spec, Y) + 2 * scale
    assert rho_min_diagnostic(spec, X).converged


def test_canonical_capacity_examples():
    spec = two_member()
    assert canonical_capacity(spec, X_(2, -2)) == 2.0
    assert canonical_capacity(spec, X_(1, 1)) == 1.0
    assert canonical_capacity(spec, X_(0, 0)) == 0.0


@settings(max_examples=200)
@given(specs(), st.data())
def test_canonical_capacity_is_member_capacity(spec, data):
    X = data.draw(payoffs_on(spec.space))
    assert canonical_capacity(spec, X) == capacity(X, spec.scenarios.finite_part(), 1)
    assert abs(rho(spec, X)) <= canonical_capacity(spec, X) * (1 + 1e-12) + 1e-12


@settings(max_examples=200)
@given(specs(), st.data())
def test_lipschitz_estimate(spec, data):
    X = data.draw(payoffs_on(spec.space))
    Y = data.draw(payoffs_on(spec.space))
    scale = 1e-12 * (1 + np.abs(X.values).max() + np.abs(Y.values).max())
    assert abs(rho(spec, X) - rho(spec, Y)) <= canonical_capacity(spec, X - Y) + scale


@settings(max_examples=100)
@given(specs(max_members=8))
def test_reference_measure_dominates_members(spec):
    Q = reference_measure(spec)
    assert Q.is_probability()
    for q in spec.scenarios.finite_part():
        assert np.all(Q.weights[q.weights > 0] > 0)


# ---------------------------------------------------------------- riskless


def test_riskless_examples():
    spec = two_member()
    assert riskless(spec, X_(0, 0)).riskless
    r = riskless(spec, X_(0, -1))
    assert not r.riskless and r.witness == (2.0, 1)
    assert rho(spec, 2.0 * X_(0, -1)) == 1.0
    only = RiskSpec.from_members([Measure(AB, [1, 0])])
    assert riskless(only, X_(0, -1)).riskless


def test_riskless_requires_nonpositive():
    with pytest.raises(ValueError):
        riskless(two_member(), X_(1, 0))


@settings(max_examples=200)
@given(specs(), st.data())
def test_riskless_iff_null_under_members(spec, data):
    X = -abs(data.draw(payoffs_on(spec.space)))
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=len(spec.space), max_size=len(spec.space))))
    X = Payoff(spec.space, np.where(mask, 0.0, X.values))
    r = riskless(spec, X)
    members_null = all(expectation(q, X, signed=True) == 0 for q in spec.scenarios.finite_part())
    assert r.riskless == members_null
    if r.riskless:
        assert all(rho(spec, lam * X) == 0 for lam in LAMBDA_GRID)
    elif r.witness is None:
        # only when no float lam is large enough
        assert rho(spec, np.finfo(float).max * X) <= 0
    else:
        lam, i = r.witness
        assert rho(spec, lam * X) > 0 and maximizer(spec, lam * X)[0] == i


# ---------------------------------------------------------------- axioms


def test_axioms_pass_for_dual_form():
    rng = np.random.default_rng(7)
    spec = random_spec(rng, 5, 4)
    rep = verify_axioms(spec, spec.space, trials=200, capacity=lambda Z: canonical_capacity(spec, Z))
    assert rep.passed, rep.failures()


def test_axioms_catch_quadratic_perturbation():
    spec = two_member()
    Q1 = spec.scenarios[0]

    def bad(X):
        return rho(spec, X) + 0.1 * expectation(Q1, X, signed=True) ** 2

    rep = verify_axioms(bad, AB, trials=200, capacity=lambda Z: canonical_capacity(spec, Z))
    failed = {v.name for v in rep.failures()}
    assert failed & {"monotonicity", "translation"}
    for v in rep.failures():
        assert v.witness and "X" in v.witness


def test_axioms_catch_negative_weight():
    w = np.array([1.5, -0.5])

    def bad(X):
        return float(-(w @ X.values))

    rep = verify_axioms(bad, AB, trials=100, capacity=lambda Z: float(np.abs(w) @ np.abs(Z.values)))
    assert not rep["monotonicity"].passed
    wit = rep["monotonicity"].witness
    assert np.all(wit["Y"].values >= wit["X"].values)
    assert bad(wit["Y"]) > bad(wit["X"])


def test_axiom_witness_is_reproducible():
    spec = two_member()

    def bad(X):
        return rho(spec, X) + 0.1 * float(X.values[0]) ** 2

    a = verify_axioms(bad, AB, trials=50, seed=3)
    b = verify_axioms(bad, AB, trials=50, seed=3)
    assert [v.max_violation for v in a.verdicts.values()] == [v.max_violation for v in b.verdicts.values()]


# ---------------------------------------------------------------- entropic


def test_entropic_examples():
    P = Measure.uniform(AB)
    assert entropic_oracle(P, 1.0, X_(0, 0)) == 0.0
    assert entropic_oracle(P, 1.0, X_(1, -1)) == pytest.approx(math.log(math.cosh(1.0)), abs=1e-12)
    assert entropic_oracle(P, 2.0, X_(3, 3)) == pytest.approx(-3.0, abs=1e-12)
    with pytest.raises(ValueError):
        entropic_oracle(P, 0.0, X_(0, 0))


@pytest.mark.parametrize("theta", [0.5, 2.0])
def test_entropic_grid_is_lower_and_converges(theta):
    sp = space(3)
    P = Measure.uniform(sp)
    rng = np.random.default_rng(0)
    Xs = [random_payoff(rng, sp, 1.0) for _ in range(10)]
    gaps = []
    for res in (4, 16, 64):
        spec = entropic_spec(P, theta, res)
        g = max(entropic_oracle(P, theta, X) - rho(spec, X) for X in Xs)
        assert g >= -1e-12
        gaps.append(g)
    assert gaps[2] < gaps[0]


def test_simplex_grid_counts():
    assert simplex_grid(4, 3).shape == (math.comb(6, 3), 4)
    np.testing.assert_allclose(simplex_grid(4, 5).sum(axis=1), 1.0)
    assert math.comb(simplex_resolution(4, 10_000) + 3, 3) >= 10_000

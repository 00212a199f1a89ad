"""Acceptance criteria, one marked test (or a few) per criterion.

The terminal summary prints one PASS/FAIL line per criterion.  Parts that
cannot be met are strict xfails, so they show up as FAIL there.
"""

import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.special import logsumexp

from cli_matrix import write_files
from gexp_oracles import single_vol_expectation
from helpers import random_payoff, random_scenarios, random_spec, space
from riskcap import Measure, OutcomeSpace, Payoff, RiskSpec, ScenarioSet, TestBank, maximizer, penalty, rho
from riskcap.capacity import canonical_measure, capacity, dirac_counterexample, reduce
from riskcap.gexp import (
    LatticeParams, LatticeSizeError, brute_force_gexp, build_lattice, random_strategy_measure,
    solve, verify_scenario,
)
from riskcap.risk import (
    canonical_capacity, entropic_oracle, entropic_spec, rerepresent, simplex_grid,
    simplex_resolution, verify_axioms,
)
from riskcap.scenario import expectation

TESTS = Path(__file__).parent


def criterion(name):
    return pytest.mark.criterion(name)


def spec_pool(seed, count, max_outcomes=8, max_members=6):
    rng = np.random.default_rng(seed)
    return [random_spec(rng, int(rng.integers(1, max_outcomes + 1)), int(rng.integers(1, max_members + 1)))
            for _ in range(count)]


# ---------------------------------------------------------------- counterexample


@criterion("Counterexample reproduction")
def test_counterexample(record_property):
    t0 = time.perf_counter()
    reports = {eta: dirac_counterexample(eta, N=500) for eta in (0.1, 0.01)}
    elapsed = time.perf_counter() - t0
    record_property("detail", ", ".join(
        f"eta={eta}: sup Q(A)={r.sup_measure_of_A}, bound={r.capacity_lower_bound:.4f}"
        for eta, r in reports.items()) + f", {elapsed:.2f}s")
    for eta, r in reports.items():
        assert r.sup_measure_of_A == 0.0
        assert r.capacity_lower_bound >= 1.0 - eta
    assert elapsed < 1.0


# ---------------------------------------------------------------- axioms


@criterion("Axiom suite")
def test_axiom_suite(record_property):
    specs = spec_pool(1, 200)
    t0 = time.perf_counter()
    worst = {}
    failures = 0
    for k, spec in enumerate(specs):
        rep = verify_axioms(spec, spec.space, trials=500, tol=1e-10, seed=k,
                            capacity=lambda Z, s=spec: canonical_capacity(s, Z))
        failures += not rep.passed
        for name, v in rep.verdicts.items():
            worst[name] = max(worst.get(name, 0.0), v.max_violation)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"200 specs x 500 trials, worst violation {max(worst.values()):.1e}, "
                              f"{elapsed:.1f}s")
    assert failures == 0, worst
    assert elapsed < 30.0


# ---------------------------------------------------------------- duality


@criterion("Duality round trip")
def test_rerepresentation_preserves_rho(record_property):
    rng = np.random.default_rng(2)
    worst = 0.0
    for spec in spec_pool(2, 100):
        twin = rerepresent(spec)
        for _ in range(100):
            X = random_payoff(rng, spec.space)
            worst = max(worst, abs(rho(spec, X) - rho(twin, X)))
    record_property("detail", f"100 specs x 100 payoffs, max |rho - rho'| = {worst:.1e}")
    assert worst <= 1e-10


def _grid_mixtures(W, step=64):
    return simplex_grid(W.shape[0], step) @ W


@criterion("Duality round trip")
def test_zero_penalty_hull_against_grid_oracle(record_property):
    """Zero penalties: 0 on the convex hull, inf off it.

    Grid oracle: a mixture weight vector rounded to the 1/64 grid moves the
    mixture by at most n/64 in L1, so a Q farther than that from every grid
    mixture is outside the hull, and a grid mixture itself is inside.
    """
    rng = np.random.default_rng(3)
    inside = outside = undecided = 0
    for _ in range(20):
        m, n = int(rng.integers(2, 9)), int(rng.integers(1, 5))
        S = random_scenarios(rng, m, n)
        spec = RiskSpec(S)
        M = _grid_mixtures(S.matrix)
        for row in rng.choice(len(M), size=min(len(M), 25), replace=False):
            Q = Measure(S.space, M[row])
            assert penalty(spec, Q) == 0.0
            inside += 1
        for _ in range(25):
            q = rng.dirichlet(np.full(m, 0.7))
            dist = float(np.min(np.abs(M - q).sum(axis=1)))
            a = penalty(spec, Measure(S.space, q))
            assert a in (0.0, math.inf)
            if dist > n / 64:
                assert a == math.inf
                outside += 1
            else:
                undecided += 1
            if a == 0.0:
                assert dist <= n / 64
    record_property("detail", f"{inside} grid mixtures at 0, {outside} certified-outside at inf "
                              f"({undecided} within grid distance)")
    assert outside > 100


# ---------------------------------------------------------------- attainment


@criterion("Attainment")
def test_attainment(record_property):
    rng = np.random.default_rng(4)
    count = 0
    for spec in spec_pool(4, 200):
        for _ in range(100):
            X = random_payoff(rng, spec.space)
            i, Q = maximizer(spec, X)
            assert rho(spec, X) == expectation(Q, -X, signed=True) - spec.scenarios.penalties[i]
            count += 1
    record_property("detail", f"{count} payoffs, zero deviation")


# ---------------------------------------------------------------- entropic


THETAS = (0.5, 1.0, 2.0)


def _entropic_gaps():
    sp = space(4)
    P = Measure.uniform(sp)
    res = simplex_resolution(4, 10_000)
    rng = np.random.default_rng(5)
    Xs = [random_payoff(rng, sp, 1.0) for _ in range(200)]
    gaps = {}
    for theta in THETAS:
        spec = entropic_spec(P, theta, res)
        gaps[theta] = [entropic_oracle(P, theta, X) - rho(spec, X) for X in Xs]
    return len(simplex_grid(4, res)), gaps


@criterion("Entropic oracle")
def test_entropic_lower_bound_and_closed_form(record_property):
    points, gaps = _entropic_gaps()
    lowest = min(min(g) for g in gaps.values())
    P2 = Measure.uniform(space(2))
    closed = entropic_oracle(P2, 1.0, Payoff(P2.space, np.array([1.0, -1.0])))
    record_property("detail", f"{points}-point grid below closed form (min gap {lowest:.1e}), "
                              f"ln cosh 1 error {abs(closed - math.log(math.cosh(1.0))):.1e}")
    assert lowest >= -1e-12
    assert abs(closed - math.log(math.cosh(1.0))) <= 1e-12


@criterion("Entropic oracle")
@pytest.mark.xfail(strict=True, reason="a 10^4-point simplex grid leaves a relative-entropy gap "
                                       "above 5e-3 for theta in {1, 2}")
def test_entropic_grid_within_tolerance(record_property):
    _, gaps = _entropic_gaps()
    worst = {theta: max(g) for theta, g in gaps.items()}
    record_property("detail", "max gap " + ", ".join(f"theta={t}: {w:.4f}" for t, w in worst.items())
                    + " (tolerance 5e-3)")
    assert max(worst.values()) <= 5e-3


def test_entropic_gap_is_min_relative_entropy():
    # why the tolerance fails: the grid error equals min_Q H(Q | Q*) / theta
    sp = space(4)
    P = Measure.uniform(sp)
    grid = simplex_grid(4, 38)
    rng = np.random.default_rng(6)
    for theta in THETAS:
        spec = entropic_spec(P, theta, 38)
        X = random_payoff(rng, sp, 1.0)
        star = np.exp(-theta * X.values - logsumexp(-theta * X.values))
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(grid > 0, grid * np.log(grid / star), 0.0).sum(axis=1)
        gap = entropic_oracle(P, theta, X) - rho(spec, X)
        assert gap == pytest.approx(kl.min() / theta, abs=1e-12)


def test_entropic_tolerance_met_on_finer_grid():
    sp = space(4)
    P = Measure.uniform(sp)
    rng = np.random.default_rng(5)
    Xs = [random_payoff(rng, sp, 1.0) for _ in range(50)]
    res = simplex_resolution(4, 100_000)
    for theta in THETAS:
        spec = entropic_spec(P, theta, res)
        assert max(entropic_oracle(P, theta, X) - rho(spec, X) for X in Xs) <= 5e-3


# ---------------------------------------------------------------- reduction


def _reduction_sets(rng):
    from scipy.stats import binom

    k = np.arange(21.0)
    sp = OutcomeSpace([f"k{int(i)}" for i in k], k)
    yield "binomial", ScenarioSet(sp, tuple(Measure(sp, binom.pmf(k, 20, t)) for t in np.linspace(0, 1, 100)),
                                  prob_tol=1e-9)
    for m in (10, 30):
        # 100 perturbations of 5 centres, so that coarse nets are much smaller than the family
        centres = rng.dirichlet(np.ones(m), size=5)
        noise = rng.dirichlet(np.ones(m), size=100)
        mix = rng.uniform(0.0, 0.2, size=(100, 1))
        W = (1.0 - mix) * centres[rng.integers(5, size=100)] + mix * noise
        sp = space(m)
        yield f"clustered m={m}", ScenarioSet(sp, tuple(Measure(sp, w / w.sum()) for w in W))


@criterion("Reduction")
def test_reduction(record_property):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    sizes = []
    worst_ratio = 0.0
    for label, S in _reduction_sets(rng):
        m = len(S.space)
        bank = [Payoff.indicator(S.space, [o]) for o in S.space]
        bank += [Payoff(S.space, rng.normal(size=m)) for _ in range(20)]
        bank = TestBank(tuple(bank))
        A = np.stack([np.abs(f.values) for f in bank.payoffs])
        full = np.array([max(math.fsum(q * a) for q in S.matrix) for a in A])
        for eps in (0.1, 0.05, 0.01):
            r = reduce(S, bank, eps)
            kept = S.matrix[list(r.indices)]
            red = np.array([max(math.fsum(q * a) for q in kept) for a in A])
            gap = float(np.max(np.abs(full - red)))
            lib = max(abs(capacity(f, S) - capacity(f, S.subset(r.indices))) for f in bank.payoffs)
            assert gap <= eps and lib <= eps
            worst_ratio = max(worst_ratio, gap / eps)
            sizes.append(f"{label} eps={eps}: {len(r.indices)}")
    elapsed = time.perf_counter() - t0
    record_property("detail", f"kept {', '.join(sizes)}; worst gap/eps {worst_ratio:.2f}, {elapsed:.1f}s")
    assert elapsed < 10.0


# ---------------------------------------------------------------- canonical measure


@criterion("Canonical measure")
def test_canonical_null_sets(record_property):
    rng = np.random.default_rng(8)
    checked = nulls = 0
    for _ in range(100):
        m, n = int(rng.integers(2, 9)), int(rng.integers(1, 7))
        S = random_scenarios(rng, m, n, sparsity=0.6)
        P = canonical_measure(S)
        charged = (S.matrix > 0).any(axis=0)  # support union, the independent oracle
        payoffs = [Payoff.indicator(S.space, [o]) for o in S.space]
        for _ in range(100):
            v = rng.exponential(size=m)
            v[rng.random(m) < 0.5] = 0.0
            payoffs.append(Payoff(S.space, v))
        for X in payoffs:
            p_null = expectation(P, X) == 0.0
            c_null = capacity(X, S) == 0.0
            truth = not np.any(charged & (X.values > 0))
            assert p_null == c_null == truth
            checked += 1
            nulls += truth
    record_property("detail", f"{checked} payoffs on 100 sets, {nulls} null")


# ---------------------------------------------------------------- G-expectation

ENUMERABLE = 2**16
LATTICES = [(K, 1) for K in range(1, 13)] + [(K, 2) for K in range(1, 7)]


def _lattice(K, d):
    return build_lattice(LatticeParams(K, 1.0, d, (0.2, 0.15)[:d], (0.3, 0.35)[:d]))


def path_payoff(rng, K, d):
    """Terminal polynomial and call plus one intermediate cross term."""
    c = rng.normal(size=4)
    t = int(rng.integers(1, K + 1))
    strike = float(rng.normal(scale=0.3))
    w = rng.normal(size=d)

    def f(p):
        x = w[0] * p[:, -1, 0] if d == 1 else w[0] * p[:, -1, 0] + w[1] * p[:, -1, 1]
        return x * (c[0] + c[1] * x) + c[2] * np.maximum(x - strike, 0.0) + c[3] * p[:, t, -1] * p[:, -1, 0]

    return f


def convex(x):
    s = np.sum(x, axis=-1)
    return s * s + np.maximum(x[..., 0] - 0.1, 0.0)


@criterion("G-expectation oracle")
def test_g_expectation(record_property):
    rng = np.random.default_rng(9)
    t0 = time.perf_counter()
    enumerated = 0
    worst_collapse = worst_mart = 0.0
    for K, d in LATTICES:
        lat = _lattice(K, d)
        fs = [path_payoff(rng, K, d) for _ in range(50)]
        up, down = (lambda p: convex(p[:, -1, :])), (lambda p: -convex(p[:, -1, :]))
        results = solve(lat, fs + [up, down])
        for f, (v, pm) in zip(fs, results):
            rep = verify_scenario(pm, lat)
            assert rep.passed(1e-12) and rep.qv_flags.all() and rep.qv_step_flags.all()
            worst_mart = max(worst_mart, rep.martingale_max_violation, rep.orthogonality_max_violation)
            assert pm.expectation(f) == v
            if lat.strategy_count <= ENUMERABLE:
                assert brute_force_gexp(lat, f) == v
            else:
                sampled = random_strategy_measure(lat, rng)
                assert sampled.expectation(f) <= v + 1e-12 * (1 + abs(v))
        if lat.strategy_count <= ENUMERABLE:
            enumerated += 1
        hi, lo = lat.params.sigma_high, lat.params.sigma_low
        worst_collapse = max(worst_collapse,
                             abs(results[-2][0] - single_vol_expectation(convex, K, 1.0, hi)),
                             abs(results[-1][0] + single_vol_expectation(convex, K, 1.0, lo)))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{len(LATTICES)} lattices x 50 payoffs, brute force on {enumerated}, "
                              f"collapse error {worst_collapse:.1e}, martingale {worst_mart:.1e}, "
                              f"{elapsed:.1f}s")
    assert worst_collapse <= 1e-12
    assert elapsed < 60.0


@criterion("G-expectation oracle")
@pytest.mark.xfail(strict=True, raises=LatticeSizeError,
                   reason="brute force over every strategy measure is infeasible beyond 2^16 strategies")
def test_g_expectation_brute_force_beyond_enumeration(record_property):
    big = [(K, d) for K, d in LATTICES if _lattice(K, d).strategy_count > ENUMERABLE]
    smallest = min(_lattice(K, d).strategy_count for K, d in big)
    record_property("detail", f"brute force unavailable on {len(big)} of {len(LATTICES)} lattices "
                              f"(smallest has {smallest} strategies)")
    rng = np.random.default_rng(10)
    for K, d in big:
        lat = _lattice(K, d)
        f = path_payoff(rng, K, d)
        assert brute_force_gexp(lat, f, limit=ENUMERABLE) == solve(lat, [f])[0][0]


# ---------------------------------------------------------------- CLI


@criterion("CLI determinism")
def test_cli_determinism(tmp_path, record_property):
    write_files(tmp_path)
    outputs = []
    for hashseed in ("1", "2"):
        env = dict(os.environ, PYTHONHASHSEED=hashseed)
        proc = subprocess.run([sys.executable, str(TESTS / "cli_matrix.py"), str(tmp_path)],
                              capture_output=True, env=env, check=True)
        outputs.append(proc.stdout)
    runs = outputs[0].count(b"\n$ ") + 1
    record_property("detail", f"{runs} invocations, {len(outputs[0])} bytes each run")
    assert outputs[0] == outputs[1]
    assert b"[exit 2]" not in outputs[0] and b"[exit 3]" not in outputs[0]

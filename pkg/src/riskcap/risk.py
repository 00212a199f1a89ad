"""Convex risk measures in dual form over a finite scenario set.

A :class:`RiskSpec` represents

    rho(X) = max_n ( E_{Q_n}[-X] - alpha_n )

over the members with finite penalty.  The module recovers minimal
penalties by conjugation, finds attaining scenarios, builds the minimal
sublinear majorant and its capacity, characterizes riskless payoffs and
checks the risk-measure axioms on arbitrary functionals.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, NamedTuple

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp, rel_entr

from .capacity import canonical_measure, geometric_weights
from .scenario import (
    ATOL,
    Measure,
    OutcomeSpace,
    Payoff,
    ScenarioSet,
    check_same_space,
    mixture,
    weighted_sum,
)

LAMBDA_GRID = tuple(2.0**k for k in range(-10, 21))
ENUMERATION_LIMIT = 12


class NotNormalizedError(ValueError):
    """Operation requires ``rho(0) = 0``."""


class AxiomEvaluationError(RuntimeError):
    """The functional under test raised on some input."""

    def __init__(self, payoff, cause):
        self.payoff = payoff
        super().__init__(f"risk functional failed on {payoff!r}: {cause!r}")


@dataclass(frozen=True, eq=False)
class RiskSpec:
    """Scenario set with penalties, read as a dual-form risk measure."""

    scenarios: ScenarioSet
    normalized: bool = True

    def __post_init__(self):
        if self.normalized:
            low = float(np.min(self.scenarios.penalties))
            if abs(low) > ATOL:
                raise NotNormalizedError(
                    f"smallest finite penalty is {low!r}; a normalized spec needs 0"
                )

    @classmethod
    def from_members(cls, measures, penalties=None, normalized: bool = True) -> RiskSpec:
        return cls(ScenarioSet.from_measures(measures, penalties), normalized)

    @property
    def space(self) -> OutcomeSpace:
        return self.scenarios.space

    @cached_property
    def finite_index(self) -> np.ndarray:
        return np.flatnonzero(self.scenarios.finite_mask)

    @cached_property
    def _W(self) -> np.ndarray:
        return self.scenarios.matrix[self.finite_index]

    @cached_property
    def _alpha(self) -> np.ndarray:
        return self.scenarios.penalties[self.finite_index]

    def scores(self, X: Payoff) -> np.ndarray:
        """``E_{Q_n}[-X] - alpha_n`` for every finite-penalty member."""
        check_same_space(X, self.scenarios)
        return weighted_sum(self._W, -X.values) - self._alpha

    def __call__(self, X: Payoff) -> float:
        return rho(self, X)


def _require_normalized(spec: RiskSpec):
    if not spec.normalized:
        raise NotNormalizedError("operation needs a normalized risk spec")


def rho(spec: RiskSpec, X: Payoff) -> float:
    """Exact finite maximum of the dual representation."""
    return float(np.max(spec.scores(X)))


def maximizer(spec: RiskSpec, X: Payoff) -> tuple[int, Measure]:
    """Attaining member (index into ``spec.scenarios``), lowest index on ties."""
    i = int(spec.finite_index[int(np.argmax(spec.scores(X)))])
    return i, spec.scenarios[i]


# --------------------------------------------------------------------------
# penalty recovery


def _penalty_enumerate(W: np.ndarray, alpha: np.ndarray, q: np.ndarray, tol: float) -> float:
    # basic feasible solutions of {lam >= 0, sum lam_n Q_n = q, sum lam_n = 1}
    n = W.shape[0]
    A = np.vstack([W.T, np.ones(n)])
    b = np.append(q, 1.0)
    rank = np.linalg.matrix_rank(A)
    best = math.inf
    for k in range(1, min(n, rank) + 1):
        for cols in itertools.combinations(range(n), k):
            AB = A[:, cols]
            if k > 1 and np.linalg.matrix_rank(AB) < k:
                continue
            lam, *_ = np.linalg.lstsq(AB, b, rcond=None)
            if lam.min() < -tol or np.max(np.abs(AB @ lam - b)) > tol:
                continue
            cost = math.fsum(alpha[list(cols)] * np.clip(lam, 0.0, None))
            best = min(best, cost)
    return best


def _penalty_lp(W: np.ndarray, alpha: np.ndarray, q: np.ndarray, tol: float) -> float:
    n = W.shape[0]
    res = linprog(
        alpha,
        A_eq=np.vstack([W.T, np.ones(n)]),
        b_eq=np.append(q, 1.0),
        bounds=(0, None),
        method="highs-ipm",
        options={
            "primal_feasibility_tolerance": tol,
            "dual_feasibility_tolerance": tol,
            "ipm_optimality_tolerance": tol,
        },
    )
    if res.status == 2:
        return math.inf
    if res.status != 0:
        raise RuntimeError(f"penalty LP failed: {res.message}")
    return max(0.0, float(res.fun))


def penalty(spec: RiskSpec, Q: Measure, method: str = "auto", tol: float = 1e-10) -> float:
    """Minimal penalty ``sup_X (E_Q[-X] - rho(X))`` of ``Q``.

    On a finite space this conjugate is the linear program
    ``min sum lam_n alpha_n`` over convex weights with ``sum lam_n Q_n = Q``
    and is ``inf`` when ``Q`` lies outside the convex hull of the
    finite-penalty members.  ``method`` is ``"enumerate"`` (basic feasible
    solutions), ``"lp"`` (interior point) or ``"auto"`` (enumerate up to
    12 members).
    """
    check_same_space(Q, spec.scenarios)
    if not Q.is_probability():
        raise ValueError(f"Q has mass {Q.mass!r}, not a probability measure")
    W, alpha = spec._W, spec._alpha
    if method == "auto":
        method = "enumerate" if W.shape[0] <= ENUMERATION_LIMIT else "lp"
    if method == "enumerate":
        return _penalty_enumerate(W, alpha, Q.weights, tol)
    if method == "lp":
        return _penalty_lp(W, alpha, Q.weights, tol)
    raise ValueError(f"unknown method {method!r}")


def minimal_penalties(spec: RiskSpec, **kw) -> np.ndarray:
    return np.array([penalty(spec, q, **kw) for q in spec.scenarios])


def rerepresent(spec: RiskSpec, **kw) -> RiskSpec:
    """Same members with every penalty replaced by its minimal value."""
    return RiskSpec(spec.scenarios.with_penalties(minimal_penalties(spec, **kw)), spec.normalized)


# --------------------------------------------------------------------------
# minimal sublinear majorant


def rho_min(spec: RiskSpec, X: Payoff) -> float:
    """``sup_{lam > 0} rho(lam X) / lam``, i.e. ``max_n E_{Q_n}[-X]``."""
    _require_normalized(spec)
    check_same_space(X, spec.scenarios)
    return float(np.max(weighted_sum(spec._W, -X.values)))


@dataclass(frozen=True)
class RhoMinDiagnostic:
    value: float
    lambdas: tuple
    ratios: tuple
    monotone: bool
    gap: float  # value minus the last ratio
    bound: float  # max alpha / max lambda, the largest admissible gap

    @property
    def converged(self) -> bool:
        return self.monotone and -ATOL <= self.gap <= self.bound + ATOL


def rho_min_diagnostic(spec: RiskSpec, X: Payoff, lambdas=LAMBDA_GRID) -> RhoMinDiagnostic:
    """Evaluate ``rho(lam X) / lam`` on a geometric grid next to the closed form."""
    value = rho_min(spec, X)
    ratios = tuple(rho(spec, lam * X) / lam for lam in lambdas)
    scale = ATOL * max(1.0, float(np.max(np.abs(X.values))))
    monotone = all(b >= a - scale for a, b in zip(ratios, ratios[1:]))
    bound = float(np.max(spec._alpha)) / lambdas[-1]
    return RhoMinDiagnostic(value, tuple(lambdas), ratios, monotone, value - ratios[-1], bound)


def canonical_capacity(spec: RiskSpec, X: Payoff) -> float:
    """``rho_min(-|X|)``."""
    return rho_min(spec, -abs(X))


# --------------------------------------------------------------------------
# riskless payoffs


class RisklessResult(NamedTuple):
    riskless: bool
    witness: tuple | None  # (lam, member index) with rho(lam X) > 0


def riskless(spec: RiskSpec, X: Payoff) -> RisklessResult:
    """Whether the non-positive payoff ``X`` has ``rho(lam X) = 0`` for all ``lam > 0``.

    This holds iff ``X`` vanishes on the support of every finite-penalty
    member.  Otherwise the witness is the smallest ``lam = 2^k``
    (``k >= -10``) with ``rho(lam X) > 0`` and the member attaining it.
    """
    _require_normalized(spec)
    check_same_space(X, spec.scenarios)
    bad = spec.scenarios.charged_mask & (X.values > 0)
    if np.any(bad):
        o = spec.space.outcomes[int(np.argmax(bad))]
        raise ValueError(f"riskless check needs X <= 0 on charged outcomes; X({o!r}) > 0")
    charged = np.any(spec._W > 0, axis=0)
    if np.all(X.values[charged] == 0):
        return RisklessResult(True, None)
    e = weighted_sum(spec._W, -X.values)
    best = math.inf
    for en, an in zip(e, spec._alpha):
        if en <= 0:
            continue
        k = -10 if an <= 0 else max(-10, math.floor(math.log2(an) - math.log2(en)) + 1)
        while k <= 1023 and math.ldexp(en, k) - an <= 0:
            k += 1
        if k <= 1023:
            best = min(best, math.ldexp(1.0, k))
    if math.isinf(best):
        # mathematically some lam works, but none is representable
        return RisklessResult(False, None)
    idx, _ = maximizer(spec, best * X)
    assert rho(spec, best * X) > 0
    return RisklessResult(False, (best, idx))


def reference_measure(spec: RiskSpec) -> Measure:
    """``P/2 + sum_n Q_n / 2^(n+2)`` over the finite-penalty members.

    ``P`` is the canonical measure of those members; the tail mass of the
    geometric series goes to the last member.  Every finite-penalty member
    is absolutely continuous with respect to the result.
    """
    fin = spec.scenarios.finite_part()
    P = canonical_measure(fin)
    w = geometric_weights(len(fin)) / 2.0
    return mixture([(0.5, P), *zip(w, fin.measures)], probability=True)


# --------------------------------------------------------------------------
# axiom checks


@dataclass
class AxiomVerdict:
    name: str
    passed: bool = True
    max_violation: float = 0.0
    checks: int = 0
    witness: dict | None = None

    def record(self, excess: float, tol: float, witness: dict):
        self.checks += 1
        if excess > self.max_violation:
            self.max_violation = float(excess)
            if excess > tol:
                self.passed = False
                self.witness = witness


@dataclass
class AxiomReport:
    verdicts: dict
    trials: int
    tol: float

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts.values())

    def failures(self) -> list[AxiomVerdict]:
        return [v for v in self.verdicts.values() if not v.passed]

    def __getitem__(self, name: str) -> AxiomVerdict:
        return self.verdicts[name]


AXIOMS = ("monotonicity", "translation", "convexity", "normalization", "lipschitz")


def grid_capacity(rho_like: Callable[[Payoff], float], lambdas=LAMBDA_GRID):
    """``X -> max_lam rho(-lam |X|) / lam``: a lower estimate of ``c_rho``."""

    def c(X: Payoff) -> float:
        neg = -abs(X)
        return max(rho_like(lam * neg) / lam for lam in lambdas)

    return c


def _random_payoff(rng: np.random.Generator, m: int) -> np.ndarray:
    kind = rng.integers(4)
    scale = 10.0 ** rng.uniform(-2, 2)
    if kind == 0:
        return scale * rng.standard_normal(m)
    if kind == 1:
        return rng.integers(-3, 4, size=m).astype(float)
    if kind == 2:
        v = scale * rng.standard_normal(m)
        v[rng.random(m) < 0.5] = 0.0
        return v
    return scale * rng.uniform(-1, 1) + rng.uniform(-1e-3, 1e-3, size=m)


def verify_axioms(
    rho_like: Callable[[Payoff], float],
    space: OutcomeSpace,
    trials: int = 200,
    tol: float = 1e-10,
    *,
    seed: int = 0,
    capacity: Callable[[Payoff], float] | None = None,
    normalized: bool = True,
) -> AxiomReport:
    """Search for violations of the convex risk measure axioms.

    Checks monotonicity (``X <= Y`` pointwise implies ``rho(X) >= rho(Y)``),
    translation invariance, convexity, ``rho(0) = 0`` (when ``normalized``)
    and the Lipschitz estimate ``|rho(X) - rho(Y)| <= c(X - Y)``.  ``capacity``
    defaults to :func:`grid_capacity`, which underestimates ``c_rho`` by at
    most ``max alpha / 2^20`` for dual-form functionals.  Every failing
    verdict carries the payoffs and scalars that witness it.
    """
    rng = np.random.default_rng(seed)
    m = len(space)
    cap = capacity or grid_capacity(rho_like)
    names = AXIOMS if normalized else tuple(a for a in AXIOMS if a != "normalization")
    v = {name: AxiomVerdict(name) for name in names}

    def ev(f, X):
        try:
            return float(f(X))
        except Exception as exc:
            raise AxiomEvaluationError(X, exc) from exc

    if normalized:
        zero = Payoff(space, np.zeros(m))
        v["normalization"].record(abs(ev(rho_like, zero)), tol, {"X": zero})

    corners = [np.zeros(m), np.ones(m), -np.ones(m)]
    corners += [np.eye(m)[i] for i in range(min(m, 8))]
    for t in range(trials):
        if t < len(corners):
            x = corners[t]
        else:
            x = _random_payoff(rng, m)
        y = _random_payoff(rng, m)
        X, Y = Payoff(space, x), Payoff(space, y)
        rx, ry = ev(rho_like, X), ev(rho_like, Y)

        bump = np.abs(_random_payoff(rng, m))
        bump[rng.random(m) < 0.3] = 0.0
        Z = Payoff(space, x + bump)
        v["monotonicity"].record(ev(rho_like, Z) - rx, tol, {"X": X, "Y": Z})

        a = float(rng.choice([0.0, 1.0, -1.0])) if t % 5 == 0 else float(
            10.0 ** rng.uniform(-2, 2) * rng.choice([-1.0, 1.0])
        )
        v["translation"].record(abs(ev(rho_like, X + a) - (rx - a)), tol, {"X": X, "a": a})

        lam = float(rng.choice([0.0, 0.5, 1.0])) if t % 7 == 0 else float(rng.uniform())
        mix = Payoff(space, lam * x + (1.0 - lam) * y)
        v["convexity"].record(
            ev(rho_like, mix) - (lam * rx + (1.0 - lam) * ry), tol, {"X": X, "Y": Y, "lambda": lam}
        )

        v["lipschitz"].record(abs(rx - ry) - ev(cap, X - Y), tol, {"X": X, "Y": Y})

    return AxiomReport(v, trials, tol)


# --------------------------------------------------------------------------
# entropic oracle


def entropic_oracle(P: Measure, theta: float, X: Payoff) -> float:
    """``(1/theta) log E_P exp(-theta X)`` in closed form."""
    check_same_space(P, X)
    if not theta > 0:
        raise ValueError("theta must be positive")
    if not P.is_probability():
        raise ValueError("P must be a probability measure")
    return float(logsumexp(-theta * X.values, b=P.weights)) / theta


def simplex_grid(n: int, resolution: int) -> np.ndarray:
    """All points of the ``n``-simplex with coordinates in ``(1/resolution) Z``."""
    k = int(resolution)
    rows = []
    for bars in itertools.combinations(range(k + n - 1), n - 1):
        edges = (-1, *bars, k + n - 1)
        rows.append([b - a - 1 for a, b in zip(edges, edges[1:])])
    return np.array(rows, dtype=float) / k


def simplex_resolution(n: int, points: int) -> int:
    """Smallest resolution whose simplex grid has at least ``points`` points."""
    k = 1
    while math.comb(k + n - 1, n - 1) < points:
        k += 1
    return k


def entropic_spec(P: Measure, theta: float, resolution: int) -> RiskSpec:
    """Dual-form spec over a simplex grid with penalties ``H(Q | P) / theta``.

    Its ``rho`` is a lower approximation of :func:`entropic_oracle` that
    tightens as the grid refines.  Grid points not absolutely continuous
    w.r.t. ``P`` get penalty ``inf``.
    """
    if not theta > 0:
        raise ValueError("theta must be positive")
    grid = simplex_grid(len(P.space), resolution)
    pen = rel_entr(grid, P.weights).sum(axis=1) / theta
    members = tuple(Measure(P.space, g) for g in grid)
    return RiskSpec(ScenarioSet(P.space, members, pen), normalized=False)

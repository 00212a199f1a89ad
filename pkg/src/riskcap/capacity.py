"""Capacity seminorms generated by a scenario set.

``capacity(X, S, p)`` is the exact finite maximum of ``E_Q(|X|^p)^(1/p)``
over the members of ``S``.  The module also covers indicator capacities of
open and closed subsets of the real line (through monotone continuous
approximations), the Dirac counterexample on ``[0, 1]``, greedy scenario
reduction and the canonical reference measure.
"""

from __future__ import annotations

import math
import warnings
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

from .scenario import (
    ATOL,
    Measure,
    OutcomeSpace,
    Payoff,
    ScenarioSet,
    _check_p,
    check_same_space,
    mixture,
    weighted_sum,
)


class BoundaryAtomWarning(UserWarning):
    """A charged atom sits on the boundary of a closed set descriptor."""


def _member_values(X: Payoff, S: ScenarioSet, p: float) -> np.ndarray:
    check_same_space(X, S)
    p = _check_p(p)
    return weighted_sum(S.matrix, np.abs(X.values) ** p) ** (1.0 / p)


def capacity_argmax(X: Payoff, S: ScenarioSet, p: float = 1.0) -> tuple[float, int]:
    """Capacity together with the lowest attaining member index."""
    vals = _member_values(X, S, p)
    i = int(np.argmax(vals))
    return float(vals[i]), i


def capacity(X: Payoff, S: ScenarioSet, p: float = 1.0) -> float:
    """``max_n E_{Q_n}(|X|^p)^(1/p)``."""
    return capacity_argmax(X, S, p)[0]


# --------------------------------------------------------------------------
# indicator capacities on real-embedded spaces


@dataclass(frozen=True)
class SetDescriptor:
    """Finite union of disjoint real intervals, open or closed.

    ``atoms`` (open kind only) removes a strictly decreasing atom sequence
    from the intervals; ``limit`` is the point the sequence accumulates at.
    """

    kind: Literal["open", "closed"]
    intervals: tuple
    atoms: tuple | None = None
    limit: float | None = None

    def __post_init__(self):
        if self.kind not in ("open", "closed"):
            raise ValueError(f"kind must be 'open' or 'closed', got {self.kind!r}")
        ivs = tuple((float(lo), float(hi)) for lo, hi in self.intervals)
        for lo, hi in ivs:
            if math.isnan(lo) or math.isnan(hi):
                raise ValueError("interval endpoints must not be NaN")
            if self.kind == "open" and not lo < hi:
                raise ValueError(f"open interval ({lo}, {hi}) is empty")
            if self.kind == "closed" and not (lo <= hi and math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError(f"closed interval [{lo}, {hi}] must be finite and ordered")
        for (_, hi), (lo, _) in zip(ivs, ivs[1:]):
            if lo < hi or (self.kind == "closed" and lo == hi):
                raise ValueError("intervals must be ordered and disjoint")
        object.__setattr__(self, "intervals", ivs)
        if self.atoms is not None:
            if self.kind != "open":
                raise ValueError("atom removal is only supported for open descriptors")
            atoms = tuple(float(a) for a in self.atoms)
            if any(b >= a for a, b in zip(atoms, atoms[1:])):
                raise ValueError("atoms must be strictly decreasing")
            if self.limit is not None and atoms and not atoms[-1] > self.limit:
                raise ValueError("atoms must decrease towards the limit point")
            object.__setattr__(self, "atoms", atoms)

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        inside = np.zeros(x.shape, dtype=bool)
        for lo, hi in self.intervals:
            if self.kind == "open":
                inside |= (x > lo) & (x < hi)
            else:
                inside |= (x >= lo) & (x <= hi)
        if self.atoms:
            inside &= ~np.isin(x, self.atoms)
        return inside

    def depth(self, x: np.ndarray) -> np.ndarray:
        """Distance to the complement for points of an open set (0 outside)."""
        x = np.asarray(x, dtype=float)
        d = np.zeros(x.shape)
        for lo, hi in self.intervals:
            inside = (x > lo) & (x < hi)
            d = np.where(inside, np.minimum(x - lo, hi - x), d)
        if self.atoms:
            to_atoms = np.min(np.abs(x[..., None] - np.asarray(self.atoms)), axis=-1)
            d = np.minimum(d, to_atoms)
        return d

    def distance(self, x: np.ndarray) -> np.ndarray:
        """Distance to a closed set (0 inside)."""
        x = np.asarray(x, dtype=float)
        d = np.full(x.shape, np.inf)
        for lo, hi in self.intervals:
            d = np.minimum(d, np.maximum(0.0, np.maximum(lo - x, x - hi)))
        return d

    def on_boundary(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        ends = [e for iv in self.intervals for e in iv]
        return np.isin(x, ends)


@dataclass(frozen=True)
class IndicatorCapacity:
    value: float  # sup_Q Q(D)^(1/p)
    monotone_limit: float  # c(h_n) or c(g_n) at the stabilization step
    stabilization_step: int | None
    stabilized: bool
    boundary_atoms: tuple = ()


def _first_stable(thresholds: Iterable[int], c_of_n, target: float, increasing: bool):
    cands = sorted({1, *(t for t in thresholds if t is not None)})
    for n in cands:
        c = c_of_n(n)
        if (c >= target) if increasing else (c <= target):
            return n, c
    return None, c_of_n(cands[-1])


def _ceil_inv(d: float) -> int | None:
    """Smallest ``n`` with ``n * d >= 1`` in floating point, or ``None``
    when no representable ``n`` exists (subnormal ``d``)."""
    n = max(1, math.ceil(Fraction(1) / Fraction(d)))
    if n > 2**1023:
        return None
    while n * d < 1.0:
        # unit steps stall once n exceeds 2**53
        n = max(n + 1, math.ceil(math.nextafter(float(n), math.inf)))
    return n


def indicator_capacity(D: SetDescriptor, S: ScenarioSet, p: float = 1.0) -> IndicatorCapacity:
    """Capacity of the indicator of an open or closed set.

    For an open ``V`` the increasing piecewise-linear functions
    ``h_n = min(1, n * dist(., V^c))`` are used, for a closed ``F`` the
    decreasing ``g_n = max(0, 1 - n * dist(., F))``.  The reported
    stabilization step is the first ``n`` at which ``c(h_n)`` (resp.
    ``c(g_n)``) reaches ``sup_Q Q(D)^(1/p)``.
    """
    p = _check_p(p)
    if not S.space.is_real:
        raise ValueError("indicator capacities need an outcome space embedded in the reals")
    if D.atoms and D.limit is not None and D.contains(np.array([D.limit]))[0]:
        raise ValueError(
            "the atom sequence accumulates inside the set, which is then neither open nor "
            "closed; see dirac_counterexample"
        )
    x = S.space.points
    charged = S.charged_mask
    value = capacity(Payoff(S.space, D.contains(x).astype(float)), S, p)

    def cap(vals):
        return capacity(Payoff(S.space, vals), S, p)

    if D.kind == "open":
        depth = D.depth(x)
        thresholds = [_ceil_inv(d) for d in depth[charged & (depth > 0)]]
        n, limit = _first_stable(
            thresholds, lambda n: cap(np.minimum(1.0, float(n) * depth)), value, increasing=True
        )
        return IndicatorCapacity(value, limit, n, n is not None)

    dist = D.distance(x)
    thresholds = [_ceil_inv(d) for d in dist[charged & (dist > 0)]]
    n, limit = _first_stable(
        thresholds, lambda n: cap(np.maximum(0.0, 1.0 - float(n) * dist)), value, increasing=False
    )
    boundary = tuple(o for o, b in zip(S.space.outcomes, D.on_boundary(x) & charged) if b)
    if boundary:
        warnings.warn(
            f"boundary atom(s) {boundary!r}: indicator value {value!r}, "
            f"monotone limit {limit!r}",
            BoundaryAtomWarning,
            stacklevel=2,
        )
    return IndicatorCapacity(value, limit, n, n is not None, boundary)


# --------------------------------------------------------------------------
# the Dirac counterexample


@dataclass(frozen=True)
class Majorant:
    """Lower semi-continuous ``f`` with ``1_A <= f <= 1`` on ``[0, 1]``.

    ``f`` equals 1 off the atoms ``x_n = 1/(n+1)``.  At atom ``n`` it dips to
    ``1 - d_n`` with ``d_n = max(head[n], tail_scale * tail_rate**n)``.
    Head dips are finitely many and the tail vanishes, so ``f(x_n) -> 1``,
    which is exactly lower semi-continuity at 0.
    """

    head: tuple = ()  # (atom index >= 1, depth in [0, 1]) pairs
    tail_scale: float = 0.0
    tail_rate: float = 0.0

    def __post_init__(self):
        for n, depth in self.head:
            if n < 1 or not 0.0 <= depth <= 1.0:
                raise ValueError(f"bad head dip ({n}, {depth})")
        if not 0.0 <= self.tail_scale <= 1.0 or not 0.0 <= self.tail_rate < 1.0:
            raise ValueError("tail dips need scale in [0, 1] and rate in [0, 1)")

    def dips(self, N: int) -> np.ndarray:
        n = np.arange(1, N + 1, dtype=float)
        d = self.tail_scale * self.tail_rate**n
        for k, depth in self.head:
            if k <= N:
                d[k - 1] = max(d[k - 1], depth)
        return d

    def last_deep_dip(self, eta: float) -> int:
        """Largest atom index with dip ``>= eta`` (0 if there is none)."""
        last = max((n for n, depth in self.head if depth >= eta), default=0)
        if self.tail_scale >= eta and self.tail_rate > 0.0:
            # tail_scale * rate**n >= eta  <=>  n <= log(eta/scale) / log(rate)
            k = math.floor(math.log(eta / self.tail_scale) / math.log(self.tail_rate))
            while k >= 1 and self.tail_scale * self.tail_rate**k < eta:
                k -= 1
            while self.tail_scale * self.tail_rate ** (k + 1) >= eta:
                k += 1
            last = max(last, k)
        return last


@dataclass(frozen=True)
class CounterexampleReport:
    eta: float
    capacity_lower_bound: float
    sup_measure_of_A: float
    witness_index: int
    n_atoms: int
    family_size: int
    excluded: int = 0
    certificates: tuple = field(default=(), repr=False)

    def as_dict(self) -> dict:
        return {
            "eta": self.eta,
            "n_atoms": self.n_atoms,
            "sup_measure_of_A": self.sup_measure_of_A,
            "capacity_lower_bound": self.capacity_lower_bound,
            "witness_index": self.witness_index,
            "family_size": self.family_size,
            "excluded": self.excluded,
        }


def default_majorants(eta: float, N: int) -> list[Majorant]:
    heads = []
    for m in sorted({0, 1, 2, N // 10, N // 4, N // 2, N - 1}):
        for depth in (1.0, 0.5 * (1.0 + eta), eta):
            heads.append(tuple((k, depth) for k in range(1, m + 1)))
    tails = [(0.0, 0.0)] + [
        (t, r) for t in (eta, 0.5, 1.0) for r in (0.5, 0.9, 0.99, eta ** (2.0 / N))
    ]
    return [Majorant(h, t, r) for h in dict.fromkeys(heads) for t, r in tails]


def dirac_counterexample(
    eta: float, N: int = 500, p: float = 1.0, family: Sequence[Majorant] | None = None
) -> CounterexampleReport:
    """Borel set whose capacity is not the sup of its member measures.

    Scenarios are ``delta_{x_n}`` with ``x_n = 1/(n+1)``, ``n = 1..N`` and
    ``A = [0, 1]`` minus the atoms, so every member gives ``A`` mass 0.  For
    each candidate l.s.c. majorant ``f >= 1_A`` the set ``{f > 1 - eta}`` is
    open and contains 0, hence an interval ``[0, x_m)`` and the atom
    ``x_{m+1}``; the report records the smallest ``max_n f(x_n)`` seen.
    """
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    if N < 2:
        raise ValueError("need at least two atoms")
    _check_p(p)
    atoms = 1.0 / (np.arange(1, N + 1) + 1.0)
    space = OutcomeSpace(["0", *(f"x{n}" for n in range(1, N + 1)), "1"], [0.0, *atoms, 1.0])
    members = tuple(Measure.dirac(space, f"x{n}") for n in range(1, N + 1))
    S = ScenarioSet(space, members)
    in_A = np.ones(len(space), dtype=bool)
    in_A[1 : N + 1] = False
    sup_A = max(float(weighted_sum(q.weights, in_A.astype(float))) for q in members)

    family = default_majorants(eta, N) if family is None else list(family)
    if not family:
        raise ValueError("empty majorant family")
    best, best_witness, excluded, certs = math.inf, 0, 0, []
    for f in family:
        witness = f.last_deep_dip(eta) + 1
        if witness > N:
            excluded += 1
            continue
        vals = np.ones(len(space))
        vals[1 : N + 1] = 1.0 - f.dips(N)
        cap = capacity(Payoff(space, vals), S, p)
        fw = vals[witness]
        if not fw > 1.0 - eta or cap < fw:
            raise AssertionError(f"certificate failed for {f}: f(x_{witness}) = {fw}")
        certs.append((witness, float(fw), cap))
        if cap < best:
            best, best_witness = cap, witness
    if not certs:
        raise ValueError("every majorant dips beyond the truncation horizon N")
    return CounterexampleReport(
        eta=float(eta),
        capacity_lower_bound=float(best),
        sup_measure_of_A=sup_A,
        witness_index=best_witness,
        n_atoms=N,
        family_size=len(certs),
        excluded=excluded,
        certificates=tuple(certs),
    )


# --------------------------------------------------------------------------
# reduction


@dataclass(frozen=True)
class TestBank:
    """Finite family of test payoffs on one space."""

    __test__ = False  # keep pytest from collecting this class

    payoffs: tuple

    def __post_init__(self):
        payoffs = tuple(self.payoffs)
        if not payoffs:
            raise ValueError("test bank must be non-empty")
        check_same_space(*payoffs)
        if all(np.ptp(f.values) == 0 for f in payoffs):
            raise ValueError("test bank needs at least one non-constant payoff")
        object.__setattr__(self, "payoffs", payoffs)

    def __len__(self) -> int:
        return len(self.payoffs)

    @property
    def space(self) -> OutcomeSpace:
        return self.payoffs[0].space

    def features(self, S: ScenarioSet) -> np.ndarray:
        """Per member: ``E f`` and ``E |f|`` for every bank payoff."""
        check_same_space(self.payoffs[0], S)
        cols = []
        for f in self.payoffs:
            cols.append(weighted_sum(S.matrix, f.values))
            cols.append(weighted_sum(S.matrix, np.abs(f.values)))
        return np.column_stack(cols)


@dataclass(frozen=True)
class ReductionResult:
    indices: tuple
    achieved_error: float
    bank_size: int


def scenario_distances(S: ScenarioSet, bank: TestBank) -> np.ndarray:
    """Pairwise ``max_f |E_Q f - E_R f|`` over the bank and its absolute values."""
    F = bank.features(S)
    return np.max(np.abs(F[:, None, :] - F[None, :, :]), axis=-1)


def reduce(S: ScenarioSet, bank: TestBank, eps: float) -> ReductionResult:
    """Greedy farthest-point ``eps``-net of the members of ``S``.

    Starts from member 0 and repeatedly adds the member farthest from the
    current net (lowest index on ties) until every member is within
    ``eps``.  Since ``E|f|`` is among the features, the reduced set
    reproduces ``capacity(f, ., 1)`` within ``eps`` on every bank payoff.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    F = bank.features(S)
    chosen = [0]
    gap = np.max(np.abs(F - F[0]), axis=1)
    while True:
        i = int(np.argmax(gap))
        if gap[i] <= eps:
            break
        chosen.append(i)
        gap = np.minimum(gap, np.max(np.abs(F - F[i]), axis=1))
    return ReductionResult(tuple(sorted(chosen)), float(gap.max()), len(bank))


# --------------------------------------------------------------------------
# canonical reference measure


def geometric_weights(n: int) -> np.ndarray:
    """``2^-(k+1)`` for ``k = 1..n-1``, the remaining mass on the last member."""
    if n < 1:
        raise ValueError("need at least one member")
    w = np.ldexp(1.0, -np.arange(2, n + 1))
    return np.append(w, 1.0 - math.fsum(w))


def null_sets_agree(P: Measure, S: ScenarioSet, payoffs: Iterable[Payoff] | None = None) -> bool:
    """Whether ``E_P X = 0  <=>  capacity(X, S, 1) = 0`` for the given
    non-negative payoffs (default: every outcome indicator)."""
    check_same_space(P, S)
    if payoffs is None:
        payoffs = [Payoff.indicator(S.space, [o]) for o in S.space]
    for X in payoffs:
        if np.any(X.values < 0):
            raise ValueError("null-set check needs non-negative payoffs")
        p_null = float(weighted_sum(P.weights, X.values)) == 0.0
        c_null = capacity(X, S, 1.0) == 0.0
        if p_null != c_null:
            return False
    return True


def canonical_measure(
    S: ScenarioSet, weights: Sequence[float] | None = None, verify: bool = False
) -> Measure:
    """Mixture ``sum a_n Q_n`` with strictly positive weights summing to 1."""
    if weights is None:
        w = geometric_weights(len(S))
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(S),):
            raise ValueError(f"need {len(S)} weights, got {w.size}")
        if np.any(~(w > 0)):
            raise ValueError("canonical weights must be strictly positive")
        if abs(math.fsum(w) - 1.0) > ATOL:
            raise ValueError(f"canonical weights sum to {math.fsum(w)!r}, expected 1")
    P = mixture(list(zip(w, S.measures)), probability=True)
    if verify and not null_sets_agree(P, S):
        raise AssertionError("canonical measure does not reproduce the capacity null sets")
    return P

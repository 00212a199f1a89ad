"""Finite outcome spaces, measures, payoffs and scenario sets.

Everything here is immutable after construction.  Weights and values are
stored as dense float64 vectors aligned with ``OutcomeSpace.outcomes`` so
that every expectation in the package goes through :func:`weighted_sum`
and is computed with one summation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

ATOL = 1e-12
PROB_TOL = 1e-9


class SpaceMismatchError(ValueError):
    """Two objects that must live on one outcome space do not."""


class NotInDualConeError(ValueError):
    """A measure charges an outcome that no scenario charges."""

    def __init__(self, outcome, message=None):
        self.outcome = outcome
        super().__init__(
            message
            or f"measure not in dual cone: outcome {outcome!r} is charged but has zero capacity"
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def weighted_sum(weights: np.ndarray, values: np.ndarray) -> np.ndarray | float:
    """Row-wise ``sum(weights * values)``.

    ``weights`` may be a vector or a matrix with one measure per row; a row
    of a matrix and the same row passed alone give bit-identical results.
    """
    return np.multiply(weights, values).sum(axis=-1)


class OutcomeSpace:
    """Ordered finite set of outcome identifiers with an optional embedding.

    ``points`` is either ``None``, a length-``m`` vector of reals, or an
    array of shape ``(m, K, d)`` holding one discrete path per outcome.
    """

    __slots__ = ("outcomes", "points", "_index", "_hash")

    def __init__(self, outcomes: Iterable, points=None):
        outcomes = tuple(outcomes)
        if not outcomes:
            raise ValueError("outcome space must be non-empty")
        index = {o: i for i, o in enumerate(outcomes)}
        if len(index) != len(outcomes):
            seen = set()
            dup = next(o for o in outcomes if o in seen or seen.add(o))
            raise ValueError(f"duplicate outcome identifier {dup!r}")
        if points is not None:
            if isinstance(points, Mapping):
                missing = [o for o in outcomes if o not in points]
                if missing:
                    raise ValueError(f"embedding is not total: no point for {missing[0]!r}")
                points = [points[o] for o in outcomes]
            points = _frozen(points)
            if points.shape[0] != len(outcomes) or points.ndim not in (1, 3):
                raise ValueError(
                    "points must have shape (m,) for real embeddings or (m, K, d) for paths"
                )
            if not np.all(np.isfinite(points)):
                raise ValueError("embedding points must be finite")
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_hash", hash(outcomes))

    def __setattr__(self, name, value):
        raise AttributeError("OutcomeSpace is immutable")

    def __len__(self) -> int:
        return len(self.outcomes)

    def __iter__(self):
        return iter(self.outcomes)

    def __contains__(self, outcome) -> bool:
        return outcome in self._index

    def __eq__(self, other) -> bool:
        if self is other:
            return True
        if not isinstance(other, OutcomeSpace) or self.outcomes != other.outcomes:
            return False
        if self.points is None or other.points is None:
            return self.points is None and other.points is None
        return self.points.shape == other.points.shape and bool(
            np.array_equal(self.points, other.points)
        )

    def __hash__(self) -> int:
        return self._hash

    def __repr__(self) -> str:
        head = ", ".join(map(repr, self.outcomes[:4]))
        more = ", ..." if len(self) > 4 else ""
        return f"OutcomeSpace([{head}{more}], n={len(self)})"

    def index(self, outcome) -> int:
        try:
            return self._index[outcome]
        except KeyError:
            raise KeyError(f"unknown outcome {outcome!r}") from None

    @property
    def is_real(self) -> bool:
        return self.points is not None and self.points.ndim == 1

    @property
    def is_path(self) -> bool:
        return self.points is not None and self.points.ndim == 3


def check_same_space(*objs) -> OutcomeSpace:
    space = objs[0].space
    for obj in objs[1:]:
        if obj.space is not space and obj.space != space:
            raise SpaceMismatchError(
                f"{type(obj).__name__} lives on a different outcome space than "
                f"{type(objs[0]).__name__}"
            )
    return space


def _check_p(p: float) -> float:
    p = float(p)
    if not p >= 1.0:
        raise ValueError(f"p must be >= 1, got {p}")
    return p


def _dense(space: OutcomeSpace, mapping: Mapping, what: str, total: bool) -> np.ndarray:
    out = np.zeros(len(space))
    for key, val in mapping.items():
        out[space.index(key)] = float(val)
    if total:
        missing = [o for o in space if o not in mapping]
        if missing:
            raise ValueError(f"{what} is not total: no value for outcome {missing[0]!r}")
    return out


@dataclass(frozen=True, eq=False)
class Measure:
    """Finitely supported non-negative measure on an :class:`OutcomeSpace`."""

    space: OutcomeSpace
    weights: np.ndarray

    def __post_init__(self):
        w = _frozen(self.weights)
        if w.shape != (len(self.space),):
            raise ValueError(f"expected {len(self.space)} weights, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("measure weights must be finite")
        if np.any(w < 0):
            bad = self.space.outcomes[int(np.argmax(w < 0))]
            raise ValueError(f"negative weight on outcome {bad!r}")
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_mapping(cls, space: OutcomeSpace, weights: Mapping) -> Measure:
        """Build from ``{outcome: weight}``; absent outcomes get weight 0."""
        return cls(space, _dense(space, weights, "measure", total=False))

    @classmethod
    def dirac(cls, space: OutcomeSpace, outcome) -> Measure:
        w = np.zeros(len(space))
        w[space.index(outcome)] = 1.0
        return cls(space, w)

    @classmethod
    def uniform(cls, space: OutcomeSpace) -> Measure:
        return cls(space, np.full(len(space), 1.0 / len(space)))

    @property
    def mass(self) -> float:
        return math.fsum(self.weights)

    @cached_property
    def support_mask(self) -> np.ndarray:
        m = self.weights > 0
        m.setflags(write=False)
        return m

    @property
    def support(self) -> tuple:
        return tuple(o for o, s in zip(self.space.outcomes, self.support_mask) if s)

    def is_probability(self, tol: float = PROB_TOL) -> bool:
        return abs(self.mass - 1.0) <= tol

    def __mul__(self, c: float) -> Measure:
        return Measure(self.space, float(c) * self.weights)

    __rmul__ = __mul__

    def __getitem__(self, outcome) -> float:
        return float(self.weights[self.space.index(outcome)])

    def as_dict(self, drop_zero: bool = True) -> dict:
        return {
            o: float(w) for o, w in zip(self.space.outcomes, self.weights) if w or not drop_zero
        }

    def __repr__(self) -> str:
        return f"Measure({self.as_dict()})"


@dataclass(frozen=True, eq=False)
class Payoff:
    """Total real-valued function on an :class:`OutcomeSpace`."""

    space: OutcomeSpace
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.shape != (len(self.space),):
            raise ValueError(f"expected {len(self.space)} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            bad = self.space.outcomes[int(np.argmax(~np.isfinite(v)))]
            raise ValueError(f"payoff value at {bad!r} is not finite")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_mapping(cls, space: OutcomeSpace, values: Mapping) -> Payoff:
        """Build from ``{outcome: value}``; every outcome must be present."""
        return cls(space, _dense(space, values, "payoff", total=True))

    @classmethod
    def constant(cls, space: OutcomeSpace, c: float) -> Payoff:
        return cls(space, np.full(len(space), float(c)))

    @classmethod
    def indicator(cls, space: OutcomeSpace, outcomes: Iterable) -> Payoff:
        v = np.zeros(len(space))
        for o in outcomes:
            v[space.index(o)] = 1.0
        return cls(space, v)

    def _values_of(self, other):
        if isinstance(other, Payoff):
            check_same_space(self, other)
            return other.values
        return float(other)

    def __add__(self, other) -> Payoff:
        return Payoff(self.space, self.values + self._values_of(other))

    __radd__ = __add__

    def __sub__(self, other) -> Payoff:
        return Payoff(self.space, self.values - self._values_of(other))

    def __rsub__(self, other) -> Payoff:
        return Payoff(self.space, self._values_of(other) - self.values)

    def __mul__(self, c: float) -> Payoff:
        return Payoff(self.space, float(c) * self.values)

    __rmul__ = __mul__

    def __neg__(self) -> Payoff:
        return Payoff(self.space, -self.values)

    def __abs__(self) -> Payoff:
        return Payoff(self.space, np.abs(self.values))

    def __getitem__(self, outcome) -> float:
        return float(self.values[self.space.index(outcome)])

    def as_dict(self) -> dict:
        return {o: float(v) for o, v in zip(self.space.outcomes, self.values)}

    def __repr__(self) -> str:
        return f"Payoff({self.as_dict()})"


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    """Ordered family of probability measures with optional penalties.

    A penalty of ``math.inf`` marks a member that takes no part in dual
    representations; capacities still use every member.
    """

    space: OutcomeSpace
    measures: tuple
    penalties: np.ndarray = None
    labels: tuple = None
    prob_tol: float = field(default=PROB_TOL, repr=False)

    def __post_init__(self):
        measures = tuple(self.measures)
        if not measures:
            raise ValueError("scenario set must be non-empty")
        for i, q in enumerate(measures):
            if not isinstance(q, Measure):
                raise TypeError(f"member {i} is not a Measure")
            if q.space is not self.space and q.space != self.space:
                raise SpaceMismatchError(f"member {i} lives on a different outcome space")
            if not q.is_probability(self.prob_tol):
                raise ValueError(f"member {i} has mass {q.mass!r}, not a probability measure")
        pen = np.zeros(len(measures)) if self.penalties is None else np.array(
            self.penalties, dtype=float
        )
        if pen.shape != (len(measures),):
            raise ValueError("need exactly one penalty per member")
        if np.any(np.isnan(pen)) or np.any(pen < 0):
            raise ValueError("penalties must be non-negative (or +inf)")
        if not np.any(np.isfinite(pen)):
            raise ValueError("at least one member must have a finite penalty")
        pen.setflags(write=False)
        labels = self.labels
        if labels is None:
            labels = tuple(f"Q{i + 1}" for i in range(len(measures)))
        labels = tuple(labels)
        if len(labels) != len(measures):
            raise ValueError("need exactly one label per member")
        object.__setattr__(self, "measures", measures)
        object.__setattr__(self, "penalties", pen)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_measures(
        cls, measures: Sequence[Measure], penalties: Sequence[float] | None = None, **kw
    ) -> ScenarioSet:
        return cls(measures[0].space, tuple(measures), penalties, **kw)

    def __len__(self) -> int:
        return len(self.measures)

    def __iter__(self):
        return iter(self.measures)

    def __getitem__(self, i: int) -> Measure:
        return self.measures[i]

    @cached_property
    def matrix(self) -> np.ndarray:
        """Member weights stacked row-wise, shape ``(n_members, n_outcomes)``."""
        m = np.vstack([q.weights for q in self.measures])
        m.setflags(write=False)
        return m

    @cached_property
    def charged_mask(self) -> np.ndarray:
        """Outcomes charged by at least one member."""
        m = np.any(self.matrix > 0, axis=0)
        m.setflags(write=False)
        return m

    @property
    def charged(self) -> tuple:
        return tuple(o for o, c in zip(self.space.outcomes, self.charged_mask) if c)

    @property
    def finite_mask(self) -> np.ndarray:
        return np.isfinite(self.penalties)

    def subset(self, indices: Iterable[int]) -> ScenarioSet:
        idx = [int(i) for i in indices]
        return ScenarioSet(
            self.space,
            tuple(self.measures[i] for i in idx),
            self.penalties[idx],
            tuple(self.labels[i] for i in idx),
            self.prob_tol,
        )

    def finite_part(self) -> ScenarioSet:
        """Members with finite penalty, original order kept."""
        return self.subset(np.flatnonzero(self.finite_mask))

    def with_penalties(self, penalties: Sequence[float]) -> ScenarioSet:
        return ScenarioSet(self.space, self.measures, penalties, self.labels, self.prob_tol)


# --------------------------------------------------------------------------
# operations


def expectation(Q: Measure, X: Payoff, p: float = 1.0, signed: bool = False) -> float:
    """``E_Q(|X|^p)^(1/p)``, or ``E_Q(X)`` when ``signed`` (``p`` ignored)."""
    check_same_space(Q, X)
    if signed:
        return float(weighted_sum(Q.weights, X.values))
    p = _check_p(p)
    s = float(weighted_sum(Q.weights, np.abs(X.values) ** p))
    return s ** (1.0 / p)


def mixture(parts: Sequence[tuple[float, Measure]], probability: bool = False) -> Measure:
    """Pointwise ``sum(weight * Q)``.

    With ``probability=True`` the result must have unit mass.
    """
    parts = list(parts)
    if not parts:
        raise ValueError("mixture of an empty sequence")
    space = parts[0][1].space
    w = np.zeros(len(space))
    for i, (a, q) in enumerate(parts):
        a = float(a)
        if not (a > 0 and math.isfinite(a)):
            raise ValueError(f"mixture weight {i} must be positive and finite, got {a}")
        if q.space is not space and q.space != space:
            raise SpaceMismatchError(f"mixture part {i} lives on a different outcome space")
        w += a * q.weights
    out = Measure(space, w)
    if probability and not out.is_probability():
        raise ValueError(f"mixture has mass {out.mass!r}, expected 1")
    return out


def is_nonneg(X: Payoff, S: ScenarioSet, atol: float = 0.0) -> bool:
    """``X >= 0`` on every outcome charged by some member of ``S``."""
    check_same_space(X, S)
    return bool(np.all(X.values[S.charged_mask] >= -atol))


def dominance_constant(mu: Measure, S: ScenarioSet, p: float = 1.0) -> float:
    """Smallest ``K`` of the form ``sum mu(w) / max_n Q_n(w)^(1/p)``.

    It satisfies ``|mu(f)| <= K * c_p(f)`` for every payoff ``f``.  Raises
    :class:`NotInDualConeError` when ``mu`` charges an uncharged outcome.
    """
    check_same_space(mu, S)
    p = _check_p(p)
    top = S.matrix.max(axis=0)
    bad = mu.support_mask & (top <= 0)
    if np.any(bad):
        raise NotInDualConeError(S.space.outcomes[int(np.argmax(bad))])
    m = mu.support_mask
    return math.fsum(mu.weights[m] / top[m] ** (1.0 / p))


def capacity_equivalent(mu: Measure, nu: Measure, S: ScenarioSet, p: float = 1.0) -> bool:
    """Whether ``mu`` and ``nu`` have the same null non-negative payoffs.

    Both measures must be dominated by the capacity of ``S``.  On a finite
    space this reduces to equality of supports; the null sets do not depend
    on ``p``.
    """
    check_same_space(mu, nu, S)
    _check_p(p)
    for m in (mu, nu):
        dominance_constant(m, S, p)
    return bool(np.array_equal(mu.support_mask, nu.support_mask))

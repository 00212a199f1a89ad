"""Shared generators for the test suite."""

import numpy as np
from hypothesis import strategies as st

from riskcap import Measure, OutcomeSpace, Payoff, RiskSpec, ScenarioSet


def space(m: int) -> OutcomeSpace:
    return OutcomeSpace([f"w{i + 1}" for i in range(m)])


def random_probability(rng, m: int, sparsity: float = 0.3) -> np.ndarray:
    w = rng.exponential(size=m)
    w[rng.random(m) < sparsity] = 0.0
    if not w.any():
        w[rng.integers(m)] = 1.0
    return w / w.sum()


def random_scenarios(rng, m: int, n: int, penalties: bool = False, sparsity: float = 0.3) -> ScenarioSet:
    sp = space(m)
    members = [Measure(sp, random_probability(rng, m, sparsity)) for _ in range(n)]
    pen = None
    if penalties:
        pen = rng.exponential(size=n)
        pen[rng.integers(n)] = 0.0
        pen[rng.random(n) < 0.15] = np.inf
        pen[int(np.argmin(pen))] = 0.0
    return ScenarioSet(sp, tuple(members), pen)


def random_spec(rng, m: int, n: int) -> RiskSpec:
    return RiskSpec(random_scenarios(rng, m, n, penalties=True))


def random_payoff(rng, sp: OutcomeSpace, scale: float = 3.0) -> Payoff:
    return Payoff(sp, rng.normal(scale=scale, size=len(sp)))


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@st.composite
def scenario_sets(draw, max_outcomes=6, max_members=5, penalties=False):
    seed = draw(st.integers(0, 2**32 - 1))
    m = draw(st.integers(1, max_outcomes))
    n = draw(st.integers(1, max_members))
    return random_scenarios(np.random.default_rng(seed), m, n, penalties)


@st.composite
def payoffs_on(draw, sp: OutcomeSpace):
    return Payoff(sp, np.array(draw(st.lists(finite, min_size=len(sp), max_size=len(sp)))))

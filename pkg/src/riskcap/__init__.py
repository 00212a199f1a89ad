"""Capacities, convex risk measures and G-expectations on finite scenario sets.

The functions :func:`riskcap.capacity.capacity` and :func:`riskcap.gexp.gexp`
share their module's name and are imported from the submodules.
"""

from .scenario import (
    ATOL,
    PROB_TOL,
    Measure,
    NotInDualConeError,
    OutcomeSpace,
    Payoff,
    ScenarioSet,
    SpaceMismatchError,
    capacity_equivalent,
    dominance_constant,
    expectation,
    is_nonneg,
    mixture,
)
from .capacity import (
    BoundaryAtomWarning,
    CounterexampleReport,
    IndicatorCapacity,
    Majorant,
    ReductionResult,
    SetDescriptor,
    TestBank,
    canonical_measure,
    capacity_argmax,
    dirac_counterexample,
    indicator_capacity,
    null_sets_agree,
    reduce,
)
from .risk import (
    AxiomReport,
    RiskSpec,
    canonical_capacity,
    entropic_oracle,
    entropic_spec,
    maximizer,
    minimal_penalties,
    penalty,
    reference_measure,
    rerepresent,
    rho,
    rho_min,
    rho_min_diagnostic,
    riskless,
    verify_axioms,
)
from .gexp import (
    ForeignMeasureError,
    InexactTieWarning,
    LatticeParams,
    LatticeSizeError,
    PathMeasure,
    ScenarioCheckReport,
    VolLattice,
    brute_force_gexp,
    build_lattice,
    export_scenarios,
    verify_scenario,
    worst_measure,
)

__all__ = [name for name in dir() if not name.startswith("_")]

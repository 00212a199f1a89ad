"""Discrete G-expectation on adversarial-volatility lattices.

At every node of a non-recombining tree an adversary picks a volatility
vector from a finite grid; each coordinate of the next increment is then
``+-sigma_i sqrt(dt)`` with probability 1/2, independently across
coordinates.  The adversary sees the whole path so far, so the worst-case
expectation is the backward recursion

    V_K = X,    V_k = max_sigma  mean_signs  V_{k+1}.

Leaves are indexed in mixed radix: at each step the digit is
``j * S + s`` where ``j`` indexes the volatility grid (lexicographic, so
``j = 0`` is the all-lowest vector) and ``s`` the sign combination.
"""

from __future__ import annotations

import itertools
import math
import warnings
from collections.abc import Mapping
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from .scenario import Measure, OutcomeSpace, Payoff, ScenarioSet

MAX_DK = 24
MAX_LEAVES = 2**24
EXPORT_LIMIT = 2**16
CHUNK = 2**17
MARTINGALE_TOL = 1e-12
QV_RTOL = 1e-12

PathFunction = Callable[[np.ndarray], np.ndarray]


class LatticeSizeError(ValueError):
    """The requested lattice or enumeration exceeds a size guard."""


class ForeignMeasureError(ValueError):
    """A path measure does not come from the lattice it is checked against."""


@dataclass(frozen=True)
class LatticeParams:
    steps: int
    horizon: float
    dims: int
    sigma_low: tuple
    sigma_high: tuple
    sigma_grid: tuple = None

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be a positive integer")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.dims not in (1, 2):
            raise ValueError("dims must be 1 or 2")
        lo = tuple(float(s) for s in np.broadcast_to(self.sigma_low, (self.dims,)))
        hi = tuple(float(s) for s in np.broadcast_to(self.sigma_high, (self.dims,)))
        for a, b in zip(lo, hi):
            if not 0 < a <= b:
                raise ValueError(f"need 0 < sigma_low <= sigma_high, got {a}, {b}")
        grid = self.sigma_grid
        if grid is None:
            grid = tuple((a, b) for a, b in zip(lo, hi))
        elif len(grid) and np.isscalar(grid[0]):
            grid = (tuple(grid),) * self.dims
        grid = tuple(tuple(sorted({float(s) for s in g})) for g in grid)
        if len(grid) != self.dims:
            raise ValueError("need one sigma grid per dimension")
        for g, a, b in zip(grid, lo, hi):
            if a not in g or b not in g:
                raise ValueError(f"sigma grid {g} must contain both bounds {a}, {b}")
            if g[0] < a or g[-1] > b:
                raise ValueError(f"sigma grid {g} leaves [{a}, {b}]")
        object.__setattr__(self, "steps", int(self.steps))
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "sigma_low", lo)
        object.__setattr__(self, "sigma_high", hi)
        object.__setattr__(self, "sigma_grid", grid)

    @property
    def dt(self) -> float:
        return self.horizon / self.steps


class VolLattice:
    """Enumerable adversarial-volatility tree (see module docstring)."""

    def __init__(self, params: LatticeParams):
        self.params = params
        self.K = params.steps
        self.d = params.dims
        self.dt = params.dt
        self.sqrt_dt = math.sqrt(self.dt)
        self.sign_table = np.array(list(itertools.product((-1, 1), repeat=self.d)), dtype=float)
        self.sigma_table = np.array(list(itertools.product(*params.sigma_grid)), dtype=float)
        self.S = len(self.sign_table)
        self.J = len(self.sigma_table)
        self.branching = self.S * self.J

    def __repr__(self) -> str:
        p = self.params
        return (
            f"VolLattice(K={p.steps}, T={p.horizon}, d={p.dims}, "
            f"grid={p.sigma_grid}, leaves={self.leaf_count})"
        )

    @property
    def leaf_count(self) -> int:
        return self.branching**self.K

    @property
    def paths_per_strategy(self) -> int:
        return self.S**self.K

    @property
    def decision_nodes(self) -> int:
        """Nodes visited by one strategy where the adversary chooses."""
        return sum(self.S**k for k in range(self.K))

    @property
    def strategy_count(self) -> int:
        return self.J**self.decision_nodes

    def _check_leaves(self):
        if self.leaf_count > MAX_LEAVES:
            raise LatticeSizeError(
                f"lattice has {self.leaf_count} leaves, enumeration limit is {MAX_LEAVES}"
            )

    # -- leaf and node decoding ------------------------------------------

    def digits(self, idx: np.ndarray, depth: int | None = None) -> np.ndarray:
        """Move digits of node indices at ``depth`` (default: leaves), shape (n, depth)."""
        depth = self.K if depth is None else depth
        idx = np.asarray(idx, dtype=np.int64)
        powers = self.branching ** np.arange(depth - 1, -1, -1, dtype=np.int64)
        return (idx[:, None] // powers[None, :]) % self.branching

    def moves(self, idx: np.ndarray, depth: int | None = None):
        """Sign vectors and volatility vectors of each step, both (n, depth, d)."""
        dg = self.digits(idx, depth)
        return self.sign_table[dg % self.S], self.sigma_table[dg // self.S]

    def paths(self, idx: np.ndarray) -> np.ndarray:
        """Coordinate paths ``B_0 = 0, B_1, ..., B_K`` of leaves, shape (n, K+1, d)."""
        signs, sigmas = self.moves(idx)
        return _paths_from_moves(signs, sigmas, self.sqrt_dt)

    def paths_at(self, idx: np.ndarray, depth: int) -> np.ndarray:
        """Partial paths of nodes at ``depth``, shape (n, depth+1, d)."""
        signs, sigmas = self.moves(idx, depth)
        return _paths_from_moves(signs, sigmas, self.sqrt_dt)

    def leaf_index(self, signs: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`moves` for on-grid volatilities."""
        n = signs.shape[0]
        s_of = {tuple(r): i for i, r in enumerate(self.sign_table.tolist())}
        j_of = {tuple(r): i for i, r in enumerate(self.sigma_table.tolist())}
        idx = np.zeros(n, dtype=np.int64)
        for k in range(signs.shape[1]):
            s = [s_of[tuple(r)] for r in signs[:, k].tolist()]
            try:
                j = [j_of[tuple(r)] for r in sigmas[:, k].tolist()]
            except KeyError as exc:
                raise ValueError(f"volatility {exc.args[0]} is not on the lattice grid") from None
            idx = idx * self.branching + np.asarray(j) * self.S + np.asarray(s)
        return idx

    def outcome_id(self, signs: np.ndarray, sigmas: np.ndarray) -> str:
        steps = []
        for sg, sv in zip(signs, sigmas):
            steps.append(",".join(f"{'+' if a > 0 else '-'}{b:g}" for a, b in zip(sg, sv)))
        return "|".join(steps)

    @cached_property
    def _space(self) -> OutcomeSpace:
        if self.leaf_count > EXPORT_LIMIT:
            raise LatticeSizeError(
                f"exporting {self.leaf_count} outcomes exceeds the limit {EXPORT_LIMIT}; "
                "use path functions instead of Payoff objects"
            )
        idx = np.arange(self.leaf_count)
        signs, sigmas = self.moves(idx)
        ids = [self.outcome_id(a, b) for a, b in zip(signs, sigmas)]
        return OutcomeSpace(ids, _paths_from_moves(signs, sigmas, self.sqrt_dt))

    def outcome_space(self) -> OutcomeSpace:
        """Every terminal path as an outcome, embedded as a (K+1, d) array."""
        return self._space

    def payoff(self, f: PathFunction) -> Payoff:
        """Tabulate a path function on :meth:`outcome_space`."""
        space = self.outcome_space()
        return Payoff(space, _evaluate(f, space.points))


def build_lattice(params: LatticeParams) -> VolLattice:
    if params.dims * params.steps > MAX_DK:
        raise LatticeSizeError(f"d*K = {params.dims * params.steps} exceeds {MAX_DK}")
    return VolLattice(params)


def _paths_from_moves(signs, sigmas, sqrt_dt) -> np.ndarray:
    inc = signs * sigmas * sqrt_dt
    n, K, d = inc.shape
    out = np.zeros((n, K + 1, d))
    np.cumsum(inc, axis=1, out=out[:, 1:])
    return out


def _evaluate(f: PathFunction, paths: np.ndarray, check: bool = True) -> np.ndarray:
    vals = np.asarray(f(paths), dtype=float)
    if vals.shape != (paths.shape[0],):
        raise ValueError(
            f"path payoff returned shape {vals.shape}, expected ({paths.shape[0]},)"
        )
    if check and not np.all(np.isfinite(vals)):
        raise ValueError("path payoff is not finite on every terminal path")
    return vals


def _leaf_values(lattice: VolLattice, X: Union[Payoff, PathFunction], idx=None) -> np.ndarray:
    if isinstance(X, Payoff):
        space = lattice.outcome_space()
        if X.space is not space and X.space != space:
            raise ValueError("payoff is not defined on this lattice's terminal paths")
        return X.values if idx is None else X.values[idx]
    if idx is not None:
        return _evaluate(X, lattice.paths(idx))
    out = np.empty(lattice.leaf_count)
    for start, paths in _path_chunks(lattice):
        out[start : start + len(paths)] = _evaluate(X, paths)
    return out


def _chunk_depth(lattice: VolLattice) -> int:
    r, B = 1, lattice.branching
    while r < lattice.K and B ** (r + 1) <= CHUNK:
        r += 1
    return r


def _path_chunks(lattice: VolLattice):
    """Yield ``(first_leaf, paths)`` over whole subtrees of at most CHUNK leaves."""
    lattice._check_leaves()
    r = _chunk_depth(lattice)
    head_depth = lattice.K - r
    width = lattice.branching**r
    builder = _SubtreePaths(lattice, head_depth)
    for prefix in range(lattice.branching**head_depth):
        yield prefix * width, builder(np.array([prefix], dtype=np.int64))


class _SubtreePaths:
    """Full paths below nodes of one depth: shared suffix plus each node's prefix.

    Suffix increments are decoded once and accumulated onto each prefix path
    in the same order as a plain cumulative sum, so coordinates agree bit
    for bit with :meth:`VolLattice.paths`.  The returned view is time-major in
    memory so reductions along the path axis run over contiguous rows; it is
    overwritten by the next call.
    """

    def __init__(self, lattice: VolLattice, depth: int):
        self.lat, self.depth = lattice, depth
        r = lattice.K - depth
        self.width = lattice.branching**r
        signs, sigmas = lattice.moves(np.arange(self.width), r)
        inc = signs * sigmas * lattice.sqrt_dt
        self.inc = np.ascontiguousarray(inc.transpose(1, 2, 0))  # (r, d, width)
        self._buf = None

    def __call__(self, nodes: np.ndarray) -> np.ndarray:
        lat, depth, width = self.lat, self.depth, self.width
        n = len(nodes) * width
        if self._buf is None or self._buf.shape[2] != n:
            self._buf = np.empty((lat.K + 1, lat.d, n))
        buf = self._buf.reshape(lat.K + 1, lat.d, len(nodes), width)
        if depth:
            head = lat.paths_at(nodes, depth).transpose(1, 2, 0)  # (depth+1, d, nodes)
        else:
            head = np.zeros((1, lat.d, len(nodes)))
        buf[: depth + 1] = head[:, :, :, None]
        # accumulate step by step, exactly as a cumulative sum from B_0 would
        for t in range(lat.K - depth):
            np.add(buf[depth + t], self.inc[t][:, None, :], out=buf[depth + t + 1])
        return self._buf.transpose(2, 0, 1)


# --------------------------------------------------------------------------
# path measures


@dataclass(frozen=True, eq=False)
class PathMeasure:
    """Probability measure on lattice paths, with the volatility strategy.

    ``signs`` and ``sigmas`` have shape (n, K, d) and describe the moves of
    each support path.  ``strategy`` maps a node, the tuple of moves taken
    so far, to the tuple of volatility vectors used there (one for a pure
    strategy, several for mixtures).
    """

    signs: np.ndarray
    sigmas: np.ndarray
    weights: np.ndarray
    strategy: Mapping
    sqrt_dt: float
    leaves: np.ndarray | None = None

    @cached_property
    def paths(self) -> np.ndarray:
        return _paths_from_moves(self.signs, self.sigmas, self.sqrt_dt)

    @property
    def is_pure(self) -> bool:
        return all(len(v) == 1 for v in self.strategy.values())

    def expectation(self, X: Union[Payoff, PathFunction]) -> float:
        """``E(X)`` under this measure (correctly rounded sum)."""
        if isinstance(X, Payoff):
            vals = X.values[self._leaf_ids(X.space)]
        else:
            vals = _evaluate(X, self.paths)
        return math.fsum(self.weights * vals)

    def _leaf_ids(self, space: OutcomeSpace) -> np.ndarray:
        if self.leaves is not None:
            return self.leaves
        ids = [_outcome_id(a, b) for a, b in zip(self.signs, self.sigmas)]
        return np.array([space.index(i) for i in ids])

    def to_measure(self, lattice: VolLattice) -> Measure:
        space = lattice.outcome_space()
        leaves = self.leaves
        if leaves is None:
            leaves = lattice.leaf_index(self.signs, self.sigmas)
        w = np.zeros(len(space))
        np.add.at(w, leaves, self.weights)
        return Measure(space, w)


def _outcome_id(signs, sigmas) -> str:
    return "|".join(
        ",".join(f"{'+' if a > 0 else '-'}{b:g}" for a, b in zip(sg, sv))
        for sg, sv in zip(signs, sigmas)
    )


def _node_groups(signs: np.ndarray, sigmas: np.ndarray) -> list:
    """Group rows by the node they pass at each depth.

    Returns, for depth k = 0..K-1, ``(inv, first)``: the node number of
    every row and the first row through each node.  Node numbers are local
    to the call.
    """
    n, K, d = signs.shape
    inv = np.zeros(n, dtype=np.int64)
    out = [(inv, np.zeros(min(n, 1), dtype=np.int64))]
    for k in range(K - 1):
        step = np.concatenate([signs[:, k], sigmas[:, k]], axis=1)
        _, code = np.unique(step, axis=0, return_inverse=True)
        pair = inv * (code.max() + 1) + code.ravel()
        _, first, inv = np.unique(pair, return_index=True, return_inverse=True)
        inv = inv.ravel()
        out.append((inv, first))
    return out


def _leaf_groups(leaves: np.ndarray, B: int, K: int) -> list:
    """:func:`_node_groups` for rows given as lattice leaf indices."""
    out = []
    for k in range(K):
        _, first, inv = np.unique(leaves // B ** (K - k), return_index=True, return_inverse=True)
        out.append((inv.ravel(), first))
    return out


def _step(signs_row, sigmas_row) -> tuple:
    return (tuple(int(v) for v in signs_row), tuple(float(v) for v in sigmas_row))


def _node_keys(signs: np.ndarray, sigmas: np.ndarray, groups: list) -> list:
    """Node keys (tuples of moves so far) for the groups of :func:`_node_groups`."""
    keys = [[()] if len(groups[0][1]) else []]
    for k in range(1, len(groups)):
        prev_inv = groups[k - 1][0]
        _, first = groups[k]
        keys.append(
            [keys[k - 1][prev_inv[r]] + (_step(signs[r, k - 1], sigmas[r, k - 1]),) for r in first.tolist()]
        )
    return keys


def _used_sigmas(sigmas: np.ndarray, groups: list, keys: list):
    """Yield ``(node key, volatility vector)`` for every choice made on the support."""
    for k, (inv, _) in enumerate(groups):
        pairs = np.unique(np.column_stack([inv, sigmas[:, k]]), axis=0)
        for row in pairs.tolist():
            yield keys[k][int(row[0])], tuple(row[1:])


def _strategy_of(signs, sigmas, weights, groups=None) -> dict:
    live = weights > 0
    signs, sigmas = signs[live], sigmas[live]
    if groups is None:
        groups = _node_groups(signs, sigmas)
    keys = _node_keys(signs, sigmas, groups)
    strat: dict = {}
    for key, sig in _used_sigmas(sigmas, groups, keys):
        strat.setdefault(key, []).append(sig)
    return {k: tuple(sorted(v)) for k, v in strat.items()}


class DerivedStrategy(Mapping):
    """Strategy read off the support of a measure, built on first access."""

    def __init__(self, signs, sigmas, weights, groups: Callable[[], list] | None = None):
        self._source = (signs, sigmas, weights)
        self._groups = groups
        self._map = None

    def _data(self) -> dict:
        if self._map is None:
            groups = self._groups() if self._groups is not None else None
            self._map = _strategy_of(*self._source, groups)
        return self._map

    def derived_from(self, pm: PathMeasure) -> bool:
        """Whether this strategy was read off exactly the moves and weights of ``pm``."""
        signs, sigmas, weights = self._source
        return signs is pm.signs and sigmas is pm.sigmas and weights is pm.weights

    def __getitem__(self, key):
        return self._data()[key]

    def __iter__(self):
        return iter(self._data())

    def __len__(self) -> int:
        return len(self._data())

    def __repr__(self) -> str:
        return repr(self._data())


def path_measure_from_leaves(lattice: VolLattice, leaves: np.ndarray) -> PathMeasure:
    """Uniform-sign measure of a pure strategy, given by its support leaves."""
    leaves = np.asarray(leaves, dtype=np.int64)
    signs, sigmas = lattice.moves(leaves)
    w = np.full(len(leaves), 1.0 / lattice.paths_per_strategy)
    B, K = lattice.branching, lattice.K
    strategy = DerivedStrategy(signs, sigmas, w, lambda: _leaf_groups(leaves, B, K))
    return PathMeasure(signs, sigmas, w, strategy, lattice.sqrt_dt, leaves)


def strategy_leaves(lattice: VolLattice, choose: Callable[[int, np.ndarray], np.ndarray]):
    """Support leaves of the pure strategy ``choose(depth, node_indices) -> j``."""
    nodes = np.zeros(1, dtype=np.int64)
    s = np.arange(lattice.S)
    for k in range(lattice.K):
        j = np.asarray(choose(k, nodes), dtype=np.int64)
        nodes = (nodes[:, None] * lattice.branching + (j * lattice.S)[:, None] + s[None, :]).ravel()
    return nodes


def constant_strategy_measure(lattice: VolLattice, j: int) -> PathMeasure:
    """Always use volatility vector ``sigma_table[j]``."""
    return path_measure_from_leaves(
        lattice, strategy_leaves(lattice, lambda k, n: np.full(len(n), j))
    )


def random_strategy_measure(lattice: VolLattice, rng: np.random.Generator) -> PathMeasure:
    leaves = strategy_leaves(lattice, lambda k, n: rng.integers(lattice.J, size=len(n)))
    return path_measure_from_leaves(lattice, leaves)


def mix_path_measures(parts: Sequence[tuple[float, PathMeasure]]) -> PathMeasure:
    """Convex combination; identical paths are merged."""
    parts = list(parts)
    if not parts or any(a <= 0 for a, _ in parts):
        raise ValueError("need positive mixture weights")
    total = math.fsum(a for a, _ in parts)
    if abs(total - 1.0) > 1e-12:
        raise ValueError(f"mixture weights sum to {total}")
    signs = np.concatenate([pm.signs for _, pm in parts])
    sigmas = np.concatenate([pm.sigmas for _, pm in parts])
    w = np.concatenate([a * pm.weights for a, pm in parts])
    flat = np.concatenate([signs.reshape(len(w), -1), sigmas.reshape(len(w), -1)], axis=1)
    uniq, inv = np.unique(flat, axis=0, return_inverse=True)
    inv = inv.ravel()
    merged = np.zeros(len(uniq))
    np.add.at(merged, inv, w)
    first = np.array([np.flatnonzero(inv == u)[0] for u in range(len(uniq))])
    signs, sigmas = signs[first], sigmas[first]
    leaves = None
    if all(pm.leaves is not None for _, pm in parts):
        leaves = np.concatenate([pm.leaves for _, pm in parts])[first]
    return PathMeasure(
        signs, sigmas, merged, DerivedStrategy(signs, sigmas, merged), parts[0][1].sqrt_dt, leaves
    )


# --------------------------------------------------------------------------
# G-expectation


UNIT_ROUNDOFF = 2.0**-53
CHOICE_TABLE = 2**16
EXACT_BUDGET = 2**22


class InexactTieWarning(UserWarning):
    """Too many near-ties to settle exactly; some float choices were kept."""


@dataclass(frozen=True)
class _Solution:
    value: float
    leaves: np.ndarray
    exact: bool


_MIX = np.uint64(0xBF58476D1CE4E5B9)
_WEIGHTS = np.random.default_rng(20_240_611).integers(1, 2**63, size=64, dtype=np.uint64) | np.uint64(1)


def _mix(h: np.ndarray) -> np.ndarray:
    h ^= h >> np.uint64(31)
    h *= _MIX
    h ^= h >> np.uint64(29)
    return h


def _leaf_hash(V: np.ndarray) -> np.ndarray:
    return _mix(np.ascontiguousarray(V, dtype=float).view(np.uint64).copy())


def _reduce(V: np.ndarray, H: np.ndarray | None, J: int, S: int, slack):
    """One backward step: average over signs, then max over the volatility grid.

    ``H`` (optional) holds a structural hash of every subtree, so candidates
    whose subtrees carry bit-identical payoff values are recognized as exact
    ties.  Returns parent values, hashes, the picked grid index and a
    near-tie flag.  A later index wins only when strictly better, so float
    ties go to the smallest volatility; a node is flagged when another
    candidate with a different subtree lies within ``slack`` (scalar or per
    parent) of the best, i.e. when rounding could flip the choice.

    Candidates are compared through their sign sums; S is a power of two,
    so dividing by it is exact and commutes with every comparison.
    """
    v = V.reshape(-1, J, S)
    sums = []
    for j in range(J):
        c = np.add(v[:, j, 0], v[:, j, 1]) if S > 1 else v[:, j, 0].copy()
        for s in range(2, S):
            c += v[:, j, s]
        sums.append(c)
    slack_sum = slack * S
    if J == 2:
        diff = sums[1] - sums[0]
        pick = (diff > 0).astype(np.int16)
        best = np.maximum(sums[0], sums[1])
        near = np.abs(diff) <= slack_sum
    else:
        best = sums[0]
        pick = np.zeros(len(best), dtype=np.int16)
        for j in range(1, J):
            better = sums[j] > best
            best = np.where(better, sums[j], best)
            pick[better] = j
        close = np.zeros(len(best), dtype=np.int16)
        for j in range(J):
            close += best - sums[j] <= slack_sum
        near = close > 1
    if J == 1:
        near[:] = False
    hashes, node_hash = [], None
    if H is not None:
        hv = H.reshape(-1, J, S)
        W = _WEIGHTS
        for j in range(J):
            h = hv[:, j, 0] * W[0]
            for s in range(1, S):
                h += hv[:, j, s] * W[s]
            hashes.append(h)
            if node_hash is None:
                node_hash = h * W[S]
            else:
                node_hash += h * W[S + j]
        node_hash = _mix(node_hash)
        rows = np.flatnonzero(near)
        if len(rows):
            # a close candidate with an identical subtree is an exact tie,
            # which the first-maximum rule already resolves correctly
            cand = np.stack([h[rows] for h in hashes])
            cval = np.stack([c[rows] for c in sums])
            picked = cand[pick[rows], np.arange(len(rows))]
            sl = slack_sum if np.isscalar(slack_sum) else slack_sum[rows]
            differs = (cand != picked) & (best[rows] - cval <= sl)
            near[rows] = differs.any(axis=0)
    best /= S
    return best, node_hash, pick, near


def _chunk_levels(lattice: VolLattice, V, H, r: int, scale: float) -> list:
    out = []
    for depth in range(lattice.K - 1, lattice.K - r - 1, -1):
        V, H, pick, flag = _reduce(V, H, lattice.J, lattice.S, _slack(lattice, depth, scale))
        out.append((V, H, pick, flag))
    return out


def _slack(lattice: VolLattice, depth: int, scale: float) -> float:
    # each level adds at most S*u*scale of rounding to a node value; two
    # compared values may both be off, and the factor 4 leaves headroom
    return 4.0 * (lattice.K - depth) * lattice.S * UNIT_ROUNDOFF * scale


def _solve_many(lattice: VolLattice, payoffs: Sequence) -> list[_Solution]:
    """Backward recursion for several payoffs sharing one pass over the paths.

    Grid choices are stored only for depths whose node count fits in
    CHOICE_TABLE; the bottom levels are re-solved during backtracking, on
    the subtrees below the selected nodes only.
    """
    lattice._check_leaves()
    K, J, S, B = lattice.K, lattice.J, lattice.S, lattice.branching
    m = len(payoffs)
    if all(isinstance(X, Payoff) for X in payoffs):
        r, chunks = K, [(0, None)]
    else:
        r, chunks = _chunk_depth(lattice), _path_chunks(lattice)
    width = B**r
    keep = 0
    while keep < K - 1 and B ** (keep + 1) <= CHOICE_TABLE:
        keep += 1
    # choice[k][i, node] is the grid index picked at a depth-k node for payoff i
    choice = [np.empty((m, B**k), dtype=np.int16) for k in range(keep)]
    near = [np.empty((m, B**k), dtype=bool) for k in range(keep)]
    roots = np.empty((m, B ** (K - r)))
    root_hash = np.empty((m, B ** (K - r)), dtype=np.uint64)
    scale = np.zeros(m)
    sentinel = 0x5EED << 32
    for start, paths in chunks:
        block = start // width
        for i, X in enumerate(payoffs):
            if isinstance(X, Payoff):
                V = _leaf_values(lattice, X)[start : start + width]
            else:
                V = _evaluate(X, paths, check=False)
            M = max(float(V.max()), -float(V.min()))
            if not math.isfinite(M):
                raise ValueError("path payoff is not finite on every terminal path")
            scale[i] = max(scale[i], M)
            levels = _chunk_levels(lattice, V, None, r, M)
            if any(flag.any() for _, _, _, flag in levels):
                levels = _chunk_levels(lattice, V, _leaf_hash(V), r, M)
                root_hash[i, block] = levels[-1][1][0]
            else:
                # unknown hash: distinct from every other, so never an exact tie
                root_hash[i, block] = _mix(np.array([sentinel], dtype=np.uint64))[0]
                sentinel += 1
            for depth, (_, _, pick, flag) in zip(range(K - 1, K - r - 1, -1), levels):
                if depth < keep:
                    sl = slice(block * len(pick), (block + 1) * len(pick))
                    choice[depth][i, sl] = pick
                    near[depth][i, sl] = flag
            roots[i, block] = levels[-1][0][0]
    out = []
    for i, X in enumerate(payoffs):
        V, H = roots[i], root_hash[i]
        for depth in range(K - r - 1, -1, -1):
            V, H, pick, flag = _reduce(V, H, J, S, _slack(lattice, depth, scale[i]))
            if depth < keep:
                choice[depth][i], near[depth][i] = pick, flag
        search = _ExactSearch(lattice, X, [c[i] for c in choice], [f[i] for f in near], keep)
        leaves, vals = search.run()
        if search.exhausted:
            warnings.warn(
                "near-tie budget exhausted; the result may be one rounding step "
                "below the exact maximum",
                InexactTieWarning,
                stacklevel=3,
            )
        out.append(
            _Solution(math.fsum(vals) / lattice.paths_per_strategy, leaves, not search.exhausted)
        )
    return out


def _exact_greater(a: np.ndarray, b: np.ndarray) -> bool:
    """``sum(a) > sum(b)`` decided exactly (fsum keeps the sign of the true sum)."""
    return math.fsum(np.concatenate([a, -b]).tolist()) > 0


class _ExactSearch:
    """Backtracking that settles flagged near-ties by exact comparison.

    The optimal sub-strategy of a flagged node is found by building the
    optimal leaf set below every candidate and comparing exact sums.
    Unflagged nodes follow the float choice, which is provably optimal
    there.  Returns leaf indices and payoff values in depth-first order.
    """

    def __init__(self, lattice, X, choice, near, keep):
        self.lat, self.X = lattice, X
        self.choice, self.near, self.keep = choice, near, keep
        self.budget = EXACT_BUDGET
        self.exhausted = False
        self._bottom: dict = {}

    def best(self, depth: int, node: int):
        if depth >= self.keep:
            return self._best_bottom(depth, node)
        j = int(self.choice[depth][node])
        return self._settle(depth, node, j, bool(self.near[depth][node]), self.best)

    def _settle(self, depth, node, j0, flagged, recurse):
        lat = self.lat

        def branch(j):
            parts = [recurse(depth + 1, node * lat.branching + j * lat.S + s) for s in range(lat.S)]
            return (
                np.concatenate([p[0] for p in parts]),
                np.concatenate([p[1] for p in parts]),
            )

        if not flagged:
            return branch(j0)
        if self.budget <= 0:
            self.exhausted = True
            return branch(j0)
        winner = None
        for j in range(lat.J):
            cand = branch(j)
            self.budget -= len(cand[0])
            if winner is None or _exact_greater(cand[1], winner[1]):
                winner = cand
        return winner

    def run(self):
        """Best leaves and values; vectorized unless a visited node is flagged."""
        lat = self.lat
        nodes = np.zeros(1, dtype=np.int64)
        flagged = False
        for k in range(self.keep):
            flagged = flagged or bool(self.near[k][nodes].any())
            nodes = _descend(lat, nodes, [self.choice[k]])
        idx, vals, picks, flags = self._prefetch(nodes)
        if not flagged and not any(f.any() for f in flags):
            local = _descend(lat, np.arange(len(nodes), dtype=np.int64), picks)
            return idx[local], vals[local]
        return self.best(0, 0)

    def _prefetch(self, roots: np.ndarray):
        """Solve the bottom subtrees below depth-``keep`` nodes in one batch."""
        lat = self.lat
        span = lat.branching ** (lat.K - self.keep)
        idx = (roots[:, None] * span + np.arange(span, dtype=np.int64)[None, :]).ravel()
        if isinstance(self.X, Payoff):
            vals = _leaf_values(lat, self.X, idx)
        else:
            vals = _evaluate(self.X, _SubtreePaths(lat, self.keep)(roots)).copy()
        M = np.abs(vals).reshape(len(roots), span).max(axis=1)
        V, H, picks, flags = vals, _leaf_hash(vals), [], []
        for depth in range(lat.K - 1, self.keep - 1, -1):
            per_parent = np.repeat(M, lat.branching ** (depth - self.keep))
            V, H, pick, flag = _reduce(V, H, lat.J, lat.S, _slack(lat, depth, per_parent))
            picks.append(pick)
            flags.append(flag)
        picks.reverse()
        flags.reverse()
        for i, root in enumerate(roots.tolist()):
            sl = [slice(i * lat.branching**t, (i + 1) * lat.branching**t) for t in range(len(picks))]
            self._bottom[root] = (
                idx[i * span : (i + 1) * span],
                vals[i * span : (i + 1) * span],
                [p[w] for p, w in zip(picks, sl)],
                [f[w] for f, w in zip(flags, sl)],
            )
        return idx, vals, picks, flags

    def _subtree(self, root: int):
        if root not in self._bottom:
            self._prefetch(np.array([root], dtype=np.int64))
        return self._bottom[root]

    def _best_bottom(self, depth, node):
        lat = self.lat
        root = node // lat.branching ** (depth - self.keep)
        idx, vals, picks, flags = self._subtree(root)
        rel_depth = depth - self.keep
        rel = node - root * lat.branching**rel_depth
        if depth == lat.K:
            return idx[rel : rel + 1], vals[rel : rel + 1]
        if not any(f.any() for f in flags[rel_depth:]):
            local = _descend(lat, np.array([rel], dtype=np.int64), picks[rel_depth:])
            return idx[local], vals[local]
        return self._settle(
            depth, node, int(picks[rel_depth][rel]), bool(flags[rel_depth][rel]), self._best_bottom
        )


def _descend(lattice: VolLattice, nodes: np.ndarray, picks: Sequence[np.ndarray]) -> np.ndarray:
    """Follow stored grid choices down from ``nodes``, keeping every sign branch."""
    s = np.arange(lattice.S)
    for pick in picks:
        j = pick[nodes].astype(np.int64)
        nodes = (nodes[:, None] * lattice.branching + (j * lattice.S)[:, None] + s[None, :]).ravel()
    return nodes


def _solve(lattice: VolLattice, X) -> _Solution:
    return _solve_many(lattice, [X])[0]


def gexp_many(lattice: VolLattice, payoffs: Sequence) -> list[float]:
    """:func:`gexp` for several payoffs; one pass over the lattice paths."""
    return [sol.value for sol in _solve_many(lattice, payoffs)]


def worst_measures(lattice: VolLattice, payoffs: Sequence) -> list[PathMeasure]:
    return [path_measure_from_leaves(lattice, sol.leaves) for sol in _solve_many(lattice, payoffs)]


def solve(lattice: VolLattice, payoffs: Sequence) -> list[tuple[float, PathMeasure]]:
    """``(gexp, worst measure)`` for every payoff, from one backward pass."""
    return [
        (sol.value, path_measure_from_leaves(lattice, sol.leaves))
        for sol in _solve_many(lattice, payoffs)
    ]


def gexp(lattice: VolLattice, X: Union[Payoff, PathFunction]) -> float:
    """Worst-case expectation ``sup_Q E_Q(X)`` over adapted volatility strategies.

    ``X`` is a :class:`Payoff` on :meth:`VolLattice.outcome_space` or a
    vectorized function of path arrays of shape (n, K+1, d).  The returned
    value is the expectation of ``X`` under the maximizing strategy, summed
    with correct rounding.
    """
    return _solve(lattice, X).value


def worst_measure(lattice: VolLattice, X: Union[Payoff, PathFunction]) -> PathMeasure:
    """Measure attaining :func:`gexp`; ties go to the smallest volatility."""
    return path_measure_from_leaves(lattice, _solve(lattice, X).leaves)


def export_scenarios(lattice: VolLattice, payoffs: Iterable[Payoff]) -> ScenarioSet:
    """Worst measures of the given payoffs as a :class:`ScenarioSet`."""
    members = tuple(worst_measure(lattice, X).to_measure(lattice) for X in payoffs)
    return ScenarioSet(lattice.outcome_space(), members)


# --------------------------------------------------------------------------
# brute-force oracle


def _subtree_strategies(B: int, J: int, S: int, r: int) -> np.ndarray:
    if r == 0:
        return np.zeros((1, 1), dtype=np.int64)
    sub = _subtree_strategies(B, J, S, r - 1)
    picks = np.indices((sub.shape[0],) * S).reshape(S, -1).T
    width = B ** (r - 1)
    out = []
    for j in range(J):
        out.append(
            np.concatenate([(j * S + s) * width + sub[picks[:, s]] for s in range(S)], axis=1)
        )
    return np.concatenate(out, axis=0)


def strategy_supports(lattice: VolLattice, limit: int = 2**16) -> np.ndarray:
    """Support leaves of every pure strategy, one row per strategy."""
    if lattice.strategy_count > limit:
        raise LatticeSizeError(
            f"{lattice.strategy_count} strategies exceed the enumeration limit {limit}"
        )
    return _subtree_strategies(lattice.branching, lattice.J, lattice.S, lattice.K)


def brute_force_gexp(lattice: VolLattice, X, limit: int = 2**16) -> float:
    """Max of plain expectations over all enumerated strategy measures.

    Each expectation is the correctly rounded sum over the strategy's
    support.  Float sums with a standard error bound only screen out
    strategies that cannot reach the maximum.
    """
    supports = strategy_supports(lattice, limit)
    vals = _leaf_values(lattice, X)[supports]
    approx = vals.sum(axis=1)
    bound = 2.0 * vals.shape[1] * UNIT_ROUNDOFF * float(np.abs(vals).sum(axis=1).max())
    rows = np.flatnonzero(approx >= approx.max() - 2.0 * bound)
    return max(map(math.fsum, vals[rows].tolist())) / lattice.paths_per_strategy


# --------------------------------------------------------------------------
# scenario checks


@dataclass(frozen=True)
class ScenarioCheckReport:
    martingale_max_violation: float
    orthogonality_max_violation: float
    qv_per_path: np.ndarray  # (n, d) realized sum of squared increments
    qv_flags: np.ndarray  # (n, d) sigma_low^2 T <= qv <= sigma_high^2 T
    qv_step_flags: np.ndarray = field(default=None)  # (n, d) per-step bounds
    worst_node: tuple | None = None

    def passed(self, tol: float = MARTINGALE_TOL) -> bool:
        return (
            self.martingale_max_violation <= tol
            and self.orthogonality_max_violation <= tol
            and bool(np.all(self.qv_flags))
            and bool(np.all(self.qv_step_flags))
        )


def verify_scenario(pm: PathMeasure, lattice: VolLattice) -> ScenarioCheckReport:
    """Martingale, orthogonality and quadratic-variation checks.

    Conditional means are taken over every node visited with positive
    mass.  QV flags compare ``sum_k (dB_i)^2`` with ``[low^2 T, high^2 T]``
    and, per step, ``(dB_i)^2`` with ``[low^2 dt, high^2 dt]``, both up to
    a relative rounding slack of 1e-12.
    """
    K, d = lattice.K, lattice.d
    if pm.signs.ndim != 3 or pm.signs.shape[1:] != (K, d) or pm.sigmas.shape != pm.signs.shape:
        raise ForeignMeasureError(f"moves have shape {pm.signs.shape}, lattice needs (n, {K}, {d})")
    if not np.all(np.isin(pm.signs, (-1.0, 1.0))):
        raise ForeignMeasureError("increment signs must be +-1")
    if np.any(pm.weights < 0) or abs(math.fsum(pm.weights) - 1.0) > 1e-12:
        raise ForeignMeasureError("path weights must form a probability vector")
    if pm.sqrt_dt != lattice.sqrt_dt:
        raise ForeignMeasureError("path measure uses a different time step")
    live = pm.weights > 0
    w = pm.weights[live]
    signs, sigmas = pm.signs[live], pm.sigmas[live]
    groups = None
    if pm.leaves is not None and len(pm.leaves) == len(live):
        leaves = pm.leaves[live]
        dec_signs, dec_sigmas = lattice.moves(leaves)
        if np.array_equal(dec_signs, signs) and np.array_equal(dec_sigmas, sigmas):
            groups = _leaf_groups(leaves, lattice.branching, K)
    if groups is None:
        groups = _node_groups(signs, sigmas)
    strategy = pm.strategy
    if not (isinstance(strategy, DerivedStrategy) and strategy.derived_from(pm)):
        keys = _node_keys(signs, sigmas, groups)
        for key, used in _used_sigmas(sigmas, groups, keys):
            if used not in strategy.get(key, ()):
                raise ForeignMeasureError(f"strategy is not total: no choice {used} at node {key}")

    inc = signs * sigmas * lattice.sqrt_dt
    mart, orth, worst = 0.0, 0.0, None
    for k, (inv, _) in enumerate(groups):
        vals = inc[:, k, :]
        if d == 2:
            vals = np.column_stack([vals, vals[:, 0] * vals[:, 1]])
        mass = np.bincount(inv, weights=w)
        means = np.stack([np.bincount(inv, weights=w * v) for v in vals.T], axis=1) / mass[:, None]
        m = np.abs(means[:, :d]).max(axis=1)
        if m.max() > mart:
            mart = float(m.max())
            row = int(groups[k][1][int(np.argmax(m))])
            worst = tuple(_step(signs[row, j], sigmas[row, j]) for j in range(k))
        if d == 2:
            orth = max(orth, float(np.abs(means[:, 2]).max()))

    sq = inc**2
    qv = sq.sum(axis=1)
    lo = np.array(lattice.params.sigma_low) ** 2
    hi = np.array(lattice.params.sigma_high) ** 2
    T, dt = lattice.params.horizon, lattice.dt
    slack = 1.0 + QV_RTOL
    flags = (qv * slack >= lo * T) & (qv <= hi * T * slack)
    steps = np.all((sq * slack >= lo * dt) & (sq <= hi * dt * slack), axis=1)
    full_qv = np.full((len(pm.weights), d), np.nan)
    full_flags = np.ones((len(pm.weights), d), dtype=bool)
    full_steps = np.ones((len(pm.weights), d), dtype=bool)
    full_qv[live], full_flags[live], full_steps[live] = qv, flags, steps
    return ScenarioCheckReport(mart, orth, full_qv, full_flags, full_steps, worst)

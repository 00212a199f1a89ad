"""Independent reference computations for lattice G-expectations."""

import itertools
import math

import numpy as np


def sign_histories(K, d):
    signs = list(itertools.product((-1.0, 1.0), repeat=d))
    for k in range(K):
        yield from itertools.product(signs, repeat=k)


def strategy_expectations(params, f):
    """E_Q f for every pure adapted strategy, by plain enumeration.

    A strategy maps every sign history of length < K to a volatility
    vector; paths are accumulated step by step from 0.
    """
    K, d = params.steps, params.dims
    sqrt_dt = math.sqrt(params.horizon / K)
    signs = list(itertools.product((-1.0, 1.0), repeat=d))
    vols = list(itertools.product(*params.sigma_grid))
    nodes = list(sign_histories(K, d))
    sequences = list(itertools.product(signs, repeat=K))
    out = []
    for choice in itertools.product(range(len(vols)), repeat=len(nodes)):
        strat = dict(zip(nodes, choice))
        paths = np.zeros((len(sequences), K + 1, d))
        for r, seq in enumerate(sequences):
            b = [0.0] * d
            for k, s in enumerate(seq):
                sig = vols[strat[seq[:k]]]
                b = [b[i] + s[i] * sig[i] * sqrt_dt for i in range(d)]
                paths[r, k + 1] = b
        vals = np.asarray(f(paths), dtype=float)
        out.append(math.fsum(vals.tolist()) / len(sequences))
    return out


def single_vol_expectation(phi, K, T, sig):
    """E phi(B_T) on the product binomial tree with fixed volatility per dimension."""
    sqrt_dt = math.sqrt(T / K)
    axes = [(2 * np.arange(K + 1) - K) * s * sqrt_dt for s in sig]
    probs = [np.array([math.comb(K, k) for k in range(K + 1)]) / 2.0**K for _ in sig]
    if len(sig) == 1:
        return float(np.sum(probs[0] * phi(axes[0][:, None])))
    x, y = np.meshgrid(axes[0], axes[1], indexing="ij")
    pts = np.stack([x.ravel(), y.ravel()], axis=1)
    w = np.outer(probs[0], probs[1]).ravel()
    return float(np.sum(w * phi(pts)))


def random_path_payoff(rng, K, d):
    """Cheap path-dependent payoff mixing terminal, running-max and cross terms."""
    c = rng.normal(size=5)
    t = int(rng.integers(0, K + 1))
    strike = float(rng.normal(scale=0.3))
    w = rng.normal(size=d)

    def f(p):
        x = w[0] * p[:, -1, 0]
        if d == 2:
            x = x + w[1] * p[:, -1, 1]
        out = x * (c[0] + c[1] * x) + c[2] * np.maximum(x - strike, 0.0)
        out = out + c[3] * p[:, :, 0].max(axis=1) + c[4] * p[:, t, -1] * p[:, -1, 0]
        return out

    return f

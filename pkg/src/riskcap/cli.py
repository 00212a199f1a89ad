"""Command-line front end: ``riskcap COMMAND [flags]``.

Exit status is 0 on success, 2 when an input is invalid and 3 when a
property check fails; in the last case the report carries a witness.
Member indices in reports are 1-based.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import math
import sys
import warnings
from dataclasses import dataclass

import numpy as np

from .capacity import (
    BoundaryAtomWarning, TestBank, canonical_measure, capacity, capacity_argmax,
    dirac_counterexample, null_sets_agree, reduce,
)
from .gexp import (
    MARTINGALE_TOL, LatticeParams, VolLattice, build_lattice, random_strategy_measure, solve,
    verify_scenario, worst_measure,
)
from .risk import (
    ATOL, RiskSpec, canonical_capacity, entropic_oracle, maximizer, penalty, rho, rho_min_diagnostic, riskless,
    verify_axioms,
)
from .expr import ExprError
from .io import FileFormatError, read_payoff, read_scenarios
from .scenario import Payoff, ScenarioSet, expectation

COMMANDS = (
    "capacity", "risk", "penalty", "maximizer", "rhomin", "reduce",
    "canonical", "riskless", "gexp", "verify", "counterexample",
)
DIGITS = 12
BANK_RANDOM = 16


class UsageError(ValueError):
    pass


@dataclass
class Report:
    fields: dict
    rows: list | None = None  # (index, expectation, penalty, contribution)
    code: int = 0


def _round(x):
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isinf(x) or math.isnan(x):
            return None
        return float(format(x, f".{DIGITS}g"))
    if isinstance(x, dict):
        return {str(k): _round(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v) for v in x]
    if isinstance(x, np.ndarray):
        return _round(x.tolist())
    if isinstance(x, Payoff):
        return {str(k): _round(v) for k, v in x.as_dict().items()}
    return x


def _text_value(x) -> str:
    if isinstance(x, (float, np.floating)) and not math.isfinite(x):
        return str(float(x))
    if x is None:
        return ""
    x = _round(x)
    return json.dumps(x) if isinstance(x, (dict, list, bool)) else str(x)


def render(report: Report, fmt: str) -> str:
    if fmt == "json":
        body = dict(report.fields)
        if report.rows is not None:
            body["members"] = [
                dict(zip(("index", "expectation", "penalty", "contribution"), r)) for r in report.rows
            ]
        return json.dumps(_round(body), indent=2) + "\n"
    if fmt == "csv":
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if report.rows is not None:
            w.writerow(("index", "expectation", "penalty", "contribution"))
            for r in report.rows:
                w.writerow([_text_value(v) for v in r])
        else:
            w.writerow(("key", "value"))
            for k, v in report.fields.items():
                w.writerow((k, _text_value(v)))
        return buf.getvalue()
    lines = [f"{k}: {_text_value(v)}" for k, v in report.fields.items()]
    for r in report.rows or ():
        lines.append("member {}: expectation={} penalty={} contribution={}".format(
            *(_text_value(v) for v in r)))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# inputs


def _need(args, name: str):
    v = getattr(args, name)
    if v is None:
        raise UsageError(f"{args.command} needs --{name}")
    return v


def _scenarios(args) -> ScenarioSet:
    return read_scenarios(_need(args, "scenarios"))


def _payoff(args, S: ScenarioSet) -> Payoff:
    return read_payoff(_need(args, "payoff")).bind(S.space)


def _spec(S: ScenarioSet) -> RiskSpec:
    return RiskSpec(S, normalized=abs(float(np.min(S.penalties))) <= ATOL)


def parse_lattice(text: str) -> LatticeParams:
    parts = text.split(",")
    if len(parts) != 5:
        raise UsageError("--lattice expects K,T,d,sigma_low,sigma_high")
    try:
        K, d = int(parts[0]), int(parts[2])
        T, lo, hi = float(parts[1]), float(parts[3]), float(parts[4])
    except ValueError:
        raise UsageError(f"--lattice: cannot parse {text!r}") from None
    return LatticeParams(K, T, d, (lo,) * d, (hi,) * d)


def _lattice(args) -> VolLattice:
    return build_lattice(parse_lattice(_need(args, "lattice")))


def _lattice_payoff(args, lattice):
    spec = read_payoff(_need(args, "payoff"))
    if spec.values is not None:
        return spec.bind(lattice.outcome_space())
    return spec.path_function()


def _p(args) -> float:
    return 1.0 if args.p is None else args.p


def _tol(args, default: float) -> float:
    return default if args.tol is None else args.tol


# --------------------------------------------------------------------------
# commands


def cmd_capacity(args) -> Report:
    S = _scenarios(args)
    X = _payoff(args, S)
    p = _p(args)
    value, i = capacity_argmax(X, S, p)
    rows = [(n + 1, expectation(Q, X, p), float(a), expectation(Q, X, p))
            for n, (Q, a) in enumerate(zip(S.measures, S.penalties))]
    return Report({"command": "capacity", "p": p, "value": value, "index": i + 1}, rows)


def _risk_rows(spec: RiskSpec, X: Payoff):
    S = spec.scenarios
    rows = []
    for n, (Q, a) in enumerate(zip(S.measures, S.penalties)):
        e = expectation(Q, -X, signed=True)
        rows.append((n + 1, e, float(a), e - a))
    return rows


def cmd_risk(args) -> Report:
    S = _scenarios(args)
    X = _payoff(args, S)
    spec = _spec(S)
    i, _ = maximizer(spec, X)
    fields = {"command": "risk", "value": rho(spec, X), "index": i + 1}
    if args.theta is not None:
        fields["theta"] = args.theta
        fields["entropic"] = entropic_oracle(S[0], args.theta, X)
    return Report(fields, _risk_rows(spec, X))


def cmd_maximizer(args) -> Report:
    S = _scenarios(args)
    X = _payoff(args, S)
    spec = _spec(S)
    i, Q = maximizer(spec, X)
    value = rho(spec, X)
    attained = expectation(Q, -X, signed=True) - S.penalties[i]
    return Report({
        "command": "maximizer", "index": i + 1, "label": S.labels[i], "value": value,
        "attained": attained, "measure": Q.as_dict(),
    }, _risk_rows(spec, X))


def cmd_penalty(args) -> Report:
    S = _scenarios(args)
    spec = _spec(S)
    tol = _tol(args, 1e-10)
    mins = [penalty(spec, Q, tol=tol) for Q in S.measures]
    X = _payoff(args, S) if args.payoff is not None else None
    rows = []
    for n, (Q, a) in enumerate(zip(S.measures, mins)):
        e = expectation(Q, -X, signed=True) if X is not None else math.nan
        rows.append((n + 1, e, a, e - a))
    fields = {"command": "penalty", "given": [float(a) for a in S.penalties],
              "minimal": mins}
    return Report(fields, rows)


def cmd_rhomin(args) -> Report:
    S = _scenarios(args)
    X = _payoff(args, S)
    spec = _spec(S)
    diag = rho_min_diagnostic(spec, X)
    fields = {"command": "rhomin", "value": diag.value, "converged": diag.converged,
              "last_ratio": diag.ratios[-1], "gap": diag.gap, "gap_bound": diag.bound}
    if not diag.converged:
        fields["witness"] = {"lambdas": diag.lambdas, "ratios": diag.ratios}
        return Report(fields, code=3)
    return Report(fields)


def _bank(S: ScenarioSet, args) -> TestBank:
    m = len(S.space)
    payoffs = [Payoff.indicator(S.space, [o]) for o in S.space]
    if args.payoff is not None:
        payoffs.insert(0, _payoff(args, S))
    rng = np.random.default_rng(args.seed)
    payoffs += [Payoff(S.space, rng.standard_normal(m)) for _ in range(BANK_RANDOM)]
    return TestBank(tuple(payoffs))


def cmd_reduce(args) -> Report:
    S = _scenarios(args)
    eps = _need(args, "eps")
    bank = _bank(S, args)
    res = reduce(S, bank, eps)
    R = S.subset(res.indices)
    worst, witness = 0.0, None
    for k, f in enumerate(bank.payoffs):
        gap = abs(capacity(f, S, 1.0) - capacity(f, R, 1.0))
        if gap > worst:
            worst, witness = gap, k
    ok = worst <= eps + _tol(args, 0.0)
    fields = {"command": "reduce", "eps": eps, "kept": [i + 1 for i in res.indices],
              "size": len(S), "reduced_size": len(res.indices),
              "achieved_error": res.achieved_error, "bank_size": res.bank_size,
              "max_capacity_gap": worst, "passed": ok}
    if not ok:
        fields["witness"] = {"bank_index": witness + 1, "payoff": bank.payoffs[witness]}
        return Report(fields, code=3)
    return Report(fields)


def cmd_canonical(args) -> Report:
    S = _scenarios(args)
    P = canonical_measure(S)
    fields = {"command": "canonical", "measure": P.as_dict(drop_zero=False)}
    payoffs = [Payoff.indicator(S.space, [o]) for o in S.space]
    if args.payoff is not None:
        X = _payoff(args, S)
        fields["expectation"] = expectation(P, X, signed=True)
        if np.all(X.values >= 0):
            payoffs.append(X)
    for X in payoffs:
        if not null_sets_agree(P, S, [X]):
            fields["passed"] = False
            fields["witness"] = {"payoff": X}
            return Report(fields, code=3)
    fields["passed"] = True
    return Report(fields)


def cmd_riskless(args) -> Report:
    S = _scenarios(args)
    X = _payoff(args, S)
    res = riskless(_spec(S), X)
    fields = {"command": "riskless", "riskless": res.riskless}
    if res.witness is not None:
        lam, i = res.witness
        fields["witness"] = {"lambda": lam, "index": i + 1}
    return Report(fields)


def cmd_gexp(args) -> Report:
    lattice = _lattice(args)
    X = _lattice_payoff(args, lattice)
    value, pm = solve(lattice, [X])[0]
    root = pm.strategy.get((), ())
    fields = {"command": "gexp", "value": value, "steps": lattice.K, "dims": lattice.d,
              "strategy_count": lattice.strategy_count,
              "worst_root_sigma": [list(s) for s in root],
              "worst_support": len(pm.weights)}
    return Report(fields, [(1, value, 0.0, value)] if args.format == "csv" else None)


def _verify_lattice(args) -> Report:
    lattice = _lattice(args)
    if args.payoff is not None:
        pm = worst_measure(lattice, _lattice_payoff(args, lattice))
        source = "worst_measure"
    else:
        pm = random_strategy_measure(lattice, np.random.default_rng(args.seed))
        source = "random_strategy"
    rep = verify_scenario(pm, lattice)
    tol = _tol(args, MARTINGALE_TOL)
    ok = rep.passed(tol)
    fields = {"command": "verify", "target": source, "passed": ok,
              "martingale_max_violation": rep.martingale_max_violation,
              "orthogonality_max_violation": rep.orthogonality_max_violation,
              "qv_min": np.nanmin(rep.qv_per_path, axis=0),
              "qv_max": np.nanmax(rep.qv_per_path, axis=0)}
    if not ok:
        bad = ~(rep.qv_flags & rep.qv_step_flags).all(axis=1)
        fields["witness"] = {"worst_node": rep.worst_node,
                             "qv_failing_paths": np.flatnonzero(bad)[:10]}
        return Report(fields, code=3)
    return Report(fields)


def cmd_verify(args) -> Report:
    if args.lattice is not None:
        return _verify_lattice(args)
    S = _scenarios(args)
    tol = _tol(args, 1e-10)
    if args.theta is not None:
        P, theta = S[0], args.theta
        target = f"entropic(theta={theta:g})"
        charged = P.weights > 0

        def fn(X):
            return entropic_oracle(P, theta, X)

        def c_rho(Z):
            # rho(-lam |Z|) / lam increases to the P-essential sup of |Z|
            return float(np.max(np.abs(Z.values[charged])))

        report = verify_axioms(fn, S.space, tol=tol, seed=args.seed, capacity=c_rho)
    else:
        spec = _spec(S)
        target = "scenarios"
        c_rho = (lambda Z: canonical_capacity(spec, Z)) if spec.normalized else None
        report = verify_axioms(spec, S.space, tol=tol, seed=args.seed,
                               normalized=spec.normalized, capacity=c_rho)
    fields = {"command": "verify", "target": target, "passed": report.passed,
              "trials": report.trials, "tol": report.tol,
              "axioms": {n: {"passed": v.passed, "max_violation": v.max_violation}
                         for n, v in report.verdicts.items()}}
    if not report.passed:
        fields["witness"] = {v.name: v.witness for v in report.failures()}
        return Report(fields, code=3)
    return Report(fields)


def cmd_counterexample(args) -> Report:
    eta = _need(args, "eta")
    rep = dirac_counterexample(eta, p=_p(args))
    fields = {"command": "counterexample", **rep.as_dict()}
    fields["witness_index"] = rep.witness_index
    ok = rep.sup_measure_of_A == 0.0 and rep.capacity_lower_bound >= 1.0 - eta
    fields["passed"] = ok
    return Report(fields, code=0 if ok else 3)


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="riskcap", description="Capacities, convex risk measures "
                                 "and lattice G-expectations on finite scenario sets.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--scenarios", metavar="FILE")
    ap.add_argument("--payoff", metavar="FILE")
    ap.add_argument("--p", type=float)
    ap.add_argument("--eps", type=float)
    ap.add_argument("--eta", type=float)
    ap.add_argument("--theta", type=float)
    ap.add_argument("--lattice", metavar="K,T,d,SLO,SHI")
    ap.add_argument("--format", choices=("json", "csv", "text"), default="json")
    ap.add_argument("--tol", type=float)
    ap.add_argument("--seed", type=int, default=0)
    return ap


def run(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryAtomWarning)
            report = HANDLERS[args.command](args)
    except FileFormatError as exc:
        diag = {"error": "validation", "message": str(exc), "field": exc.field,
                "line": exc.line, "column": exc.column}
        out.write(render(Report({k: v for k, v in diag.items() if v is not None}), args.format))
        err.write(f"riskcap: {exc}\n")
        return 2
    except (UsageError, ExprError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        out.write(render(Report({"error": "validation", "message": msg}), args.format))
        err.write(f"riskcap: {msg}\n")
        return 2
    out.write(render(report, args.format))
    return report.code


def main(argv=None) -> int:
    try:
        return run(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())

"""JSON scenario and payoff files.

A scenario file looks like::

    {"outcomes": ["w1", {"id": "w2", "point": 1.5}],
     "measures": [{"id": "P", "weights": {"w1": 0.5, "w2": 0.5}, "penalty": 0}]}

An absent penalty means 0 and ``null`` means ``+inf``.  A payoff file holds
either ``"values"`` (a total map from outcome id to number) or ``"expr"``
(see :mod:`riskcap.expr`).  Every problem is reported as a
:class:`FileFormatError` carrying the offending field path, or the
line and column for JSON syntax errors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .expr import Expression, ExprError, parse as parse_expr
from .scenario import PROB_TOL, Measure, OutcomeSpace, Payoff, ScenarioSet


class FileFormatError(ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None,
                 column: int | None = None, source: str | None = None):
        self.field, self.line, self.column, self.source = field, line, column, source
        where = []
        if source:
            where.append(source)
        if line is not None:
            where.append(f"line {line}, column {column}")
        if field:
            where.append(f"field {field}")
        super().__init__(f"{': '.join([', '.join(where), message]) if where else message}")

    def as_dict(self) -> dict:
        return {"error": "validation", "message": str(self), "field": self.field,
                "line": self.line, "column": self.column}


def _load_json(text: str, source: str | None):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FileFormatError(exc.msg, line=exc.lineno, column=exc.colno, source=source) from None


def _number(v, field: str, source) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise FileFormatError(f"expected a number, got {v!r}", field, source=source)
    v = float(v)
    if not math.isfinite(v):
        raise FileFormatError("number must be finite", field, source=source)
    return v


def _require(obj, key: str, kind, field: str, source):
    if not isinstance(obj, dict):
        raise FileFormatError("expected an object", field, source=source)
    if key not in obj:
        raise FileFormatError(f"missing key {key!r}", field, source=source)
    val = obj[key]
    if not isinstance(val, kind):
        raise FileFormatError(f"{key!r} has the wrong type", f"{field}.{key}" if field else key, source=source)
    return val


def _point(v, field, source):
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise FileFormatError("point must be a number or a rectangular numeric array", field,
                              source=source) from None
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim not in (0, 2) or not np.all(np.isfinite(arr)):
        raise FileFormatError("point must be a finite number, a path of numbers or a path of vectors",
                              field, source=source)
    return arr


def parse_scenarios(text: str, source: str | None = None,
                    prob_tol: float = PROB_TOL) -> ScenarioSet:
    doc = _load_json(text, source)
    if not isinstance(doc, dict):
        raise FileFormatError("top level must be an object", source=source)
    raw = _require(doc, "outcomes", list, "", source)
    if not raw:
        raise FileFormatError("at least one outcome is required", "outcomes", source=source)
    ids, points = [], []
    for i, entry in enumerate(raw):
        f = f"outcomes[{i}]"
        if isinstance(entry, dict):
            oid = _require(entry, "id", str, f, source)
            points.append(_point(entry["point"], f + ".point", source) if "point" in entry else None)
        elif isinstance(entry, str):
            oid = entry
            points.append(None)
        else:
            raise FileFormatError("outcome must be an id string or an object with 'id'", f, source=source)
        if oid in ids:
            raise FileFormatError(f"duplicate outcome id {oid!r}", f, source=source)
        ids.append(oid)
    have = [p is not None for p in points]
    if any(have) and not all(have):
        missing = have.index(False)
        raise FileFormatError("either every outcome has a point or none does",
                              f"outcomes[{missing}]", source=source)
    emb = None
    if all(have):
        shapes = {p.shape for p in points}
        if len(shapes) != 1:
            raise FileFormatError("all points must have the same shape", "outcomes", source=source)
        emb = np.stack(points)
    space = OutcomeSpace(ids, emb)

    rawm = _require(doc, "measures", list, "", source)
    if not rawm:
        raise FileFormatError("at least one measure is required", "measures", source=source)
    measures, penalties, labels = [], [], []
    for i, entry in enumerate(rawm):
        f = f"measures[{i}]"
        mid = _require(entry, "id", str, f, source)
        if mid in labels:
            raise FileFormatError(f"duplicate measure id {mid!r}", f + ".id", source=source)
        weights = _require(entry, "weights", dict, f, source)
        w = np.zeros(len(space))
        for oid, v in weights.items():
            wf = f"{f}.weights.{oid}"
            if oid not in space:
                raise FileFormatError(f"unknown outcome {oid!r}", wf, source=source)
            x = _number(v, wf, source)
            if x < 0:
                raise FileFormatError("weights must be non-negative", wf, source=source)
            w[space.index(oid)] = x
        mass = math.fsum(w)
        if abs(mass - 1.0) > prob_tol:
            raise FileFormatError(f"total mass {mass!r} is not within {prob_tol:g} of 1",
                                  f + ".weights", source=source)
        pen = entry.get("penalty", 0.0)
        if pen is None:
            pen = math.inf
        else:
            pen = _number(pen, f + ".penalty", source)
            if pen < 0:
                raise FileFormatError("penalty must be non-negative or null", f + ".penalty", source=source)
        measures.append(Measure(space, w))
        penalties.append(pen)
        labels.append(mid)
    if not any(math.isfinite(p) for p in penalties):
        raise FileFormatError("at least one measure needs a finite penalty", "measures", source=source)
    return ScenarioSet(space, tuple(measures), penalties, tuple(labels), prob_tol=prob_tol)


def scenarios_to_dict(S: ScenarioSet) -> dict:
    space = S.space
    if space.points is None:
        outcomes = [o for o in space.outcomes]
    else:
        outcomes = [{"id": o, "point": p.tolist()} for o, p in zip(space.outcomes, space.points)]
    measures = []
    for label, q, pen in zip(S.labels, S.measures, S.penalties):
        measures.append({
            "id": str(label),
            "weights": {str(o): float(w) for o, w in zip(space.outcomes, q.weights) if w != 0},
            "penalty": None if math.isinf(pen) else float(pen),
        })
    return {"outcomes": outcomes, "measures": measures}


def serialize_scenarios(S: ScenarioSet) -> str:
    """JSON text that :func:`parse_scenarios` turns back into ``S``.

    Outcome ids must be strings for the round trip to be exact.
    """
    return json.dumps(scenarios_to_dict(S), indent=2)


def read_scenarios(path) -> ScenarioSet:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileFormatError(f"cannot read file: {exc.strerror}", source=str(path)) from None
    return parse_scenarios(text, str(path))


@dataclass(frozen=True)
class PayoffSpec:
    """A parsed payoff file, not yet bound to an outcome space."""

    values: dict | None = None
    expr: Expression | None = None
    source: str | None = None

    def bind(self, space: OutcomeSpace) -> Payoff:
        """Payoff on a finite outcome space."""
        if self.values is not None:
            missing = [o for o in space.outcomes if o not in self.values]
            if missing:
                raise FileFormatError(f"no value for outcome {missing[0]!r}", "values", source=self.source)
            extra = [k for k in self.values if k not in space]
            if extra:
                raise FileFormatError(f"unknown outcome {extra[0]!r}", f"values.{extra[0]}", source=self.source)
            return Payoff.from_mapping(space, self.values)
        try:
            if space.is_path:
                pts = space.points
                vals = self.expr.on_paths(pts if pts.ndim == 3 else pts[:, :, None])
            elif space.is_real:
                vals = self.expr.on_points(space.points)
            else:
                vals = self.expr.constant(len(space))
        except ExprError as exc:
            raise FileFormatError(str(exc), "expr", source=self.source) from None
        return Payoff(space, vals)

    def path_function(self):
        """Callable on lattice path arrays of shape (n, K+1, d)."""
        if self.expr is None:
            raise FileFormatError("lattice payoffs must be given as 'expr'", "expr", source=self.source)
        expr, source = self.expr, self.source

        def f(paths):
            try:
                return expr.on_paths(paths)
            except ExprError as exc:
                raise FileFormatError(str(exc), "expr", source=source) from None

        return f


def parse_payoff(text: str, source: str | None = None) -> PayoffSpec:
    doc = _load_json(text, source)
    if not isinstance(doc, dict):
        raise FileFormatError("top level must be an object", source=source)
    keys = {"values", "expr"} & set(doc)
    if len(keys) != 1:
        raise FileFormatError("payoff file needs exactly one of 'values' or 'expr'", source=source)
    if "values" in doc:
        vals = _require(doc, "values", dict, "", source)
        return PayoffSpec(values={k: _number(v, f"values.{k}", source) for k, v in vals.items()},
                          source=source)
    text_expr = _require(doc, "expr", str, "", source)
    try:
        return PayoffSpec(expr=parse_expr(text_expr), source=source)
    except ExprError as exc:
        raise FileFormatError(str(exc), "expr", source=source) from None


def read_payoff(path) -> PayoffSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileFormatError(f"cannot read file: {exc.strerror}", source=str(path)) from None
    return parse_payoff(text, str(path))

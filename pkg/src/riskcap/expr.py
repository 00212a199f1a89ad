"""Tiny payoff expression language.

Grammar: numeric literals, ``+ - * /``, unary minus, parentheses and the
functions ``min``, ``max`` (two or more arguments), ``abs``, ``exp`` and
``log``.  Variables:

* ``b1 .. bd``: terminal value of path coordinate ``i``;
* ``b1[k]``: value after step ``k`` (``b1[0] = 0``, negative ``k`` counts
  from the end);
* ``x``: the point of a real-embedded outcome.

Evaluation is vectorized over outcomes and total: division by zero, the
log of a non-positive number and non-finite results raise
:class:`ExprError`.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

_FUNCS = {
    "abs": (1, 1, np.abs),
    "exp": (1, 1, np.exp),
    "log": (1, 1, None),
    "min": (2, None, None),
    "max": (2, None, None),
}
_COORD = re.compile(r"b([1-9][0-9]*)$")


class ExprError(ValueError):
    """Malformed expression or a partial operation at evaluation time."""

    def __init__(self, message: str, column: int | None = None):
        self.column = column
        where = f" (column {column})" if column is not None else ""
        super().__init__(message + where)


@dataclass(frozen=True)
class _Env:
    paths: np.ndarray | None  # (n, K+1, d)
    points: np.ndarray | None  # (n,)


Node = Callable[[_Env], np.ndarray]


@dataclass(frozen=True)
class Expression:
    source: str
    _fn: Node
    max_coord: int
    uses_point: bool
    uses_path: bool

    def on_paths(self, paths: np.ndarray) -> np.ndarray:
        """Evaluate on path arrays of shape (n, K+1, d)."""
        if self.uses_point:
            raise ExprError("'x' needs a real-embedded outcome space, not paths")
        if self.max_coord > paths.shape[2]:
            raise ExprError(f"b{self.max_coord} needs {self.max_coord} path dimensions, have {paths.shape[2]}")
        return self._run(_Env(paths, None), paths.shape[0])

    def on_points(self, points: np.ndarray) -> np.ndarray:
        """Evaluate on real points of shape (n,)."""
        if self.uses_path:
            raise ExprError("path variables need a path-embedded outcome space")
        return self._run(_Env(None, np.asarray(points, dtype=float)), len(points))

    def constant(self, n: int) -> np.ndarray:
        if self.uses_path or self.uses_point:
            raise ExprError("expression uses variables but the outcome space has no embedding")
        return self._run(_Env(None, None), n)

    def _run(self, env: _Env, n: int) -> np.ndarray:
        with np.errstate(all="ignore"):
            out = np.broadcast_to(np.asarray(self._fn(env), dtype=float), (n,)).copy()
        if not np.all(np.isfinite(out)):
            raise ExprError(f"expression {self.source!r} is not finite on every outcome")
        return out

    def __call__(self, paths: np.ndarray) -> np.ndarray:
        return self.on_paths(paths)


def parse(source: str) -> Expression:
    try:
        tree = ast.parse(source.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExprError(f"syntax error: {exc.msg}", exc.offset) from None
    info = {"coord": 0, "point": False, "path": False}
    fn = _compile(tree.body, info)
    return Expression(source, fn, info["coord"], info["point"], info["path"])


def _col(node) -> int:
    return getattr(node, "col_offset", 0) + 1


def _compile(node, info) -> Node:
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ExprError(f"unsupported literal {node.value!r}", _col(node))
        v = float(node.value)
        return lambda env: v
    if isinstance(node, ast.Name):
        return _variable(node, None, info)
    if isinstance(node, ast.Subscript):
        if not isinstance(node.value, ast.Name):
            raise ExprError("only path coordinates can be indexed", _col(node))
        idx = node.slice
        sign = 1
        if isinstance(idx, ast.UnaryOp) and isinstance(idx.op, ast.USub):
            sign, idx = -1, idx.operand
        if not (isinstance(idx, ast.Constant) and type(idx.value) is int):
            raise ExprError("step index must be an integer literal", _col(node))
        return _variable(node.value, sign * idx.value, info)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        inner = _compile(node.operand, info)
        if isinstance(node.op, ast.USub):
            return lambda env: -inner(env)
        return inner
    if isinstance(node, ast.BinOp):
        a, b = _compile(node.left, info), _compile(node.right, info)
        col = _col(node)
        if isinstance(node.op, ast.Add):
            return lambda env: a(env) + b(env)
        if isinstance(node.op, ast.Sub):
            return lambda env: a(env) - b(env)
        if isinstance(node.op, ast.Mult):
            return lambda env: a(env) * b(env)
        if isinstance(node.op, ast.Div):

            def div(env):
                den = b(env)
                if np.any(np.asarray(den) == 0):
                    raise ExprError("division by zero", col)
                return a(env) / den

            return div
        raise ExprError(f"operator {type(node.op).__name__} is not allowed", col)
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            raise ExprError("unknown function", _col(node))
        if node.keywords:
            raise ExprError("keyword arguments are not allowed", _col(node))
        name = node.func.id
        lo, hi, ufunc = _FUNCS[name]
        n = len(node.args)
        if n < lo or (hi is not None and n > hi):
            raise ExprError(f"{name} takes {'at least ' if hi is None else ''}{lo} argument(s)", _col(node))
        args = [_compile(a, info) for a in node.args]
        col = _col(node)
        if name == "log":

            def log(env):
                v = args[0](env)
                if np.any(np.asarray(v) <= 0):
                    raise ExprError("log of a non-positive value", col)
                return np.log(v)

            return log
        if name in ("min", "max"):
            red = np.minimum if name == "min" else np.maximum

            def extreme(env):
                out = args[0](env)
                for f in args[1:]:
                    out = red(out, f(env))
                return out

            return extreme
        return lambda env: ufunc(args[0](env))
    raise ExprError(f"unsupported syntax {type(node).__name__}", _col(node))


def _variable(name_node: ast.Name, step: int | None, info) -> Node:
    name = name_node.id
    col = _col(name_node)
    if name == "x":
        if step is not None:
            raise ExprError("'x' cannot be indexed", col)
        info["point"] = True

        def point(env):
            if env.points is None:
                raise ExprError("'x' needs a real-embedded outcome space", col)
            return env.points

        return point
    m = _COORD.match(name)
    if not m:
        raise ExprError(f"unknown variable {name!r}", col)
    i = int(m.group(1)) - 1
    info["coord"] = max(info["coord"], i + 1)
    info["path"] = True
    k = -1 if step is None else step

    def coord(env):
        if env.paths is None:
            raise ExprError(f"{name} needs a path-embedded outcome space", col)
        K1 = env.paths.shape[1]
        if not -K1 <= k < K1:
            raise ExprError(f"step {k} outside 0..{K1 - 1}", col)
        return env.paths[:, k, i]

    return coord

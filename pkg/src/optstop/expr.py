"""Restricted arithmetic expressions for coefficient functions.

Grammar: the variable ``x``, numeric literals, the constants ``pi`` and
``e``, binary ``+ - * / ^`` (``**`` is accepted as a synonym for ``^``),
unary minus, and the functions ``sqrt``, ``exp``, ``log``.  Anything else
is rejected at parse time, so a config file can never execute code.
"""

import ast
import math

import numpy as np

from .errors import ConfigError

_FUNCS = {"sqrt": np.sqrt, "exp": np.exp, "log": np.log}
_CONSTS = {"pi": math.pi, "e": math.e}
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


def _build(node, src):
    if isinstance(node, ast.Expression):
        return _build(node.body, src)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ConfigError(f"unsupported literal in {src!r}")
        c = float(node.value)
        return lambda x: np.full_like(x, c)
    if isinstance(node, ast.Name):
        if node.id == "x":
            return lambda x: x
        if node.id in _CONSTS:
            c = _CONSTS[node.id]
            return lambda x: np.full_like(x, c)
        raise ConfigError(f"unknown name {node.id!r} in {src!r}")
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        f = _build(node.operand, src)
        if isinstance(node.op, ast.USub):
            return lambda x: -f(x)
        return f
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        op = _BINOPS[type(node.op)]
        a, b = _build(node.left, src), _build(node.right, src)
        return lambda x: op(a(x), b(x))
    if isinstance(node, ast.Call):
        if (not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS
                or len(node.args) != 1 or node.keywords):
            raise ConfigError(f"unsupported call in {src!r}")
        fn = _FUNCS[node.func.id]
        a = _build(node.args[0], src)
        return lambda x: fn(a(x))
    raise ConfigError(f"unsupported syntax {type(node).__name__} in {src!r}")


class Expression:
    """Compiled coefficient function x -> float array; picklable by source."""

    def __init__(self, source: str):
        if not isinstance(source, str) or not source.strip():
            raise ConfigError("expression must be a non-empty string")
        self.source = source
        try:
            # '^' must bind like '**' (tighter than * and unary minus), not like xor
            tree = ast.parse(source.strip().replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise ConfigError(f"cannot parse {source!r}: {exc.msg}") from None
        self._fn = _build(tree, source)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(all="ignore"):
            out = self._fn(x)
        return np.asarray(out, dtype=float)

    def __repr__(self):
        return f"Expression({self.source!r})"

    def __getstate__(self):
        return {"source": self.source}

    def __setstate__(self, state):
        self.__init__(state["source"])

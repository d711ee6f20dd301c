"""A small arithmetic language for coefficients, drivers and terminal values in configs.

Expressions use Python syntax restricted to numbers, ``+ - * / **``, unary
signs, comparisons-free function calls from a fixed table and the variables
``t``, ``x`` (alias of ``x1``), ``x1..xd``, ``y``, ``z`` (alias of ``z1``),
``z1..zd`` plus the constants ``pi`` and ``e``.  Everything is evaluated
vectorised over numpy arrays.
"""

from __future__ import annotations

import ast
import math
import re

import numpy as np

from .errors import ConfigurationError

FUNCTIONS = {
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "abs": np.abs,
    "sign": np.sign,
    "min": np.minimum,
    "max": np.maximum,
    "pow": np.power,
}
CONSTANTS = {"pi": math.pi, "e": math.e}
_INDEXED = re.compile(r"^([xz])([1-9][0-9]*)$")

_BINARY = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply,
           ast.Div: np.divide, ast.Pow: np.power}
_UNARY = {ast.USub: np.negative, ast.UAdd: np.positive}


class Expression:
    """A parsed expression; call it with keyword arrays for the variables it uses."""

    def __init__(self, source, allowed=("t", "x", "y", "z"), dim=1):
        self.source = str(source)
        self.dim = dim
        self.allowed = set(allowed)
        try:
            tree = ast.parse(self.source.strip(), mode="eval")
        except SyntaxError as exc:
            raise ConfigurationError(f"cannot parse expression {self.source!r}: {exc.msg}") from None
        self.variables = set()
        self._check(tree.body)
        self._code = tree.body

    def _variable(self, name):
        if name in CONSTANTS:
            return None
        if name in ("t", "y"):
            base, index = name, 0
        elif name in ("x", "z"):
            base, index = name, 1
        else:
            m = _INDEXED.match(name)
            if not m:
                raise ConfigurationError(f"unknown name {name!r} in {self.source!r}")
            base, index = m.group(1), int(m.group(2))
        if base not in self.allowed:
            raise ConfigurationError(f"variable {name!r} is not available in {self.source!r}")
        if index > self.dim:
            raise ConfigurationError(f"{name!r} exceeds dimension {self.dim} in {self.source!r}")
        return base, index

    def _check(self, node):
        if isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                raise ConfigurationError(f"only numeric literals are allowed in {self.source!r}")
        elif isinstance(node, ast.Name):
            var = self._variable(node.id)
            if var is not None:
                self.variables.add(var)
        elif isinstance(node, ast.BinOp) and type(node.op) in _BINARY:
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS or node.keywords:
                raise ConfigurationError(f"unsupported call in {self.source!r}")
            expected = 2 if node.func.id in ("min", "max", "pow") else 1
            if len(node.args) != expected:
                raise ConfigurationError(
                    f"{node.func.id} takes {expected} argument(s) in {self.source!r}")
            for arg in node.args:
                self._check(arg)
        else:
            raise ConfigurationError(
                f"unsupported syntax {type(node).__name__} in {self.source!r}")

    def _eval(self, node, env):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id in CONSTANTS:
                return CONSTANTS[node.id]
            return env[self._variable(node.id)]
        if isinstance(node, ast.BinOp):
            return _BINARY[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](self._eval(node.operand, env))
        return FUNCTIONS[node.func.id](*(self._eval(a, env) for a in node.args))

    def evaluate(self, t=0.0, x=None, y=None, z=None):
        """Evaluate with ``x`` and ``z`` of shape ``(n, d)`` and ``y`` of shape ``(n,)``."""
        env = {("t", 0): t, ("y", 0): y}
        for base, arr in (("x", x), ("z", z)):
            if arr is not None:
                arr = np.asarray(arr, dtype=float)
                for i in range(arr.shape[1]):
                    env[(base, i + 1)] = arr[:, i]
        missing = [v for v in self.variables if env.get(v) is None]
        if missing:
            raise ConfigurationError(f"no value for {missing} in {self.source!r}")
        with np.errstate(all="ignore"):
            return self._eval(self._code, env)

    def __repr__(self):
        return f"Expression({self.source!r})"


def parse(source, allowed=("t", "x", "y", "z"), dim=1):
    return Expression(source, allowed, dim)


def state_function(source, dim=1):
    """``(t, x) -> (n,)`` from an expression in ``t`` and ``x``."""
    expr = parse(source, ("t", "x"), dim)

    def fn(t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(expr.evaluate(t=t, x=x), (x.shape[0],))

    fn.expression = expr
    return fn


def terminal_function(source, dim=1):
    """``x -> (n,)`` from an expression in ``x``."""
    expr = parse(source, ("x",), dim)

    def fn(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(expr.evaluate(x=x), (x.shape[0],))

    fn.expression = expr
    return fn


def driver_function(source, dim=1):
    """``(t, x, y, z) -> (n,)`` from an expression in ``t, x, y, z``."""
    expr = parse(source, ("t", "x", "y", "z"), dim)

    def fn(t, x, y, z):
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(expr.evaluate(t=t, x=x, y=y, z=z), y.shape)

    fn.expression = expr
    return fn

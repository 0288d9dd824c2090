"""Tiny arithmetic grammar for coefficients, targets, and initial data.

Problem files declare scalar functions of space and time as strings like
``"0.5 + 0.1*sin(t)*x"``.  The grammar is the corresponding subset of
Python syntax: numeric literals, the names x, t (and y on 2-D grids), pi,
the operators + - * /, unary minus, parentheses, and the functions sin,
cos, exp.  Strings are parsed with :mod:`ast` and walked against a node
whitelist, so nothing outside the grammar can execute.
"""

from __future__ import annotations

import ast

import numpy as np

_FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
_CONSTANTS = {"pi": np.pi}
_VARIABLES = ("x", "y", "t")

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
}


class ExpressionError(ValueError):
    """Raised when a coefficient string falls outside the grammar."""


def _check(node: ast.AST, source: str) -> None:
    if isinstance(node, ast.Expression):
        _check(node.body, source)
    elif isinstance(node, ast.BinOp):
        if type(node.op) not in _BINOPS:
            raise ExpressionError(f"operator not in grammar in {source!r}")
        _check(node.left, source)
        _check(node.right, source)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.USub, ast.UAdd)):
            raise ExpressionError(f"operator not in grammar in {source!r}")
        _check(node.operand, source)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
            raise ExpressionError(f"unknown function in {source!r}")
        if len(node.args) != 1 or node.keywords:
            raise ExpressionError(f"functions take one argument in {source!r}")
        _check(node.args[0], source)
    elif isinstance(node, ast.Name):
        if node.id not in _VARIABLES and node.id not in _CONSTANTS:
            raise ExpressionError(f"unknown name {node.id!r} in {source!r}")
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)):
            raise ExpressionError(f"non-numeric literal in {source!r}")
    else:
        raise ExpressionError(f"syntax not in grammar in {source!r}")


def _eval(node: ast.AST, env: dict):
    if isinstance(node, ast.Expression):
        return _eval(node.body, env)
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, env)
        return -v if isinstance(node.op, ast.USub) else +v
    if isinstance(node, ast.Call):
        return _FUNCTIONS[node.func.id](_eval(node.args[0], env))
    if isinstance(node, ast.Name):
        if node.id in _CONSTANTS:
            return _CONSTANTS[node.id]
        return env[node.id]
    if isinstance(node, ast.Constant):
        return float(node.value)
    raise AssertionError("unreachable: node was whitelisted")


class Expression:
    """A parsed scalar function of (x[, y], t), broadcast over numpy arrays."""

    def __init__(self, source):
        if isinstance(source, (int, float)):
            source = repr(float(source))
        self.source = str(source)
        try:
            tree = ast.parse(self.source, mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(
                f"cannot parse {self.source!r}: {exc.msg} (offset {exc.offset})"
            ) from None
        _check(tree, self.source)
        self._tree = tree
        names = {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)}
        self.uses_t = "t" in names
        self.uses_space = bool(names & {"x", "y"})
        self.uses_y = "y" in names

    def __call__(self, coords: np.ndarray, t: float) -> np.ndarray:
        """Evaluate on an (n, dim) coordinate array at scalar time t."""
        coords = np.asarray(coords, dtype=float)
        env = {"x": coords[:, 0], "t": t}
        env["y"] = coords[:, 1] if coords.shape[1] > 1 else None
        if self.uses_y and env["y"] is None:
            raise ExpressionError(f"{self.source!r} uses y on a 1-D grid")
        out = _eval(self._tree, env)
        return np.broadcast_to(np.asarray(out, dtype=float), coords.shape[:1]).copy()

    @property
    def is_constant(self) -> bool:
        return not (self.uses_t or self.uses_space)

    def __repr__(self):
        return f"Expression({self.source!r})"

"""Restricted arithmetic expressions.

Coefficients of the dynamics and the coupling functions are written in a
small grammar: numeric constants, the variables ``x1..xd``, ``t`` and ``z``,
the operators ``+ - * / **`` (``^`` is accepted as a power), the constant
``pi`` and the functions ``sin``, ``cos``, ``sqrt`` and ``exp``.  Everything
in the grammar is analytic away from ``sqrt(0)``, and derivatives are exact
(symbolic) rather than finite differences.
"""

from __future__ import annotations

import ast
import warnings
from functools import cached_property

import numpy as np
import sympy as sp

from .errors import ExpressionError

_FUNCTIONS = {"sin": sp.sin, "cos": sp.cos, "sqrt": sp.sqrt, "exp": sp.exp}
_CONSTANTS = {"pi": sp.pi}
_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.Pow: lambda a, b: a**b,
}


def state_variables(dim: int) -> tuple[str, ...]:
    return tuple(f"x{i + 1}" for i in range(dim))


def _to_sympy(node: ast.AST, symbols: dict[str, sp.Symbol]) -> sp.Expr:
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ExpressionError(f"unsupported literal {node.value!r}")
        return sp.Integer(node.value) if isinstance(node.value, int) else sp.Float(node.value)
    if isinstance(node, ast.Name):
        if node.id in symbols:
            return symbols[node.id]
        if node.id in _CONSTANTS:
            return _CONSTANTS[node.id]
        raise ExpressionError(f"unknown name {node.id!r}; allowed: {sorted(symbols)}")
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_to_sympy(node.left, symbols), _to_sympy(node.right, symbols))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        operand = _to_sympy(node.operand, symbols)
        return -operand if isinstance(node.op, ast.USub) else operand
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
            raise ExpressionError(f"unsupported function in {ast.unparse(node)!r}")
        if len(node.args) != 1 or node.keywords:
            raise ExpressionError(f"{node.func.id} takes exactly one argument")
        return _FUNCTIONS[node.func.id](_to_sympy(node.args[0], symbols))
    raise ExpressionError(f"unsupported syntax {ast.unparse(node)!r}")


class Expression:
    """A parsed expression over a fixed, ordered tuple of variable names.

    Calling the expression evaluates it with numpy broadcasting; the result
    always has the broadcast shape of the arguments, even for constants.
    """

    def __init__(self, text: str | float | int, variables: tuple[str, ...]):
        self.text = str(text).strip()
        self.variables = tuple(variables)
        self._symbols = {name: sp.Symbol(name, real=True) for name in self.variables}
        try:
            tree = ast.parse(self.text.replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse {self.text!r}: {exc.msg}") from None
        self.sym = _to_sympy(tree.body, self._symbols)
        for root in self.sym.atoms(sp.Pow):
            if root.exp == sp.Rational(1, 2) and not root.base.is_positive:
                warnings.warn(
                    f"sqrt({root.base}) in {self.text!r} may vanish; analyticity is lost there",
                    stacklevel=2,
                )

    @classmethod
    def _from_sympy(cls, sym: sp.Expr, variables: tuple[str, ...], text: str) -> "Expression":
        obj = cls.__new__(cls)
        obj.text = text
        obj.variables = variables
        obj._symbols = {name: sp.Symbol(name, real=True) for name in variables}
        obj.sym = sym
        return obj

    def __repr__(self) -> str:
        return f"Expression({self.text!r}, {self.variables})"

    @cached_property
    def free_names(self) -> frozenset[str]:
        return frozenset(str(s) for s in self.sym.free_symbols)

    def depends_on(self, name: str) -> bool:
        return name in self.free_names

    @cached_property
    def is_constant(self) -> bool:
        return not self.free_names

    @cached_property
    def is_zero(self) -> bool:
        return bool(self.sym == 0)

    def diff(self, name: str) -> "Expression":
        d = sp.diff(self.sym, self._symbols[name])
        return Expression._from_sympy(d, self.variables, f"d({self.text})/d{name}")

    @cached_property
    def _compiled(self):
        args = [self._symbols[name] for name in self.variables]
        return sp.lambdify(args, self.sym, modules="numpy")

    def __call__(self, *args) -> np.ndarray:
        if len(args) != len(self.variables):
            raise TypeError(f"expected {len(self.variables)} arguments, got {len(args)}")
        arrays = [np.asarray(a, dtype=float) for a in args]
        shape = np.broadcast_shapes(*(a.shape for a in arrays)) if arrays else ()
        out = np.asarray(self._compiled(*arrays), dtype=float)
        if out.shape != shape:
            out = np.broadcast_to(out, shape).copy()
        return out

    def constant_value(self) -> float:
        if not self.is_constant:
            raise ExpressionError(f"{self.text!r} is not constant")
        return float(self.sym)

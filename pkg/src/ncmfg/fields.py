"""Running and terminal cost fields with exact first and second derivatives.

Every field is called as ``field(x, t)`` with ``x`` of shape ``(..., d)`` and
returns an array of shape ``x.shape[:-1]``; ``grad`` and ``hess`` follow the
same broadcasting.  Terminal costs simply ignore ``t``.
"""

from __future__ import annotations

import numpy as np

from .expr import Expression, state_variables
from .grid import BoxGrid
from .kernels import BoxCutoff


class ScalarField:
    dim: int

    def __call__(self, x, t: float = 0.0) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x, t: float = 0.0) -> np.ndarray:
        raise NotImplementedError

    def hess(self, x, t: float = 0.0) -> np.ndarray:
        # central differences of the exact gradient
        x = np.asarray(x, dtype=float)
        eps = 1e-5
        cols = []
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = eps
            cols.append((self.grad(x + e, t) - self.grad(x - e, t)) / (2 * eps))
        return np.stack(cols, axis=-1)

    def on_grid(self, grid: BoxGrid, t: float = 0.0) -> np.ndarray:
        return self(grid.nodes, t).reshape(grid.shape)

    @property
    def time_dependent(self) -> bool:
        return False


class ConstantField(ScalarField):
    def __init__(self, value: float, dim: int):
        self.value = float(value)
        self.dim = dim

    def __call__(self, x, t=0.0):
        return np.full(np.shape(x)[:-1], self.value)

    def grad(self, x, t=0.0):
        return np.zeros(np.shape(x))

    def hess(self, x, t=0.0):
        return np.zeros(np.shape(x) + (self.dim,))


class QuadraticField(ScalarField):
    """``scale/2 * |x - center|^2``."""

    def __init__(self, center, scale: float = 1.0):
        self.center = np.asarray(center, dtype=float)
        self.scale = float(scale)
        self.dim = self.center.size

    def __call__(self, x, t=0.0):
        return 0.5 * self.scale * np.sum((np.asarray(x) - self.center) ** 2, axis=-1)

    def grad(self, x, t=0.0):
        return self.scale * (np.asarray(x, dtype=float) - self.center)

    def hess(self, x, t=0.0):
        return np.broadcast_to(self.scale * np.eye(self.dim), np.shape(x) + (self.dim,)).copy()


class LinearField(ScalarField):
    """``c . x``."""

    def __init__(self, coef):
        self.coef = np.asarray(coef, dtype=float)
        self.dim = self.coef.size

    def __call__(self, x, t=0.0):
        return np.asarray(x, dtype=float) @ self.coef

    def grad(self, x, t=0.0):
        return np.broadcast_to(self.coef, np.shape(x)).copy()

    def hess(self, x, t=0.0):
        return np.zeros(np.shape(x) + (self.dim,))


class GaussianBump(ScalarField):
    """``amplitude * exp(-|x - center|^2 / (2 width^2))``; analytic with bounded C^2 norm."""

    def __init__(self, center, amplitude: float = 1.0, width: float = 1.0):
        self.center = np.asarray(center, dtype=float)
        self.amplitude = float(amplitude)
        self.width = float(width)
        self.dim = self.center.size

    def __call__(self, x, t=0.0):
        r2 = np.sum((np.asarray(x) - self.center) ** 2, axis=-1)
        return self.amplitude * np.exp(-r2 / (2 * self.width**2))

    def grad(self, x, t=0.0):
        y = np.asarray(x, dtype=float) - self.center
        return -(self(x) / self.width**2)[..., None] * y

    def hess(self, x, t=0.0):
        y = np.asarray(x, dtype=float) - self.center
        w2 = self.width**2
        v = self(x)[..., None, None]
        return v * (y[..., :, None] * y[..., None, :] / w2**2 - np.eye(self.dim) / w2)


class ExpressionField(ScalarField):
    """Field given by a grammar expression in ``x1..xd`` (and optionally ``t``)."""

    def __init__(self, text: str, dim: int):
        self.dim = dim
        names = state_variables(dim) + ("t",)
        self.expr = Expression(text, names)
        xs = state_variables(dim)
        self._grad = [self.expr.diff(v) for v in xs]
        self._hess = [[g.diff(v) for v in xs] for g in self._grad]

    def _args(self, x, t):
        x = np.asarray(x, dtype=float)
        return [x[..., k] for k in range(self.dim)] + [np.full(x.shape[:-1], float(t))]

    def __call__(self, x, t=0.0):
        return self.expr(*self._args(x, t))

    def grad(self, x, t=0.0):
        args = self._args(x, t)
        return np.stack([g(*args) for g in self._grad], axis=-1)

    def hess(self, x, t=0.0):
        args = self._args(x, t)
        return np.stack([np.stack([h(*args) for h in row], axis=-1) for row in self._hess], axis=-2)

    @property
    def time_dependent(self) -> bool:
        return self.expr.depends_on("t")


class CutoffField(ScalarField):
    """``base(x, t) * chi(x)`` with a smooth compactly supported box cutoff ``chi``."""

    def __init__(self, base: ScalarField, cutoff: BoxCutoff):
        self.base = base
        self.cutoff = cutoff
        self.dim = base.dim

    def __call__(self, x, t=0.0):
        return self.base(x, t) * self.cutoff(x)

    def grad(self, x, t=0.0):
        return self.base.grad(x, t) * self.cutoff(x)[..., None] + self.base(x, t)[..., None] * self.cutoff.grad(x)

    def hess(self, x, t=0.0):
        b, db, d2b = self.base(x, t), self.base.grad(x, t), self.base.hess(x, t)
        c, dc, d2c = self.cutoff(x), self.cutoff.grad(x), self.cutoff.hess(x)
        cross = db[..., :, None] * dc[..., None, :]
        return d2b * c[..., None, None] + cross + np.swapaxes(cross, -1, -2) + b[..., None, None] * d2c

    @property
    def time_dependent(self) -> bool:
        return self.base.time_dependent


class SumField(ScalarField):
    def __init__(self, *parts: ScalarField):
        self.parts = parts
        self.dim = parts[0].dim

    def __call__(self, x, t=0.0):
        return sum(p(x, t) for p in self.parts)

    def grad(self, x, t=0.0):
        return sum(p.grad(x, t) for p in self.parts)

    def hess(self, x, t=0.0):
        return sum(p.hess(x, t) for p in self.parts)

    @property
    def time_dependent(self) -> bool:
        return any(p.time_dependent for p in self.parts)


def sup_norms(field: ScalarField, grid: BoxGrid, times=(0.0,)) -> tuple[float, float]:
    """(max |field|, max |grad field|) sampled at grid nodes and the given times."""
    vmax = 0.0
    gmax = 0.0
    for t in times:
        vmax = max(vmax, float(np.max(np.abs(field(grid.nodes, t)))))
        gmax = max(gmax, float(np.max(np.linalg.norm(field.grad(grid.nodes, t), axis=-1))))
    return vmax, gmax

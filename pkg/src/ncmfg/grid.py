"""Uniform box grids and multilinear interpolation."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError, OutOfDomainError, StencilError

_EDGE_TOL = 1e-12


@dataclass(frozen=True)
class BoxGrid:
    """Tensor grid with ``n[k]`` equispaced nodes on ``[lo[k], hi[k]]``."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    n: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.lo) == len(self.hi) == len(self.n)):
            raise ConfigError("grid lo/hi/n lengths differ")
        for a, b, k in zip(self.lo, self.hi, self.n):
            if not b > a:
                raise ConfigError(f"empty grid interval [{a}, {b}]")
            if k < 3:
                raise ConfigError("a grid axis needs at least 3 nodes")

    @classmethod
    def from_spacing(cls, lo, hi, dx) -> "BoxGrid":
        lo = tuple(float(v) for v in lo)
        hi = tuple(float(v) for v in hi)
        dxs = np.broadcast_to(np.asarray(dx, dtype=float), (len(lo),))
        n = tuple(int(round((b - a) / h)) + 1 for a, b, h in zip(lo, hi, dxs))
        return cls(lo, hi, n)

    @property
    def dim(self) -> int:
        return len(self.n)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n

    @cached_property
    def spacing(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / (np.asarray(self.n) - 1)

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(np.linspace(a, b, k) for a, b, k in zip(self.lo, self.hi, self.n))

    @cached_property
    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``(n_nodes, d)``, row-major (C) node order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.n))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def refined(self) -> "BoxGrid":
        return BoxGrid(self.lo, self.hi, tuple(2 * k - 1 for k in self.n))

    def contains(self, points, tol: float = _EDGE_TOL) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        scale = tol * np.maximum(1.0, np.abs(hi - lo))
        return np.all((p >= lo - scale) & (p <= hi + scale), axis=-1)

    def region_mask(self, lo, hi) -> np.ndarray:
        """Boolean array over the grid shape selecting nodes inside ``[lo, hi]``."""
        inside = self.contains_box(self.nodes, lo, hi)
        return inside.reshape(self.shape)

    @staticmethod
    def contains_box(points, lo, hi, tol: float = 1e-12) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return np.all((p >= np.asarray(lo) - tol) & (p <= np.asarray(hi) + tol), axis=-1)

    def interpolate(self, values, points, clamp: bool = False) -> np.ndarray:
        """Multilinear interpolation of nodal ``values`` at ``points`` (..., d).

        With ``clamp`` the points are projected onto the box first; otherwise a
        point outside the box raises :class:`OutOfDomainError`.
        """
        values = np.asarray(values, dtype=float)
        p = np.asarray(points, dtype=float)
        if p.shape[-1] != self.dim:
            raise ValueError(f"points have trailing dimension {p.shape[-1]}, grid is {self.dim}-d")
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        if clamp:
            p = np.clip(p, lo, hi)
        elif not np.all(self.contains(p)):
            raise OutOfDomainError("interpolation point outside the grid box")
        s = (p - lo) / self.spacing
        n = np.asarray(self.n)
        i0 = np.clip(np.floor(s).astype(np.int64), 0, n - 2)
        w = np.clip(s - i0, 0.0, 1.0)
        out = np.zeros(p.shape[:-1])
        for corner in range(1 << self.dim):
            weight = np.ones(p.shape[:-1])
            idx = []
            for k in range(self.dim):
                bit = (corner >> k) & 1
                weight = weight * (w[..., k] if bit else 1.0 - w[..., k])
                idx.append(i0[..., k] + bit)
            out += weight * values[tuple(idx)]
        return out


@dataclass(frozen=True)
class GridFunction:
    """Scalar field known through nodal values on a :class:`BoxGrid`."""

    grid: BoxGrid
    values: np.ndarray

    def __call__(self, x, t: float = 0.0) -> np.ndarray:
        return self.grid.interpolate(self.values, x)

    @cached_property
    def nodal_gradient(self) -> np.ndarray:
        """Central differences inside, second-order one-sided at the boundary."""
        grads = np.gradient(self.values, *self.grid.spacing, edge_order=2)
        if self.grid.dim == 1:
            grads = [grads]
        return np.stack(grads, axis=-1)

    def grad(self, x, t: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not np.all(self.grid.contains(x)):
            raise StencilError("point too close to (or outside) the grid boundary for the stencil")
        return np.stack(
            [self.grid.interpolate(self.nodal_gradient[..., k], x) for k in range(self.grid.dim)],
            axis=-1,
        )

"""Compactly supported smooth kernels: the product triweight mollifier and a C-infinity box cutoff."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .grid import BoxGrid


@dataclass(frozen=True)
class Mollifier:
    """Product of 1-d triweight bumps ``c (1 - (s/w)^2)^3`` on ``|s| < w``.

    Each factor integrates to one, so the kernel is a probability density with
    support ``[-w, w]^d``.  It is C^2 with a jump in the third derivative.
    """

    width: float
    dim: int

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("mollifier width must be positive")

    @property
    def c(self) -> float:
        return 35.0 / (32.0 * self.width)

    def phi(self, s) -> np.ndarray:
        q = (np.asarray(s, dtype=float) / self.width) ** 2
        return np.where(q < 1.0, self.c * (1.0 - q) ** 3, 0.0)

    def dphi(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        q = (s / self.width) ** 2
        return np.where(q < 1.0, -6.0 * self.c * s * (1.0 - q) ** 2 / self.width**2, 0.0)

    def d2phi(self, s) -> np.ndarray:
        q = (np.asarray(s, dtype=float) / self.width) ** 2
        return np.where(q < 1.0, -6.0 * self.c * (1.0 - q) * (1.0 - 5.0 * q) / self.width**2, 0.0)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.prod(self.phi(x), axis=-1)

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        f = self.phi(x)
        df = self.dphi(x)
        out = np.empty_like(x)
        for k in range(self.dim):
            others = np.prod(np.delete(f, k, axis=-1), axis=-1)
            out[..., k] = df[..., k] * others
        return out

    @property
    def sup(self) -> float:
        return self.c**self.dim

    @property
    def sup_first(self) -> float:
        # max of |phi'| is attained at (s/w)^2 = 1/5
        return 6.0 * self.c / self.width * (1.0 / np.sqrt(5.0)) * (16.0 / 25.0)

    @property
    def sup_second(self) -> float:
        return 6.0 * self.c / self.width**2

    @property
    def c2_norm(self) -> float:
        """Max of sup|rho|, sup|first partials|, sup|second partials| (mixed included)."""
        c, d = self.c, self.dim
        first = self.sup_first * c ** (d - 1)
        pure = self.sup_second * c ** (d - 1)
        mixed = self.sup_first**2 * c ** (d - 2) if d > 1 else 0.0
        return float(max(self.sup, first, pure, mixed))

    @property
    def lipschitz(self) -> float:
        """Lipschitz constant of the kernel: sup of the Euclidean gradient norm."""
        return float(np.sqrt(self.dim) * self.sup_first * self.c ** (self.dim - 1))

    def convolve_points(self, positions, points) -> np.ndarray:
        """(rho * m)(x) for the empirical measure of ``positions`` at ``points`` (..., d)."""
        positions = np.ascontiguousarray(np.atleast_2d(np.asarray(positions, dtype=float)))
        pts = np.asarray(points, dtype=float)
        flat = np.ascontiguousarray(pts.reshape(-1, self.dim))
        out = np.empty(flat.shape[0])
        _convolve(positions, flat, self.width, self.c, out)
        return out.reshape(pts.shape[:-1])

    def convolve_points_grad(self, positions, points) -> np.ndarray:
        return self.convolve_points_value_grad(positions, points)[1]

    def convolve_points_value_grad(self, positions, points) -> tuple[np.ndarray, np.ndarray]:
        """``(rho * m)(x)`` and its gradient in one pass over the particles."""
        positions = np.ascontiguousarray(np.atleast_2d(np.asarray(positions, dtype=float)))
        pts = np.asarray(points, dtype=float)
        flat = np.ascontiguousarray(pts.reshape(-1, self.dim))
        val = np.empty(flat.shape[0])
        out = np.empty_like(flat)
        _convolve_grad(positions, flat, self.width, self.c, val, out)
        return val.reshape(pts.shape[:-1]), out.reshape(pts.shape)

    def convolve_grid(self, positions, grid: BoxGrid, derivative: int | None = None) -> np.ndarray:
        """(rho * m) at every grid node via separable factor matrices.

        With ``derivative=k`` the k-th partial derivative is returned instead.
        """
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        n = positions.shape[0]
        factors = []
        for k, axis in enumerate(grid.axes):
            diff = axis[:, None] - positions[None, :, k]
            factors.append(self.dphi(diff) if derivative == k else self.phi(diff))
        letters = "abcdefgh"[: grid.dim]
        spec = ",".join(f"{c}N" for c in letters) + "->" + letters
        return np.einsum(spec, *factors, optimize=True) / n


@njit(cache=True)
def _convolve(positions, points, w, c, out):
    n, d = positions.shape
    inv = 1.0 / (w * w)
    for i in range(points.shape[0]):
        acc = 0.0
        for j in range(n):
            prod = 1.0
            for k in range(d):
                s = points[i, k] - positions[j, k]
                q = s * s * inv
                if q >= 1.0:
                    prod = 0.0
                    break
                r = 1.0 - q
                prod *= c * r * r * r
            acc += prod
        out[i] = acc / n


@njit(cache=True)
def _convolve_grad(positions, points, w, c, val, out):
    n, d = positions.shape
    inv = 1.0 / (w * w)
    f = np.empty(d)
    df = np.empty(d)
    for i in range(points.shape[0]):
        val[i] = 0.0
        for k in range(d):
            out[i, k] = 0.0
        for j in range(n):
            inside = True
            for k in range(d):
                s = points[i, k] - positions[j, k]
                q = s * s * inv
                if q >= 1.0:
                    inside = False
                    break
                r = 1.0 - q
                f[k] = c * r * r * r
                df[k] = -6.0 * c * s * r * r * inv
            if not inside:
                continue
            prod = 1.0
            for k in range(d):
                prod *= f[k]
            val[i] += prod
            for k in range(d):
                prod = df[k]
                for m in range(d):
                    if m != k:
                        prod *= f[m]
                out[i, k] += prod
        val[i] /= n
        for k in range(d):
            out[i, k] /= n


def _psi(s):
    s = np.asarray(s, dtype=float)
    safe = np.where(s > 0, s, 1.0)
    return np.where(s > 0, np.exp(-1.0 / safe), 0.0)


def _dpsi(s):
    s = np.asarray(s, dtype=float)
    safe = np.where(s > 0, s, 1.0)
    return np.where(s > 0, np.exp(-1.0 / safe) / safe**2, 0.0)


def _d2psi(s):
    s = np.asarray(s, dtype=float)
    safe = np.where(s > 0, s, 1.0)
    return np.where(s > 0, np.exp(-1.0 / safe) * (1.0 / safe**4 - 2.0 / safe**3), 0.0)


def smooth_step(s):
    """C-infinity step: 0 for s <= 0, 1 for s >= 1; returns (S, S', S'')."""
    a, da, d2a = _psi(s), _dpsi(s), _d2psi(s)
    r = 1.0 - np.asarray(s, dtype=float)
    b, db, d2b = _psi(r), -_dpsi(r), _d2psi(r)
    den = a + b
    num1 = da * b - a * db
    val = a / den
    d1 = num1 / den**2
    d2 = ((d2a * b - a * d2b) * den - 2.0 * num1 * (da + db)) / den**3
    return val, d1, d2


@dataclass(frozen=True)
class BoxCutoff:
    """Product cutoff ``prod_k c(x_k)``: 1 for ``|x_k| <= inner``, 0 for ``|x_k| >= outer``."""

    inner: float
    outer: float

    def __post_init__(self):
        if not 0 < self.inner < self.outer:
            raise ValueError("cutoff needs 0 < inner < outer")

    def _factor(self, x):
        ax = np.abs(x)
        w = self.outer - self.inner
        val, d1, d2 = smooth_step((self.outer - ax) / w)
        sign = np.sign(x)
        return val, -d1 * sign / w, d2 / w**2

    def __call__(self, x) -> np.ndarray:
        return np.prod(self._factor(np.asarray(x, dtype=float))[0], axis=-1)

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v, d1, _ = self._factor(x)
        out = np.empty_like(x)
        for k in range(x.shape[-1]):
            out[..., k] = d1[..., k] * np.prod(np.delete(v, k, axis=-1), axis=-1)
        return out

    def hess(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v, d1, d2 = self._factor(x)
        d = x.shape[-1]
        out = np.empty(x.shape + (d,))
        for i in range(d):
            for j in range(d):
                acc = np.ones(x.shape[:-1])
                for k in range(d):
                    if i == j == k:
                        acc = acc * d2[..., k]
                    elif k in (i, j):
                        acc = acc * d1[..., k]
                    else:
                        acc = acc * v[..., k]
                out[..., i, j] = acc
        return out

"""Triangular dynamics matrix B(x), the Hamiltonian ``|pB|^2 / 2`` and the B-calculus.

Row ``i`` of B (0-based) holds ``h_i0 .. h_ii`` and may only depend on the
coordinates ``x_0 .. x_{i-1}``; ``h_00`` is a nonzero constant.  Controls act
through ``x' = alpha B^T(x)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, OutOfDomainError
from .expr import Expression, state_variables

BUILTIN_ENTRIES = {
    "identity2d": [["1"], ["0", "1"]],
    "grushin-sin": [["1"], ["0", "sin(x1)"]],
    "grushin-sigmoid": [["1"], ["0", "x1/sqrt(1 + x1**2)"]],
    "heisenberg3d": [["1"], ["0", "1"], ["-sin(x2)/2", "sin(x1)/2", "0"]],
}


class BField:
    def __init__(self, entries, *, name: str = "custom", domain=None, c2_bound: float | None = None):
        d = len(entries)
        if d == 0:
            raise ConfigError("B needs at least one row")
        names = state_variables(d)
        rows = []
        for i, row in enumerate(entries):
            if len(row) != i + 1:
                raise ConfigError(f"row {i + 1} of B must list exactly {i + 1} entries (lower triangle)")
            parsed = []
            for j, text in enumerate(row):
                e = Expression(text, names)
                allowed = set(names[:i])
                if not e.free_names <= allowed:
                    bad = sorted(e.free_names - allowed)
                    raise ConfigError(f"h_{i + 1}{j + 1} may only depend on x1..x{i}, got {bad}")
                parsed.append(e)
            rows.append(parsed)
        h11 = rows[0][0].constant_value()
        if h11 == 0.0:
            raise ConfigError("h_11 must be a nonzero constant")
        self.name = name
        self.dim = d
        self.entries = rows
        self.domain = None if domain is None else (tuple(map(float, domain[0])), tuple(map(float, domain[1])))
        self._c2_bound = c2_bound
        self._constants = [[e.constant_value() if e.is_constant else None for e in row] for row in rows]
        self._derivs = [[[e.diff(names[k]) for k in range(i)] for e in row] for i, row in enumerate(rows)]

    def __repr__(self) -> str:
        return f"BField({self.name!r}, dim={self.dim})"

    @property
    def texts(self) -> list[list[str]]:
        return [[e.text for e in row] for row in self.entries]

    def _check_domain(self, x: np.ndarray) -> None:
        if self.domain is None:
            return
        lo, hi = np.asarray(self.domain[0]), np.asarray(self.domain[1])
        tol = 1e-9 * np.maximum(1.0, hi - lo)
        if np.any(x < lo - tol) or np.any(x > hi + tol):
            raise OutOfDomainError(f"point outside the computational domain of {self.name}")

    def eval_matrix(self, x, check: bool = True) -> np.ndarray:
        """B at points ``x`` (..., d); ``check=False`` skips the domain test."""
        x = np.asarray(x, dtype=float)
        if check:
            self._check_domain(x)
        args = [x[..., k] for k in range(self.dim)]
        out = np.zeros(x.shape[:-1] + (self.dim, self.dim))
        for i, row in enumerate(self.entries):
            for j, e in enumerate(row):
                if e.is_zero:
                    continue
                if e.is_constant:
                    out[..., i, j] = self._constants[i][j]
                else:
                    out[..., i, j] = e(*args)
        return out

    def jacobian(self, x) -> np.ndarray:
        """``dB[..., i, j, k] = d h_ij / d x_k``."""
        x = np.asarray(x, dtype=float)
        args = [x[..., k] for k in range(self.dim)]
        out = np.zeros(x.shape[:-1] + (self.dim,) * 3)
        for i, row in enumerate(self._derivs):
            for j, ders in enumerate(row):
                for k, e in enumerate(ders):
                    if not e.is_zero:
                        out[..., i, j, k] = e(*args)
        return out

    @property
    def is_constant(self) -> bool:
        return all(e.is_constant for row in self.entries for e in row)

    @property
    def c2_bound(self) -> float:
        if self._c2_bound is None:
            self._c2_bound = estimate_c2_bound(self)
        return self._c2_bound

    def sup_operator_norm(self, points) -> float:
        """max over points of the spectral norm of B(x)."""
        B = self.eval_matrix(points).reshape(-1, self.dim, self.dim)
        return float(np.max(np.linalg.norm(B, ord=2, axis=(1, 2))))

    def sup_bbt_norm(self, points) -> float:
        B = self.eval_matrix(points).reshape(-1, self.dim, self.dim)
        return float(np.max(np.linalg.norm(B @ np.swapaxes(B, 1, 2), ord=2, axis=(1, 2))))


def builtin_bfield(name: str, domain=None) -> BField:
    try:
        entries = BUILTIN_ENTRIES[name]
    except KeyError:
        raise ConfigError(f"unknown B-field id {name!r}; known: {sorted(BUILTIN_ENTRIES)}") from None
    return BField(entries, name=name, domain=domain)


def estimate_c2_bound(bf: BField, box=None, n: int = 65) -> float:
    """Dense-sample estimate of max_ij ||h_ij||_{C^2} over ``box``.

    Takes the larger of the exact derivatives at the samples and their finite
    differences (spacing = sample spacing), so the bound also dominates the
    finite-difference quantities used by the invariant checks.
    """
    if box is None:
        box = bf.domain if bf.domain is not None else ((-1.0,) * bf.dim, (1.0,) * bf.dim)
    lo, hi = np.asarray(box[0], dtype=float), np.asarray(box[1], dtype=float)
    names = state_variables(bf.dim)
    best = 0.0
    for i, row in enumerate(bf.entries):
        if i == 0:
            best = max(best, abs(row[0].constant_value()))
            continue
        axes = [np.linspace(lo[k], hi[k], n) for k in range(i)]
        h = (hi[:i] - lo[:i]) / (n - 1)
        mesh = np.meshgrid(*axes, indexing="ij")
        fill = [np.zeros_like(mesh[0]) for _ in range(bf.dim - i)]
        args = list(mesh) + fill
        for e in row:
            vals = e(*args)
            best = max(best, float(np.max(np.abs(vals))))
            for k in range(i):
                dk = e.diff(names[k])
                best = max(best, float(np.max(np.abs(dk(*args)))))
                best = max(best, float(np.max(np.abs(np.diff(vals, axis=k)))) / h[k])
                for m in range(i):
                    best = max(best, float(np.max(np.abs(dk.diff(names[m])(*args)))))
                best = max(best, float(np.max(np.abs(np.diff(vals, n=2, axis=k)))) / h[k] ** 2)
    return best


def eval_matrix(bf: BField, x) -> np.ndarray:
    return bf.eval_matrix(x)


def hamiltonian(bf: BField, x, p) -> np.ndarray:
    pB = np.einsum("...i,...ij->...j", np.asarray(p, dtype=float), bf.eval_matrix(x))
    return 0.5 * np.sum(pB**2, axis=-1)


def dp_hamiltonian(bf: BField, x, p) -> np.ndarray:
    """``p B(x) B(x)^T``."""
    B = bf.eval_matrix(x)
    pB = np.einsum("...i,...ij->...j", np.asarray(p, dtype=float), B)
    return np.einsum("...j,...ij->...i", pB, B)


def _fd_gradient(phi, x, eps: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        h = eps * (1.0 + np.abs(x[..., k]))[..., None]
        e[k] = 1.0
        cols.append((phi(x + h * e) - phi(x - h * e)) / (2.0 * h[..., 0]))
    return np.stack(cols, axis=-1)


def b_gradient(phi, bf: BField, x) -> np.ndarray:
    """``D_B phi(x) = D phi(x) B(x)``.

    Uses ``phi.grad`` when available (exact for expression fields, central
    differences for :class:`GridFunction`), otherwise central differences of
    the plain callable.
    """
    x = np.asarray(x, dtype=float)
    grad = phi.grad(x) if hasattr(phi, "grad") else _fd_gradient(phi, x)
    return np.einsum("...i,...ij->...j", grad, bf.eval_matrix(x))


def b_divergence(Phi, bf: BField, x, eps: float = 1e-6) -> np.ndarray:
    """``div_B Phi = sum_ij B_ij d_i Phi_j``, which equals ``div(Phi B^T)`` for triangular B."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    B = bf.eval_matrix(x)
    if hasattr(Phi, "jacobian"):
        jac = Phi.jacobian(x)  # [..., j, i] = d_i Phi_j
    else:
        cols = []
        for i in range(d):
            e = np.zeros(d)
            h = eps * (1.0 + np.abs(x[..., i]))[..., None]
            e[i] = 1.0
            cols.append((np.asarray(Phi(x + h * e)) - np.asarray(Phi(x - h * e))) / (2.0 * h))
        jac = np.stack(cols, axis=-1)
    return np.einsum("...ij,...ji->...", B, jac)


@dataclass
class BDifferentiabilityProbe:
    rho: np.ndarray
    radii: np.ndarray
    residuals: np.ndarray
    degenerate: bool = False
    undetermined: list[int] = field(default_factory=list)


def probe_directions(dim: int) -> np.ndarray:
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if dim == 2:
        ang = np.arange(16) * (2 * np.pi / 16)
        return np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    # axes plus a Fibonacci sphere covering, both signs
    n = 20
    k = np.arange(n) + 0.5
    polar = np.arccos(1 - 2 * k / n)
    azim = np.pi * (1 + 5**0.5) * k
    fib = np.stack([np.cos(azim) * np.sin(polar), np.sin(azim) * np.sin(polar), np.cos(polar)], axis=-1)
    dirs = np.concatenate([np.eye(3), -np.eye(3), fib, -fib])
    if dim > 3:
        dirs = np.concatenate([np.eye(dim), -np.eye(dim)])
    return dirs


def perturbed_point(bf: BField, x, v) -> np.ndarray:
    """Iterated B-perturbation: ``xt_i = x_i + sum_{j<=i} h_ij(xt_1..xt_{i-1}) v_j``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    xt = np.broadcast_to(x, v.shape).copy()
    for i in range(bf.dim):
        row = bf.eval_matrix(xt)[..., i, :]
        xt[..., i] = x[..., i] + np.sum(row[..., : i + 1] * v[..., : i + 1], axis=-1)
    return xt


def b_differentiability_probe(u, bf: BField, x, radii) -> BDifferentiabilityProbe:
    """Numerical B-differentiability test at ``x``.

    Fits ``rho_B`` by least squares on the increments ``u(xt) - u(x)`` at the
    smallest radius and reports, for every radius, the sup over sampled
    directions of ``|u(xt) - u(x) - rho_B . v| / |v|``.
    """
    x = np.asarray(x, dtype=float)
    radii = np.asarray(radii, dtype=float)
    if np.any(radii <= 0) or np.any(np.diff(radii) >= 0):
        raise ValueError("radii must be positive and strictly decreasing")
    dirs = probe_directions(bf.dim)
    u0 = float(u(x))
    incs = []
    for r in radii:
        v = r * dirs
        incs.append(u(perturbed_point(bf, x, v)) - u0)
    v_small = radii[-1] * dirs
    rho, *_ = np.linalg.lstsq(v_small, incs[-1], rcond=None)
    residuals = np.array([np.max(np.abs(inc - (r * dirs) @ rho)) / r for r, inc in zip(radii, incs)])
    degenerate = bool(np.all(np.abs(incs[-1]) <= 1e-14 * (1.0 + abs(u0))))
    undetermined: list[int] = []
    if degenerate:
        B = bf.eval_matrix(x)
        undetermined = [j for j in range(bf.dim) if np.all(B[:, j] == 0.0)]
        rho = rho.astype(float)
        rho[undetermined] = np.nan
    return BDifferentiabilityProbe(rho=rho, radii=radii, residuals=residuals, degenerate=degenerate, undetermined=undetermined)


def write_matrix_csv(bf: BField, x, path) -> Path:
    """Row-major dump of B(x) with 1-based indices, header ``i,j,value``."""
    path = Path(path)
    B = bf.eval_matrix(np.asarray(x, dtype=float))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "value"])
        for i in range(bf.dim):
            for j in range(bf.dim):
                w.writerow([i + 1, j + 1, f"{B[i, j]:.17e}"])
    return path

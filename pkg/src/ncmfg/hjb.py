"""Backward semi-Lagrangian solver for ``-u_t + |D_B u|^2 / 2 = f``, ``u(., T) = g``.

One step of the scheme is the discrete dynamic programming principle

    u(x, t_n) = min_a  dt (|a|^2 / 2 + f(x, t_n)) + I[u(., t_{n+1})](x + dt a B(x)^T)

with ``I`` multilinear interpolation and ``a`` ranging over a centred control
lattice refined around the per-node argmin.  Foot points that leave the grid
are projected back onto it, i.e. the grid box acts as a state constraint.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numba import njit, prange

from .bfield import BField
from .errors import ConfigError, OutOfDomainError, StencilError
from .grid import BoxGrid


@njit(cache=True)
def _interp_clamped(u, lo, hi, h, n, strides, y, i0, w):
    d = y.shape[0]
    for k in range(d):
        yk = y[k]
        if yk < lo[k]:
            yk = lo[k]
        elif yk > hi[k]:
            yk = hi[k]
        s = (yk - lo[k]) / h[k]
        ik = int(math.floor(s))
        if ik > n[k] - 2:
            ik = n[k] - 2
        if ik < 0:
            ik = 0
        i0[k] = ik
        wk = s - ik
        if wk < 0.0:
            wk = 0.0
        elif wk > 1.0:
            wk = 1.0
        w[k] = wk
    total = 0.0
    for corner in range(1 << d):
        weight = 1.0
        off = 0
        for k in range(d):
            bit = (corner >> k) & 1
            if bit:
                weight *= w[k]
            else:
                weight *= 1.0 - w[k]
            off += (i0[k] + bit) * strides[k]
        if weight != 0.0:
            total += weight * u[off]
    return total


@njit(cache=True)
def _control_value(u, lo, hi, h, n, strides, x, B, a, dt, y, i0, w):
    d = x.shape[0]
    kin = 0.0
    for j in range(d):
        kin += a[j] * a[j]
        acc = 0.0
        for k in range(d):
            acc += B[j, k] * a[k]
        y[j] = x[j] + dt * acc
    return 0.5 * dt * kin + _interp_clamped(u, lo, hi, h, n, strides, y, i0, w)


@njit(cache=True, parallel=True)
def _sl_layer(u_next, lo, hi, h, n, strides, nodes, bmat, fvals, dt, lattice, offsets, spacing0, n_refine, out):
    n_nodes, d = nodes.shape
    for i in prange(n_nodes):
        y = np.empty(d)
        i0 = np.empty(d, dtype=np.int64)
        w = np.empty(d)
        a = np.empty(d)
        best_a = np.zeros(d)
        center = np.empty(d)
        x = nodes[i]
        B = bmat[i]
        best = np.inf
        for k in range(lattice.shape[0]):
            val = _control_value(u_next, lo, hi, h, n, strides, x, B, lattice[k], dt, y, i0, w)
            if val < best:
                best = val
                for j in range(d):
                    best_a[j] = lattice[k, j]
        step = spacing0
        for _ in range(n_refine):
            step *= 0.5
            for j in range(d):
                center[j] = best_a[j]
            for o in range(offsets.shape[0]):
                for j in range(d):
                    a[j] = center[j] + step * offsets[o, j]
                val = _control_value(u_next, lo, hi, h, n, strides, x, B, a, dt, y, i0, w)
                if val < best:
                    best = val
                    for j in range(d):
                        best_a[j] = a[j]
        out[i] = best + dt * fvals[i]


@njit(cache=True, parallel=True)
def _sl_layer_2d(u, lo, hi, h, n, nodes, bmat, fvals, dt, lattice, offsets, spacing0, n_refine, out):
    n_lat = lattice.shape[0]
    n_off = offsets.shape[0]
    n1 = n[1]
    for i in prange(nodes.shape[0]):
        x0 = nodes[i, 0]
        x1 = nodes[i, 1]
        b00 = bmat[i, 0, 0]
        b01 = bmat[i, 0, 1]
        b10 = bmat[i, 1, 0]
        b11 = bmat[i, 1, 1]
        best = np.inf
        ba0 = 0.0
        ba1 = 0.0
        c0 = 0.0
        c1 = 0.0
        step = spacing0
        for k in range(n_lat + n_refine * n_off):
            if k < n_lat:
                a0 = lattice[k, 0]
                a1 = lattice[k, 1]
            else:
                o = (k - n_lat) % n_off
                if o == 0:
                    step *= 0.5
                    c0 = ba0
                    c1 = ba1
                a0 = c0 + step * offsets[o, 0]
                a1 = c1 + step * offsets[o, 1]
            y0 = min(max(x0 + dt * (b00 * a0 + b01 * a1), lo[0]), hi[0])
            y1 = min(max(x1 + dt * (b10 * a0 + b11 * a1), lo[1]), hi[1])
            s0 = (y0 - lo[0]) / h[0]
            s1 = (y1 - lo[1]) / h[1]
            i0 = min(int(s0), n[0] - 2)
            i1 = min(int(s1), n1 - 2)
            w0 = s0 - i0
            w1 = s1 - i1
            base = i0 * n1 + i1
            v = (1 - w0) * ((1 - w1) * u[base] + w1 * u[base + 1]) + w0 * (
                (1 - w1) * u[base + n1] + w1 * u[base + n1 + 1]
            )
            val = 0.5 * dt * (a0 * a0 + a1 * a1) + v
            if val < best:
                best = val
                ba0 = a0
                ba1 = a1
        out[i] = best + dt * fvals[i]


@njit(cache=True, parallel=True)
def _sl_layer_3d(u, lo, hi, h, n, nodes, bmat, fvals, dt, lattice, offsets, spacing0, n_refine, out):
    n_lat = lattice.shape[0]
    n_off = offsets.shape[0]
    n1 = n[1]
    n2 = n[2]
    st0 = n1 * n2
    for i in prange(nodes.shape[0]):
        x0 = nodes[i, 0]
        x1 = nodes[i, 1]
        x2 = nodes[i, 2]
        B = bmat[i]
        best = np.inf
        ba0 = 0.0
        ba1 = 0.0
        ba2 = 0.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        step = spacing0
        for k in range(n_lat + n_refine * n_off):
            if k < n_lat:
                a0 = lattice[k, 0]
                a1 = lattice[k, 1]
                a2 = lattice[k, 2]
            else:
                o = (k - n_lat) % n_off
                if o == 0:
                    step *= 0.5
                    c0 = ba0
                    c1 = ba1
                    c2 = ba2
                a0 = c0 + step * offsets[o, 0]
                a1 = c1 + step * offsets[o, 1]
                a2 = c2 + step * offsets[o, 2]
            y0 = min(max(x0 + dt * (B[0, 0] * a0 + B[0, 1] * a1 + B[0, 2] * a2), lo[0]), hi[0])
            y1 = min(max(x1 + dt * (B[1, 0] * a0 + B[1, 1] * a1 + B[1, 2] * a2), lo[1]), hi[1])
            y2 = min(max(x2 + dt * (B[2, 0] * a0 + B[2, 1] * a1 + B[2, 2] * a2), lo[2]), hi[2])
            s0 = (y0 - lo[0]) / h[0]
            s1 = (y1 - lo[1]) / h[1]
            s2 = (y2 - lo[2]) / h[2]
            i0 = min(int(s0), n[0] - 2)
            i1 = min(int(s1), n1 - 2)
            i2 = min(int(s2), n2 - 2)
            w0 = s0 - i0
            w1 = s1 - i1
            w2 = s2 - i2
            base = i0 * st0 + i1 * n2 + i2
            lo_plane = (1 - w1) * ((1 - w2) * u[base] + w2 * u[base + 1]) + w1 * (
                (1 - w2) * u[base + n2] + w2 * u[base + n2 + 1]
            )
            b2 = base + st0
            hi_plane = (1 - w1) * ((1 - w2) * u[b2] + w2 * u[b2 + 1]) + w1 * (
                (1 - w2) * u[b2 + n2] + w2 * u[b2 + n2 + 1]
            )
            val = 0.5 * dt * (a0 * a0 + a1 * a1 + a2 * a2) + (1 - w0) * lo_plane + w0 * hi_plane
            if val < best:
                best = val
                ba0 = a0
                ba1 = a1
                ba2 = a2
        out[i] = best + dt * fvals[i]


class NumericBGradient(NamedTuple):
    components: np.ndarray
    kink: np.ndarray


@dataclass(frozen=True)
class RegularityReport:
    lipschitz_x: float
    lipschitz_t: float
    semiconcavity_sup: float

    def as_dict(self) -> dict:
        return {
            "lipschitz_x": self.lipschitz_x,
            "lipschitz_t": self.lipschitz_t,
            "semiconcavity_sup": self.semiconcavity_sup,
        }


@dataclass
class ValueFunction:
    """Space-time samples ``values[n, i1, .., id]`` of u at ``times[n]`` and grid nodes."""

    grid: BoxGrid
    times: np.ndarray
    values: np.ndarray
    field: BField
    regularity: RegularityReport | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values.setflags(write=False)
        if self.regularity is None:
            self.regularity = regularity_report(self)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def lipschitz_x(self) -> float:
        return self.regularity.lipschitz_x

    @property
    def lipschitz_t(self) -> float:
        return self.regularity.lipschitz_t

    @property
    def semiconcavity(self) -> float:
        return self.regularity.semiconcavity_sup

    def _time_bracket(self, t: float) -> tuple[int, float]:
        if t < self.times[0] - 1e-12 or t > self.times[-1] + 1e-12:
            raise OutOfDomainError(f"time {t} outside [0, {self.T}]")
        s = (min(max(t, self.times[0]), self.times[-1]) - self.times[0]) / self.dt
        n = min(int(math.floor(s)), len(self.times) - 2)
        return n, s - n

    def interpolate(self, x, t: float, clamp: bool = True) -> np.ndarray:
        n, theta = self._time_bracket(t)
        lo = self.grid.interpolate(self.values[n], x, clamp=clamp)
        if theta == 0.0:
            return lo
        hi = self.grid.interpolate(self.values[n + 1], x, clamp=clamp)
        return (1.0 - theta) * lo + theta * hi

    def kink_threshold(self) -> np.ndarray:
        return 10.0 * self.grid.spacing * max(self.semiconcavity, 1.0)

    def spatial_gradient(self, x, t: float) -> NumericBGradient:
        """D_x u by centred differences of the interpolant with step dx.

        Where the one-sided slopes along an axis disagree by more than the kink
        threshold, the one-sided slope of smaller modulus is used instead.
        """
        x = np.asarray(x, dtype=float)
        d = self.grid.dim
        lo = np.asarray(self.grid.lo)
        hi = np.asarray(self.grid.hi)
        hs = self.grid.spacing
        pts = [x]
        dists = []
        for k in range(d):
            up = x.copy()
            dn = x.copy()
            up[..., k] = np.minimum(x[..., k] + hs[k], hi[k])
            dn[..., k] = np.maximum(x[..., k] - hs[k], lo[k])
            pts += [up, dn]
            dists.append((up[..., k] - x[..., k], x[..., k] - dn[..., k]))
        vals = self.interpolate(np.stack(pts), t)
        u0 = vals[0]
        grad = np.empty(x.shape)
        kink = np.zeros(x.shape, dtype=bool)
        thr = self.kink_threshold()
        for k in range(d):
            dp, dm = dists[k]
            tiny = 1e-12 * hs[k]
            with np.errstate(invalid="ignore", divide="ignore"):
                sp = np.where(dp > tiny, (vals[1 + 2 * k] - u0) / np.where(dp > tiny, dp, 1.0), np.nan)
                sm = np.where(dm > tiny, (u0 - vals[2 + 2 * k]) / np.where(dm > tiny, dm, 1.0), np.nan)
            sp = np.where(np.isnan(sp), sm, sp)
            sm = np.where(np.isnan(sm), sp, sm)
            central = 0.5 * (sp + sm)
            is_kink = np.abs(sp - sm) > thr[k]
            one_sided = np.where(np.abs(sm) < np.abs(sp), sm, sp)
            grad[..., k] = np.where(is_kink, one_sided, central)
            kink[..., k] = is_kink
        return NumericBGradient(grad, kink)


def _apriori_lipschitz(f_layers, g_vals, grid: BoxGrid, T: float, bnorm: float) -> float:
    def sup_grad(v):
        gr = np.gradient(v, *grid.spacing, edge_order=2)
        if grid.dim == 1:
            gr = [gr]
        return float(np.max(np.sqrt(sum(c**2 for c in gr))))

    gmax = sup_grad(g_vals)
    fmax = max(sup_grad(v) for v in f_layers) if len(f_layers) else 0.0
    return bnorm * (gmax + T * fmax)


def required_padding(f_layers, g_vals, grid: BoxGrid, support, T: float, bnorm: float, lip: float) -> float:
    """A-priori bound on how far optimal trajectories started in ``support`` can travel.

    The smaller of ``T * L * |B|`` and the energy bound
    ``|B| sqrt(2 T E)``, E = (zero-control cost on the support) - (min possible cost).
    """
    mask = grid.region_mask(*support)
    fl = np.asarray(f_layers)
    zero_cost = T * float(np.max(fl[:, mask])) + float(np.max(g_vals[mask]))
    min_cost = T * float(np.min(fl)) + float(np.min(g_vals))
    energy = max(zero_cost - min_cost, 0.0)
    return min(T * lip * bnorm, bnorm * math.sqrt(2.0 * T * energy))


def solve_hjb(
    f,
    g,
    bf: BField,
    grid: BoxGrid,
    T: float,
    *,
    dt: float | None = None,
    support=None,
    n_lattice: int | None = None,
    control_spacing: float | None = None,
    lipschitz_bound: float | None = None,
) -> ValueFunction:
    """Solve the Hamilton-Jacobi equation backward from ``T`` on ``grid``.

    ``f(x, t)`` and ``g(x)`` are field objects exposing ``on_grid``.  When
    ``support`` (a ``(lo, hi)`` box) is given, the grid must contain it padded by
    :func:`required_padding`, otherwise :class:`ConfigError` is raised.
    """
    if not T > 0:
        raise ConfigError("horizon T must be positive")
    if grid.dim != bf.dim:
        raise ConfigError("grid and B-field dimensions differ")
    d = grid.dim
    nodes = grid.nodes
    bmat = np.ascontiguousarray(bf.eval_matrix(nodes))
    bnorm = float(np.max(np.linalg.norm(bmat, ord=2, axis=(1, 2))))
    g_vals = np.asarray(g.on_grid(grid), dtype=float)

    if lipschitz_bound is None:
        probe_times = np.linspace(0.0, T, 5)
        lip = _apriori_lipschitz([f.on_grid(grid, t) for t in probe_times], g_vals, grid, T, bnorm)
    else:
        lip = float(lipschitz_bound)
    radius = 2.0 * lip
    if dt is None:
        dt = float(np.min(grid.spacing)) / (max(radius, 1e-12) * max(1.0, bnorm))
        dt = min(dt, float(np.min(grid.spacing)))
    nt = max(1, int(round(T / dt)))
    dt = T / nt
    times = np.linspace(0.0, T, nt + 1)
    f_layers = [np.asarray(f.on_grid(grid, t), dtype=float) for t in times[:-1]]

    if support is not None:
        need = required_padding(f_layers, g_vals, grid, support, T, bnorm, lip)
        slo, shi = np.asarray(support[0], float), np.asarray(support[1], float)
        have = float(min(np.min(slo - np.asarray(grid.lo)), np.min(np.asarray(grid.hi) - shi)))
        if have < need:
            raise ConfigError(f"padding insufficient: support is {have:.4g} from the grid boundary, need {need:.4g}")

    if n_lattice is None:
        n_lattice = 9 if d <= 2 else 7
    if radius > 0:
        axis = np.linspace(-radius, radius, n_lattice)
        lattice = np.array(list(itertools.product(axis, repeat=d)))
        spacing0 = 2.0 * radius / (n_lattice - 1)
        target = 0.5 * float(np.min(grid.spacing)) if control_spacing is None else float(control_spacing)
        n_refine = max(0, int(math.ceil(math.log2(spacing0 / target))))
    else:
        lattice = np.zeros((1, d))
        spacing0 = 0.0
        n_refine = 0
    offsets = np.array([o for o in itertools.product((-1.0, 0.0, 1.0), repeat=d) if any(o)])

    lo = np.asarray(grid.lo, dtype=float)
    hi = np.asarray(grid.hi, dtype=float)
    hs = np.asarray(grid.spacing, dtype=float)
    n = np.asarray(grid.n, dtype=np.int64)
    strides = np.array([int(np.prod(grid.n[k + 1 :])) for k in range(d)], dtype=np.int64)

    values = np.empty((nt + 1,) + grid.shape)
    values[nt] = g_vals
    layer = np.empty(grid.n_nodes)
    for step in range(nt - 1, -1, -1):
        nxt = np.ascontiguousarray(values[step + 1].ravel())
        fl = np.ascontiguousarray(f_layers[step].ravel())
        if d == 2:
            _sl_layer_2d(nxt, lo, hi, hs, n, nodes, bmat, fl, dt, lattice, offsets, spacing0, n_refine, layer)
        elif d == 3:
            _sl_layer_3d(nxt, lo, hi, hs, n, nodes, bmat, fl, dt, lattice, offsets, spacing0, n_refine, layer)
        else:
            _sl_layer(nxt, lo, hi, hs, n, strides, nodes, bmat, fl, dt, lattice, offsets, spacing0, n_refine, layer)
        values[step] = layer.reshape(grid.shape)

    meta = {
        "dt": dt,
        "nt": nt,
        "lipschitz_apriori": lip,
        "lattice_radius": radius,
        "lattice_points": int(lattice.shape[0]),
        "refine_passes": n_refine,
        "b_norm": bnorm,
        "f_max": float(max(np.max(np.abs(v)) for v in f_layers)),
        "g_max": float(np.max(np.abs(g_vals))),
    }
    return ValueFunction(grid=grid, times=times, values=values, field=bf, meta=meta)


def value_at(u: ValueFunction, x, t: float) -> np.ndarray:
    """Multilinear in space, linear in time; outside the grid raises OutOfDomainError."""
    return u.interpolate(np.asarray(x, dtype=float), t, clamp=False)


def numeric_b_gradient(u: ValueFunction, x, t: float) -> NumericBGradient:
    x = np.asarray(x, dtype=float)
    if not np.all(u.grid.contains(x)):
        raise StencilError("point outside the grid; no difference stencil available")
    grad, kink = u.spatial_gradient(x, t)
    comps = np.einsum("...i,...ij->...j", grad, u.field.eval_matrix(x))
    return NumericBGradient(comps, kink)


def _pair_mask(mask: np.ndarray, axis: int) -> np.ndarray:
    a = [slice(None)] * mask.ndim
    b = [slice(None)] * mask.ndim
    a[axis] = slice(1, None)
    b[axis] = slice(None, -1)
    return mask[tuple(a)] & mask[tuple(b)]


def _triple_mask(mask: np.ndarray, axis: int) -> np.ndarray:
    s = [[slice(None)] * mask.ndim for _ in range(3)]
    s[0][axis] = slice(2, None)
    s[1][axis] = slice(1, -1)
    s[2][axis] = slice(None, -2)
    return mask[tuple(s[0])] & mask[tuple(s[1])] & mask[tuple(s[2])]


def regularity_report(u: ValueFunction, region=None) -> RegularityReport:
    """Finite-difference Lipschitz constants in x and t and the semiconcavity sup.

    ``region`` restricts the scan to nodes inside a ``(lo, hi)`` box.
    """
    grid = u.grid
    mask = np.ones(grid.shape, dtype=bool) if region is None else grid.region_mask(*region)
    v = u.values
    lx = 0.0
    sc = -np.inf
    for k in range(grid.dim):
        h = grid.spacing[k]
        diff = np.abs(np.diff(v, axis=k + 1)) / h
        pm = _pair_mask(mask, k)
        if pm.any():
            lx = max(lx, float(np.max(diff[:, pm])))
        second = np.diff(v, n=2, axis=k + 1) / h**2
        tm = _triple_mask(mask, k)
        if tm.any():
            sc = max(sc, float(np.max(second[:, tm])))
    lt = float(np.max(np.abs(np.diff(v, axis=0))[:, mask])) / u.dt if len(u.times) > 1 else 0.0
    sc = 0.0 if not np.isfinite(sc) else max(sc, 0.0)
    return RegularityReport(lipschitz_x=lx, lipschitz_t=lt, semiconcavity_sup=sc)


def hj_residual(u: ValueFunction, f, region=None, exclude_kinks: bool = True) -> dict:
    """Pointwise residual of ``-u_t + |D_B u|^2/2 - f`` at interior nodes, per layer.

    Uses ``(u^{n+1} - u^n)/dt``, centred differences of ``u^{n+1}`` and
    ``f(., t_n)``, matching the one-step consistency of the scheme.  The
    terminal layer has no residual and is reported as not applicable.
    """
    grid = u.grid
    mask = np.ones(grid.shape, dtype=bool) if region is None else grid.region_mask(*region)
    interior = np.zeros(grid.shape, dtype=bool)
    interior[tuple(slice(1, -1) for _ in range(grid.dim))] = True
    mask &= interior
    B = u.field.eval_matrix(grid.nodes).reshape(grid.shape + (grid.dim, grid.dim))
    thr = u.kink_threshold()
    sup = 0.0
    total = 0.0
    count = 0
    for step in range(len(u.times) - 1):
        nxt = u.values[step + 1]
        grads = np.gradient(nxt, *grid.spacing)
        if grid.dim == 1:
            grads = [grads]
        keep = mask.copy()
        if exclude_kinks:
            for k in range(grid.dim):
                second = np.zeros(grid.shape)
                sl = [slice(None)] * grid.dim
                sl[k] = slice(1, -1)
                second[tuple(sl)] = np.diff(nxt, n=2, axis=k)
                keep &= np.abs(second) / grid.spacing[k] <= thr[k]
        Du = np.stack(grads, axis=-1)
        DBu = np.einsum("...i,...ij->...j", Du, B)
        ut = (nxt - u.values[step]) / u.dt
        res = -ut + 0.5 * np.sum(DBu**2, axis=-1) - np.asarray(f.on_grid(grid, u.times[step]))
        r = np.abs(res[keep])
        if r.size:
            sup = max(sup, float(r.max()))
            total += float(r.sum())
            count += r.size
    return {"sup": sup, "mean": total / count if count else 0.0, "nodes": count, "terminal_layer": "n/a"}


def dpp_residual(u: ValueFunction, f, x, t: float, s: float, n_lattice: int = 41, n_steps: int = 16) -> float:
    """|u(x,t) - min_a [running cost on [t,s] + u(x(s), s)]| over constant controls ``a``."""
    from scipy.optimize import minimize

    x = np.asarray(x, dtype=float)
    bf = u.field
    d = bf.dim
    radius = max(u.meta.get("lattice_radius", 1.0), 1e-3)
    h = (s - t) / n_steps

    def total_cost(controls):
        controls = np.atleast_2d(controls)
        states = np.broadcast_to(x, controls.shape).copy()
        run = np.zeros(controls.shape[0])
        fs = [f(states, t)]
        for k in range(n_steps):
            tau = t + k * h

            def rhs(y):
                return np.einsum("...ij,...j->...i", bf.eval_matrix(y), controls)

            k1 = rhs(states)
            k2 = rhs(states + 0.5 * h * k1)
            k3 = rhs(states + 0.5 * h * k2)
            k4 = rhs(states + h * k3)
            states = states + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            fs.append(f(states, tau + h))
        fs = np.array(fs)
        weights = np.ones(n_steps + 1)
        weights[1:-1:2] = 4
        weights[2:-1:2] = 2
        run = h / 3 * np.tensordot(weights, fs, axes=1) + 0.5 * (s - t) * np.sum(controls**2, axis=-1)
        inside = u.grid.contains(states)
        end = np.where(inside, u.interpolate(states, s, clamp=True), np.inf)
        return run + end

    axis = np.linspace(-radius, radius, n_lattice)
    lattice = np.array(list(itertools.product(axis, repeat=d)))
    costs = total_cost(lattice)
    a0 = lattice[int(np.argmin(costs))]
    res = minimize(lambda a: float(total_cost(a)[0]), a0, method="Nelder-Mead",
                   options={"xatol": 1e-8, "fatol": 1e-12, "maxiter": 2000})
    best = min(float(costs.min()), float(res.fun))
    return abs(float(value_at(u, x, t)) - best)


def write_value_csv(u: ValueFunction, path, time_stride: int = 1) -> Path:
    """CSV ``t,x1..xd,u``; time-major blocks, row-major node order inside a block."""
    path = Path(path)
    d = u.grid.dim
    idx = list(range(0, len(u.times), max(1, time_stride)))
    if idx[-1] != len(u.times) - 1:
        idx.append(len(u.times) - 1)
    nodes = u.grid.nodes
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{k + 1}" for k in range(d)] + ["u"])
        for n in idx:
            vals = u.values[n].ravel()
            tcol = np.full((nodes.shape[0], 1), u.times[n])
            block = np.hstack([tcol, nodes, vals[:, None]])
            np.savetxt(fh, block, delimiter=",", fmt="%.17e")
    return path


def save_values(u: ValueFunction, path) -> Path:
    """Binary dump (``.npy``) of ``values`` with shape ``(nt+1, n1, .., nd)``."""
    path = Path(path)
    np.save(path, np.asarray(u.values))
    return path

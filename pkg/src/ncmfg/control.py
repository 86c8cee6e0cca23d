"""Controlled dynamics ``x' = a B(x)^T``, the cost functional, and the state-adjoint system.

The adjoint system solved by shooting is

    x' = p B B^T,    p' = -1/2 D_x |p B|^2 + D_x f,    x(t) = x0,  p(T) = -grad g(x(T)),

with optimal control ``a = p B``.  The unknown of the shooting map is ``p(t)``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.integrate import cumulative_simpson, simpson
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import minimize

from .bfield import BField
from .errors import ContractError, ExcursionError, NonConvergenceError, SpuriousExtremalError


# ---------------------------------------------------------------- control paths


@dataclass(frozen=True)
class ControlPath:
    """Control on ``[knots[0], knots[-1]]``.

    ``kind="constant"``: ``values[k]`` holds on ``[knots[k], knots[k+1])``, shape ``(K, d)``.
    ``kind="linear"``: ``values[k]`` is the value at ``knots[k]``, shape ``(K+1, d)``.
    """

    knots: np.ndarray
    values: np.ndarray
    kind: str = "constant"

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if knots.ndim != 1 or knots.size < 2 or np.any(np.diff(knots) <= 0):
            raise ContractError("control knots must be strictly increasing with at least two entries")
        expected = knots.size - 1 if self.kind == "constant" else knots.size
        if self.kind not in ("constant", "linear"):
            raise ContractError(f"unknown control interpolation {self.kind!r}")
        if values.shape[0] != expected:
            raise ContractError(f"{self.kind} control needs {expected} values, got {values.shape[0]}")
        if not np.all(np.isfinite(values)):
            raise ContractError("control values must be finite")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant_control(cls, value, t_start: float, t_end: float) -> "ControlPath":
        return cls(np.array([t_start, t_end]), np.atleast_2d(value), "constant")

    @classmethod
    def uniform(cls, values, t_start: float, t_end: float) -> "ControlPath":
        values = np.atleast_2d(values)
        return cls(np.linspace(t_start, t_end, values.shape[0] + 1), values, "constant")

    @property
    def t_start(self) -> float:
        return float(self.knots[0])

    @property
    def t_end(self) -> float:
        return float(self.knots[-1])

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.kind == "linear":
            return np.stack([np.interp(s, self.knots, self.values[:, k]) for k in range(self.dim)], axis=-1)
        idx = np.clip(np.searchsorted(self.knots, s, side="right") - 1, 0, len(self.knots) - 2)
        return self.values[idx]

    def l2_squared(self) -> float:
        """Exact ``int |a|^2`` for both interpolation kinds."""
        dt = np.diff(self.knots)
        if self.kind == "constant":
            return float(np.sum(dt * np.sum(self.values**2, axis=1)))
        a, b = self.values[:-1], self.values[1:]
        return float(np.sum(dt * np.sum(a * a + a * b + b * b, axis=1) / 3.0))


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _substep_grid(knots: np.ndarray, steps_per_unit: int) -> np.ndarray:
    """Uniform even substeps inside every knot interval (knots are grid points)."""
    pieces = []
    for a, b in zip(knots[:-1], knots[1:]):
        m = max(2, int(math.ceil((b - a) * steps_per_unit)))
        m += m % 2
        pieces.append(np.linspace(a, b, m + 1)[:-1])
    pieces.append(knots[-1:])
    return np.concatenate(pieces)


def _check_box(states, box, time, index=None):
    if box is None:
        return
    lo, hi = np.asarray(box[0]), np.asarray(box[1])
    bad = np.any((states < lo - 1e-12) | (states > hi + 1e-12), axis=-1)
    if np.any(bad):
        idx = int(np.flatnonzero(np.atleast_1d(bad))[0]) if index is None else index
        raise ExcursionError(f"trajectory left the computational box at time {time:.6g}", time, idx)


def integrate_dynamics(
    x0, t: float, alpha: ControlPath, bf: BField, *, steps_per_unit: int = 256, box=None
) -> Trajectory:
    """Fixed-step RK4 for ``x' = a(s) B(x)^T`` on ``[t, alpha.t_end]``.

    Knots are integration nodes, so piecewise-constant controls never jump
    inside a step.
    """
    if t < alpha.t_start - 1e-12 or t >= alpha.t_end:
        raise ContractError("start time outside the control window")
    knots = np.concatenate([[t], alpha.knots[alpha.knots > t + 1e-14]])
    times = _substep_grid(knots, steps_per_unit)
    x = np.asarray(x0, dtype=float).copy()
    states = np.empty((times.size,) + x.shape)
    states[0] = x
    _check_box(x, box, t)

    def rhs(y, a):
        return np.einsum("...ij,...j->...i", bf.eval_matrix(y), a)

    for n in range(times.size - 1):
        s, h = times[n], times[n + 1] - times[n]
        if alpha.kind == "constant":
            a0 = a1 = a2 = alpha(s + 0.5 * h)
        else:
            a0, a1, a2 = alpha(s), alpha(s + 0.5 * h), alpha(s + h)
        k1 = rhs(x, a0)
        k2 = rhs(x + 0.5 * h * k1, a1)
        k3 = rhs(x + 0.5 * h * k2, a1)
        k4 = rhs(x + h * k3, a2)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        states[n + 1] = x
        _check_box(x, box, s + h)
    return Trajectory(times, states)


def _simpson_pieces(times, values, knots) -> float:
    """Composite Simpson on each knot interval separately."""
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        sel = (times >= a - 1e-14) & (times <= b + 1e-14)
        total += float(simpson(values[sel], x=times[sel]))
    return total


def cost(traj: Trajectory, alpha: ControlPath, f, g) -> float:
    """``int 1/2 |a|^2 + f(x(s), s) ds + g(x(T))`` over the trajectory window."""
    t0, t1 = float(traj.times[0]), float(traj.times[-1])
    if abs(t1 - alpha.t_end) > 1e-12 or t0 < alpha.t_start - 1e-12:
        raise ContractError("trajectory and control windows differ")
    knots = np.concatenate([[t0], alpha.knots[alpha.knots > t0 + 1e-14]])
    fvals = np.array([f(x, s) for x, s in zip(traj.states, traj.times)], dtype=float)
    if alpha.kind == "constant":
        sub = ControlPath(knots, alpha(0.5 * (knots[:-1] + knots[1:])), "constant")
        kinetic = 0.5 * sub.l2_squared()
    else:
        kinetic = 0.5 * _simpson_pieces(traj.times, np.sum(alpha(traj.times) ** 2, axis=-1), knots)
    return kinetic + _simpson_pieces(traj.times, fvals, knots) + float(g(traj.final))


# ---------------------------------------------------------------- state-adjoint system


def pontryagin_rhs(s: float, x, p, f, bf: BField):
    """Returns ``(x', p')`` of the state-adjoint system (batched over leading axes)."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    B = bf.eval_matrix(x)
    pB = np.einsum("...i,...ij->...j", p, B)
    x_dot = np.einsum("...j,...ij->...i", pB, B)
    dB = bf.jacobian(x)
    dham = np.einsum("...j,...i,...ijk->...k", pB, p, dB)
    p_dot = -dham + f.grad(x, s)
    return x_dot, p_dot


def _flip_adjoint_sign(rhs):
    def faulty(s, x, p, f, bf):
        xd, pd = rhs(s, x, p, f, bf)
        return xd, -pd

    return faulty


@dataclass
class ControlProblem:
    """Data of one optimal control problem: running cost, terminal cost, dynamics, horizon."""

    f: object
    g: object
    field: BField
    T: float
    box: tuple | None = None


@dataclass
class ExtremalPath:
    problem: ControlProblem
    times: np.ndarray
    states: np.ndarray
    adjoints: np.ndarray
    terminal_defect: float
    value: float = float("nan")
    start_guess: np.ndarray | None = None

    @property
    def controls(self) -> np.ndarray:
        # defined from (x, p) so that a = p B holds identically
        B = self.problem.field.eval_matrix(self.states)
        return np.einsum("...i,...ij->...j", self.adjoints, B)

    @property
    def t(self) -> float:
        return float(self.times[0])

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]

    @property
    def p0(self) -> np.ndarray:
        return self.adjoints[0]


@dataclass
class OptimalSet:
    representative: ExtremalPath
    alternates: list[ExtremalPath]
    value: float
    zero_control_cost: float
    spurious: list[ExtremalPath] = field(default_factory=list)
    trace: list = field(default_factory=list)

    @property
    def extremals(self) -> list[ExtremalPath]:
        return [self.representative] + list(self.alternates)


@dataclass(frozen=True)
class ShootingConfig:
    bvp_tol: float = 1e-9
    n_starts: int | None = None
    max_newton: int = 60
    steps_per_unit: int = 200
    min_steps: int = 40
    sanity_margin: float = 1e-6
    uniq_tol: float = 1e-4
    fd_eps: float = 1e-6
    lipschitz_g: float | None = None
    optimal_cost_tol: float = 1e-7


def _n_steps(t: float, T: float, cfg: ShootingConfig) -> int:
    n = max(cfg.min_steps, int(math.ceil((T - t) * cfg.steps_per_unit)))
    return n + n % 2


def _integrate_system(z0, t: float, T: float, n: int, prob: ControlProblem, rhs=pontryagin_rhs, keep: bool = False):
    """Batched RK4 on ``z = (x, p)`` with shape ``(M, 2d)``."""
    d = prob.field.dim
    z = np.array(z0, dtype=float)
    h = (T - t) / n
    path = [z.copy()] if keep else None

    if prob.box is not None:
        lo, hi = np.asarray(prob.box[0], float), np.asarray(prob.box[1], float)
        tol = 1e-9 * np.maximum(1.0, hi - lo)

    def F(s, y):
        # rows that leave the box are dropped (NaN) instead of aborting the batch
        ok = np.all(np.isfinite(y), axis=-1)
        if prob.box is not None:
            x = y[..., :d]
            ok &= np.all((x >= lo - tol) & (x <= hi + tol), axis=-1)
        if ok.all():
            xd, pd = rhs(s, y[..., :d], y[..., d:], prob.f, prob.field)
            return np.concatenate([xd, pd], axis=-1)
        out = np.full(y.shape, np.nan)
        if ok.any():
            xd, pd = rhs(s, y[ok, :d], y[ok, d:], prob.f, prob.field)
            out[ok] = np.concatenate([xd, pd], axis=-1)
        return out

    for k in range(n):
        s = t + k * h
        k1 = F(s, z)
        k2 = F(s + 0.5 * h, z + 0.5 * h * k1)
        k3 = F(s + 0.5 * h, z + 0.5 * h * k2)
        k4 = F(s + h, z + h * k3)
        z = z + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if keep:
            path.append(z.copy())
    times = np.linspace(t, T, n + 1)
    return times, (np.stack(path) if keep else z)


def _defect(p0s, x0, t, n, prob, rhs):
    d = prob.field.dim
    z0 = np.concatenate([np.broadcast_to(x0, p0s.shape), p0s], axis=-1)
    _, zT = _integrate_system(z0, t, prob.T, n, prob, rhs)
    xT, pT = zT[..., :d], zT[..., d:]
    ok = np.all(np.isfinite(zT), axis=-1)
    if ok.all():
        return pT + prob.g.grad(xT)
    out = np.full(pT.shape, np.nan)
    if ok.any():
        out[ok] = pT[ok] + prob.g.grad(xT[ok])
    return out


def default_starts(dim: int, scale: float, n_starts: int | None = None) -> np.ndarray:
    """Zero plus ``+-scale`` and ``+-scale/2`` along every axis, truncated to ``n_starts``."""
    scale = scale if scale > 0 else 1.0
    starts = [np.zeros(dim)]
    for k in range(dim):
        for c in (scale, -scale, 0.5 * scale, -0.5 * scale):
            v = np.zeros(dim)
            v[k] = c
            starts.append(v)
    starts = np.array(starts)
    return starts if n_starts is None else starts[:n_starts]


def _terminal_lipschitz(prob: ControlProblem, x0) -> float:
    if prob.box is not None:
        lo, hi = np.asarray(prob.box[0]), np.asarray(prob.box[1])
        axes = [np.linspace(a, b, 17) for a, b in zip(lo, hi)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(lo))
    else:
        pts = np.asarray(x0, dtype=float)[None]
    return float(np.max(np.linalg.norm(prob.g.grad(pts), axis=-1)))


def _newton_batch(p0s, x0, t, n, prob, cfg, rhs):
    """Damped Newton on the shooting defect for all starts at once."""
    d = prob.field.dim
    p = p0s.copy()
    D = _defect(p, x0, t, n, prob, rhs)
    norm = np.linalg.norm(D, axis=-1)
    history = [norm.copy()]
    active = np.isfinite(norm) & (norm >= cfg.bvp_tol)
    lambdas = 0.5 ** np.arange(8)
    for _ in range(cfg.max_newton):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        pa = p[idx]
        eps = cfg.fd_eps * np.maximum(1.0, np.abs(pa))
        pert = []
        for k in range(d):
            e = np.zeros(d)
            e[k] = 1.0
            pert.append(pa + eps[:, k : k + 1] * e)
            pert.append(pa - eps[:, k : k + 1] * e)
        Dp = _defect(np.concatenate(pert), x0, t, n, prob, rhs).reshape(2 * d, idx.size, d)
        J = np.empty((idx.size, d, d))
        for k in range(d):
            J[:, :, k] = (Dp[2 * k] - Dp[2 * k + 1]) / (2 * eps[:, k : k + 1])
        step = np.stack([np.linalg.lstsq(J[i], -D[idx[i]], rcond=None)[0] for i in range(idx.size)])
        # backtracking: shorter steps are only tried for starts that still need them
        trial = pa[None] + lambdas[:, None, None] * step[None]
        Dt = np.full((lambdas.size, idx.size, d), np.nan)
        nt = np.full((lambdas.size, idx.size), np.inf)
        pending = np.ones(idx.size, dtype=bool)
        for li, lam in enumerate(lambdas):
            rows = np.flatnonzero(pending)
            if rows.size == 0:
                break
            Dt[li, rows] = _defect(trial[li, rows], x0, t, n, prob, rhs)
            nl = np.linalg.norm(Dt[li, rows], axis=-1)
            nt[li, rows] = np.where(np.isfinite(nl), nl, np.inf)
            pending[rows[nt[li, rows] < (1.0 - 1e-4 * lam) * norm[idx[rows]]]] = False
        for i, j in enumerate(idx):
            ok = np.flatnonzero(nt[:, i] < (1.0 - 1e-4 * lambdas) * norm[j])
            if ok.size:
                c = ok[0]
            else:
                c = int(np.argmin(nt[:, i]))
                if not nt[c, i] < norm[j]:
                    active[j] = False
                    continue
            p[j] = trial[c, i]
            D[j] = Dt[c, i]
            norm[j] = nt[c, i]
            if norm[j] < cfg.bvp_tol:
                active[j] = False
        history.append(norm.copy())
    return p, norm, np.stack(history, axis=1)


def extremal_from_adjoint(x0, p0, t: float, prob: ControlProblem, cfg: ShootingConfig = ShootingConfig(), rhs=pontryagin_rhs) -> ExtremalPath:
    """Integrate the state-adjoint system from ``(x0, p0)`` and evaluate its cost."""
    d = prob.field.dim
    n = _n_steps(t, prob.T, cfg)
    z0 = np.concatenate([np.asarray(x0, float), np.asarray(p0, float)])[None]
    times, path = _integrate_system(z0, t, prob.T, n, prob, rhs, keep=True)
    path = path[:, 0]
    xs, ps = path[:, :d], path[:, d:]
    defect = float(np.linalg.norm(ps[-1] + prob.g.grad(xs[-1])))
    ext = ExtremalPath(prob, times, xs, ps, defect, start_guess=np.asarray(p0, float))
    ext.value = extremal_cost(ext)
    return ext


def running_cost(ext: ExtremalPath) -> np.ndarray:
    """Integrand ``1/2 |a|^2 + f`` at the samples of ``ext``."""
    a = ext.controls
    fv = np.array([ext.problem.f(x, s) for x, s in zip(ext.states, ext.times)], dtype=float)
    return 0.5 * np.sum(a**2, axis=-1) + fv


def extremal_cost(ext: ExtremalPath) -> float:
    return float(simpson(running_cost(ext), x=ext.times)) + float(ext.problem.g(ext.states[-1]))


def zero_control_cost(x0, t: float, prob: ControlProblem, n: int = 200) -> float:
    s = np.linspace(t, prob.T, n + 1)
    x0 = np.asarray(x0, dtype=float)
    fv = np.array([prob.f(x0, si) for si in s], dtype=float)
    return float(simpson(fv, x=s)) + float(prob.g(x0))


def solve_bvp_shooting(x0, t: float, prob: ControlProblem, cfg: ShootingConfig = ShootingConfig(), rhs=pontryagin_rhs) -> OptimalSet:
    """Multistart shooting on ``p(t)``; returns every distinct converged extremal, ranked by cost."""
    x0 = np.asarray(x0, dtype=float)
    if not t < prob.T:
        raise ContractError("shooting needs t < T")
    _check_box(x0, prob.box, t)
    d = prob.field.dim
    n = _n_steps(t, prob.T, cfg)
    lip = cfg.lipschitz_g if cfg.lipschitz_g is not None else _terminal_lipschitz(prob, x0)
    starts = default_starts(d, lip, cfg.n_starts)
    p_final, norms, history = _newton_batch(starts, x0, t, n, prob, cfg, rhs)
    converged = np.flatnonzero(norms < cfg.bvp_tol)
    trace = [{"start": starts[i].tolist(), "defects": history[i].tolist()} for i in range(starts.shape[0])]
    if converged.size == 0:
        raise NonConvergenceError(
            f"no shooting start converged (best defect {np.nanmin(norms):.3e})", trace
        )
    unique: list[np.ndarray] = []
    for i in converged:
        pi = p_final[i]
        if all(np.linalg.norm(pi - q) > 1e-6 * max(1.0, np.linalg.norm(q)) for q in unique):
            unique.append(pi)
    exts = [extremal_from_adjoint(x0, p, t, prob, cfg, rhs) for p in unique]
    zc = zero_control_cost(x0, t, prob)
    good = [e for e in exts if e.value <= zc + cfg.sanity_margin]
    bad = [e for e in exts if e.value > zc + cfg.sanity_margin]
    if not good:
        raise SpuriousExtremalError(
            f"every converged extremal costs more than the zero control ({zc:.6g})",
            [{"p0": e.p0.tolist(), "cost": e.value} for e in bad],
        )
    good.sort(key=lambda e: (e.value, tuple(e.p0)))
    return OptimalSet(good[0], good[1:], good[0].value, zc, bad, trace)


def adjoint_integral_residual(ext: ExtremalPath, rhs=pontryagin_rhs) -> float:
    """max_s |p(s) - (-grad g(x(T)) - int_s^T p' dtau)| with the quadrature done by Simpson."""
    pd = np.stack(
        [rhs(s, x, p, ext.problem.f, ext.problem.field)[1] for s, x, p in zip(ext.times, ext.states, ext.adjoints)]
    )
    # integral from s to T = total - integral from t to s
    cum = cumulative_simpson(pd, x=ext.times, axis=0, initial=0.0)
    tail = cum[-1] - cum
    p_rec = -ext.problem.g.grad(ext.states[-1]) - tail
    return float(np.max(np.abs(p_rec - ext.adjoints)))


def pontryagin_residual(ext: ExtremalPath) -> float:
    """Integral-form residual of ``ext`` measured against the true state-adjoint law."""
    return adjoint_integral_residual(ext, pontryagin_rhs)


# ---------------------------------------------------------------- direct search oracle


@dataclass
class OracleResult:
    control: ControlPath
    cost: float
    trace: list


def _pc_costs(controls, x0, t: float, prob: ControlProblem, substeps: int) -> np.ndarray:
    """Costs of a batch of piecewise-constant controls ``(M, K, d)`` on uniform intervals.

    Candidates whose trajectory leaves the box are scored ``+inf``.
    """
    M, K, d = controls.shape
    span = prob.T - t
    h = span / (K * substeps)
    x = np.broadcast_to(np.asarray(x0, float), (M, d)).copy()
    weights = np.ones(K * substeps + 1)
    weights[1:-1:2] = 4
    weights[2:-1:2] = 2
    fsum = weights[0] * prob.f(x, t)
    dead = np.zeros(M, dtype=bool)
    box = None if prob.box is None else (np.asarray(prob.box[0], float), np.asarray(prob.box[1], float))
    field = prob.field
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K):
            a = controls[:, k]

            def rhs(y):
                return np.einsum("mij,mj->mi", field.eval_matrix(y, check=False), a)

            for j in range(substeps):
                k1 = rhs(x)
                k2 = rhs(x + 0.5 * h * k1)
                k3 = rhs(x + 0.5 * h * k2)
                k4 = rhs(x + h * k3)
                x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
                if box is not None:
                    out = ~np.all((x >= box[0]) & (x <= box[1]), axis=-1)
                    if out.any():
                        dead |= out
                        x = np.clip(np.nan_to_num(x), box[0], box[1])
                fsum += weights[k * substeps + j + 1] * prob.f(x, t + (k * substeps + j + 1) * h)
    kinetic = 0.5 * (span / K) * np.sum(controls**2, axis=(1, 2))
    total = kinetic + h / 3.0 * fsum + prob.g(x)
    return np.where(np.isfinite(total) & ~dead, total, np.inf)


def direct_minimize_oracle(
    x0,
    t: float,
    prob: ControlProblem,
    n_steps: int = 8,
    control_grid=None,
    *,
    substeps: int = 4,
    n_levels: int = 3,
    polish: bool = True,
) -> OracleResult:
    """Brute-force search over piecewise-constant controls on ``n_steps`` intervals.

    Coordinate descent over a control grid from several starts, grid halving
    around the incumbent, then a quasi-Newton polish with batched
    finite-difference gradients.  Independent of the adjoint equations.
    """
    x0 = np.asarray(x0, dtype=float)
    d = prob.field.dim
    if control_grid is None:
        radius = max(2.0 * _terminal_lipschitz(prob, x0), 0.5)
        control_grid = np.linspace(-radius, radius, 9)
    grid = np.asarray(control_grid, dtype=float)

    def costs(batch):
        return _pc_costs(batch, x0, t, prob, substeps)

    trace = []
    const = np.array(list(itertools.product(grid, repeat=d)))
    ccost = costs(np.repeat(const[:, None, :], n_steps, axis=1))
    order = np.argsort(ccost, kind="stable")
    starts = [np.zeros((n_steps, d))] + [np.repeat(const[i][None], n_steps, axis=0) for i in order[:2]]

    # coordinate descent from all starts at once, one batch per coordinate
    S = len(starts)
    c = np.stack(starts)
    cur = costs(c)
    spacing = grid[1] - grid[0]
    offsets = grid - grid[len(grid) // 2]
    n_off = offsets.size
    for level in range(n_levels):
        active = np.ones(S, dtype=bool)
        for _ in range(20):
            improved = np.zeros(S, dtype=bool)
            for k in range(n_steps):
                for j in range(d):
                    idx = np.flatnonzero(active)
                    cand = np.repeat(c[idx], n_off, axis=0)
                    cand[:, k, j] += np.tile(offsets * (0.5**level), idx.size)
                    cc = costs(cand).reshape(idx.size, n_off)
                    best = np.argmin(cc, axis=1)
                    for r, i in enumerate(idx):
                        if cc[r, best[r]] < cur[i] - 1e-15:
                            cur[i] = cc[r, best[r]]
                            c[i] = cand[r * n_off + best[r]]
                            improved[i] = True
            active &= improved
            if not active.any():
                break
        trace.append({"level": level, "spacing": spacing * 0.5**level, "cost": float(cur.min())})
    i_best = int(np.argmin(cur))
    best_c, best_cost = c[i_best], float(cur[i_best])

    if polish:
        nvar = n_steps * d

        def fun(v):
            return float(costs(v.reshape(1, n_steps, d))[0])

        def jac(v):
            eps = 1e-6
            pert = np.repeat(v[None], 2 * nvar, axis=0)
            pert[np.arange(nvar), np.arange(nvar)] += eps
            pert[nvar + np.arange(nvar), np.arange(nvar)] -= eps
            cc = costs(pert.reshape(-1, n_steps, d))
            return (cc[:nvar] - cc[nvar:]) / (2 * eps)

        res = minimize(fun, best_c.ravel(), jac=jac, method="BFGS", options={"gtol": 1e-9, "maxiter": 500})
        if res.fun < best_cost:
            best_cost, best_c = float(res.fun), res.x.reshape(n_steps, d)
        trace.append({"level": "polish", "cost": best_cost, "iterations": int(res.nit)})
    return OracleResult(ControlPath.uniform(best_c, t, prob.T), float(best_cost), trace)


# ---------------------------------------------------------------- feedback flow


def feedback_velocity(u, x, s: float) -> np.ndarray:
    """``-D_x u(x, s) B(x) B(x)^T`` with the kink-aware gradient of ``u``."""
    grad, _ = u.spatial_gradient(x, s)
    B = u.field.eval_matrix(x)
    gB = np.einsum("...i,...ij->...j", grad, B)
    return -np.einsum("...j,...ij->...i", gB, B)


def feedback_flow(x0, u, bf: BField | None = None, t0: float = 0.0, t1: float | None = None, n_steps: int | None = None) -> Trajectory:
    """RK4 for the closed-loop dynamics driven by the value function ``u``.

    ``x0`` may be a single point ``(d,)`` or a particle batch ``(N, d)``.  Leaving
    the grid box raises :class:`ExcursionError` with the offending index.
    """
    if bf is not None and bf is not u.field and bf.texts != u.field.texts:
        raise ContractError("value function was computed for a different B-field")
    t1 = u.T if t1 is None else t1
    if t0 < -1e-12 or t1 > u.T + 1e-12 or t1 < t0:
        raise ContractError("flow window outside the value function horizon")
    if n_steps is None:
        n_steps = max(1, int(round((t1 - t0) / u.dt)))
    x = np.array(x0, dtype=float)
    times = np.linspace(t0, t1, n_steps + 1)
    states = np.empty((n_steps + 1,) + x.shape)
    states[0] = x
    box = (u.grid.lo, u.grid.hi)
    single = x.ndim == 1
    _check_box(x, box, t0)
    if t1 == t0:
        return Trajectory(times[:1], states[:1])
    h = (t1 - t0) / n_steps
    for n in range(n_steps):
        s = times[n]
        k1 = feedback_velocity(u, x, s)
        k2 = feedback_velocity(u, np.clip(x + 0.5 * h * k1, u.grid.lo, u.grid.hi), s + 0.5 * h)
        k3 = feedback_velocity(u, np.clip(x + 0.5 * h * k2, u.grid.lo, u.grid.hi), s + 0.5 * h)
        k4 = feedback_velocity(u, np.clip(x + h * k3, u.grid.lo, u.grid.hi), s + h)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        _check_box(x, box, s + h, 0 if single else None)
        states[n + 1] = x
    return Trajectory(times, states)


# ---------------------------------------------------------------- probes


def _sample_path(ext: ExtremalPath, times) -> np.ndarray:
    xd = np.stack(
        [pontryagin_rhs(s, x, p, ext.problem.f, ext.problem.field)[0] for s, x, p in zip(ext.times, ext.states, ext.adjoints)]
    )
    spline = CubicHermiteSpline(ext.times, ext.states, xd, axis=0)
    return spline(times)


def uniqueness_probe(ext: ExtremalPath, s: float, cfg: ShootingConfig = ShootingConfig(), u=None) -> dict:
    """Restart the full multistart shooting from ``(x(s), s)`` and compare with ``ext`` on ``[s, T]``.

    Optimal restarts are those whose cost is within ``cfg.optimal_cost_tol`` of
    the best restart; ``sup_distance`` is taken over them.
    """
    t, T = ext.t, ext.problem.T
    if not (t < s < T):
        return {"status": "n/a", "reason": "probe time must satisfy t < s < T", "s": s}
    xs = _sample_path(ext, np.array([s]))[0]
    restart = solve_bvp_shooting(xs, s, ext.problem, cfg)
    best = restart.value
    distances, costs, optimal = [], [], []
    for e in restart.extremals:
        ref = _sample_path(ext, e.times)
        dist = float(np.max(np.linalg.norm(e.states - ref, axis=-1)))
        distances.append(dist)
        costs.append(e.value)
        optimal.append(e.value <= best + cfg.optimal_cost_tol)
    sup_opt = max(dd for dd, o in zip(distances, optimal) if o)
    report = {
        "status": "ok" if sup_opt < cfg.uniq_tol else "violated",
        "s": s,
        "x_s": xs.tolist(),
        "sup_distance": sup_opt,
        "n_restarts": len(distances),
        "restart_distances": distances,
        "restart_costs": costs,
        "n_optimal": int(sum(optimal)),
    }
    if u is not None:
        from .hjb import numeric_b_gradient

        rep = restart.representative
        sel = (rep.times > s) & (rep.times < T)
        pts, ts = rep.states[sel], rep.times[sel]
        alpha = rep.controls[sel]
        errs = [np.linalg.norm(numeric_b_gradient(u, x, tt).components + a) for x, tt, a in zip(pts, ts, alpha)]
        report["b_gradient_residual"] = float(max(errs)) if errs else 0.0
    return report


def _running_cost_until(ext: ExtremalPath, s: float, cfg: ShootingConfig) -> tuple[float, np.ndarray]:
    """Running cost of ``ext`` on ``[t, s]`` (re-integrated with an even step count) and ``x(s)``."""
    prob = replace(ext.problem, T=s)
    n = _n_steps(ext.t, s, cfg)
    z0 = np.concatenate([ext.x0, ext.p0])[None]
    times, path = _integrate_system(z0, ext.t, s, n, prob, keep=True)
    d = prob.field.dim
    piece = ExtremalPath(prob, times, path[:, 0, :d], path[:, 0, d:], float("nan"))
    return float(simpson(running_cost(piece), x=times)), piece.states[-1]


def concatenation_check(ext: ExtremalPath, s: float, cfg: ShootingConfig = ShootingConfig()) -> dict:
    """``|J(ext) - (running cost on [t, s] + value re-solved from (x(s), s))|``."""
    t, T = ext.t, ext.problem.T
    if not (t < s <= T):
        return {"status": "n/a", "reason": "need t < s <= T", "s": s}
    if s == T:
        run = float(simpson(running_cost(ext), x=ext.times))
        tail = float(ext.problem.g(ext.states[-1]))
    else:
        run, xs = _running_cost_until(ext, s, cfg)
        tail = solve_bvp_shooting(xs, s, ext.problem, cfg).value
    residual = abs(ext.value - (run + tail))
    return {"status": "ok", "s": s, "residual": float(residual), "running": run, "tail_value": tail, "total": ext.value}


def write_extremal_csv(ext: ExtremalPath, path) -> Path:
    path = Path(path)
    d = ext.problem.field.dim
    header = ["s"] + [f"x{k + 1}" for k in range(d)] + [f"p{k + 1}" for k in range(d)] + [f"a{k + 1}" for k in range(d)]
    block = np.hstack([ext.times[:, None], ext.states, ext.adjoints, ext.controls])
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerow(header)
        np.savetxt(fh, block, delimiter=",", fmt="%.17e")
    return path

"""Equal-weight particle measures, their transport by the feedback flow, densities and d1."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.stats import truncnorm

from .bfield import BField
from .control import feedback_flow
from .errors import ConfigError, ContractError
from .grid import BoxGrid
from .kernels import BoxCutoff, Mollifier


@dataclass(frozen=True, eq=False)
class ParticleMeasure:
    """``(1/N) sum_i delta_{positions[i]}`` at time ``time_label``."""

    positions: np.ndarray
    time_label: float = 0.0
    provenance: str = ""
    seed: int | None = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float, ndmin=2)
        if pos.shape[0] == 0:
            raise ContractError("a particle measure needs at least one particle")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def weight(self) -> float:
        return 1.0 / self.size

    @property
    def mass(self) -> float:
        return self.size * self.weight

    @cached_property
    def second_moment(self) -> float:
        return float(np.mean(np.sum(self.positions**2, axis=1)))

    def moved(self, positions, time_label: float) -> "ParticleMeasure":
        return ParticleMeasure(positions, time_label, self.provenance, self.seed)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.positions.min(axis=0), self.positions.max(axis=0)


# ---------------------------------------------------------------- initial data


@dataclass(frozen=True)
class M0Spec:
    """Initial law: ``uniform`` or ``truncated-gaussian`` on a box, or a ``mixture`` of those."""

    kind: str
    lo: tuple = ()
    hi: tuple = ()
    mean: tuple = ()
    std: tuple = ()
    components: tuple = ()
    weights: tuple = ()

    @classmethod
    def from_dict(cls, spec: dict) -> "M0Spec":
        kind = spec.get("kind")
        if kind == "mixture":
            comps = tuple(cls.from_dict(c) for c in spec.get("components", ()))
            if not comps:
                raise ConfigError("mixture needs at least one component")
            w = tuple(float(v) for v in spec.get("weights", [1.0] * len(comps)))
            if len(w) != len(comps) or min(w) < 0 or sum(w) <= 0:
                raise ConfigError("mixture weights must be nonnegative, one per component")
            return cls("mixture", components=comps, weights=w)
        if kind not in ("uniform", "truncated-gaussian"):
            raise ConfigError(f"unsupported m0 kind {kind!r}")
        try:
            lo = tuple(float(v) for v in spec["lo"])
            hi = tuple(float(v) for v in spec["hi"])
        except KeyError as exc:
            raise ConfigError(f"m0 description misses {exc.args[0]!r}") from None
        if len(lo) != len(hi) or any(b <= a for a, b in zip(lo, hi)):
            raise ConfigError("m0 box must have lo < hi in every coordinate")
        if kind == "uniform":
            return cls(kind, lo, hi)
        mean = tuple(float(v) for v in spec.get("mean", [0.5 * (a + b) for a, b in zip(lo, hi)]))
        std = np.broadcast_to(np.asarray(spec.get("std", 1.0), dtype=float), (len(lo),))
        if np.any(std <= 0):
            raise ConfigError("m0 std must be positive")
        return cls(kind, lo, hi, mean, tuple(std.tolist()))

    def to_dict(self) -> dict:
        if self.kind == "mixture":
            return {"kind": "mixture", "components": [c.to_dict() for c in self.components], "weights": list(self.weights)}
        out = {"kind": self.kind, "lo": list(self.lo), "hi": list(self.hi)}
        if self.kind == "truncated-gaussian":
            out.update(mean=list(self.mean), std=list(self.std))
        return out

    @property
    def dim(self) -> int:
        return self.components[0].dim if self.kind == "mixture" else len(self.lo)

    @property
    def support(self) -> tuple[tuple, tuple]:
        if self.kind == "mixture":
            los = np.array([c.support[0] for c in self.components])
            his = np.array([c.support[1] for c in self.components])
            return tuple(los.min(axis=0)), tuple(his.max(axis=0))
        return self.lo, self.hi

    def _draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(self.lo, self.hi, size=(n, len(self.lo)))
        if self.kind == "truncated-gaussian":
            cols = []
            for a, b, mu, sd in zip(self.lo, self.hi, self.mean, self.std):
                q = rng.uniform(size=n)
                cols.append(truncnorm.ppf(q, (a - mu) / sd, (b - mu) / sd, loc=mu, scale=sd))
            return np.stack(cols, axis=-1)
        w = np.asarray(self.weights) / sum(self.weights)
        labels = rng.choice(len(self.components), size=n, p=w)
        out = np.empty((n, self.dim))
        for k, comp in enumerate(self.components):
            sel = labels == k
            if sel.any():
                out[sel] = comp._draw(int(sel.sum()), rng)
        return out


def sample_initial(spec, n: int, seed: int = 0) -> ParticleMeasure:
    """``n`` i.i.d. draws (inverse CDF per axis for truncated Gaussians); reproducible in ``seed``."""
    if isinstance(spec, dict):
        spec = M0Spec.from_dict(spec)
    if n < 1:
        raise ConfigError("need at least one particle")
    rng = np.random.default_rng(seed)
    pos = spec._draw(int(n), rng)
    return ParticleMeasure(pos, 0.0, f"m0:{spec.kind}:seed={seed}:n={n}", seed)


# ---------------------------------------------------------------- transport


def push_forward(m: ParticleMeasure, u, bf: BField | None = None, t_target: float | None = None) -> ParticleMeasure:
    """Transport every particle along the feedback flow of ``u`` from ``m.time_label`` to ``t_target``."""
    t_target = u.T if t_target is None else t_target
    traj = feedback_flow(m.positions, u, bf, m.time_label, t_target)
    return m.moved(traj.final, t_target)


def push_forward_snapshots(m: ParticleMeasure, u, bf: BField | None = None) -> list[ParticleMeasure]:
    """The measure curve at every time level of ``u`` (from ``m.time_label`` on)."""
    traj = feedback_flow(m.positions, u, bf, m.time_label, u.T)
    return [m.moved(x, float(t)) for x, t in zip(traj.states, traj.times)]


def integrate_against(phi, m: ParticleMeasure) -> float:
    return float(np.mean(phi(m.positions)))


# ---------------------------------------------------------------- densities


@dataclass
class DensityGrid:
    grid: BoxGrid
    values: np.ndarray
    total: float
    bandwidth: float
    undersmoothed: bool = False

    def sup(self) -> float:
        return float(self.values.max())


def density_estimate(m: ParticleMeasure, grid: BoxGrid, bandwidth: float) -> DensityGrid:
    """Kernel density estimate with the triweight product kernel, renormalized to unit mass."""
    if not bandwidth > 0:
        raise ConfigError("bandwidth must be positive")
    under = bool(bandwidth < float(np.max(grid.spacing)))
    if under:
        warnings.warn("bandwidth below grid spacing: density is undersmoothed", RuntimeWarning, stacklevel=2)
    values = Mollifier(bandwidth, grid.dim).convolve_grid(m.positions, grid)
    raw = float(values.sum() * grid.cell_volume)
    if raw > 0:
        values = values / raw
    total = float(values.sum() * grid.cell_volume)
    return DensityGrid(grid, values, total, bandwidth, under)


# ---------------------------------------------------------------- d1


@dataclass(frozen=True)
class D1Result:
    value: float
    exact: bool
    n_used: int

    def __float__(self) -> float:
        return self.value


def _subsample(positions: np.ndarray, n: int) -> np.ndarray:
    idx = (np.arange(n) * positions.shape[0]) // n
    return positions[idx]


def d1_distance(mu: ParticleMeasure, nu: ParticleMeasure, n_exact: int = 512) -> D1Result:
    """Kantorovich-Rubinstein distance between equal-weight clouds by optimal assignment.

    Clouds of different size, or larger than ``n_exact``, are first reduced by
    deterministic evenly spaced subsampling; the result then reports ``exact=False``.
    """
    a, b = mu.positions, nu.positions
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError("empty measure")
    n = min(a.shape[0], b.shape[0], n_exact)
    exact = a.shape[0] == b.shape[0] == n
    if a.shape[0] != n:
        a = _subsample(a, n)
    if b.shape[0] != n:
        b = _subsample(b, n)
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return D1Result(float(cost[rows, cols].mean()), exact, n)


# ---------------------------------------------------------------- diagnostics


def lipschitz_certificate(u, bf: BField, region=None) -> float:
    """Speed bound ``sqrt(d) * lipschitz_x * sup |B B^T|`` for the feedback flow."""
    from .hjb import regularity_report

    lip = regularity_report(u, region).lipschitz_x if region is not None else u.lipschitz_x
    bbt = bf.sup_bbt_norm(u.grid.nodes)
    return float(np.sqrt(bf.dim) * lip * max(1.0, bbt))


def time_lipschitz_report(snapshots, u, bf: BField, tol: float = 1e-3, n_exact: int = 512) -> dict:
    if len(snapshots) < 2:
        raise ContractError("need at least two snapshots")
    tags = {m.provenance for m in snapshots}
    if len(tags) != 1:
        raise ContractError("snapshots come from different evolutions")
    ratio = 0.0
    for a, b in zip(snapshots[:-1], snapshots[1:]):
        dt = abs(b.time_label - a.time_label)
        if dt > 0:
            ratio = max(ratio, d1_distance(a, b, n_exact).value / dt)
    bound = lipschitz_certificate(u, bf)
    return {"ratio": ratio, "bound": bound, "ok": bool(ratio <= bound + tol)}


@dataclass(frozen=True)
class BumpTestFunction:
    """Smooth compactly supported bump ``chi(x - center)`` (C-infinity box cutoff)."""

    center: tuple
    radius: float

    @property
    def _cut(self) -> BoxCutoff:
        return BoxCutoff(0.25 * self.radius, self.radius)

    def __call__(self, x) -> np.ndarray:
        return self._cut(np.asarray(x, dtype=float) - np.asarray(self.center))

    def grad(self, x) -> np.ndarray:
        return self._cut.grad(np.asarray(x, dtype=float) - np.asarray(self.center))


def default_test_functions(lo, hi) -> list[BumpTestFunction]:
    """Centre bump plus one bump per half-axis of the box ``[lo, hi]``."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    c = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    r = float(half.min())
    out = [BumpTestFunction(tuple(c), r)]
    for k in range(c.size):
        for sgn in (1.0, -1.0):
            ck = c.copy()
            ck[k] += sgn * 0.5 * half[k]
            out.append(BumpTestFunction(tuple(ck), r))
    return out


def weak_form_residual(snapshots, u, bf: BField, test_functions) -> dict:
    """sup over test functions and interior snapshot times of
    ``|d/dt int phi dm + int D_B phi . D_B u dm|`` (centred time differences)."""
    times = np.array([m.time_label for m in snapshots])
    if len(times) < 3:
        raise ContractError("need at least three snapshots")
    sup = 0.0
    per_fn = []
    for phi in test_functions:
        integrals = np.array([integrate_against(phi, m) for m in snapshots])
        worst = 0.0
        for n in range(1, len(times) - 1):
            m = snapshots[n]
            dI = (integrals[n + 1] - integrals[n - 1]) / (times[n + 1] - times[n - 1])
            B = bf.eval_matrix(m.positions)
            grad_u, _ = u.spatial_gradient(m.positions, times[n])
            dbu = np.einsum("ni,nij->nj", grad_u, B)
            dbphi = np.einsum("ni,nij->nj", phi.grad(m.positions), B)
            flux = float(np.mean(np.sum(dbphi * dbu, axis=1)))
            worst = max(worst, abs(dI + flux))
        per_fn.append(worst)
        sup = max(sup, worst)
    return {"sup": sup, "per_function": per_fn}


# ---------------------------------------------------------------- export


def write_particles_csv(m: ParticleMeasure, path) -> Path:
    """``id,x1..xd`` rows plus a ``.json`` sidecar with time, seed and provenance."""
    path = Path(path)
    header = ["id"] + [f"x{k + 1}" for k in range(m.dim)]
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerow(header)
        block = np.hstack([np.arange(m.size)[:, None], m.positions])
        np.savetxt(fh, block, delimiter=",", fmt=["%d"] + ["%.17e"] * m.dim)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({"time_label": m.time_label, "seed": m.seed, "provenance": m.provenance}, indent=2))
    return path


def write_density_csv(dens: DensityGrid, path) -> Path:
    path = Path(path)
    d = dens.grid.dim
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerow([f"x{k + 1}" for k in range(d)] + ["value"])
        np.savetxt(fh, np.hstack([dens.grid.nodes, dens.values.reshape(-1, 1)]), delimiter=",", fmt="%.17e")
    return path

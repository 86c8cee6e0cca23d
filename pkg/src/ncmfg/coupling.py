"""Nonlocal couplings ``F(x,t,m) = V(x, t, (rho*m)(x))``, ``G(x,m) = G(x, (rho*m)(x))`` and scenarios."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .bfield import BField, builtin_bfield
from .errors import CertificationError, ConfigError
from .expr import Expression, state_variables
from .fields import ScalarField
from .grid import BoxGrid
from .kernels import BoxCutoff, Mollifier
from .measure import M0Spec, ParticleMeasure


@dataclass(frozen=True)
class CouplingSpec:
    """``V`` is an expression in ``x1..xd, t, z``; ``G`` in ``x1..xd, z``.

    Optional ``(inner, outer)`` cutoffs multiply the whole of ``V`` or ``G`` by a
    smooth compactly supported box cutoff.
    """

    dim: int
    V: str = "0"
    G: str = "0"
    rho_width: float = 0.5
    g_rho_width: float | None = None
    f_cutoff: tuple | None = None
    g_cutoff: tuple | None = None

    def __post_init__(self):
        if not self.rho_width > 0 or (self.g_rho_width is not None and not self.g_rho_width > 0):
            raise ConfigError("mollifier widths must be positive")
        # parse eagerly so bad expressions fail at construction
        self.v_expr
        self.g_expr

    @property
    def v_expr(self) -> Expression:
        return Expression(self.V, state_variables(self.dim) + ("t", "z"))

    @property
    def g_expr(self) -> Expression:
        return Expression(self.G, state_variables(self.dim) + ("z",))

    @property
    def rho(self) -> Mollifier:
        return Mollifier(self.rho_width, self.dim)

    @property
    def g_rho(self) -> Mollifier:
        return Mollifier(self.g_rho_width or self.rho_width, self.dim)

    @property
    def f_uses_measure(self) -> bool:
        return self.v_expr.depends_on("z")

    @property
    def g_uses_measure(self) -> bool:
        return self.g_expr.depends_on("z")

    @property
    def decoupled(self) -> bool:
        return not (self.f_uses_measure or self.g_uses_measure)

    def z_range(self) -> tuple[float, float]:
        """Values a mollified probability measure can take."""
        return 0.0, max(self.rho.sup, self.g_rho.sup)


def mollified_density(m: ParticleMeasure, rho: Mollifier, x) -> np.ndarray:
    return rho.convolve_points(m.positions, x)


@dataclass
class MeasureCurve:
    """Snapshots of a measure at increasing times; linear in time between them."""

    times: np.ndarray
    snapshots: list

    @classmethod
    def constant(cls, m: ParticleMeasure, T: float) -> "MeasureCurve":
        return cls(np.array([0.0, T]), [m, m])

    @classmethod
    def from_snapshots(cls, snaps) -> "MeasureCurve":
        return cls(np.array([s.time_label for s in snaps]), list(snaps))

    def bracket(self, t: float) -> tuple[int, float]:
        t = min(max(float(t), self.times[0]), self.times[-1])
        n = int(np.searchsorted(self.times, t, side="right") - 1)
        n = min(max(n, 0), len(self.times) - 2)
        span = self.times[n + 1] - self.times[n]
        theta = (t - self.times[n]) / span if span > 0 else 0.0
        if theta >= 1.0 - 1e-12:
            n, theta = n + 1, 0.0
        return n, theta

    @property
    def final(self) -> ParticleMeasure:
        return self.snapshots[-1]


class _Mollified:
    """z(x, t) = (rho * m(t))(x) with caching of grid evaluations."""

    def __init__(self, curve: MeasureCurve, rho: Mollifier):
        self.curve = curve
        self.rho = rho
        self._grid_cache: dict = {}

    def _mix(self, t, fn):
        if len(self.curve.times) == 1:
            return fn(self.curve.snapshots[0])
        n, theta = self.curve.bracket(t)
        a = fn(self.curve.snapshots[n])
        if theta == 0.0 or self.curve.snapshots[n + 1] is self.curve.snapshots[n]:
            return a
        return (1.0 - theta) * a + theta * fn(self.curve.snapshots[n + 1])

    def value(self, x, t):
        return self._mix(t, lambda m: self.rho.convolve_points(m.positions, x))

    def grad(self, x, t):
        return self._mix(t, lambda m: self.rho.convolve_points_grad(m.positions, x))

    def value_grad(self, x, t):
        def one(m):
            return self.rho.convolve_points_value_grad(m.positions, x)

        if len(self.curve.times) == 1:
            return one(self.curve.snapshots[0])
        n, theta = self.curve.bracket(t)
        a = one(self.curve.snapshots[n])
        if theta == 0.0 or self.curve.snapshots[n + 1] is self.curve.snapshots[n]:
            return a
        b = one(self.curve.snapshots[n + 1])
        return (1.0 - theta) * a[0] + theta * b[0], (1.0 - theta) * a[1] + theta * b[1]

    def on_grid(self, grid: BoxGrid, t):
        def one(m):
            key = (id(m), grid)
            if key not in self._grid_cache:
                self._grid_cache[key] = self.rho.convolve_grid(m.positions, grid).ravel()
            return self._grid_cache[key]

        return self._mix(t, one)


class _CutoffMixin:
    cutoff: BoxCutoff | None

    def _chi(self, x):
        return np.ones(np.shape(x)[:-1]) if self.cutoff is None else self.cutoff(x)

    def _dchi(self, x):
        return np.zeros(np.shape(x)) if self.cutoff is None else self.cutoff.grad(x)


class RunningCostField(_CutoffMixin, ScalarField):
    """``f(x, t) = F(x, t, m(t))`` for a frozen measure curve."""

    def __init__(self, spec: CouplingSpec, curve: MeasureCurve | None):
        self.spec = spec
        self.dim = spec.dim
        self.expr = spec.v_expr
        xs = state_variables(self.dim)
        self._dx = [self.expr.diff(v) for v in xs]
        self._dz = self.expr.diff("z")
        self.cutoff = None if spec.f_cutoff is None else BoxCutoff(*spec.f_cutoff)
        if spec.f_uses_measure and curve is None:
            raise ConfigError("a measure curve is required when V depends on z")
        self.z = _Mollified(curve, spec.rho) if spec.f_uses_measure else None

    def _args(self, x, t, z):
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        return [x[..., k] for k in range(self.dim)] + [np.full(shape, float(t)), np.broadcast_to(z, shape)]

    def _z(self, x, t):
        return self.z.value(x, t) if self.z is not None else np.zeros(np.shape(x)[:-1])

    def __call__(self, x, t=0.0):
        return self.expr(*self._args(x, t, self._z(x, t))) * self._chi(x)

    def grad(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        if self.z is not None:
            z, dz = self.z.value_grad(x, t)
        else:
            z, dz = np.zeros(x.shape[:-1]), None
        args = self._args(x, t, z)
        g = np.stack([d(*args) for d in self._dx], axis=-1)
        if dz is not None:
            g = g + self._dz(*args)[..., None] * dz
        val = self.expr(*args)
        return g * self._chi(x)[..., None] + val[..., None] * self._dchi(x)

    def on_grid(self, grid: BoxGrid, t=0.0):
        z = self.z.on_grid(grid, t) if self.z is not None else np.zeros(grid.n_nodes)
        vals = self.expr(*self._args(grid.nodes, t, z)) * self._chi(grid.nodes)
        return vals.reshape(grid.shape)

    @property
    def time_dependent(self) -> bool:
        return self.expr.depends_on("t") or self.z is not None


class TerminalCostField(_CutoffMixin, ScalarField):
    """``g(x) = G(x, m_T)``."""

    def __init__(self, spec: CouplingSpec, mT: ParticleMeasure | None):
        self.spec = spec
        self.dim = spec.dim
        self.expr = spec.g_expr
        xs = state_variables(self.dim)
        self._dx = [self.expr.diff(v) for v in xs]
        self._dz = self.expr.diff("z")
        self.cutoff = None if spec.g_cutoff is None else BoxCutoff(*spec.g_cutoff)
        if spec.g_uses_measure and mT is None:
            raise ConfigError("a terminal measure is required when G depends on z")
        self.z = _Mollified(MeasureCurve(np.array([0.0]), [mT]), spec.g_rho) if spec.g_uses_measure else None

    def _args(self, x, z):
        x = np.asarray(x, dtype=float)
        return [x[..., k] for k in range(self.dim)] + [np.broadcast_to(z, x.shape[:-1])]

    def _z(self, x):
        return self.z.value(x, 0.0) if self.z is not None else np.zeros(np.shape(x)[:-1])

    def __call__(self, x, t=0.0):
        return self.expr(*self._args(x, self._z(x))) * self._chi(x)

    def grad(self, x, t=0.0):
        x = np.asarray(x, dtype=float)
        if self.z is not None:
            z, dz = self.z.value_grad(x, 0.0)
        else:
            z, dz = np.zeros(x.shape[:-1]), None
        args = self._args(x, z)
        g = np.stack([d(*args) for d in self._dx], axis=-1)
        if dz is not None:
            g = g + self._dz(*args)[..., None] * dz
        return g * self._chi(x)[..., None] + self.expr(*args)[..., None] * self._dchi(x)

    def on_grid(self, grid: BoxGrid, t=0.0):
        z = self.z.on_grid(grid, 0.0) if self.z is not None else np.zeros(grid.n_nodes)
        return (self.expr(*self._args(grid.nodes, z)) * self._chi(grid.nodes)).reshape(grid.shape)


def eval_F(spec: CouplingSpec, x, t: float, m: ParticleMeasure) -> np.ndarray:
    return RunningCostField(spec, MeasureCurve(np.array([t]), [m]))(np.asarray(x, float), t)


def eval_G(spec: CouplingSpec, x, mT: ParticleMeasure) -> np.ndarray:
    return TerminalCostField(spec, mT)(np.asarray(x, float))


def _fd_c2(values: np.ndarray, h: np.ndarray) -> float:
    """max of |v|, first and second (pure and mixed) finite differences on a grid array."""
    d = values.ndim
    out = float(np.max(np.abs(values)))
    firsts = []
    for k in range(d):
        dk = np.gradient(values, h[k], axis=k, edge_order=2)
        firsts.append(dk)
        out = max(out, float(np.max(np.abs(dk))))
        out = max(out, float(np.max(np.abs(np.diff(values, n=2, axis=k)))) / h[k] ** 2)
    for i in range(d):
        for j in range(i + 1, d):
            mixed = np.gradient(firsts[i], h[j], axis=j, edge_order=2)
            out = max(out, float(np.max(np.abs(mixed))))
    return out


def c2_certify(spec: CouplingSpec, box, t_samples, m_samples, n: int = 33, growth: float = 1.5) -> dict:
    """Dense finite-difference C^2 scan of ``F(., t, m)`` and ``G(., m)`` over ``box``.

    Every scan is repeated on a grid with half the spacing; a norm that grows by
    more than the factor ``growth`` signals a kink or blow-up and raises
    :class:`CertificationError`.
    """
    lo, hi = box
    coarse = BoxGrid(tuple(lo), tuple(hi), (n,) * spec.dim)
    fine = coarse.refined()
    f_norm = 0.0
    g_norm = 0.0
    for m in m_samples:
        for t in t_samples:
            curve = MeasureCurve(np.array([t]), [m])
            fld = RunningCostField(spec, curve)
            a = _fd_c2(fld.on_grid(coarse, t), coarse.spacing)
            b = _fd_c2(fld.on_grid(fine, t), fine.spacing)
            if b > growth * a + 1e-12:
                raise CertificationError(f"F norm grows under refinement ({a:.4g} -> {b:.4g})")
            f_norm = max(f_norm, a, b)
        gf = TerminalCostField(spec, m)
        a = _fd_c2(gf.on_grid(coarse), coarse.spacing)
        b = _fd_c2(gf.on_grid(fine), fine.spacing)
        if b > growth * a + 1e-12:
            raise CertificationError(f"G norm grows under refinement ({a:.4g} -> {b:.4g})")
        g_norm = max(g_norm, a, b)
    return {"F": f_norm, "G": g_norm, "C": max(f_norm, g_norm), "z_range": list(spec.z_range())}


# ---------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    bfield: str
    lo: tuple
    hi: tuple
    T: float
    dx: float
    coupling: CouplingSpec
    m0: dict
    n_particles: int = 4096
    seed: int = 0
    dt: float | None = None
    inner: tuple | None = None
    bvp_tol: float = 1e-9
    n_starts: int | None = None
    theta: float = 0.5
    fp_tol: float = 1e-3
    max_iter: int = 50
    bfield_entries: tuple | None = None

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigError("horizon T must be positive")
        if len(self.lo) != len(self.hi) or len(self.lo) != self.coupling.dim:
            raise ConfigError("box and coupling dimensions differ")
        if not self.dx > 0:
            raise ConfigError("grid spacing must be positive")
        if not 0 < self.theta <= 1:
            raise ConfigError("damping theta must lie in (0, 1]")
        if self.n_particles < 1 or self.max_iter < 1:
            raise ConfigError("n_particles and max_iter must be positive")
        spec = self.m0_spec
        if spec.dim != self.dim:
            raise ConfigError("m0 dimension differs from the box")
        slo, shi = spec.support
        if np.any(np.asarray(slo) < np.asarray(self.lo)) or np.any(np.asarray(shi) > np.asarray(self.hi)):
            raise ConfigError("m0 support leaves the computational box")

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def m0_spec(self) -> M0Spec:
        return M0Spec.from_dict(self.m0)

    @property
    def support(self) -> tuple:
        return self.m0_spec.support

    @property
    def inner_region(self) -> tuple:
        if self.inner is not None:
            return self.inner
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        c, r = 0.5 * (lo + hi), 0.25 * (hi - lo)
        return tuple(c - r), tuple(c + r)

    def grid(self, refine: int = 0) -> BoxGrid:
        return BoxGrid.from_spacing(self.lo, self.hi, self.dx / 2**refine)

    def field(self) -> BField:
        domain = (self.lo, self.hi)
        if self.bfield_entries is not None:
            return BField([list(r) for r in self.bfield_entries], name=self.bfield, domain=domain)
        return builtin_bfield(self.bfield, domain)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["coupling"] = asdict(self.coupling)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        data = dict(data)
        coup = dict(data.pop("coupling"))
        for key in ("f_cutoff", "g_cutoff"):
            if coup.get(key) is not None:
                coup[key] = tuple(coup[key])
        data["coupling"] = CouplingSpec(**coup)
        for key in ("lo", "hi"):
            data[key] = tuple(float(v) for v in data[key])
        if data.get("inner") is not None:
            data["inner"] = tuple(tuple(float(v) for v in part) for part in data["inner"])
        if data.get("bfield_entries") is not None:
            data["bfield_entries"] = tuple(tuple(r) for r in data["bfield_entries"])
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**data)

    def with_overrides(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)


_BUMP_2D = "-0.5*exp(-((x1 - 0.5)**2 + (x2 - 0.8)**2)/0.72)"
_BUMP_3D = "-0.3*exp(-((x1 - 0.4)**2 + (x2 - 0.3)**2 + (x3 - 0.5)**2)/0.72)"


def _pair(base: str, bfield: str, lo, hi, dx, g_text, m0, inner, g_cutoff=None, coupled_lo=None, coupled_hi=None):
    d = len(lo)
    decoupled = ScenarioConfig(
        name=f"{base}-decoupled", bfield=bfield, lo=tuple(lo), hi=tuple(hi), T=1.0, dx=dx,
        coupling=CouplingSpec(d, V="0", G=g_text, g_cutoff=g_cutoff), m0=m0, inner=inner,
    )
    coupled = ScenarioConfig(
        name=f"{base}-coupled", bfield=bfield,
        lo=tuple(coupled_lo or lo), hi=tuple(coupled_hi or hi), T=1.0, dx=dx,
        coupling=CouplingSpec(d, V="0.1*z", G=f"{g_text} + 0.05*z", g_cutoff=g_cutoff), m0=m0, inner=inner,
    )
    return [decoupled, coupled]


def builtin_scenarios() -> list[ScenarioConfig]:
    gauss2 = {"kind": "truncated-gaussian", "lo": [-0.75, -0.75], "hi": [0.75, 0.75], "mean": [0.0, -0.3], "std": [0.3, 0.3]}
    out = []
    out += _pair(
        "identity2d", "identity2d", (-2.0, -2.0), (2.0, 2.0), 1 / 32, "0.5*(x1**2 + x2**2)",
        {"kind": "truncated-gaussian", "lo": [-0.75, -0.75], "hi": [0.75, 0.75], "mean": [0.0, 0.0], "std": [0.4, 0.4]},
        ((-1.0, -1.0), (1.0, 1.0)), g_cutoff=(3.0, 4.0), coupled_lo=(-2.5, -2.5), coupled_hi=(2.5, 2.5),
    )
    for name in ("grushin-sin", "grushin-sigmoid"):
        out += _pair(name, name, (-2.5, -2.5), (2.5, 2.5), 1 / 32, _BUMP_2D, gauss2, ((-1.25, -1.25), (1.25, 1.25)))
    out += _pair(
        "heisenberg3d", "heisenberg3d", (-1.75,) * 3, (1.75,) * 3, 1 / 8, _BUMP_3D,
        {"kind": "uniform", "lo": [-0.5] * 3, "hi": [0.5] * 3}, ((-0.875,) * 3, (0.875,) * 3),
    )
    return out


def scenario_by_name(name: str) -> ScenarioConfig:
    for s in builtin_scenarios():
        if s.name == name:
            return s
    names = [s.name for s in builtin_scenarios()]
    raise ConfigError(f"unknown scenario {name!r}; known: {names}")

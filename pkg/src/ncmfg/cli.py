"""Command-line front end.

Exit codes: 0 success, 2 configuration/validation of inputs, 3 fixed-point
nonconvergence, 4 shooting nonconvergence, 5 failed invariant battery,
1 unexpected internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import bfield as bmod
from .control import (
    ControlProblem,
    ShootingConfig,
    _flip_adjoint_sign,
    adjoint_integral_residual,
    concatenation_check,
    pontryagin_rhs,
    pontryagin_residual,
    solve_bvp_shooting,
    uniqueness_probe,
    write_extremal_csv,
)
from .config import load_scenario, parse_override, read_ini
from .coupling import MeasureCurve, ScenarioConfig, builtin_scenarios
from .errors import ConfigError, NCMFGError, NonConvergenceError
from .hjb import regularity_report, save_values, solve_hjb, write_value_csv
from .measure import (
    ParticleMeasure,
    d1_distance,
    default_test_functions,
    density_estimate,
    push_forward_snapshots,
    sample_initial,
    time_lipschitz_report,
    weak_form_residual,
    write_density_csv,
    write_particles_csv,
)
from .mfg import cost_fields, picard_solve, verify_solution, weak_form_tolerance

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_FIXED_POINT = 3
EXIT_SHOOTING = 4
EXIT_VALIDATION = 5

OUTPUT_ENV = "NCMFG_OUTPUT_DIR"


def _version() -> str:
    try:
        return metadata.version("ncmfg")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _write_json(path: Path, data) -> Path:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True))
    return path


class Run:
    """Collects outputs and writes ``manifest.json`` whatever the outcome."""

    def __init__(self, command: str, out: Path):
        self.command = command
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[Path] = []
        self.scenario: ScenarioConfig | None = None
        self.resolution: dict = {}
        self.started = time.time()

    def add(self, path: Path) -> Path:
        self.outputs.append(Path(path))
        return path

    def finish(self, status: int, error: dict | None = None) -> int:
        manifest = {
            "command": self.command,
            "tool_version": _version(),
            "scenario": None if self.scenario is None else self.scenario.to_dict(),
            "overrides": self.resolution.get("overrides", []),
            "seed": None if self.scenario is None else self.scenario.seed,
            "wall_clock_seconds": time.time() - self.started,
            "outputs": {p.name: _sha256(p) for p in self.outputs if p.exists()},
            "exit_status": status,
        }
        if error is not None:
            manifest["error"] = error
        _write_json(self.out / "manifest.json", manifest)
        return status


def _error(kind: str, message: str, **extra) -> dict:
    err = {"error": kind, "message": message, **extra}
    print(json.dumps(_jsonable(err)), file=sys.stderr)
    return err


def _resolve(args, run: Run) -> ScenarioConfig:
    sc, resolution = load_scenario(args.config, args.scenario, args.set or ())
    run.scenario = sc
    run.resolution = resolution
    return sc


def _frozen_problem(sc: ScenarioConfig):
    """Costs with the measure frozen at the sampled initial law (the plain control problem when decoupled)."""
    m0 = sample_initial(sc.m0_spec, sc.n_particles, sc.seed)
    f, g = cost_fields(sc, MeasureCurve.constant(m0, sc.T))
    return m0, f, g


def _hopf_lax_check(sc: ScenarioConfig, u) -> dict | None:
    text = sc.coupling.G.replace(" ", "")
    if not (sc.bfield == "identity2d" and sc.coupling.V.strip() == "0" and text == "0.5*(x1**2+x2**2)"):
        return None
    if sc.coupling.g_cutoff is not None and sc.coupling.g_cutoff[0] < float(np.max(np.abs(np.r_[sc.lo, sc.hi]))):
        return None
    mask = u.grid.region_mask(*sc.inner_region)
    r2 = np.sum(u.grid.nodes**2, axis=1).reshape(u.grid.shape)
    err = max(float(np.max(np.abs(u.values[n] - r2 / (2 * (1 + sc.T - t)))[mask])) for n, t in enumerate(u.times))
    return {"sup_error_inner": err, "formula": "|x|^2 / (2 (1 + T - t))"}


# ---------------------------------------------------------------- commands


def cmd_scenarios(args) -> int:
    for sc in builtin_scenarios():
        if args.json:
            print(json.dumps(_jsonable(sc.to_dict())))
        else:
            print(f"{sc.name:26s} B={sc.bfield:16s} d={sc.dim} T={sc.T} dx={sc.dx} V={sc.coupling.V!r}")
    return EXIT_OK


def cmd_solve_hjb(args, run: Run) -> int:
    sc = _resolve(args, run)
    _, f, g = _frozen_problem(sc)
    u = solve_hjb(f, g, sc.field(), sc.grid(), sc.T, dt=sc.dt, support=sc.support)
    run.add(write_value_csv(u, run.out / "u.csv", args.time_stride))
    run.add(save_values(u, run.out / "u.npy"))
    report = {
        "regularity": u.regularity.as_dict(),
        "regularity_inner": regularity_report(u, sc.inner_region).as_dict(),
        "bound": {"max_abs_u": float(np.max(np.abs(u.values))), "T_f_plus_g": sc.T * u.meta["f_max"] + u.meta["g_max"]},
        "meta": u.meta,
    }
    hl = _hopf_lax_check(sc, u)
    if hl is not None:
        report["hopf_lax"] = hl
    run.add(_write_json(run.out / "regularity.json", report))
    return EXIT_OK


def _export_curve(run: Run, snaps, stride: int, prefix: str = "m_t"):
    idx = list(range(0, len(snaps), max(1, stride)))
    if idx[-1] != len(snaps) - 1:
        idx.append(len(snaps) - 1)
    for n in idx:
        p = run.add(write_particles_csv(snaps[n], run.out / f"{prefix}{n:04d}.csv"))
        run.add(p.with_suffix(".json"))


def cmd_solve_mfg(args, run: Run) -> int:
    sc = _resolve(args, run)
    sol = picard_solve(sc)
    run.add(write_value_csv(sol.u, run.out / "u.csv", args.time_stride))
    _export_curve(run, sol.flow_snapshots, args.snapshot_stride)
    diag = {
        "status": sol.status,
        "iterations": sol.iterations,
        "residual_history": sol.residual_history,
        "regularity": sol.u.regularity.as_dict(),
        **sol.diagnostics,
    }
    if sol.converged and args.verify:
        diag["verification"] = verify_solution(sol, sc, probe=False)
    run.add(_write_json(run.out / "diagnostics.json", diag))
    run.add(_write_json(run.out / "scenario.lock", {"scenario": sc.to_dict(), **run.resolution}))
    if not sol.converged:
        _error("fixed-point-nonconvergence", f"no convergence in {sol.iterations} iterations",
               residual_history=sol.residual_history)
        return EXIT_FIXED_POINT
    return EXIT_OK


def _parse_point(text: str, dim: int) -> np.ndarray:
    try:
        x = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ConfigError(f"cannot parse point {text!r}") from None
    if x.size != dim:
        raise ConfigError(f"point needs {dim} coordinates")
    return x


def cmd_trajectory(args, run: Run) -> int:
    sc = _resolve(args, run)
    x0 = _parse_point(args.x0, sc.dim)
    if np.any(x0 < np.asarray(sc.lo)) or np.any(x0 > np.asarray(sc.hi)):
        raise ConfigError(f"x0={x0.tolist()} lies outside the box")
    if not 0 <= args.t < sc.T:
        raise ConfigError("start time must satisfy 0 <= t < T")
    _, f, g = _frozen_problem(sc)
    prob = ControlProblem(f, g, sc.field(), sc.T, (sc.lo, sc.hi))
    cfg = ShootingConfig(bvp_tol=sc.bvp_tol, n_starts=sc.n_starts)
    opt = solve_bvp_shooting(x0, args.t, prob, cfg)
    ext = opt.representative
    run.add(write_extremal_csv(ext, run.out / "extremal.csv"))
    s = args.t + 0.5 * (sc.T - args.t)
    report = {
        "value": opt.value,
        "zero_control_cost": opt.zero_control_cost,
        "terminal_defect": ext.terminal_defect,
        "adjoint_integral_residual": adjoint_integral_residual(ext),
        "n_extremals": len(opt.extremals),
        "n_spurious": len(opt.spurious),
        "uniqueness": uniqueness_probe(ext, s, cfg),
        "concatenation": concatenation_check(ext, s, cfg),
    }
    run.add(_write_json(run.out / "probes.json", report))
    return EXIT_OK


def cmd_pushforward(args, run: Run) -> int:
    sc = _resolve(args, run)
    m0, f, g = _frozen_problem(sc)
    bf = sc.field()
    u = solve_hjb(f, g, bf, sc.grid(), sc.T, dt=sc.dt, support=sc.support)
    snaps = push_forward_snapshots(m0, u, bf)
    _export_curve(run, snaps, args.snapshot_stride)
    dens = density_estimate(snaps[-1], sc.grid(), args.bandwidth)
    run.add(write_density_csv(dens, run.out / "density_T.csv"))
    lo, hi = sc.support
    pad = 0.25 * (np.asarray(hi) - np.asarray(lo))
    weak = weak_form_residual(snaps, u, bf, default_test_functions(np.asarray(lo) - pad, np.asarray(hi) + pad))
    report = {
        "mass_before": m0.mass,
        "mass_after": snaps[-1].mass,
        "count_before": m0.size,
        "count_after": snaps[-1].size,
        "weak_form": {**weak, "tolerance": weak_form_tolerance(u, m0.size)},
        "time_lipschitz": time_lipschitz_report(snaps, u, bf),
        "density_total": dens.total,
        "density_sup": dens.sup(),
        "undersmoothed": dens.undersmoothed,
    }
    run.add(_write_json(run.out / "pushforward.json", report))
    return EXIT_OK


# ---------------------------------------------------------------- validation battery


def _check(results: list, scenario: str, name: str, ok: bool, **detail):
    results.append({"scenario": scenario, "check": name, "ok": bool(ok), **detail})


def _validate_scenario(sc: ScenarioConfig, run: Run, results: list, fault: str | None, tag: str):
    bf = sc.field()
    grid = sc.grid()
    rng = np.random.default_rng(sc.seed)
    name = sc.name

    # B-field: lower-triangular dependence and p-gradient of the Hamiltonian
    lo, hi = np.asarray(sc.lo), np.asarray(sc.hi)
    pts = rng.uniform(lo, hi, size=(32, sc.dim))
    p = rng.normal(size=(32, sc.dim))
    B = bf.eval_matrix(pts)
    upper = float(np.max(np.abs(np.triu(B, 1))))
    _check(results, name, "bfield-lower-triangular", upper == 0.0, max_upper=upper)
    eps = 1e-4
    fd = np.stack(
        [(bmod.hamiltonian(bf, pts, p + eps * e) - bmod.hamiltonian(bf, pts, p - eps * e)) / (2 * eps) for e in np.eye(sc.dim)],
        axis=-1,
    )
    dp = bmod.dp_hamiltonian(bf, pts, p)
    err = float(np.max(np.abs(fd - dp) / np.maximum(1.0, np.abs(dp))))
    _check(results, name, "dp-hamiltonian-fd", err < 1e-6, error=err)

    # value function
    m0, f, g = _frozen_problem(sc)
    u = solve_hjb(f, g, bf, grid, sc.T, dt=sc.dt, support=sc.support)
    run.add(write_value_csv(u, run.out / f"{tag}_u.csv", max(1, len(u.times) // 4)))
    term = float(np.max(np.abs(u.values[-1] - g.on_grid(grid))))
    _check(results, name, "hjb-terminal-condition", term == 0.0, error=term)
    bound = sc.T * u.meta["f_max"] + u.meta["g_max"] + 1e-6
    umax = float(np.max(np.abs(u.values)))
    _check(results, name, "hjb-uniform-bound", umax <= bound, max_abs_u=umax, bound=bound)
    reg = u.regularity
    _check(results, name, "hjb-regularity-finite", all(np.isfinite(list(reg.as_dict().values()))), **reg.as_dict())

    # extremals
    prob = ControlProblem(f, g, bf, sc.T, (sc.lo, sc.hi))
    cfg = ShootingConfig(bvp_tol=sc.bvp_tol, n_starts=sc.n_starts)
    rhs = _flip_adjoint_sign(pontryagin_rhs) if fault == "adjoint-sign" else pontryagin_rhs
    for k, i in enumerate(np.linspace(0, m0.size - 1, 2).astype(int)):
        x0 = m0.positions[i]
        try:
            ext = solve_bvp_shooting(x0, 0.0, prob, cfg, rhs=rhs).representative
        except NonConvergenceError as exc:
            _check(results, name, f"shooting-{k}", False, error=str(exc))
            continue
        run.add(write_extremal_csv(ext, run.out / f"{tag}_extremal_{k}.csv"))
        _check(results, name, f"shooting-defect-{k}", ext.terminal_defect < sc.bvp_tol, defect=ext.terminal_defect)
        res = pontryagin_residual(ext)
        _check(results, name, f"pontryagin-residual-{k}", res < 1e-7, residual=res)

    # measure transport
    snaps = push_forward_snapshots(m0, u, bf)
    run.add(write_particles_csv(snaps[-1], run.out / f"{tag}_m_T.csv"))
    _check(results, name, "mass-conservation", snaps[-1].size == m0.size and snaps[-1].weight == m0.weight)
    slo, shi = sc.support
    pad = 0.25 * (np.asarray(shi) - np.asarray(slo))
    weak = weak_form_residual(snaps, u, bf, default_test_functions(np.asarray(slo) - pad, np.asarray(shi) + pad))
    tol = weak_form_tolerance(u, m0.size)
    _check(results, name, "weak-form-continuity", weak["sup"] < tol, residual=weak["sup"], tolerance=tol)
    lip = time_lipschitz_report(snaps, u, bf)
    _check(results, name, "time-lipschitz", lip["ok"], ratio=lip["ratio"], bound=lip["bound"])

    # d1 metric axioms on small random clouds
    clouds = [ParticleMeasure(rng.normal(size=(12, sc.dim))) for _ in range(3)]
    a, b, c = clouds
    dab, dba = d1_distance(a, b).value, d1_distance(b, a).value
    dac, dbc = d1_distance(a, c).value, d1_distance(b, c).value
    ok = abs(dab - dba) < 1e-12 and d1_distance(a, a).value == 0.0 and dac <= dab + dbc + 1e-12
    _check(results, name, "d1-metric-axioms", ok)


def cmd_validate(args, run: Run) -> int:
    names: list[str] = []
    entries = read_ini(args.config) if args.config is not None else {}
    listed = entries.get("validate", {}).get("scenarios")
    for item in args.set or ():
        section, key, value = parse_override(item)
        if (section, key) == ("validate", "scenarios"):
            listed = value
    if listed is not None or args.config is not None:
        if listed is not None:
            if not isinstance(listed, list):
                raise ConfigError("validate.scenarios must be a list of scenario names")
            names = [str(v) for v in listed]
        else:
            names = [None]
    elif args.scenario:
        names = [args.scenario]
    else:
        names = [s.name for s in builtin_scenarios() if s.coupling.decoupled]
    if not names:
        raise ConfigError("empty scenario list")
    results: list = []
    for k, nm in enumerate(names):
        sc, resolution = load_scenario(args.config, nm, args.set or ())
        run.scenario = sc if run.scenario is None else run.scenario
        run.resolution = resolution
        _validate_scenario(sc, run, results, args.inject_fault, f"s{k:02d}_{sc.name}")
    failed = [r for r in results if not r["ok"]]
    width = max(len(r["scenario"]) for r in results)
    for r in results:
        print(f"{'PASS' if r['ok'] else 'FAIL'}  {r['scenario']:{width}s}  {r['check']}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    run.add(_write_json(run.out / "validate.json", {"results": results, "failed": len(failed)}))
    if failed:
        _error("validation-failed", f"{len(failed)} invariant checks failed",
               failures=[f"{r['scenario']}:{r['check']}" for r in failed])
        return EXIT_VALIDATION
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncmfg", description="Solvers for first-order mean field games with triangular degenerate dynamics.")
    parser.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default: str):
        p.add_argument("--config", type=Path, default=None, help="INI scenario file")
        p.add_argument("--scenario", default=None, help="built-in scenario name used as base")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config entry")
        p.add_argument("--out", type=Path, default=None, help=f"output directory (default ${OUTPUT_ENV}/{out_default})")

    p = sub.add_parser("scenarios", help="list built-in scenarios")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("solve-hjb", help="solve the HJ equation with the measure frozen at m0")
    common(p, "solve-hjb")
    p.add_argument("--time-stride", type=int, default=1, help="write every k-th time level to u.csv")

    p = sub.add_parser("solve-mfg", help="damped Picard iteration for the coupled system")
    common(p, "solve-mfg")
    p.add_argument("--time-stride", type=int, default=1)
    p.add_argument("--snapshot-stride", type=int, default=1)
    p.add_argument("--verify", action="store_true", help="add the verification report to diagnostics.json")

    p = sub.add_parser("trajectory", help="optimal trajectory by shooting, with uniqueness/concatenation probes")
    common(p, "trajectory")
    p.add_argument("--x0", required=True, help="comma separated start point")
    p.add_argument("--t", type=float, default=0.0, help="start time")

    p = sub.add_parser("pushforward", help="transport m0 through the feedback flow")
    common(p, "pushforward")
    p.add_argument("--snapshot-stride", type=int, default=1)
    p.add_argument("--bandwidth", type=float, default=0.25)

    p = sub.add_parser("validate", help="run the invariant battery")
    common(p, "validate")
    p.add_argument("--inject-fault", choices=["adjoint-sign"], default=None, help=argparse.SUPPRESS)
    return parser


COMMANDS = {
    "solve-hjb": cmd_solve_hjb,
    "solve-mfg": cmd_solve_mfg,
    "trajectory": cmd_trajectory,
    "pushforward": cmd_pushforward,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        import numba

        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    if args.command == "scenarios":
        return cmd_scenarios(args)
    out = args.out or Path(os.environ.get(OUTPUT_ENV, "ncmfg-out")) / args.command
    run = Run(args.command, out)
    try:
        status = COMMANDS[args.command](args, run)
        return run.finish(status)
    except ConfigError as exc:
        return run.finish(EXIT_CONFIG, _error(exc.kind, str(exc)))
    except NonConvergenceError as exc:
        return run.finish(EXIT_SHOOTING, _error(exc.kind, str(exc), trace=exc.trace))
    except NCMFGError as exc:
        return run.finish(EXIT_CONFIG, _error(exc.kind, str(exc)))
    except Exception as exc:  # noqa: BLE001 - the manifest must still be written
        run.finish(EXIT_INTERNAL, _error("internal-error", f"{type(exc).__name__}: {exc}"))
        raise


if __name__ == "__main__":
    sys.exit(main())

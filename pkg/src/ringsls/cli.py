"""Batch front end: synthesize, sweep, simulate, and check the closed forms.

One JSON config file describes a run (objective, band sweep, solver choice,
seed, output directory); every command is deterministic given the config and
the seed, and emits plain JSON/CSV artifacts -- no plotting.

Exit codes: 0 success, 1 solver or simulation failure (a diagnostic
``error.json`` is written to the output directory), 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import apps, h2, realize
from .apps import AppsError
from .h2 import H2Error
from .param import ParamError
from .ratfun import RatFunError
from .realize import RealizeError
from .sis import ConvKernel, ShapeError

__all__ = [
    "SCHEMA_VERSION",
    "ConfigError",
    "RunConfig",
    "load_config",
    "cmd_synthesize",
    "cmd_sweep",
    "cmd_simulate",
    "cmd_oracle_check",
    "main",
]

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

SOLVERS = ("exact", "numeric", "both")
DISTURBANCES = ("impulse", "noise", "zero")

SWEEP_COLUMNS = ("N", "M", "gamma", "objective", "reducible_cost",
                 "full_cost", "baseline", "solver", "K", "wall_ms")

_PACKAGE_ERRORS = (H2Error, ParamError, AppsError, RealizeError, RatFunError,
                   ShapeError)

_CHECK_GRID = np.concatenate([[0.0], np.logspace(-2.0, 2.0, 63)])


class ConfigError(Exception):
    """The run configuration is invalid."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_SIM_DEFAULTS = {
    "disturbance": "impulse",
    "site": 0,
    "channel": 0,
    "magnitude": 1.0,
    "intensity": 1.0,
    "T": 30.0,
    "dt": None,
    "realization": None,
}

_TOP_KEYS = {"version", "objective", "sweep", "solver", "basis", "seed",
             "out", "simulate"}


@dataclass(frozen=True)
class RunConfig:
    """Validated run description.

    ``sweep`` lists the band sizes a sweep visits (defaults to the
    objective's own M); ``solver`` is one of exact | numeric | both;
    ``basis`` is the rational-basis size K of the numeric solver;
    ``simulate`` holds the normalized simulation section.
    """

    objective: object
    sweep: tuple[int, ...]
    solver: str = "exact"
    basis: int = 24
    seed: int = 0
    out: str | None = None
    simulate: dict = dataclasses.field(default_factory=dict)

    def label(self) -> str:
        return apps.objective_label(self.objective)


def _as_int(value, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{what} must be an integer, got {value!r}")
    return value


def parse_config(d: dict) -> RunConfig:
    """Validate a decoded config payload."""
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(d) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "version" not in d:
        raise ConfigError("config is missing the schema 'version' field")
    if d["version"] != SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported config schema version {d['version']!r}; this "
            f"build reads version {SCHEMA_VERSION}")
    if "objective" not in d:
        raise ConfigError("config is missing 'objective'")
    try:
        objective = apps.objective_from_json(d["objective"])
    except (AppsError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid objective: {exc}") from exc

    N = objective.N
    sweep_raw = d.get("sweep", [objective.M])
    if not isinstance(sweep_raw, list) or not sweep_raw:
        raise ConfigError("'sweep' must be a nonempty list of band sizes")
    sweep = []
    for M in sweep_raw:
        M = _as_int(M, "sweep entry")
        if M < 0:
            raise ConfigError(f"band size must be nonnegative, got {M}")
        if not M < N / 2:
            raise ConfigError(
                f"band size {M} must satisfy M < N/2 = {N / 2:g}")
        sweep.append(M)
    sweep = tuple(sorted(set(sweep)))

    solver = d.get("solver", "exact")
    if solver not in SOLVERS:
        raise ConfigError(
            f"solver must be one of {SOLVERS}, got {solver!r}")
    basis = _as_int(d.get("basis", 24), "basis")
    if basis < 1:
        raise ConfigError(f"basis must be >= 1, got {basis}")
    seed = _as_int(d.get("seed", 0), "seed")

    out = d.get("out")
    if out is not None and not isinstance(out, str):
        raise ConfigError("'out' must be a string path")

    sim_raw = d.get("simulate", {})
    if not isinstance(sim_raw, dict):
        raise ConfigError("'simulate' must be an object")
    unknown = set(sim_raw) - set(_SIM_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown simulate keys: {sorted(unknown)}")
    sim = dict(_SIM_DEFAULTS)
    sim.update(sim_raw)
    if sim["disturbance"] not in DISTURBANCES:
        raise ConfigError(
            f"disturbance must be one of {DISTURBANCES}, got "
            f"{sim['disturbance']!r}")
    sim["site"] = _as_int(sim["site"], "simulate.site") % N
    sim["channel"] = _as_int(sim["channel"], "simulate.channel")
    for key in ("magnitude", "intensity", "T"):
        try:
            sim[key] = float(sim[key])
        except (TypeError, ValueError):
            raise ConfigError(f"simulate.{key} must be a number") from None
    if sim["T"] <= 0.0:
        raise ConfigError(f"simulate.T must be positive, got {sim['T']}")
    if sim["dt"] is not None:
        sim["dt"] = float(sim["dt"])
        if sim["dt"] <= 0.0:
            raise ConfigError("simulate.dt must be positive")
    if sim["realization"] is not None \
            and not isinstance(sim["realization"], str):
        raise ConfigError("simulate.realization must be a string path")

    return RunConfig(objective=objective, sweep=sweep, solver=solver,
                     basis=basis, seed=seed, out=out, simulate=sim)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        payload = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(payload)


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _config_echo(cfg: RunConfig, out_dir: Path) -> None:
    payload = {
        "version": SCHEMA_VERSION,
        "objective": cfg.objective.to_json(),
        "sweep": list(cfg.sweep),
        "solver": cfg.solver,
        "basis": cfg.basis,
        "seed": cfg.seed,
        "simulate": cfg.simulate,
    }
    _write_json(out_dir / "config_resolved.json", payload)


def _problem_for(cfg: RunConfig, M: int):
    plant, C1, gamma, B1 = apps.build_objective(cfg.objective)
    fam = apps.family_for(cfg.objective)
    prob = h2.assemble(plant, C1, gamma, B1, fam, M)
    return plant, C1, gamma, B1, prob


def _solve(prob, solver: str, basis: int):
    if solver == "exact":
        return h2.solve_exact(prob)
    return h2.solve_numeric(prob, basis_size=basis)


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def _guard(out_dir: Path, stage: str, fn) -> int:
    """Run fn(); on a package failure write a diagnostic and exit nonzero."""
    try:
        return fn()
    except _PACKAGE_ERRORS as exc:
        _write_json(out_dir / "error.json", {
            "stage": stage,
            "error": type(exc).__name__,
            "message": str(exc),
        })
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return EXIT_FAILURE


# ---------------------------------------------------------------------------
# synthesize
# ---------------------------------------------------------------------------


def cmd_synthesize(cfg: RunConfig, out_dir: Path) -> int:
    """Solve at the objective's band and write result/theta/realization."""
    obj = cfg.objective
    _config_echo(cfg, out_dir)

    def run() -> int:
        _, _, _, _, prob = _problem_for(cfg, obj.M)
        solvers = ("exact", "numeric") if cfg.solver == "both" \
            else (cfg.solver,)
        for sv in solvers:
            res = _solve(prob, sv, cfg.basis)
            payload = res.to_json()
            payload["objective"] = obj.to_json()
            impl = realize.make_impl(res.Phix, res.Phiu)
            if impl.M <= realize.MAX_BAND:
                real = realize.structured_realization(impl)
                _write_json(out_dir / f"realization.{sv}.json",
                            real.to_json())
                payload["realization"] = f"realization.{sv}.json"
            else:
                payload["realization"] = (
                    f"skipped: band {impl.M} exceeds the supported "
                    f"realization range (M <= {realize.MAX_BAND})")
            _write_json(out_dir / f"synthesis.{sv}.json", payload)
            _write_json(out_dir / f"theta.{sv}.json", res.theta_opt.to_json())
            print(f"{cfg.label()} M={obj.M} [{sv}]  "
                  f"reducible={res.reducible_cost:.10g}  "
                  f"full={res.full_cost:.10g}  -> {out_dir}")
        return EXIT_OK

    return _guard(out_dir, "synthesize", run)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _sweep_row(cfg: RunConfig, prob, M: int):
    """Solve one band; returns (row dict, complement, error or None)."""
    t0 = time.perf_counter()
    res = None
    err = None
    try:
        if cfg.solver == "both":
            try:
                res = _solve(prob, "exact", cfg.basis)
            except _PACKAGE_ERRORS:
                res = _solve(prob, "numeric", cfg.basis)
        else:
            res = _solve(prob, cfg.solver, cfg.basis)
    except _PACKAGE_ERRORS as exc:
        err = exc
    wall_ms = (time.perf_counter() - t0) * 1e3
    # the solver column carries the result's own tag (exact / numericLS);
    # failed rows record what the config asked for
    solver_used = cfg.solver if res is None else res.solver
    obj = cfg.objective
    row = {
        "N": obj.N,
        "M": M,
        "gamma": obj.gamma,
        "objective": cfg.label(),
        "solver": solver_used,
        "K": cfg.basis if solver_used.startswith("numeric") else 0,
        "wall_ms": wall_ms,
    }
    if res is None:
        row["reducible_cost"] = math.nan
        row["full_cost"] = math.nan
        return row, math.nan, err
    row["reducible_cost"] = res.reducible_cost
    row["full_cost"] = res.full_cost
    row["wall_ms"] = res.diagnostics.get("wall_ms", wall_ms)
    return row, res.complement_cost, None


def _carry_forward(rows: list[dict], complements: list[float]) -> list[int]:
    """Enforce nonincreasing full cost over increasing bands, in place.

    A wider band can always reuse the previous band's parameter, so a cost
    that ticks up can only be numerical noise.  The offending row is reset
    to the previous full cost; its reducible part is the carried full cost
    minus the row's own parameter-free remainder, which is exactly what the
    previous parameter achieves at this band.  Returns the adjusted Ms.
    NaN rows (failed solves) are skipped and never carried from or into.
    """
    carried: list[int] = []
    prev_full = None
    for row, complement in zip(rows, complements):
        full = row["full_cost"]
        if math.isnan(full):
            continue
        if prev_full is not None and full > prev_full:
            row["full_cost"] = prev_full
            row["reducible_cost"] = prev_full - complement
            carried.append(row["M"])
        prev_full = row["full_cost"]
    return carried


def cmd_sweep(cfg: RunConfig, out_dir: Path) -> int:
    """Sweep the band sizes and write one CSV row per M.

    Rows are sorted by M.  Per-M solver failures become NaN rows (with the
    message recorded in ``sweep_diagnostics.json``) and the sweep continues.
    A post-pass enforces the nonincreasing-cost invariant: a band whose
    numerically solved cost exceeds the previous band's reuses the previous
    parameter (feasible for the wider band), so every reported cost is
    achieved by a parameter of that band.
    """
    obj = cfg.objective
    _config_echo(cfg, out_dir)

    def run() -> int:
        plant, C1, gamma, B1 = apps.build_objective(obj)
        fam = apps.family_for(obj)
        baseline = h2.riccati_baseline(plant, C1, gamma, B1)

        def prep(M: int):
            return h2.assemble(plant, C1, gamma, B1, fam, M)

        def work(M: int):
            try:
                prob = prep(M)
            except _PACKAGE_ERRORS as exc:
                row = {
                    "N": obj.N, "M": M, "gamma": obj.gamma,
                    "objective": cfg.label(), "solver": cfg.solver,
                    "K": cfg.basis if cfg.solver == "numeric" else 0,
                    "wall_ms": 0.0, "reducible_cost": math.nan,
                    "full_cost": math.nan,
                }
                return row, math.nan, exc
            return _sweep_row(cfg, prob, M)

        with ThreadPoolExecutor(max_workers=min(4, len(cfg.sweep))) as pool:
            results = list(pool.map(work, cfg.sweep))

        errors: dict[str, dict] = {}
        rows = []
        complements = []
        for M, (row, complement, err) in zip(cfg.sweep, results):
            if err is not None:
                errors[str(M)] = {"error": type(err).__name__,
                                  "message": str(err)}
            row["baseline"] = baseline
            rows.append(row)
            complements.append(complement)
        carried = _carry_forward(rows, complements)

        csv_path = out_dir / "sweep.csv"
        with open(csv_path, "w", newline="") as fh:
            fh.write(",".join(SWEEP_COLUMNS) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(row[c]) for c in SWEEP_COLUMNS)
                         + "\n")
        if errors or carried:
            _write_json(out_dir / "sweep_diagnostics.json", {
                "errors": errors,
                "carried_forward": carried,
            })
        n_ok = sum(1 for r in rows if not math.isnan(r["full_cost"]))
        print(f"{cfg.label()} sweep M={list(cfg.sweep)}: {n_ok}/{len(rows)} "
              f"rows solved, baseline={baseline:.10g} -> {csv_path}")
        return EXIT_OK

    return _guard(out_dir, "sweep", run)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _load_or_synthesize_realization(cfg: RunConfig, out_dir: Path):
    """Realization from the configured artifact, or inline synthesis."""
    ref = cfg.simulate.get("realization")
    if ref is not None:
        path = Path(ref)
        if not path.is_absolute():
            path = out_dir / path
        if not path.is_file():
            raise ConfigError(
                f"realization artifact not found: {path} -- run "
                f"`ringsls synthesize` first, or drop the 'realization' "
                f"key for inline synthesis")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"realization artifact is not valid JSON: {exc}") from exc
        return realize.StructuredRealization.from_json(payload)
    solver = "numeric" if cfg.solver == "numeric" else "exact"
    _, _, _, _, prob = _problem_for(cfg, cfg.objective.M)
    res = _solve(prob, solver, cfg.basis)
    impl = realize.make_impl(res.Phix, res.Phiu)
    return realize.structured_realization(impl)


def cmd_simulate(cfg: RunConfig, out_dir: Path) -> int:
    """Integrate the closed loop and write trajectory + reports."""
    obj = cfg.objective
    sim = cfg.simulate
    _config_echo(cfg, out_dir)

    def run() -> int:
        real = _load_or_synthesize_realization(cfg, out_dir)
        plant, C1, gamma, B1 = apps.build_objective(obj)
        D12 = ConvKernel(obj.N, {0: gamma})
        kind = sim["disturbance"]
        if kind == "impulse":
            dist = realize.Impulse(site=sim["site"], channel=sim["channel"],
                                   magnitude=sim["magnitude"])
        elif kind == "noise":
            dist = realize.WhiteNoise(seed=cfg.seed,
                                      intensity=sim["intensity"])
        else:
            dist = realize.ZeroInput(seed=cfg.seed)
        result = realize.simulate(plant, real, dist, T=sim["T"],
                                  dt=sim["dt"], C1=C1, D12=D12, B1=B1)
        realize.write_trajectory_csv(result, out_dir / "trajectory.csv")
        payload = {
            "objective": obj.to_json(),
            "disturbance": {k: sim[k] for k in
                            ("disturbance", "site", "channel", "magnitude",
                             "intensity")},
            "seed": cfg.seed,
            "T": sim["T"],
            "dt": result.dt,
            "samples": int(result.x.shape[0]),
            "energy": result.energy,
        }
        if kind == "impulse":
            report = realize.localization_report(result, sim["site"], obj.M)
            _write_json(out_dir / "localization.json", report)
            payload["localization"] = report
            print(f"{cfg.label()} impulse at site {sim['site']}: max "
                  f"beyond band {obj.M} = {report['max_beyond_band']:.3e} "
                  f"-> {out_dir}")
        else:
            print(f"{cfg.label()} {kind} run: energy={result.energy:.6g} "
                  f"-> {out_dir}")
        _write_json(out_dir / "simulation.json", payload)
        return EXIT_OK

    try:
        return _guard(out_dir, "simulate", run)
    except ConfigError as exc:
        print(f"error [simulate]: {exc}", file=sys.stderr)
        return EXIT_CONFIG


# ---------------------------------------------------------------------------
# oracle-check
# ---------------------------------------------------------------------------


def _theta_grid_dev(theta, reference) -> float:
    """Max pointwise deviation between two parameter kernels on the grid,
    relative to the larger kernel scale."""
    dev, scale = 0.0, 0.0
    offsets = set(theta.kernel.entries) | set(reference.kernel.entries)
    for d in offsets:
        a = theta.kernel.get(d).a[0, 0]
        b = reference.kernel.get(d).a[0, 0]
        for w in _CHECK_GRID:
            va, vb = a(1j * w), b(1j * w)
            dev = max(dev, abs(va - vb))
            scale = max(scale, abs(va), abs(vb))
    return dev / max(scale, 1e-300)


def cmd_oracle_check(out_dir: Path | None = None, N: int = 9) -> int:
    """Regression of the exact solver against the closed-form optima.

    Prints one PASS/FAIL line per (metric, M, gamma) fixture comparing
    reducible cost (1e-9 relative) and the optimal parameter on a frequency
    grid (1e-7 relative), plus the reference-table cost rows.  Exits 0 only
    if everything passes.
    """
    checks = []
    t0 = time.perf_counter()
    for metric in apps.CONSENSUS_METRICS:
        for M in (1, 2):
            for gamma in (0.5, 1.0, 3.0):
                obj = apps.ConsensusObjective(metric, gamma=gamma, N=N, M=M)
                plant, C1, g, B1 = apps.build_consensus(obj)
                fam = apps.family_for(obj)
                prob = h2.assemble(plant, C1, g, B1, fam, M)
                res = h2.solve_exact(prob)
                theta_ref, cost_ref = apps.analytic_oracle(metric, M, gamma,
                                                           N)
                cost_dev = abs(res.reducible_cost - cost_ref) / cost_ref
                theta_dev = _theta_grid_dev(res.theta_opt, theta_ref)
                ok = cost_dev <= 1e-9 and theta_dev <= 1e-7
                checks.append({
                    "metric": metric, "M": M, "gamma": gamma, "N": N,
                    "cost_rel_dev": cost_dev, "theta_grid_dev": theta_dev,
                    "pass": bool(ok),
                })
                print(f"{'PASS' if ok else 'FAIL'}  {metric} M={M} "
                      f"gamma={gamma:g}: cost dev {cost_dev:.2e}, "
                      f"theta grid dev {theta_dev:.2e}")
    print("NOTE: the closed forms used here correct known sign/coefficient "
          "slips in the tabulated reference listings (the local-error "
          "listings are the negatives of the optimizers; the "
          "deviation-from-average listings carry two wrong (gamma-1) "
          "coefficients, and its M=2 cost row a wrong constant).  The "
          "corrected forms are verified as true optima by the solver "
          "cross-checks above.")
    n_pass = sum(1 for c in checks if c["pass"])
    wall = time.perf_counter() - t0
    print(f"oracle-check: {n_pass}/{len(checks)} fixtures pass "
          f"({wall:.1f}s)")
    if out_dir is not None:
        _write_json(out_dir / "oracle_check.json",
                    {"checks": checks, "passed": n_pass,
                     "total": len(checks)})
    return EXIT_OK if n_pass == len(checks) else EXIT_FAILURE


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ringsls",
        description="Band-constrained H2 synthesis on rings: batch runner.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="path to the run config JSON")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--solver", choices=SOLVERS, help="solver override")
        p.add_argument("--basis", type=int,
                       help="numeric solver basis size override")

    add_common(sub.add_parser(
        "synthesize", help="solve one band and write result artifacts"))
    add_common(sub.add_parser(
        "sweep", help="solve a list of bands and write sweep.csv"))
    add_common(sub.add_parser(
        "simulate", help="integrate the closed loop and write trajectories"))
    oc = sub.add_parser(
        "oracle-check", help="regress the exact solver against the "
        "closed-form optima")
    oc.add_argument("--out", help="optional directory for oracle_check.json")
    oc.add_argument("--ring", type=int, default=9,
                    help="ring size for the regression fixtures (odd, >= 7)")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    updates = {}
    if args.out is not None:
        updates["out"] = args.out
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "solver", None) is not None:
        updates["solver"] = args.solver
    if getattr(args, "basis", None) is not None:
        if args.basis < 1:
            raise ConfigError(f"basis must be >= 1, got {args.basis}")
        updates["basis"] = args.basis
    return dataclasses.replace(cfg, **updates) if updates else cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "oracle-check":
            out_dir = None
            if args.out is not None:
                out_dir = Path(args.out)
                out_dir.mkdir(parents=True, exist_ok=True)
            if args.ring < 7 or args.ring % 2 == 0:
                raise ConfigError(
                    f"--ring must be an odd integer >= 7, got {args.ring}")
            return cmd_oracle_check(out_dir, N=args.ring)
        cfg = _apply_overrides(load_config(args.config), args)
        if cfg.out is None:
            raise ConfigError(
                "no output directory: set 'out' in the config or pass "
                "--out")
        out_dir = Path(cfg.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "synthesize":
            return cmd_synthesize(cfg, out_dir)
        if args.command == "sweep":
            return cmd_sweep(cfg, out_dir)
        return cmd_simulate(cfg, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

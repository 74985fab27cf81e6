"""
Experiment runner: configuration, single runs, parameter sweeps, timing
tables and CSV / gnuplot output.

A configuration is a flat ``key = value`` text file (``#`` starts a comment)
whose keys are the fields of :class:`ExperimentConfig`. Fractions such as
``1/128`` are accepted for numbers and comma-separated lists for tuples.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import analysis
from .linalg import SolverConfig
from .methods import solve_adv_msfem, solve_msfem, solve_p1, solve_stab_msfem
from .problem import Discretization, ExactSolution1D, ProblemSpec, required_fine_size
from .splitting import solve_splitting, solve_splitting_damped

log = logging.getLogger(__name__)

METHODS = (
    "P1",
    "P1-SUPG",
    "P1-Upwind",
    "MsFEM",
    "Stab-MsFEM",
    "Adv-MsFEM-lin",
    "Adv-MsFEM-OS",
    "Adv-MsFEM-CR",
    "Splitting",
    "Splitting-damped",
)
SWEEP_AXES = ("alpha", "eps", "H", "delta", "variant", "backend")
ERROR_COLUMNS = analysis.COLUMNS
TIMING_COLUMNS = ("offline_s", "online_s")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    Attributes
    ----------
    dim, alpha, delta, eps, b, f, length :
        Problem parameters (see :class:`~msfem_lab.problem.ProblemSpec`).
    H : float
        Coarse mesh size.
    ratio : int, optional
        Refinement ratio ``H / h``; ``None`` picks the smallest power of two
        meeting the resolution constraints.
    methods : tuple of str
        Subset of :data:`METHODS`.
    tau_mode : {"coth", "simple"}
        Stabilization parameter of P1-SUPG, Stab-MsFEM and the splitting.
    variant : {"linear", "oversampling", "crouzeix_raviart"}
        Boundary conditions of the MsFEM and Stab-MsFEM local problems.
    os_ratio : float
        Oversampling patch size relative to the coarse cell.
    backend : {"direct_lu", "gmres", "cg"}
        Coarse and local solver; ``gmres`` / ``cg`` select the iterative path.
    tol : float, optional
        Iterative solver tolerance (backend default when omitted).
    alpha_spl : float, optional
        Diffusion of the single-scale splitting step (defaults to ``alpha``).
    beta : "auto" or float
        Damping of ``Splitting-damped``.
    projection : bool
        Use the projected transport term in ``Splitting-damped``.
    spl_tol : float
        Residual tolerance of the splitting iterations.
    spl_max_iter : int
    layer_split : {"auto", "pythagorean", "additive"}
        How ``e_H1_in`` is reported. ``auto`` is additive in 1D and Pythagorean otherwise.
    axis : str, optional
        Sweep axis (one of :data:`SWEEP_AXES`).
    values : tuple
        Sweep values, sorted on construction.
    output : str
        Output directory.
    seed : int
        Seed for randomized checks.
    workers : int
        Concurrent sweep points.
    warmup : bool
        Run every method once on a tiny problem first and discard its timings.
    max_fine_cells : int
        Upper bound on the automatic fine mesh.
    """

    dim: int = 2
    alpha: float = 1.0 / 32
    delta: float = 0.5
    eps: float = 1.0 / 16
    b: tuple = (1.0, 1.0)
    f: float = 1.0
    length: float = 1.0
    H: float = 1.0 / 8
    ratio: int | None = 32
    methods: tuple = METHODS[:9]
    tau_mode: str = "coth"
    variant: str = "linear"
    os_ratio: float = 3.0
    backend: str = "direct_lu"
    tol: float | None = None
    alpha_spl: float | None = None
    beta: object = "auto"
    projection: bool = False
    spl_tol: float = 1e-9
    spl_max_iter: int = 200_000
    layer_split: str = "auto"
    axis: str | None = None
    values: tuple = ()
    output: str = "results"
    seed: int = 0
    workers: int = 1
    warmup: bool = True
    max_fine_cells: int = 4_000_000

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("the method list is empty")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("duplicate methods")
        if self.axis is not None and self.axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}")
        if self.layer_split not in ("auto", "pythagorean", "additive"):
            raise ConfigError(f"unknown layer split {self.layer_split!r}")
        if self.beta != "auto" and not isinstance(self.beta, (int, float)):
            raise ConfigError("beta must be 'auto' or a number")
        object.__setattr__(self, "values", tuple(sorted(self.values)))
        object.__setattr__(self, "b", tuple(float(x) for x in np.atleast_1d(self.b)))
        if len(self.b) == 1 and self.dim > 1:
            object.__setattr__(self, "b", self.b * self.dim)

    @property
    def problem(self) -> ProblemSpec:
        return ProblemSpec(self.dim, self.alpha, self.delta, self.eps, self.b, self.f, self.length, self.alpha_spl)

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(self.backend, self.tol)

    def with_(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


PRESETS = {
    "desk": {},
    "reference": dict(alpha=1 / 128, delta=0.5, eps=1 / 64, H=1 / 16, ratio=None),
    "single-scale": dict(alpha=1 / 128, delta=0.5, eps=1.0, H=1 / 16, ratio=None,
                         methods=("P1", "P1-Upwind", "P1-SUPG")),
    "single-scale-desk": dict(eps=1.0, methods=("P1", "P1-Upwind", "P1-SUPG")),
    "1d": dict(dim=1, alpha=1 / 256, delta=0.0, eps=1.0, b=(1.0,), H=1 / 16, ratio=None,
               methods=("P1", "P1-SUPG")),
    "bc": dict(alpha=1 / 128, delta=0.5, eps=1 / 64, H=1 / 16, ratio=None,
               methods=("Adv-MsFEM-lin", "Adv-MsFEM-OS", "Adv-MsFEM-CR")),
    "bc-desk": dict(methods=("Adv-MsFEM-lin", "Adv-MsFEM-OS", "Adv-MsFEM-CR")),
}
FULL_PRESETS = ("reference", "single-scale", "bc")


# --------------------------------------------------------------------------
# configuration parsing
# --------------------------------------------------------------------------


def _number(text: str) -> float:
    return float(Fraction(text.strip())) if "/" in text else float(text)


def _parse_value(name: str, text: str):
    text = text.strip()
    if name in ("ratio", "tol", "alpha_spl", "axis") and text.lower() in ("none", "auto", ""):
        return None
    if name in ("dim", "ratio", "seed", "workers", "spl_max_iter", "max_fine_cells"):
        return int(text)
    if name in ("projection", "warmup"):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{name} expects a boolean, got {text!r}")
        return text.lower() in ("true", "1", "yes")
    if name == "beta":
        return "auto" if text == "auto" else _number(text)
    if name in ("b",):
        return tuple(_number(t) for t in text.split(","))
    if name == "methods":
        return tuple(t.strip() for t in text.split(",") if t.strip())
    if name == "values":
        parts = [t.strip() for t in text.split(",") if t.strip()]
        try:
            return tuple(_number(t) for t in parts)
        except ValueError:
            return tuple(parts)
    if name in ("tau_mode", "variant", "backend", "layer_split", "axis", "output"):
        return text
    return _number(text)


FIELDS = tuple(f.name for f in dataclasses.fields(ExperimentConfig))


def parse_overrides(pairs) -> dict:
    """Turn ``key=value`` strings (or ``(key, value)`` pairs) into typed config fields."""
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=") if isinstance(item, str) else (item[0], "=", item[1])
        key = key.strip()
        if not sep:
            raise ConfigError(f"expected key=value, got {item!r}")
        if key not in FIELDS:
            raise ConfigError(f"unknown configuration key {key!r}")
        try:
            out[key] = _parse_value(key, str(value))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    return out


def read_config_text(text: str) -> dict:
    lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    return parse_overrides(lines)


def load_config(path=None, preset: str | None = None, overrides=(), full: bool = False) -> ExperimentConfig:
    """Build a configuration from a preset, then a file, then ``key=value`` overrides.

    Full-size presets (fine meshes of millions of cells) require ``full=True``.
    """
    kw = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        if preset in FULL_PRESETS and not full:
            raise ConfigError(f"preset {preset!r} needs a fine mesh of millions of cells; pass --full")
        kw.update(PRESETS[preset])
    if path is not None:
        kw.update(read_config_text(Path(path).read_text()))
    kw.update(parse_overrides(overrides))
    return ExperimentConfig(**kw)


def dump_config(config: ExperimentConfig) -> str:
    """Flat text form of a configuration, readable by :func:`read_config_text`."""
    lines = []
    for name in FIELDS:
        v = getattr(config, name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{name} = {v}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# runs
# --------------------------------------------------------------------------


@dataclass
class MethodResult:
    """Per-method outcome inside a :class:`RunRecord`."""

    name: str
    errors: dict | None = None
    offline: float = 0.0
    online: float = 0.0
    iterations: int = 0
    splitting_iterations: int | None = None
    history: list = field(default_factory=list)
    failure: str | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None


@dataclass
class RunRecord:
    """Outcome of :func:`run`: the configuration echo and one result per method."""

    config: ExperimentConfig
    h: float
    ratio: int
    results: list
    constraints_ok: bool = True

    def result(self, name: str) -> MethodResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)


def _solve(name: str, disc: Discretization, c: ExperimentConfig):
    if name == "P1":
        return solve_p1(disc)
    if name == "P1-SUPG":
        return solve_p1(disc, "supg", c.tau_mode)
    if name == "P1-Upwind":
        return solve_p1(disc, "upwind")
    if name == "MsFEM":
        return solve_msfem(disc, c.variant, c.os_ratio)
    if name == "Stab-MsFEM":
        return solve_stab_msfem(disc, c.tau_mode, c.variant, c.os_ratio)
    if name.startswith("Adv-MsFEM-"):
        variant = {"lin": "linear", "OS": "oversampling", "CR": "crouzeix_raviart"}[name.rsplit("-", 1)[1]]
        return solve_adv_msfem(disc, variant, c.os_ratio)
    if name == "Splitting":
        return solve_splitting(disc, c.spl_tol, c.spl_max_iter, tau_mode=c.tau_mode)[0]
    if name == "Splitting-damped":
        return solve_splitting_damped(disc, c.beta, c.projection, c.spl_tol, c.spl_max_iter, tau_mode=c.tau_mode)[0]
    raise ConfigError(f"unknown method {name!r}")


def _exact_solution(c: ExperimentConfig):
    """Closed-form solution when the 1D problem has constant coefficients and source."""
    if c.dim == 1 and c.delta == 0.0 and c.b[0] != 0.0:
        return ExactSolution1D(c.alpha, c.b[0], c.f, c.length)
    return None


def _errors(report, disc: Discretization, c: ExperimentConfig) -> dict:
    additive = c.layer_split == "additive" or (c.layer_split == "auto" and c.dim == 1)
    exact = _exact_solution(c)
    if exact is not None:
        u_fine = disc.hierarchy.to_conforming(report.u)
        e = analysis.exact_errors_1d(disc.fine, u_fine, exact, mask=disc.mask)
        u_ex = exact(disc.fine.points[:, 0])
        e_inf = float(np.max(np.abs(u_fine - u_ex)) / np.max(np.abs(u_ex)))
        return {"e_L2": e["e_L2"], "e_H1": e["e_H1"], "e_Linf": e_inf,
                "e_H1_in": e["e_H1_in_additive"] if additive else e["e_H1_in"], "e_H1_out": e["e_H1_out"]}
    b = analysis.report_errors(report, disc)
    row = b.as_dict()
    if additive:
        row["e_H1_in"] = b.e_H1_in_additive
    return {k: row[k] for k in ERROR_COLUMNS}


def check_fine_mesh(problem: ProblemSpec, h: float) -> bool:
    """Whether ``h`` meets both resolution constraints of the reference mesh."""
    return h <= required_fine_size(problem) * (1 + 1e-12)


def _warmup(c: ExperimentConfig):
    tiny = c.with_(H=c.length / 2, ratio=4, eps=c.length, warmup=False, axis=None, values=())
    disc = Discretization(tiny.problem, tiny.H, tiny.ratio, tiny.solver)
    for name in c.methods:
        try:
            _solve(name, disc, tiny)
        except Exception:  # noqa: BLE001 - the warm-up only primes caches
            pass


def run(config: ExperimentConfig) -> RunRecord:
    """Build the discretization and reference, then run and time every method.

    A failing method is recorded with its error message and the run continues.
    """
    c = config
    problem = c.problem
    if c.warmup:
        _warmup(c)
    disc = Discretization(problem, c.H, c.ratio, c.solver)
    ok = check_fine_mesh(problem, disc.h)
    if c.ratio is None:
        assert ok, "automatic fine mesh violates the resolution constraints"
    elif not ok:
        log.warning("fine mesh h=%.3e coarser than the resolution constraint %.3e",
                    disc.h, required_fine_size(problem))
    if _exact_solution(c) is None:
        disc.reference_broken  # solved once, outside the method timings
    results = []
    for name in c.methods:
        res = MethodResult(name)
        try:
            rep = _solve(name, disc, c)
            res.offline, res.online, res.iterations = rep.offline, rep.online, rep.iterations
            res.splitting_iterations = rep.splitting_iterations
            res.history = list(rep.extra.get("residuals", []))
            res.errors = _errors(rep, disc, c)
        except (ArithmeticError, ValueError, RuntimeError, MemoryError, np.linalg.LinAlgError) as exc:
            log.error("%s failed: %s", name, exc)
            res.failure = f"{type(exc).__name__}: {exc}"
        results.append(res)
    return RunRecord(c, disc.h, disc.ratio, results, ok)


def _run_point(config: ExperimentConfig) -> RunRecord | str:
    try:
        return run(config)
    except (ArithmeticError, ValueError, RuntimeError, MemoryError) as exc:
        return f"{type(exc).__name__}: {exc}"


def sweep(config: ExperimentConfig, axis: str | None = None, values=None) -> list:
    """One run per value of the sweep axis.

    Returns
    -------
    list of (value, RunRecord or str)
        A string holds the failure message of a point that could not run.
    """
    axis = axis or config.axis
    values = tuple(sorted(values if values is not None else config.values))
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    if not values:
        raise ConfigError("no sweep values")
    configs = []
    for v in values:
        if axis == "backend":
            configs.append(config.with_(backend=v, axis=None, values=()))
        else:
            configs.append(config.with_(**{axis: v, "axis": None, "values": ()}))
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            out = list(pool.map(_run_point, configs))
    else:
        out = [_run_point(cfg) for cfg in configs]
    return list(zip(values, out))


# --------------------------------------------------------------------------
# tables and output
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.10e}"
    return str(v)


def error_rows(record: RunRecord) -> list:
    rows = []
    for r in record.results:
        row = {"method": r.name}
        for k in ERROR_COLUMNS:
            row[k] = r.errors[k] if r.errors else None
        row["splitting_iterations"] = r.splitting_iterations
        row["status"] = "ok" if r.ok else r.failure
        rows.append(row)
    return rows


def timing_report(records) -> list:
    """Offline / online seconds per method and backend, with the two cost ratios.

    Returns
    -------
    list of dict
        One row per (record, method) plus, per record, the ratio row
        ``splitting online / Stab-MsFEM online`` and
        ``Adv-MsFEM offline / MsFEM offline`` (``nan`` when a method is missing).
        Empty when there are no records.
    """
    rows = []
    for rec in records:
        res = {r.name: r for r in rec.results if r.ok}
        for r in rec.results:
            rows.append({"method": r.name, "backend": rec.config.backend,
                         "offline_s": r.offline, "online_s": r.online, "iterations": r.iterations})
        if not rec.results:
            continue
        spl = res.get("Splitting") or res.get("Splitting-damped")
        stab = res.get("Stab-MsFEM")
        adv = next((res[m] for m in ("Adv-MsFEM-lin", "Adv-MsFEM-OS", "Adv-MsFEM-CR") if m in res), None)
        ms = res.get("MsFEM")
        rows.append({
            "method": "ratios",
            "backend": rec.config.backend,
            "splitting_online_over_stab_online": spl.online / stab.online if spl and stab and stab.online > 0 else math.nan,
            "adv_offline_over_msfem_offline": adv.offline / ms.offline if adv and ms and ms.offline > 0 else math.nan,
        })
    return rows


def _write_csv(path: Path, rows: list, columns=None):
    columns = columns or list(dict.fromkeys(k for row in rows for k in row))
    buf = io.StringIO()
    w = csv.DictWriter(buf, columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row.get(k)) for k in columns})
    path.write_text(buf.getvalue())


def write_run(record: RunRecord, outdir) -> dict:
    """Write ``errors.csv``, ``timing.csv``, ``config.txt`` and one ``.dat`` history per splitting method."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"errors": out / "errors.csv", "timing": out / "timing.csv", "config": out / "config.txt"}
    _write_csv(paths["errors"], error_rows(record), ["method", *ERROR_COLUMNS, "splitting_iterations", "status"])
    _write_csv(paths["timing"], timing_report([record]))
    paths["config"].write_text(dump_config(record.config))
    for r in record.results:
        if r.history:
            p = out / f"history_{r.name}.dat"
            p.write_text("# iteration residual\n" + "".join(f"{i + 1} {v:.10e}\n" for i, v in enumerate(r.history)))
            paths[f"history_{r.name}"] = p
    return paths


def sweep_rows(axis: str, points) -> list:
    rows = []
    for value, rec in points:
        if isinstance(rec, str):
            rows.append({axis: value, "method": "", "status": rec})
            continue
        for row, r in zip(error_rows(rec), rec.results):
            rows.append({axis: value, **row, "online_s": r.online})
    return rows


def write_sweep(axis: str, points, outdir) -> dict:
    """Long-format ``sweep_<axis>.csv`` plus one gnuplot ``.dat`` curve per method."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    rows = sweep_rows(axis, points)
    paths = {"csv": out / f"sweep_{axis}.csv"}
    cols = [axis, "method", *ERROR_COLUMNS, "splitting_iterations", "status"]
    _write_csv(paths["csv"], rows, cols)
    methods = dict.fromkeys(r["method"] for r in rows if r["method"])
    for m in methods:
        lines = [f"# {axis} e_H1 e_H1_out online_s splitting_iterations\n"]
        for r in rows:
            if r["method"] == m and r["status"] == "ok":
                its = r["splitting_iterations"] if r["splitting_iterations"] is not None else "nan"
                lines.append(f"{_fmt(r[axis])} {_fmt(r['e_H1'])} {_fmt(r['e_H1_out'])} {_fmt(r['online_s'])} {its}\n")
        p = out / f"curve_{axis}_{m}.dat"
        p.write_text("".join(lines))
        paths[m] = p
    return paths


def iterations_monotone(values, iterations, max_inversions: int = 1) -> bool:
    """Splitting iterations weakly non-decreasing as ``alpha`` decreases, up to ``max_inversions``."""
    order = np.argsort(values)[::-1]
    its = np.asarray(iterations)[order]
    return int(np.sum(np.diff(its) < 0)) <= max_inversions


def format_table(rows: list, columns) -> str:
    """Plain-text table for terminal output."""
    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return "" if v is None else str(v)

    data = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(str(c)), *(len(d[i]) for d in data)) if data else len(str(c)) for i, c in enumerate(columns)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(d[i].ljust(w) for i, w in enumerate(widths)) for d in data]
    return "\n".join(lines)


def output_dir(config: ExperimentConfig, name: str) -> Path:
    return Path(os.path.expanduser(config.output)) / name

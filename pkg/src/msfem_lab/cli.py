"""
Command-line interface.

Subcommands
-----------
run              one experiment, CSV output
sweep            one experiment per value of a parameter
verify-theory    numerical checks of the theoretical statements (exit code 1 on failure)
reproduce-table  preset experiments for the error and cost tables
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import bench, verify
from .problem import Discretization, ProblemSpec

TABLES = {
    # name: (full preset, desk preset)
    "1d": ("1d", "1d"),
    "single-scale": ("single-scale", "single-scale-desk"),
    "multiscale": ("reference", "desk"),
    "bc": ("bc", "bc-desk"),
    "costs": ("reference", "desk"),
}


def _add_config_args(p: argparse.ArgumentParser, preset: bool = True):
    p.add_argument("--config", help="flat key = value configuration file")
    if preset:
        p.add_argument("--preset", choices=sorted(bench.PRESETS), help="start from a named preset")
    p.add_argument("--full", action="store_true", help="allow presets with fine meshes of millions of cells")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any field")
    fields = p.add_argument_group("configuration fields")
    for name in bench.FIELDS:
        fields.add_argument(f"--{name.replace('_', '-')}", dest=f"field_{name}", metavar="VALUE")


def _config(args, preset=None) -> bench.ExperimentConfig:
    overrides = list(args.set)
    for name in bench.FIELDS:
        v = getattr(args, f"field_{name}", None)
        if v is not None:
            overrides.append(f"{name}={v}")
    return bench.load_config(args.config, preset or getattr(args, "preset", None), overrides, args.full)


def _print_run(record: bench.RunRecord):
    print(f"h = {record.h:.6g} (ratio {record.ratio}), resolution constraints met: {record.constraints_ok}")
    print(bench.format_table(bench.error_rows(record), ["method", *bench.ERROR_COLUMNS, "splitting_iterations", "status"]))


def cmd_run(args, preset=None, name="run") -> int:
    config = _config(args, preset)
    record = bench.run(config)
    paths = bench.write_run(record, bench.output_dir(config, name))
    _print_run(record)
    if name == "costs":
        rows = bench.timing_report([record])
        print(bench.format_table(rows, list(dict.fromkeys(k for r in rows for k in r))))
    print(f"written: {paths['errors'].parent}")
    return 0 if all(r.ok for r in record.results) else 2


def cmd_sweep(args) -> int:
    config = _config(args)
    if config.axis is None or not config.values:
        print("sweep needs --axis and --values", file=sys.stderr)
        return 2
    points = bench.sweep(config)
    paths = bench.write_sweep(config.axis, points, bench.output_dir(config, f"sweep_{config.axis}"))
    rows = bench.sweep_rows(config.axis, points)
    print(bench.format_table(rows, [config.axis, "method", "e_H1", "e_H1_out", "splitting_iterations", "status"]))
    print(f"written: {paths['csv']}")
    return 0 if all(not isinstance(r, str) for _, r in points) else 2


def _verdict(label: str, ok: bool, detail: str) -> bool:
    print(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
    return ok


def cmd_verify(args) -> int:
    seed = args.seed
    ok = []
    m = verify.closed_form_1d(seed=seed).values
    ok.append(_verdict("1D closed form", m["adv_msfem"] <= 1e-8 and m["p1_supg"] <= 1e-8,
                       f"Adv-MsFEM {m['adv_msfem']:.2e}, P1-SUPG {m['p1_supg']:.2e} (<= 1e-8)"))
    m = verify.splitting_matched().values
    ok.append(_verdict("matched splitting", m["passes"] == 1 and m["residual"] < 1e-12,
                       f"{m['passes']} pass, residual {m['residual']:.2e}"))
    m = verify.splitting_divergence().values
    rel = abs(m["measured"] / m["predicted"] - 1)
    ok.append(_verdict("splitting divergence", m["condition"] and rel <= 0.05,
                       f"growth {m['measured']:.4f} vs {m['predicted']:.4f}"))
    desk = Discretization(ProblemSpec(alpha=1 / 32, eps=1 / 16), 1 / 8, ratio=32)
    m = verify.splitting_damped(desk).values
    ok.append(_verdict("damped splitting (desk)", m["converged"] and m["contraction"] <= m["rho"] + 0.01,
                       f"beta {m['beta']:.4f}, rho {m['rho']:.5f}, contraction {m['contraction']:.4f}, "
                       f"{m['damped_iterations']} vs {m['naive_iterations']} passes"))
    m = verify.theorem_bounds(seed=seed).values
    ok.append(_verdict("MsFEM / Adv-MsFEM bounds", m["msfem_satisfied"] == m["draws"] and m["adv_satisfied"] == m["draws"],
                       f"{m['msfem_satisfied']}/{m['draws']} and {m['adv_satisfied']}/{m['draws']}"))
    for label, problem in (("constant source", None), ("layer-free source", verify.LAYER_FREE_PROBLEM)):
        m = verify.stabilized_constants(problem).values
        for th, kind in ((4, "exact basis"), (5, "discrete basis")):
            c, s = m[f"theorem{th}_constant"], m[f"theorem{th}_spread"]
            ok.append(_verdict(f"Stab-MsFEM bound, {kind}, {label}", c <= 100 and s <= 2,
                               f"constant {c:.3g} (<= 100), spread over H {s:.3g} (<= 2)"))
    m = verify.stability_bound(seed=seed).values
    ok.append(_verdict("stability bound", m["worst_ratio"] <= 1 and m["envelope_excess"] <= 1e-12,
                       f"worst ratio {m['worst_ratio']:.3f}, envelope excess {m['envelope_excess']:.2e}"))
    m = verify.supg_rate().values
    ok.append(_verdict("P1-SUPG rate", 0.8 <= m["slope"] <= 1.3, f"slope {m['slope']:.3f}"))
    return 0 if all(ok) else 1


def cmd_table(args) -> int:
    full, desk = TABLES[args.name]
    preset = full if args.full else desk
    return cmd_run(args, preset, args.name)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msfem-lab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_config_args(sub.add_parser("run", help="run one experiment"))
    _add_config_args(sub.add_parser("sweep", help="run a parameter sweep"))
    v = sub.add_parser("verify-theory", help="numerical checks of the theory")
    v.add_argument("--seed", type=int, default=0)
    t = sub.add_parser("reproduce-table", help="rerun a table preset")
    t.add_argument("name", choices=sorted(TABLES))
    _add_config_args(t, preset=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        if args.command == "verify-theory":
            return cmd_verify(args)
        return cmd_table(args)
    except bench.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

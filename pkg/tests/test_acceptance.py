"""Acceptance criteria 1-10.

Every test records one ``PASS``/``FAIL`` line (printed in the terminal
summary) before asserting, so a failing criterion is reported with its
measured values.
"""
import gc
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from splitting_oracle import naive_trajectory

from msfem_lab import analysis, bench, verify
from msfem_lab.methods import solve_adv_msfem, solve_msfem, solve_p1, solve_stab_msfem
from msfem_lab.problem import Discretization, ProblemSpec
from msfem_lab.splitting import solve_splitting, solve_splitting_damped

HERE = Path(__file__).parent


def record(n: int, ok: bool, text: str):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {n}: {text}")
    assert ok, text


def within(value, target, abs_tol=0.0, rel_tol=0.0):
    return abs(value - target) <= max(abs_tol, rel_tol * abs(target))


def out_error(rep, disc):
    return analysis.report_errors(rep, disc)


# -- 1 ---------------------------------------------------------------------


def test_criterion_1_single_scale_1d():
    t0 = time.perf_counter()
    rec = bench.run(bench.load_config(preset="1d"))
    elapsed = time.perf_counter() - t0
    p1, supg = rec.result("P1").errors, rec.result("P1-SUPG").errors
    checks = [within(p1["e_H1_out"], 0.8913, rel_tol=0.05), within(supg["e_H1_out"], 0.2228, rel_tol=0.05),
              within(supg["e_H1_in"], 0.7163, rel_tol=0.05), elapsed < 5]
    record(1, all(checks),
           f"P1 out {p1['e_H1_out']:.4f} (0.8913), SUPG out {supg['e_H1_out']:.4f} (0.2228), "
           f"SUPG in {supg['e_H1_in']:.4f} (0.7163), +-5%; {elapsed:.2f} s (< 5 s)")


# -- 2 ---------------------------------------------------------------------


def test_criterion_2_single_scale_2d():
    full = Discretization(ProblemSpec(alpha=1 / 128, delta=0.5, eps=1.0), 1 / 16, ratio=64)
    p1 = out_error(solve_p1(full), full).e_H1_out
    upw = out_error(solve_p1(full, "upwind"), full).e_H1_out
    del full
    gc.collect()
    desk = Discretization(ProblemSpec(alpha=1 / 32, delta=0.5, eps=1.0), 1 / 8, ratio=32)
    dp1 = out_error(solve_p1(desk), desk).e_H1_out
    dupw = out_error(solve_p1(desk, "upwind"), desk).e_H1_out
    checks = [within(p1, 0.58, rel_tol=0.2), within(upw, 0.03, abs_tol=0.03), dp1 >= 2 * dupw]
    record(2, all(checks),
           f"h=1/1024: P1 out {p1:.3f} (0.58 +-20%), Upwind out {upw:.3f} (0.03 +-0.03); "
           f"desk: P1 out {dp1:.3f} vs Upwind {dupw:.3f} (ratio {dp1 / dupw:.1f} >= 2)")


# -- 3, 4, 6c: full reference test -----------------------------------------


@pytest.fixture(scope="module")
def reference():
    disc = Discretization(ProblemSpec(alpha=1 / 128, delta=0.5, eps=1 / 64), 1 / 16)
    assert disc.h == 1 / 1024
    disc.reference_broken
    yield disc
    del disc
    gc.collect()


@pytest.fixture(scope="module")
def reference_errors(reference):
    d = reference
    reps = {
        "Upwind": solve_p1(d, "upwind"),
        "MsFEM": solve_msfem(d),
        "Stab-MsFEM": solve_stab_msfem(d),
        "Adv-MsFEM": solve_adv_msfem(d),
        "Splitting": solve_splitting(d)[0],
        "Adv-MsFEM-CR": solve_adv_msfem(d, "crouzeix_raviart"),
    }
    return {k: out_error(r, d) for k, r in reps.items()}


def tol3(value, target):
    return within(value, target, abs_tol=0.03, rel_tol=0.25)


def test_criterion_3_reference_table(reference_errors):
    targets = {"Upwind": 0.13, "MsFEM": 0.57, "Stab-MsFEM": 0.04, "Adv-MsFEM": 0.29, "Splitting": 0.03}
    e = {k: reference_errors[k].e_H1_out for k in targets}
    bad = [k for k, t in targets.items() if not tol3(e[k], t)]
    ordering = max(e["Stab-MsFEM"], e["Splitting"]) < e["Upwind"] < e["Adv-MsFEM"] < e["MsFEM"]
    text = ", ".join(f"{k} {e[k]:.3f} ({t})" for k, t in targets.items())
    record(3, not bad and ordering,
           f"e_H1_out {text}; outside tolerance: {bad or 'none'}; ordering {'holds' if ordering else 'violated'}")


def test_criterion_4_boundary_conditions(reference_errors):
    lin, cr = reference_errors["Adv-MsFEM"].e_H1_in, reference_errors["Adv-MsFEM-CR"].e_H1_in
    checks = [lin >= 2 * cr, tol3(cr, 0.18), tol3(lin, 0.68)]
    record(4, all(checks),
           f"e_H1_in lin {lin:.3f} (0.68), CR {cr:.3f} (0.18), ratio {lin / cr:.2f} (>= 2); "
           f"tolerance lin {'ok' if checks[2] else 'missed'}, CR {'ok' if checks[1] else 'missed'}")


# -- 5 ---------------------------------------------------------------------


def test_criterion_5_closed_forms():
    t0 = time.perf_counter()
    m = verify.closed_form_1d(n_draws=10, seed=0)
    elapsed = time.perf_counter() - t0
    ok = m.values["adv_msfem"] <= 1e-8 and m.values["p1_supg"] <= 1e-8 and elapsed < 1
    record(5, ok, f"max deviation Adv-MsFEM {m.values['adv_msfem']:.2e}, P1-SUPG {m.values['p1_supg']:.2e} "
                  f"(<= 1e-8) over 10 draws; {elapsed:.2f} s (< 1 s)")


# -- 6 ---------------------------------------------------------------------


def test_criterion_6_splitting(reference, desk):
    a = verify.splitting_matched().values
    b = verify.splitting_divergence().values
    c = verify.splitting_damped(reference).values
    n = 20
    _, state = solve_splitting_damped(desk, 0.0, max_iter=n, tolerance=0.0, record_trajectory=True)
    oracle = naive_trajectory(desk, n)
    scale = max(np.abs(v).max() for v in oracle)
    dev = max(np.abs(x - y).max() for x, y in zip(state.trajectory, oracle)) / scale
    parts = {
        "a": a["passes"] == 1 and a["residual"] < 1e-12,
        "b": b["condition"] and within(b["measured"], b["predicted"], rel_tol=0.05),
        "c": (1.98 <= c["beta"] <= 2.06 and within(c["rho"], 0.9990, abs_tol=0.0002) and c["converged"]
              and c["iteration_ratio"] >= 20),
        "d": dev <= 1e-12,
    }
    record(6, all(parts.values()),
           f"(a) {a['passes']} pass, residual {a['residual']:.1e}; "
           f"(b) growth {b['measured']:.4f} vs {b['predicted']:.4f}; "
           f"(c) beta {c['beta']:.4f}, rho {c['rho']:.6f}, {c['damped_iterations']} vs {c['naive_iterations']} "
           f"passes ({c['iteration_ratio']:.0f}x); (d) max deviation {dev:.1e}; failed parts: "
           f"{[k for k, v in parts.items() if not v] or 'none'}")


# -- 7 ---------------------------------------------------------------------


def test_criterion_7_theorems():
    t0 = time.perf_counter()
    tb = verify.theorem_bounds(n_draws=20, seed=0).values
    sc = verify.stabilized_constants().values
    lf = verify.stabilized_constants(verify.LAYER_FREE_PROBLEM).values
    sb = verify.stability_bound(n_draws=20, seed=0).values
    elapsed = time.perf_counter() - t0
    exact_ok = tb["msfem_satisfied"] == 20 and tb["adv_satisfied"] == 20
    fitted_ok = sc["applicable"] and all(
        math.isfinite(sc[f"theorem{t}_constant"]) and sc[f"theorem{t}_constant"] <= 100
        and sc[f"theorem{t}_spread"] <= 2 for t in (4, 5))
    prop_ok = sb["worst_ratio"] <= 1 and sb["envelope_excess"] <= 1e-12 and sb["draws"] == 20
    record(7, exact_ok and fitted_ok and prop_ok and elapsed < 30,
           f"theorems 3/6 {tb['msfem_satisfied']}/20 and {tb['adv_satisfied']}/20; "
           f"theorems 4/5 (f = 1) constants {sc['theorem4_constant']:.3g}/{sc['theorem5_constant']:.3g}, "
           f"spread {sc['theorem4_spread']:.2f}/{sc['theorem5_spread']:.2f} (<= 2); "
           f"layer-free source spread {lf['theorem4_spread']:.2f}/{lf['theorem5_spread']:.2f}; "
           f"stability ratio {sb['worst_ratio']:.3f}, envelope excess {sb['envelope_excess']:.1e}; {elapsed:.1f} s")


# -- 8 ---------------------------------------------------------------------


def test_criterion_8_supg_rate():
    m = verify.supg_rate()
    s = m.values["slope"]
    record(8, 0.8 <= s <= 1.3, f"slope {s:.3f} in [0.8, 1.3] (Pe*H <= {m.values['max_peclet_H']:.2f})")


# -- 9 ---------------------------------------------------------------------


def test_criterion_9_property_suite():
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           str(HERE / "test_properties.py")], capture_output=True, text=True, cwd=HERE.parent)
    elapsed = time.perf_counter() - t0
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    record(9, proc.returncode == 0 and elapsed < 60, f"standalone property suite: {summary}; {elapsed:.1f} s (< 60 s)")


# -- 10 --------------------------------------------------------------------


def test_criterion_10_costs():
    config = bench.load_config(preset="desk", overrides=[
        "backend=gmres", "methods=MsFEM,Stab-MsFEM,Adv-MsFEM-lin,Splitting"])
    rec = bench.run(config)
    ratios = bench.timing_report([rec])[-1]
    spl = ratios["splitting_online_over_stab_online"]
    adv = ratios["adv_offline_over_msfem_offline"]
    record(10, 5 <= spl <= 40 and adv > 1,
           f"desk preset, gmres: splitting/Stab-MsFEM online {spl:.1f} (in [5, 40]), "
           f"Adv-MsFEM/MsFEM offline {adv:.2f} (> 1)")

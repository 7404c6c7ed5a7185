"""Acceptance criteria 1 to 9, one test each.

Every test records a PASS/FAIL line that conftest prints in the terminal
summary. Running this file directly prints the same lines.
"""

import time
from functools import lru_cache

import numpy as np
import pytest

from moe_scaling import dataio, fitting, law, planner
from moe_scaling.planner import BudgetSpec

from conftest import ACCEPTANCE_LINES, oracle_loss

EXPERTS = (1, 2, 4, 8, 16, 32)

PER_E_TABLE = {
    1: (30.363993648167263, -0.18173956204827252, 53.98384414155987, -0.19650191228646036),
    2: (27.79821195271775, -0.17795397781692185, 66.84011296802187, -0.20648914813917155),
    4: (24.846202931338134, -0.17314011944591995, 87.70219698814259, -0.21918920603633535),
    8: (21.832989774298056, -0.1675966335114486, 119.91258457347162, -0.23381418809729415),
    16: (19.015896366339852, -0.16167306968397718, 167.50725788774776, -0.24944190245208414),
    32: (16.54244596529427, -0.1556980993088928, 234.67256254388218, -0.2652052390210445),
}

# (N_act, D) per budget, in expert order 1..32.
COMPUTE_TABLE = {
    1e20: [(1.7e9, 9.7e9), (1.5e9, 11.4e9), (1.2e9, 13.9e9), (990e6, 17e9), (810e6, 20.7e9), (669e6, 24.9e9)],
    1e21: [(5.7e9, 29.3e9), (5e9, 33e9), (4.4e9, 38e9), (3.8e9, 44.3e9), (3.3e9, 51.2e9), (2.85e9, 58.4e9)],
    1e22: [(18.8e9, 88.6e9), (17.4e9, 96e9), (15.8e9, 105.4e9), (14.4e9, 115.8e9), (13.2e9, 126.5e9), (12.2e9, 136.9e9)],
}

# Optimal E per budget for 24GB, 80GB, 640GB; 32 stands for ">= 32".
OPTIMAL_E_TABLE = {
    1e21: (16, 32, 32),
    1e22: (4, 16, 32),
    1e23: (1, 8, 32),
    1e24: (1, 1, 16),
}
MEMORY_CAPS = (24e9, 80e9, 640e9)


def record(number, passed, detail, elapsed, limit):
    ok = bool(passed) and elapsed < limit
    ACCEPTANCE_LINES.append((number, ok, f"{detail} [{elapsed:.2f}s, limit {limit:g}s]"))
    assert passed, detail
    assert elapsed < limit, f"runtime {elapsed:.1f}s exceeds {limit}s"


def test_criterion_1_coefficient_table(coeffs):
    t0 = time.perf_counter()
    worst_mn = worst_exp = 0.0
    c_exact = True
    for e, (m, mu, n, nu) in PER_E_TABLE.items():
        red = law.reduce_to_chinchilla(coeffs, e)
        worst_mn = max(worst_mn, abs(red.m / m - 1), abs(red.n / n - 1))
        worst_exp = max(worst_exp, abs(red.mu - mu), abs(red.nu - nu))
        c_exact &= red.c == 1.3637
    elapsed = time.perf_counter() - t0
    ok = worst_mn <= 0.01 and worst_exp <= 5e-4 and c_exact
    record(1, ok, f"6 rows: max rel err m,n {worst_mn:.2e} (<=1e-2), max abs err mu,nu {worst_exp:.2e} (<=5e-4), c exact {c_exact}", elapsed, 1)


def test_criterion_2_compute_optimal_table(coeffs):
    t0 = time.perf_counter()
    worst = 0.0
    cells = 0
    for flops, row in COMPUTE_TABLE.items():
        for e, (n, d) in zip(EXPERTS, row):
            got_n, got_d = planner.compute_optimal(flops, e, coeffs)
            err = max(abs(got_n / n - 1), abs(got_d / d - 1))
            worst = max(worst, err)
            cells += err <= 0.03
    elapsed = time.perf_counter() - t0
    record(2, cells == 18, f"{cells}/18 cells within 3% (max rel err {worst:.2%})", elapsed, 1)


def test_criterion_3_optimal_e_table(coeffs):
    t0 = time.perf_counter()
    matches, misses = 0, []
    for flops, row in OPTIMAL_E_TABLE.items():
        for cap, expected in zip(MEMORY_CAPS, row):
            budget = BudgetSpec(flops, memory_cap=cap, kv_tokens=16384, bytes_per_element=2)
            got, _ = planner.optimal_experts(budget, coeffs)
            if got == expected:
                matches += 1
            else:
                misses.append(f"{flops:.0e}/{cap / 1e9:.0f}GB got {got} want {expected}")
    elapsed = time.perf_counter() - t0
    record(3, matches >= 10, f"{matches}/12 cells match (need 10); misses: {'; '.join(misses) or 'none'}", elapsed, 5)


def test_criterion_4_closed_form_vs_brute_force(coeffs):
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240101)
    grid = np.geomspace(1e6, 1e13, 10_000)
    worst = 0.0
    for _ in range(50):
        flops = 10 ** rng.uniform(19, 24)
        e = int(rng.integers(1, 65))
        n, _ = planner.compute_optimal(flops, e, coeffs)
        losses = oracle_loss(grid, flops / (6 * grid), e)
        worst = max(worst, abs(n / grid[int(np.argmin(losses))] - 1))
    elapsed = time.perf_counter() - t0
    record(4, worst <= 1e-3, f"50 random (F,E): max rel diff in N {worst:.2e} (<=1e-3)", elapsed, 10)


@lru_cache(maxsize=None)
def _synthetic(sigma):
    return tuple(dataio.synthesize(dataio.bundled_experiment_grid(), law.default_coefficients(), sigma, 0))


@lru_cache(maxsize=None)
def _joint_fit(sigma):
    t0 = time.perf_counter()
    rep = fitting.fit(_synthetic(sigma), fitting.FitConfig(grid_sample=100, seed=0))
    return rep, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_5_fit_round_trip():
    clean, t_clean = _joint_fit(0.0)
    noisy, t_noisy = _joint_fit(0.005)
    ok = clean.rmse_val <= 1e-3 and noisy.rmse_val <= 0.008
    detail = f"noiseless val RMSE {clean.rmse_val:.2e} (<=1e-3), sigma=0.005 val RMSE {noisy.rmse_val:.2e} (<=8e-3)"
    record(5, ok, detail, t_clean + t_noisy, 600)


def test_criterion_6_gradient(coeffs):
    t0 = time.perf_counter()
    grid = dataio.synthesize(dataio.bundled_experiment_grid(), coeffs, 0.01, 5)
    rng = np.random.default_rng(6)
    base = fitting.theta_from_coefficients(coeffs)
    cfg = fitting.FitConfig()
    worst = 0.0
    for _ in range(100):
        recs = [grid[i] for i in rng.choice(len(grid), 20, replace=False)]
        weights = rng.uniform(0.2, 1.0, len(recs))
        theta = base + rng.normal(0, 0.05, base.size)
        _, g = fitting.objective_and_gradient(theta, recs, weights, cfg)
        fd = np.empty_like(g)
        for i in range(theta.size):
            h = 1e-6 * max(1.0, abs(theta[i]))
            up, down = theta.copy(), theta.copy()
            up[i] += h
            down[i] -= h
            fd[i] = (fitting.objective(up, recs, weights, cfg) - fitting.objective(down, recs, weights, cfg)) / (2 * h)
        scale = np.maximum(np.abs(fd), 1e-3 * np.abs(fd).max())
        worst = max(worst, float(np.max(np.abs(g - fd) / scale)))
    elapsed = time.perf_counter() - t0
    record(6, worst <= 1e-5, f"100 evaluations: max rel diff {worst:.2e} (<=1e-5)", elapsed, 10)


def test_criterion_7_monotonicity(coeffs):
    t0 = time.perf_counter()
    checks = {}
    eh = law.e_hat(np.arange(1, 1025), coeffs)
    checks["e_hat"] = bool(np.all(np.diff(eh) > 0)) and law.e_hat(1, coeffs) == coeffs.e_start
    ratio_ok = loss_ok = True
    # The ratio ordering is asserted at the tabulated budgets; it reverses near 1e24.
    for flops in (1e20, 1e21, 1e22):
        ratios = [d / n for n, d in (planner.compute_optimal(flops, e, coeffs) for e in EXPERTS)]
        ratio_ok &= all(a < b for a, b in zip(ratios, ratios[1:]))
    for flops in (1e19, 1e20, 1e21, 1e22, 1e23, 1e24):
        losses = [planner.optimal_loss(flops, e, coeffs) for e in EXPERTS]
        loss_ok &= all(b <= a for a, b in zip(losses, losses[1:]))
    checks["D/N in E"] = ratio_ok
    checks["loss in E"] = loss_ok
    budgets = np.geomspace(1e19, 1e24, 11)
    sav = np.array([[planner.flops_savings(f, e, coeffs) for f in budgets] for e in EXPERTS[1:]])
    checks["savings in F"] = bool(np.all(np.diff(sav, axis=1) >= 0))
    checks["savings in E"] = bool(np.all(np.diff(sav, axis=0) >= 0))
    ns = np.geomspace(1e7, 1e11, 20)
    lr = np.array([[law.peak_learning_rate(n, e) for n in ns] for e in EXPERTS])
    checks["lr"] = bool(np.all(np.diff(lr, axis=0) < 0) and np.all(np.diff(lr, axis=1) < 0))
    elapsed = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    record(7, not failed, f"{len(checks) - len(failed)}/{len(checks)} properties hold; failing: {', '.join(failed) or 'none'}", elapsed, 5)


def test_criterion_8_rule_of_thumb(coeffs):
    t0 = time.perf_counter()
    verdicts = {e: planner.rule_of_thumb_compare(1.1e9, e, coeffs, dense_tokens=8e9) for e in (2, 4, 8)}
    four = verdicts[4]
    elapsed = time.perf_counter() - t0
    ok = (
        all(r.verdict == "moe_wins" for r in verdicts.values())
        and abs(four.loss_moe - 2.598) <= 0.005
        and abs(four.loss_dense - 2.666) <= 0.005
    )
    detail = (
        "verdicts " + ", ".join(f"E={e}:{r.verdict}" for e, r in verdicts.items())
        + f"; E=4 moe {four.loss_moe:.4f} vs dense {four.loss_dense:.4f} (2.598/2.666 +-0.005)"
    )
    record(8, ok, detail, elapsed, 1)


@pytest.mark.slow
def test_criterion_9_joint_vs_separate():
    joint, t_joint = _joint_fit(0.005)
    t0 = time.perf_counter()
    sep = fitting.fit_separate_chinchilla(_synthetic(0.005), fitting.FitConfig(grid_sample=100, seed=0))
    elapsed = t_joint + time.perf_counter() - t0
    ok = sep.rmse_train <= joint.rmse_train and joint.rmse_val <= sep.rmse_val + 1e-3
    detail = (
        f"train separate {sep.rmse_train:.5f} <= joint {joint.rmse_train:.5f}; "
        f"val joint {joint.rmse_val:.5f} <= separate {sep.rmse_val:.5f} + 1e-3"
    )
    record(9, ok, detail, elapsed, 900)


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))

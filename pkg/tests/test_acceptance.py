"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the
"acceptance criteria" summary section) or ``python tests/test_acceptance.py``.

Criterion 1 needs 60 optimizer runs of 30000 iterations each. It is
evaluated from the artifacts of ``remest table1 --config configs/table1.json
--out results/table1``; set ``REMEST_FULL_TABLE1=1`` to recompute them here.
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import CRITERIA_LINES
from oracles import exact_integer_cost, exhaustive_integer_optimum, history_search, random_finite_instance, tiny_integer_model
from remest import dp
from remest.cli import load_config, run_workflow
from remest.model import BLANK, ThresholdPolicy, gilbert_elliott_model
from remest.pomdp import Belief, FiniteSourceSpec, drop_mass, post_update, solve_common_info_dp
from remest.rmc import RmcConfig, iteration_streams, n_statistic, optimize, spsa_gradients
from remest.sim import SimConfig, check_renewal_identity, estimate_cost_direct, renewal_identity_se, run_cycles

pytestmark = pytest.mark.slow

ROOT = Path(__file__).resolve().parents[1]
TABLE1_DIR = ROOT / "results" / "table1"
# lambda1 -> (k0, k1, C) reported for the Gilbert-Elliott example
TABLE1 = {50.0: (8.669, 4.465, 4.991), 100.0: (10.235, 5.635, 6.087), 200.0: (11.660, 7.203, 7.198)}
TINY_LAMBDA1 = 20.0


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA_LINES.append(line)
    print(line)
    assert ok, line


def random_policies(rng, count, k_hi=15.0):
    return [ThresholdPolicy(rng.uniform(0.0, k_hi, size=(2, 1))) for _ in range(count)]


# -- 1 ---------------------------------------------------------------------------


def _table1_artifacts():
    if os.environ.get("REMEST_FULL_TABLE1") == "1":
        cfg = load_config(ROOT / "configs" / "table1.json")
        assert run_workflow(cfg, TABLE1_DIR) == 0
    summary = TABLE1_DIR / "summary.json"
    if not summary.exists():
        return None
    return json.loads(summary.read_text())


def test_criterion_1_table1_reproduction():
    data = _table1_artifacts()
    if data is None:
        line = "criterion 1: SKIP  no results/table1 artifacts; run `remest table1 --config configs/table1.json --out results/table1`"
        CRITERIA_LINES.append(line)
        pytest.skip(line)
    cfg, rmc = data["config"], data["config"]["rmc"]
    setup_ok = (
        data["config"]["replications"] >= 20
        and rmc["iterations"] == 30000
        and rmc["N"] == 1000
        and rmc["c"] == 0.1
        and rmc.get("perturb_dist", "normal") == "normal"
        and rmc["adam"]["alpha"] == 0.1
        and rmc["eval_N"] == 100_000
        and cfg["model"].get("distortion", {"p": 2.0})["p"] == 2.0
    )
    parts, ok = [], setup_ok
    for row in data["results"]["rows"]:
        k0, k1, c = TABLE1[row["lambda1"]]
        good = abs(row["C_mean"] - c) <= 0.1 and abs(row["k1_mean"] - k1) <= 0.3 and abs(row["k0_mean"] - k0) <= 2.0
        ok &= good
        parts.append(
            f"lambda1={row['lambda1']:g}: C={row['C_mean']:.3f} (want {c}+-0.1) "
            f"k1={row['k1_mean']:.3f} (want {k1}+-0.3) k0={row['k0_mean']:.3f} (want {k0}+-2.0)"
        )
    ok &= len(parts) == 3
    report(1, ok, f"[{data['config']['replications']} seeds, d(e)=e^2 assumed] " + "; ".join(parts))


# -- 2, 3 --------------------------------------------------------------------------


def test_criterion_2_renewal_identity():
    model = gilbert_elliott_model(100.0)
    rng = np.random.default_rng(2)
    worst = 0.0
    ok = True
    for i, pol in enumerate(random_policies(rng, 10)):
        est = run_cycles(model, pol, SimConfig(n_cycles=100_000, seed=100 + i))
        z = abs(check_renewal_identity(est, model.beta)) / renewal_identity_se(est, model.beta)
        worst = max(worst, z)
        ok &= z <= 3.0
    report(2, ok, f"10 random policies, N=1e5: max |residual|/SE = {worst:.3g} (limit 3)")


def test_criterion_3_renewal_vs_direct():
    model = gilbert_elliott_model(100.0)
    rng = np.random.default_rng(3)
    pols = [ThresholdPolicy([[10.235], [5.635]])] + random_policies(rng, 5)
    worst, ok = 0.0, True
    for i, pol in enumerate(pols):
        ren = run_cycles(model, pol, SimConfig(n_cycles=100_000, seed=200 + i))
        direct = estimate_cost_direct(model, pol, reps=100_000, seed=300 + i)
        z = abs(ren.c_hat - direct.mean) / math.hypot(ren.se_c, direct.se)
        worst = max(worst, z)
        ok &= z <= 3.0
    report(3, ok, f"reference thresholds + 5 random policies: max |C_renewal - C_direct|/SE = {worst:.3g} (limit 3)")


# -- 4 ---------------------------------------------------------------------------------


def test_criterion_4_dp_structure():
    model = gilbert_elliott_model(100.0)
    grid = dp.GridSpec()
    t0 = time.perf_counter()
    J, pol, iters = dp.value_iteration(model, grid, tol=1e-8)
    rep = dp.check_structure(J, pol, model, tol=1e-7, grid=grid)
    elapsed = time.perf_counter() - t0
    ok = rep.even and rep.quasi_convex and rep.decreasing_in_s is True and rep.threshold_policy
    report(
        4,
        ok,
        f"{iters} sweeps in {elapsed:.2f}s; even={rep.even} ({rep.even_violation:.1e}) "
        f"quasi-convex={rep.quasi_convex} ({rep.quasi_convex_violation:.1e}) "
        f"decreasing-in-s={rep.decreasing_in_s} ({rep.decreasing_in_s_violation:.1e}) threshold={rep.threshold_policy}",
    )


# -- 5 -----------------------------------------------------------------------------------


def test_criterion_5_rmc_vs_exhaustive():
    model = tiny_integer_model(lambda1=TINY_LAMBDA1)
    best, k_best, _ = exhaustive_integer_optimum(model)
    excess = []
    for seed in range(10):
        k, _ = optimize(model, None, RmcConfig(iterations=3000, seed=seed))
        excess.append(exact_integer_cost(model, k.k).c / best - 1.0)
    mean_excess = float(np.mean(excess))
    within = sum(e <= 0.02 for e in excess)
    report(
        5,
        mean_excess <= 0.02,
        f"tiny model lambda1={TINY_LAMBDA1:g}: optimum C={best:.5f} at k={k_best}; "
        f"mean excess over 10 seeds = {100 * mean_excess:.2f}% (limit 2%), {within}/10 runs individually within 2%",
    )


# -- 6 -------------------------------------------------------------------------------------


def test_criterion_6_spsa_quadratic():
    k_star = np.array([3.0, 7.0, 12.5])
    A = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.2], [0.0, 0.2, 0.5]])

    def evaluate(k, rng):
        # C = L / M with M = 1 is the quadratic itself
        d = k - k_star
        return float(d @ A @ d) + 1.0, 1.0

    k, trace = optimize(None, np.ones(3), RmcConfig(iterations=5000, seed=6), evaluator=evaluate, num_states=1)
    err = float(np.max(np.abs(k.as_vector() - k_star)))
    ks = np.array(trace.k)
    inside = np.max(np.abs(ks - k_star), axis=1) < 1e-2
    first = int(np.argmax(inside)) if inside.any() else -1
    report(6, err <= 1e-2, f"max |k - k*| after 5000 iterations = {err:.2e} (limit 1e-2); first within at iteration {first}")


# -- 7 -------------------------------------------------------------------------------------


def test_criterion_7_pomdp_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(25):
        P, d, channel, prior = random_finite_instance(rng, n=2, S=2, m=1)
        s0 = int(rng.integers(0, 2))
        value, _ = solve_common_info_dp(FiniteSourceSpec(P, d), channel, 2, prior, s0)
        worst = max(worst, abs(value - history_search(P, d, channel, 2, prior, s0)))
    tp_worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 5))
        _, _, channel, _ = random_finite_instance(rng, n=n, S=2, m=2)
        pi = Belief(rng.dirichlet(np.ones(n)))
        phi = tuple(int(u) for u in rng.integers(0, 3, size=n))
        s = int(rng.integers(0, 2))
        b = drop_mass(pi, s, phi, channel)
        total = b * post_update(pi, s, phi, BLANK, channel).probs if b > 0 else np.zeros(n)
        for x in range(n):
            total = total + pi.probs[x] * (1 - channel.drop[s, phi[x]]) * post_update(pi, s, phi, x, channel).probs
        tp_worst = max(tp_worst, float(np.max(np.abs(total - pi.probs))))
    report(
        7,
        worst <= 1e-9 and tp_worst <= 1e-10,
        f"25 instances (n=2, m=1, T=2): max |DP - exhaustive| = {worst:.1e} (limit 1e-9); "
        f"1000 belief triples: max total-probability error = {tp_worst:.1e} (limit 1e-10)",
    )


# -- 8 ---------------------------------------------------------------------------------------


def test_criterion_8_necessary_condition():
    model = tiny_integer_model(lambda1=TINY_LAMBDA1)
    _, k_best, _ = exhaustive_integer_optimum(model)
    # centre of the optimal cell: for an integer source, k and k - 0.5 give the same policy
    k = np.array(k_best, dtype=float) - 0.5
    cfg = RmcConfig()
    ns = []
    for r in range(100):
        streams = iteration_streams(8, r)
        est = run_cycles(model, ThresholdPolicy.from_vector(k, 2), cfg.sim_config(), np.random.Generator(np.random.PCG64(streams[1])))
        gl, gm, _ = spsa_gradients(model, k, cfg, streams=streams)
        ns.append(n_statistic(est.l_hat, est.m_hat, gl, gm))
    ns = np.array(ns)
    mean = ns.mean(axis=0)
    se = ns.std(axis=0, ddof=1) / math.sqrt(len(ns))
    z = np.abs(mean) / np.where(se > 0, se, np.inf)
    ok = bool(np.all((np.abs(mean) <= 3 * se) | (mean == 0)))
    report(8, ok, f"k={k.tolist()}, 100 replications: mean N = {np.round(mean, 4).tolist()}, |mean|/SE = {np.round(z, 2).tolist()} (limit 3)")


# -- 9 ---------------------------------------------------------------------------------------


def test_criterion_9_grid_refinement():
    model = gilbert_elliott_model(100.0)
    coarse = dp.GridSpec()
    fine = coarse.refined()
    _, pc, _ = dp.value_iteration(model, coarse)
    _, pf, _ = dp.value_iteration(model, fine)
    kc = dp.extract_thresholds(pc, coarse, m=1)
    kf = dp.extract_thresholds(pf, fine, m=1)
    shift = float(np.max(np.abs(kc.k - kf.k)))
    report(
        9,
        shift < 2 * coarse.spacing,
        f"coarse k={kc.k.ravel().round(4).tolist()} fine k={kf.k.ravel().round(4).tolist()}: "
        f"max shift {shift:.4f} (limit {2 * coarse.spacing:.3f})",
    )


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))

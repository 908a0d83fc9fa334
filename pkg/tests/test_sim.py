import math

import numpy as np
import pytest

from oracles import exact_integer_cost, tiny_integer_model
from remest.model import (
    ArSourceSpec,
    ChannelSpec,
    CostSpec,
    ModelSpec,
    NoiseSpec,
    ThresholdPolicy,
    gilbert_elliott_model,
)
from remest.sim import (
    DegeneratePolicyError,
    SimConfig,
    check_renewal_identity,
    estimate_cost_direct,
    renewal_identity_se,
    run_cycles,
)

TABLE_K = ThresholdPolicy([[10.235], [5.635]])


def perfect_channel_model(lam=3.0, beta=0.9, power=2.0):
    """One channel state, max power never dropped."""
    return ModelSpec(
        source=ArSourceSpec(1.0, NoiseSpec.gaussian(1.0)),
        channel=ChannelSpec(Q=[[1.0]], power_levels=[0, 1], drop=[[1.0, 0.0]], tx_cost=[0.0, lam]),
        cost=CostSpec(beta=beta, power=power),
    )


class TestRunCycles:
    def test_one_step_regeneration(self):
        est = run_cycles(perfect_channel_model(lam=3.0), ThresholdPolicy([[0.0]]), SimConfig(n_cycles=5000))
        assert est.m_hat == 1.0
        assert est.l_hat == 3.0
        assert est.c_hat == 3.0
        assert est.mean_beta_tau == pytest.approx(0.9, abs=1e-12)  # summation round-off
        assert check_renewal_identity(est, 0.9) == pytest.approx(0.0, abs=1e-12)

    def test_tiny_model_matches_linear_solve(self):
        model = tiny_integer_model(noise_pmf=(0.5, 0.5), lambda1=10.0)
        k = np.array([[3.0], [2.0]])
        exact = exact_integer_cost(model, k)
        est = run_cycles(model, ThresholdPolicy(k), SimConfig(n_cycles=200_000, seed=11))
        assert abs(est.c_hat - exact.c) <= 3 * est.se_c
        assert abs(est.l_hat - exact.l) <= 3 * est.se_l
        assert abs(est.m_hat - exact.m) <= 3 * est.se_m

    def test_invariants(self):
        model = gilbert_elliott_model()
        est = run_cycles(model, TABLE_K, SimConfig(n_cycles=20_000, seed=1))
        assert 0 < est.m_hat <= 1 / (1 - model.beta)
        assert est.c_hat == est.l_hat / est.m_hat
        assert est.capped_cycles == 0

    def test_seed_determinism_and_worker_independence(self):
        model = gilbert_elliott_model()
        cfg = SimConfig(n_cycles=120_000, seed=9)
        a = run_cycles(model, TABLE_K, cfg, workers=1)
        b = run_cycles(model, TABLE_K, cfg, workers=3)
        assert a == b
        c = run_cycles(model, TABLE_K, SimConfig(n_cycles=120_000, seed=10))
        assert c.l_hat != a.l_hat

    def test_generator_argument(self):
        model = gilbert_elliott_model()
        cfg = SimConfig(n_cycles=1000)
        a = run_cycles(model, TABLE_K, cfg, np.random.default_rng(4))
        b = run_cycles(model, TABLE_K, cfg, np.random.default_rng(4))
        assert a == b

    def test_invalid_policy_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            run_cycles(gilbert_elliott_model(), ThresholdPolicy([[1.0, 2.0]]), SimConfig())

    def test_degenerate_policy(self):
        # never transmit and no discount truncation: cycles never end
        model = perfect_channel_model(beta=0.9)
        with pytest.raises(DegeneratePolicyError):
            run_cycles(model, ThresholdPolicy([[1e9]]), SimConfig(n_cycles=20, max_cycle_len=200, discount_cutoff=0))

    def test_table1_thresholds_cost(self):
        est = run_cycles(gilbert_elliott_model(100.0), TABLE_K, SimConfig(n_cycles=10**6, seed=2024))
        assert est.c_hat == pytest.approx(6.087, abs=0.05)


class TestRenewalIdentity:
    def test_gilbert_elliott(self):
        model = gilbert_elliott_model()
        est = run_cycles(model, ThresholdPolicy([[4.0], [2.0]]), SimConfig(n_cycles=100_000, seed=5))
        assert abs(check_renewal_identity(est, model.beta)) <= 3 * renewal_identity_se(est, model.beta)

    def test_high_discount_bounded_cycles(self):
        # always transmit over a channel that never drops: tau = 1, residual exactly 0
        model = perfect_channel_model(beta=0.999)
        est = run_cycles(model, ThresholdPolicy([[0.0]]), SimConfig(n_cycles=1000))
        assert abs(check_renewal_identity(est, 0.999)) <= 1e-6


class TestDirect:
    def test_zero_cost_model(self):
        model = ModelSpec(
            source=ArSourceSpec(1.0, NoiseSpec.gaussian(1.0)),
            channel=ChannelSpec(Q=[[1.0]], power_levels=[0, 1], drop=[[1.0, 0.5]], tx_cost=[0.0, 0.0]),
            cost=CostSpec(beta=0.9, distortion="table", table_x=[0, 1], table_y=[0, 0]),
        )
        assert estimate_cost_direct(model, ThresholdPolicy([[1.0]]), reps=100).mean == 0.0

    def test_always_transmit_perfect_channel(self):
        est = estimate_cost_direct(perfect_channel_model(lam=3.0), ThresholdPolicy([[0.0]]), reps=200)
        assert est.mean == pytest.approx(3.0 * (1 - 0.9 ** est.horizon), abs=1e-12)

    def test_agrees_with_renewal(self):
        model = gilbert_elliott_model()
        pol = ThresholdPolicy([[6.0], [4.0]])
        ren = run_cycles(model, pol, SimConfig(n_cycles=100_000, seed=3))
        direct = estimate_cost_direct(model, pol, reps=100_000, seed=4)
        assert abs(ren.c_hat - direct.mean) <= 3 * math.hypot(ren.se_c, direct.se)

    def test_horizon_too_short(self):
        with pytest.raises(ValueError, match="horizon"):
            estimate_cost_direct(gilbert_elliott_model(), TABLE_K, horizon=10)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from remest.model import (
    BLANK,
    ChannelSpec,
    CostSpec,
    ModelSpec,
    NoiseSpec,
    ThresholdPolicy,
    gilbert_elliott_model,
    is_stochastically_monotone,
    kalman_estimate_update,
    policy_power,
    sample_noise,
    step_channel,
    step_error,
    validate_model,
)


def _with_channel(model, **changes):
    ch = model.channel
    fields = dict(Q=ch.Q, power_levels=ch.power_levels, drop=ch.drop, tx_cost=ch.tx_cost)
    fields.update(changes)
    return ModelSpec(model.source, ChannelSpec(**fields), model.cost, model.reference_state)


class TestValidateModel:
    def test_gilbert_elliott_is_valid(self):
        assert validate_model(gilbert_elliott_model()) == []

    def test_nonzero_idle_cost(self):
        m = _with_channel(gilbert_elliott_model(), tx_cost=[0.5, 100.0])
        assert any("λ(0) ≠ 0" in r for r in validate_model(m))

    def test_drop_not_decreasing_in_state(self):
        m = _with_channel(gilbert_elliott_model(), drop=[[1.0, 0.7], [1.0, 0.8]])
        report = validate_model(m)
        assert any("not decreasing in s" in r for r in report)

    def test_rows_must_sum_to_one(self):
        m = _with_channel(gilbert_elliott_model(), Q=[[0.3, 0.6], [0.1, 0.9]])
        assert any("row 0 of Q" in r for r in validate_model(m))

    def test_asymmetric_noise(self):
        m = gilbert_elliott_model()
        bad = ModelSpec(
            source=type(m.source)(a=1.0, noise=NoiseSpec.discrete([-1, 0, 1], [0.2, 0.4, 0.4])),
            channel=m.channel,
            cost=m.cost,
        )
        assert any("symmetric" in r for r in validate_model(bad))

    def test_non_unimodal_noise(self):
        noise = NoiseSpec.discrete([-1, 0, 1], [0.4, 0.2, 0.4])
        assert any("unimodal" in r for r in noise.violations())

    def test_distortion_table_must_be_monotone(self):
        cost = CostSpec(beta=0.9, distortion="table", table_x=[0, 1, 2], table_y=[0, 2, 1])
        assert any("non-decreasing" in r for r in cost.violations())

    def test_policy_shape_and_order(self):
        m = gilbert_elliott_model()
        assert validate_model(m, ThresholdPolicy([[10.0], [5.0]])) == []
        assert any("shape" in r for r in validate_model(m, ThresholdPolicy([[1.0, 2.0]])))
        assert any("ordered" in r for r in ThresholdPolicy([[3.0, 1.0]]).violations())
        assert any(">= 0" in r for r in ThresholdPolicy([[-1.0], [2.0]]).violations())


class TestStochasticMonotone:
    def test_gilbert_elliott_matrix(self):
        # tail of row 1 (0.9) dominates tail of row 0 (0.7)
        assert is_stochastically_monotone([[0.3, 0.7], [0.1, 0.9]])

    @pytest.mark.parametrize("n", [1, 2, 5])
    def test_identity(self, n):
        assert is_stochastically_monotone(np.eye(n))

    def test_counterexample(self):
        assert not is_stochastically_monotone([[0.3, 0.7], [0.9, 0.1]])

    def test_brute_force_agrees_with_definition(self):
        grid = np.linspace(0, 1, 11)
        for a in grid:
            for b in grid:
                Q = np.array([[1 - a, a], [1 - b, b]])
                assert is_stochastically_monotone(Q) == (b >= a - 1e-12)


@pytest.mark.parametrize(
    "e, delivered, w, a, expected",
    [(2.0, False, 0.5, 1.0, 2.5), (2.0, True, 0.5, 1.0, 0.5), (-3.0, False, 0.0, 0.5, -1.5)],
)
def test_step_error(e, delivered, w, a, expected):
    assert step_error(e, delivered, w, a) == expected


class TestPolicyPower:
    pol = ThresholdPolicy([[10.235], [5.635]])

    def test_below_threshold(self):
        assert policy_power(self.pol, 5.0, 0) == 0

    def test_above_threshold_negative_error(self):
        assert policy_power(self.pol, -12.0, 0) == 1

    def test_boundary_is_half_open(self):
        assert policy_power(self.pol, 5.635, 1) == 1
        assert policy_power(self.pol, np.nextafter(5.635, 0), 1) == 0

    @given(
        k=st.lists(st.floats(0, 20), min_size=1, max_size=3).map(sorted),
        e=st.floats(-50, 50),
    )
    def test_even_and_monotone(self, k, e):
        pol = ThresholdPolicy([k])
        u = policy_power(pol, e, 0)
        assert u == policy_power(pol, -e, 0)
        assert policy_power(pol, abs(e) + 1.0, 0) >= u
        assert 0 <= u <= len(k)


@pytest.mark.parametrize("xhat, y, a, expected", [(4.0, BLANK, 1.0, 4.0), (4.0, 7.3, 1.0, 7.3), (-2.0, BLANK, 0.5, -1.0)])
def test_kalman_update(xhat, y, a, expected):
    assert kalman_estimate_update(xhat, y, a) == expected


def test_blank_is_singleton():
    import pickle

    assert pickle.loads(pickle.dumps(BLANK)) is BLANK
    assert type(BLANK)() is BLANK


class TestSampling:
    def test_gaussian_reproducible(self):
        a = sample_noise(NoiseSpec.gaussian(1.0), np.random.default_rng(5), 10)
        b = sample_noise(NoiseSpec.gaussian(1.0), np.random.default_rng(5), 10)
        np.testing.assert_array_equal(a, b)

    def test_discrete_mean(self):
        n = 10**6
        x = sample_noise(NoiseSpec.discrete([-1, 0, 1], [0.25, 0.5, 0.25]), np.random.default_rng(1), n)
        sigma = np.sqrt(0.5)
        assert abs(x.mean()) <= 3 * sigma / np.sqrt(n)

    def test_gaussian_variance(self):
        x = sample_noise(NoiseSpec.gaussian(2.0), np.random.default_rng(2), 10**6)
        assert abs(x.var() / 4.0 - 1) < 0.05

    def test_channel_absorbing(self):
        rng = np.random.default_rng(0)
        assert all(step_channel(np.eye(3), s, rng) == s for s in range(3) for _ in range(20))

    def test_channel_deterministic_row(self):
        rng = np.random.default_rng(0)
        assert all(step_channel([[0.0, 1.0], [0.0, 1.0]], 0, rng) == 1 for _ in range(100))

    def test_channel_frequency(self):
        rng = np.random.default_rng(3)
        Q = gilbert_elliott_model().channel.Q
        n = 10**5
        frac = np.mean([step_channel(Q, 1, rng) for _ in range(n)])
        assert abs(frac - 0.9) <= 3 * np.sqrt(0.09 / n)


@settings(max_examples=50)
@given(st.lists(st.floats(0, 30), min_size=2, max_size=6))
def test_threshold_vector_roundtrip(vals):
    vals = vals[: len(vals) // 2 * 2]
    pol = ThresholdPolicy.from_vector(vals, 2)
    np.testing.assert_array_equal(pol.as_vector(), np.array(vals))


def test_distortion_power_and_table():
    c = CostSpec(beta=0.9)
    assert c.d(0.0) == 0.0 and c.d(-3.0) == 9.0
    t = CostSpec(beta=0.9, distortion="table", table_x=[0, 2], table_y=[0, 4])
    assert t.d(1.0) == 2.0 and t.d(-5.0) == 4.0

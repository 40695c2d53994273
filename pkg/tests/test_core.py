import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sfopt.core import (
    EnvSpec,
    ExperimentConfig,
    OrderingViolation,
    StepSchedule,
    ValidationError,
    config_hash,
    sample_perturbation,
    step_size,
    substream,
    validate_schedule,
)

THREE_TS = StepSchedule(sigma=0.6, alpha=0.45, nu=0.40)
TWO_TS = StepSchedule(sigma=0.6, alpha=0.4)


class TestStepSize:
    def test_t0_is_multiplier(self):
        assert step_size(StepSchedule(sigma=0.6, alpha=0.45, nu=0.40, a0=1.0), "a", 0) == 1.0
        assert step_size(StepSchedule(sigma=0.6, alpha=0.45, nu=0.40, b0=1.0), "b", 0) == 1.0

    def test_closed_form_value(self):
        # independent route: 1000^-0.6 == 10^-1.8
        sched = StepSchedule(sigma=0.6, alpha=0.45, nu=0.40, a0=0.1)
        assert step_size(sched, "a", 999) == pytest.approx(0.1 * 10.0 ** (-1.8), rel=1e-12)

    def test_strictly_decreasing_over_scan(self):
        ts = np.arange(0, 1_000_001)
        for which in ("a", "b", "c"):
            vals = getattr(THREE_TS, {"a": "a0", "b": "b0", "c": "c0"}[which]) * (1.0 + ts) ** (
                -{"a": THREE_TS.sigma, "b": THREE_TS.nu, "c": THREE_TS.alpha}[which]
            )
            spot = [step_size(THREE_TS, which, int(t)) for t in ts[::100_000]]
            assert np.allclose(spot, vals[::100_000])
            assert np.all(np.diff(vals) < 0)
            assert np.all(vals > 0)

    def test_ratio_separation_decreasing(self):
        ts = np.arange(0, 10_000)
        a = np.array([step_size(THREE_TS, "a", int(t)) for t in ts[::500]])
        b = np.array([step_size(THREE_TS, "b", int(t)) for t in ts[::500]])
        c = np.array([step_size(THREE_TS, "c", int(t)) for t in ts[::500]])
        assert np.all(np.diff(a / c) < 0)
        assert np.all(np.diff(c / b) < 0)

    def test_b_requires_nu(self):
        with pytest.raises(ValidationError):
            step_size(TWO_TS, "b", 0)


class TestValidateSchedule:
    def test_table_values_ok(self):
        validate_schedule(StepSchedule(sigma=0.6, alpha=0.45, nu=0.40), "three_ts")
        validate_schedule(StepSchedule(sigma=0.6, alpha=0.4), "two_ts")

    def test_reversed_ordering_rejected(self):
        with pytest.raises(OrderingViolation, match="nu < alpha"):
            validate_schedule(StepSchedule(sigma=0.3, alpha=0.4, nu=0.5), "three_ts")
        with pytest.raises(OrderingViolation, match="alpha < sigma"):
            validate_schedule(StepSchedule(sigma=0.3, alpha=0.4, nu=0.2), "three_ts")

    def test_nu_alpha_ordering(self):
        with pytest.raises(OrderingViolation, match="nu < alpha"):
            validate_schedule(StepSchedule(sigma=0.6, alpha=0.4, nu=0.45), "three_ts")

    def test_two_ts_rejects_nu(self):
        with pytest.raises(OrderingViolation):
            validate_schedule(StepSchedule(sigma=0.6, alpha=0.4, nu=0.2), "two_ts")

    def test_multiplier_ranges(self):
        with pytest.raises(ValidationError):
            validate_schedule(StepSchedule(sigma=0.6, alpha=0.45, nu=0.4, c0=1.5), "three_ts")
        with pytest.raises(ValidationError):
            validate_schedule(StepSchedule(sigma=0.6, alpha=0.45, nu=0.4, b0=0.0), "three_ts")
        # a0 = 0 is the documented way to freeze the parameter update
        validate_schedule(StepSchedule(sigma=0.6, alpha=0.45, nu=0.4, a0=0.0), "three_ts")

    @given(
        nu=st.floats(0.01, 0.98),
        gap1=st.floats(0.001, 0.5),
        gap2=st.floats(0.001, 0.5),
    )
    def test_valid_orderings_accepted(self, nu, gap1, gap2):
        alpha = nu + gap1
        sigma = alpha + gap2
        if sigma >= 1.0:
            return
        validate_schedule(StepSchedule(sigma=sigma, alpha=alpha, nu=nu), "three_ts")


class TestPerturbations:
    def test_moments(self):
        rng = substream(123, 0)
        draws = np.concatenate([sample_perturbation(rng, 4) for _ in range(250_000)])
        assert abs(draws.mean()) < 0.005  # 3 / sqrt(1e6) = 0.003
        assert abs(draws.var() - 1.0) < 0.01

    def test_determinism_across_generators(self):
        a = sample_perturbation(substream(42, 0), 6)
        b = sample_perturbation(substream(42, 0), 6)
        assert np.array_equal(a, b)

    def test_substreams_independent(self):
        # consuming the env stream does not shift the perturbation stream
        pert1 = substream(7, 0)
        ref = sample_perturbation(pert1, 5)
        pert2 = substream(7, 0)
        env = substream(7, 1)
        env.random(1000)
        assert np.array_equal(sample_perturbation(pert2, 5), ref)

    def test_dimension_checked(self):
        with pytest.raises(ValidationError):
            sample_perturbation(substream(0, 0), 0)

    def test_odd_dimension_stream_stable(self):
        # ceil(d/2) uniform pairs per call: calling with d=3 twice equals
        # neither a single d=6 call nor shifts by call count
        rng = substream(9, 0)
        first = sample_perturbation(rng, 3)
        second = sample_perturbation(rng, 3)
        rng2 = substream(9, 0)
        again = sample_perturbation(rng2, 3)
        assert np.array_equal(first, again)
        assert not np.array_equal(first, second)


class TestExperimentConfig:
    def _config(self, **kw):
        base = dict(
            algorithm="nsf1",
            beta=0.1,
            schedule=THREE_TS,
            horizon=100,
            env=EnvSpec(kind="chain", n_states=5, dim=3),
            box_lower=(-1.0,),
            box_upper=(1.0,),
        )
        base.update(kw)
        return ExperimentConfig(**base)

    def test_valid(self):
        self._config().validate()

    def test_box_ordering(self):
        with pytest.raises(ValidationError):
            self._config(box_lower=(1.0,), box_upper=(-1.0,)).validate()

    def test_burn_in_bound(self):
        with pytest.raises(ValidationError):
            self._config(burn_in=100).validate()
        self._config(horizon=0, burn_in=0).validate()

    def test_beta_positive(self):
        with pytest.raises(ValidationError):
            self._config(beta=0.0).validate()

    def test_gsf1_schedule_mode(self):
        with pytest.raises(OrderingViolation):
            self._config(algorithm="gsf1").validate()  # nu set but two_ts
        self._config(algorithm="gsf1", schedule=TWO_TS).validate()

    def test_box_broadcast(self):
        lower, upper = self._config().box()
        assert lower.shape == (3,) and upper.shape == (3,)

    def test_hash_changes_with_seed(self):
        a = config_hash(self._config(seed=0))
        b = config_hash(self._config(seed=1))
        assert a != b
        assert a == config_hash(self._config(seed=0))

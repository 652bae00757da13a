import mpmath
import numpy as np
import pytest

from isorec.schedule import (
    NoiseSchedule,
    SigmaMode,
    TimestepPlan,
    linear_schedule,
    sigma,
    uniform_subsequence,
)


class TestLinearSchedule:
    def test_first_alpha_bar(self):
        sch = linear_schedule(1000, 1e-4, 0.02)
        assert sch.alpha_bars[1] == pytest.approx(0.9999, abs=1e-12)

    def test_alpha_bar_zero_is_one(self):
        for t_train in (1, 10, 1000):
            assert linear_schedule(t_train).alpha_bars[0] == 1.0

    def test_final_alpha_bar_against_extended_precision_product(self):
        sch = linear_schedule(1000, 1e-4, 0.02)
        with mpmath.workdps(50):
            betas = [mpmath.mpf("1e-4") + (mpmath.mpf("0.02") - mpmath.mpf("1e-4")) * i / 999 for i in range(1000)]
            product = mpmath.mpf(1)
            for b in betas:
                product *= 1 - b
            expected = float(product)
        assert sch.alpha_bars[1000] == pytest.approx(expected, rel=1e-10)

    def test_bounds_validation(self):
        with pytest.raises(ValueError):
            linear_schedule(0)
        with pytest.raises(ValueError):
            linear_schedule(10, 0.0, 0.02)
        with pytest.raises(ValueError):
            linear_schedule(10, 0.03, 0.02)
        with pytest.raises(ValueError):
            linear_schedule(10, 0.5, 1.0)

    def test_alpha_bars_strictly_decreasing(self, schedule1000):
        diffs = np.diff(schedule1000.alpha_bars)
        assert np.all(diffs < 0)

    def test_snr_strictly_decreasing(self, schedule1000):
        ab = schedule1000.alpha_bars[1:]
        snr = ab / (1.0 - ab)
        assert np.all(np.diff(snr) < 0)

    def test_cumulative_product_consistency(self, schedule1000):
        logs = np.cumsum(np.log(schedule1000.alphas[1:]))
        assert np.allclose(schedule1000.alpha_bars[1:], np.exp(logs), rtol=1e-10)

    def test_posterior_variance_properties(self, schedule1000):
        assert schedule1000.posterior_vars[1] == 0.0
        assert np.all(schedule1000.posterior_vars[1:] <= schedule1000.betas[1:])

    def test_betas_slot_zero_enforced(self):
        with pytest.raises(ValueError):
            NoiseSchedule(np.array([0.5, 0.1]))


class TestTimestepPlan:
    def test_full_sequence(self):
        plan = uniform_subsequence(10, 10)
        assert plan.taus == tuple(range(10, 0, -1))

    def test_single_step_is_t_train(self):
        assert uniform_subsequence(1000, 1).taus == (1000,)

    def test_spacing_oracle(self):
        plan = uniform_subsequence(1000, 25)
        expected = tuple((i * 1000) // 25 for i in range(25, 0, -1))
        assert plan.taus == expected
        gaps = [a - b for a, b in zip(plan.taus, plan.taus[1:])]
        assert max(gaps) - min(gaps) <= 1
        assert plan.taus[0] == 1000
        assert plan.taus[-1] >= 1

    def test_spacing_oracle_uneven(self):
        plan = uniform_subsequence(1000, 7)
        expected = tuple((i * 1000) // 7 for i in range(7, 0, -1))
        assert plan.taus == expected
        gaps = [a - b for a, b in zip(plan.taus, plan.taus[1:])]
        assert max(gaps) - min(gaps) <= 1

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            uniform_subsequence(10, 0)
        with pytest.raises(ValueError):
            uniform_subsequence(10, 11)

    def test_transitions_end_at_zero(self):
        plan = uniform_subsequence(100, 4, refine_count=3)
        trans = plan.transitions()
        assert trans[0][0] == 100
        assert trans[-1][1] == 0
        assert plan.total_steps == 12

    def test_plan_validation(self):
        with pytest.raises(ValueError):
            TimestepPlan(())
        with pytest.raises(ValueError):
            TimestepPlan((5, 5))
        with pytest.raises(ValueError):
            TimestepPlan((5, 8))
        with pytest.raises(ValueError):
            TimestepPlan((5, 1), refine_count=0)
        with pytest.raises(ValueError):
            TimestepPlan((0,))


class TestSigma:
    def test_ddim_zero_eta(self, schedule1000):
        assert sigma(schedule1000, SigmaMode.ddim(0.0), 500, 250) == 0.0

    def test_posterior_at_terminal(self, schedule1000):
        assert sigma(schedule1000, SigmaMode.posterior(), 1, 0) == 0.0

    def test_ddim_eta_one_equals_posterior_adjacent(self, schedule1000):
        for t in range(2, schedule1000.t_train + 1):
            post = sigma(schedule1000, SigmaMode.posterior(), t, t - 1)
            ddim = sigma(schedule1000, SigmaMode.ddim(1.0), t, t - 1)
            assert ddim == pytest.approx(post, rel=1e-12)

    def test_ddim_eta_one_equals_sqrt_posterior_var(self, schedule1000):
        for t in range(2, schedule1000.t_train + 1):
            expected = np.sqrt(schedule1000.posterior_vars[t])
            assert sigma(schedule1000, SigmaMode.ddim(1.0), t, t - 1) == pytest.approx(
                expected, rel=1e-12
            )

    def test_beta_mode_adjacent(self, schedule1000):
        got = sigma(schedule1000, SigmaMode.beta(), 10, 9)
        assert got == pytest.approx(np.sqrt(schedule1000.betas[10]), rel=1e-12)

    def test_invalid_pairs(self, schedule1000):
        with pytest.raises(ValueError):
            sigma(schedule1000, SigmaMode.posterior(), 5, 5)
        with pytest.raises(ValueError):
            sigma(schedule1000, SigmaMode.posterior(), 5, 9)
        with pytest.raises(ValueError):
            sigma(schedule1000, SigmaMode.posterior(), 1001, 0)


class TestSigmaMode:
    def test_parse(self):
        assert SigmaMode.parse("posterior") == SigmaMode.posterior()
        assert SigmaMode.parse("beta") == SigmaMode.beta()
        assert SigmaMode.parse("ddim:0.5") == SigmaMode.ddim(0.5)
        assert SigmaMode.parse("ddim") == SigmaMode.ddim(0.0)
        with pytest.raises(ValueError):
            SigmaMode.parse("gamma")
        with pytest.raises(ValueError):
            SigmaMode.parse("ddim:1.5")

    def test_describe_round_trips(self):
        for mode in (SigmaMode.posterior(), SigmaMode.beta(), SigmaMode.ddim(0.25)):
            assert SigmaMode.parse(mode.describe()) == mode

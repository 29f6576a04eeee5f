import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgagan.autodiff import Tensor
from dgagan.losses import (adversarial_losses, discriminator_objective,
                           generator_objective, omega_schedule, plain_l1,
                           region_weights, weighted_l1)


def scalar(v):
    return Tensor(np.asarray(v, dtype=np.float64))


class TestAdversarial:
    def test_zero_logits_no_smoothing(self):
        l_d, l_g = adversarial_losses(scalar(0.0), scalar(0.0), smoothing=1.0)
        assert l_d.item() == pytest.approx(2.0 * np.log(2.0), abs=1e-12)
        assert l_g.item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_perfect_discriminator_limit(self):
        l_d, _ = adversarial_losses(scalar(40.0), scalar(-40.0), smoothing=1.0)
        assert l_d.item() == pytest.approx(0.0, abs=1e-12)

    def test_extreme_logits_stay_finite(self):
        l_d, l_g = adversarial_losses(scalar(-800.0), scalar(900.0))
        assert np.isfinite(l_d.item()) and np.isfinite(l_g.item())

    def test_smoothing_scales_real_term(self):
        full, _ = adversarial_losses(scalar(0.0), scalar(10.0), smoothing=1.0)
        smooth, _ = adversarial_losses(scalar(0.0), scalar(10.0), smoothing=0.9)
        assert smooth.item() == pytest.approx(full.item() - 0.1 * np.log(2.0), rel=1e-9)

    def test_symmetric_logit_minimized_at_zero(self):
        grid = np.linspace(-4.0, 4.0, 401)
        vals = [adversarial_losses(scalar(s), scalar(s), smoothing=1.0)[0].item()
                for s in grid]
        assert grid[int(np.argmin(vals))] == pytest.approx(0.0, abs=1e-9)


class TestRegionWeights:
    def patch_2x2x2(self):
        les = np.zeros((2, 2, 2))
        les.reshape(-1)[:2] = 1
        wm = np.zeros((2, 2, 2))
        wm.reshape(-1)[2:4] = 1
        return les, wm

    def test_worked_example(self):
        les, wm = self.patch_2x2x2()
        rw = region_weights(les, wm)
        assert (rw.m, rw.m_les, rw.m_wm, rw.m_other) == (8, 2, 2, 4)
        w = rw.weights.reshape(-1)
        np.testing.assert_allclose(w[:4], 0.75)
        np.testing.assert_allclose(w[4:], 0.5)

    def test_all_other_degenerate_floored(self):
        rw = region_weights(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))
        np.testing.assert_allclose(rw.weights, 0.05)

    def test_all_lesion_degenerate_floored(self):
        rw = region_weights(np.ones((2, 2, 2)), np.zeros((2, 2, 2)))
        np.testing.assert_allclose(rw.weights, 0.05)

    def test_lesion_precedence_over_wm(self):
        les = np.ones((2, 2, 2))
        les.reshape(-1)[4:] = 0
        wm = np.ones((2, 2, 2))   # overlaps lesion on the first half
        rw = region_weights(les, wm)
        assert rw.m_les == 4 and rw.m_wm == 4 and rw.m_other == 0

    def test_extent_mismatch(self):
        with pytest.raises(ValueError):
            region_weights(np.zeros((2, 2, 2)), np.zeros((2, 2, 4)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 27 - 1), st.integers(0, 2 ** 27 - 1))
    def test_partition_property(self, les_bits, wm_bits):
        les = np.array([(les_bits >> i) & 1 for i in range(27)], float).reshape(3, 3, 3)
        wm = np.array([(wm_bits >> i) & 1 for i in range(27)], float).reshape(3, 3, 3)
        rw = region_weights(les, wm)
        assert rw.m_les + rw.m_wm + rw.m_other == rw.m == 27
        regions = sum(1 for c in (rw.m_les, rw.m_wm, rw.m_other) if c)
        if regions > 1:
            wm_eff = wm.astype(bool) & ~les.astype(bool)
            for idx in np.ndindex(3, 3, 3):
                if les[idx]:
                    count = rw.m_les
                elif wm_eff[idx]:
                    count = rw.m_wm
                else:
                    count = rw.m_other
                assert rw.weights[idx] == 1.0 - count / 27
                assert 0.0 <= rw.weights[idx] <= 1.0


class TestWeightedL1:
    def test_unit_residual_worked_example(self):
        les = np.zeros((2, 2, 2))
        les.reshape(-1)[:2] = 1
        wm = np.zeros((2, 2, 2))
        wm.reshape(-1)[2:4] = 1
        rw = region_weights(les, wm)
        y = Tensor(np.ones((2, 2, 2)))
        g = Tensor(np.zeros((2, 2, 2)))
        assert weighted_l1(y, g, rw).item() == pytest.approx(0.3125, abs=1e-15)

    def test_zero_when_equal(self):
        rng = np.random.default_rng(0)
        vol = rng.normal(size=(2, 2, 2))
        rw = region_weights((vol > 0).astype(float), np.zeros((2, 2, 2)))
        assert weighted_l1(Tensor(vol), Tensor(vol.copy()), rw).item() == 0.0

    def test_homogeneity(self):
        rng = np.random.default_rng(1)
        y = rng.normal(size=(2, 2, 2))
        g = rng.normal(size=(2, 2, 2))
        rw = region_weights((y > 0.5).astype(float), (y < -0.5).astype(float))
        v1 = weighted_l1(Tensor(y), Tensor(g), rw).item()
        v2 = weighted_l1(Tensor(2 * y - g), Tensor(y), rw).item()
        assert v2 == pytest.approx(v1, rel=1e-12)

    def test_gradient_direction(self):
        rng = np.random.default_rng(2)
        y = rng.normal(size=(2, 2, 2))
        g = Tensor(rng.normal(size=(2, 2, 2)), requires_grad=True)
        rw = region_weights((y > 0).astype(float), np.zeros((2, 2, 2)))
        weighted_l1(Tensor(y), g, rw).backward()
        expected = -(rw.weights / (2 * rw.m)) * np.sign(y - g.data)
        np.testing.assert_allclose(g.grad, expected, atol=1e-15)


class TestOmegaSchedule:
    def test_schedule_thirds_breakpoints(self):
        vals = [omega_schedule(e, 300) for e in (0, 99, 200, 300)]
        assert vals == [0.0, 0.0, 10.0, 10.0]

    def test_midpoint_of_ramp(self):
        assert omega_schedule(150, 300) == pytest.approx(5.0)

    def test_desk_scale_proportional(self):
        assert omega_schedule(15, 30) == pytest.approx(5.0)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            omega_schedule(31, 30)

    @given(st.integers(1, 500), st.floats(0, 1))
    @settings(max_examples=50, deadline=None)
    def test_monotone_and_bounded(self, total, frac):
        e = frac * total
        w = omega_schedule(e, total)
        assert 0.0 <= w <= 10.0
        if e + 1 <= total:
            assert omega_schedule(e + 1, total) >= w


class TestObjectives:
    def test_lambda_zero_is_pure_adversarial(self):
        adv = scalar(0.7)
        obj = generator_objective(adv, scalar(123.0), 0.0)
        assert obj.item() == pytest.approx(0.7)

    def test_large_lambda_arithmetic(self):
        obj = generator_objective(scalar(0.7), scalar(0.001), 1800.0)
        assert obj.item() == pytest.approx(2.5)

    def test_omega_off_matches_cgan_discriminator_loss(self):
        l_d = scalar(1.234)
        assert discriminator_objective(l_d, scalar(0.5), 0.0).item() == pytest.approx(1.234)
        assert discriminator_objective(l_d, None, 5.0).item() == pytest.approx(1.234)

    def test_omega_on_adds_weighted_term(self):
        val = discriminator_objective(scalar(1.0), scalar(0.25), 4.0).item()
        assert val == pytest.approx(2.0)

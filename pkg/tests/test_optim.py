"""AdamW update rule and the cosine schedule."""

import numpy as np
import pytest

from vxs.errors import ArgumentError, NumericError
from vxs.nn import ParamStore
from vxs.optim import OptimizerConfig, adamw_step, cosine_lr


def flat_cfg(lr, wd=0.0, eps=1e-8):
    return OptimizerConfig(learning_rate_max=lr, learning_rate_min=lr, total_steps=10,
                           weight_decay=wd, epsilon=eps)


def store_with(theta):
    ps = ParamStore()
    ps.add("w", np.asarray(theta, dtype=np.float64))
    return ps


class TestCosineLr:
    def test_endpoints_and_midpoint(self):
        cfg = OptimizerConfig(learning_rate_max=1e-3, learning_rate_min=1e-5, total_steps=100)
        assert cosine_lr(0, cfg) == pytest.approx(1e-3)
        assert cosine_lr(100, cfg) == pytest.approx(1e-5)
        assert cosine_lr(50, cfg) == pytest.approx((1e-3 + 1e-5) / 2)

    def test_monotone_non_increasing(self):
        cfg = OptimizerConfig(learning_rate_max=1.0, learning_rate_min=0.1, total_steps=37)
        vals = [cosine_lr(s, cfg) for s in range(38)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        cfg = OptimizerConfig(total_steps=10)
        with pytest.raises(ArgumentError):
            cosine_lr(11, cfg)
        with pytest.raises(ArgumentError):
            cosine_lr(-1, cfg)

    def test_config_invariants(self):
        with pytest.raises(ArgumentError):
            OptimizerConfig(learning_rate_max=1e-5, learning_rate_min=1e-3)
        with pytest.raises(ArgumentError):
            OptimizerConfig(betas=(1.0, 0.9))
        with pytest.raises(ArgumentError):
            OptimizerConfig(total_steps=0)


class TestAdamW:
    def test_zero_gradient_zero_decay_not_moving(self):
        ps = store_with([1.0, -2.0, 3.0])
        before = ps["w"].copy()
        adamw_step(ps, {"w": np.zeros(3)}, flat_cfg(0.1), step=1)
        assert np.array_equal(ps["w"], before)

    def test_zero_gradient_decay_scales(self):
        ps = store_with([1.0, -2.0, 3.0])
        before = ps["w"].copy()
        adamw_step(ps, {"w": np.zeros(3)}, flat_cfg(0.1, wd=0.01), step=1)
        assert np.allclose(ps["w"], before * (1 - 0.001), rtol=1e-12)

    def test_first_step_is_signed_update(self):
        ps = store_with([0.0, 0.0, 0.0])
        g = np.array([0.5, -2.0, 1e-3])
        adamw_step(ps, {"w": g.copy()}, flat_cfg(0.1, eps=1e-15), step=1)
        assert np.allclose(ps["w"], -0.1 * np.sign(g), rtol=1e-6)

    def test_scale_invariant_direction_at_step_one(self):
        g = np.array([0.3, -0.7, 2.0])
        ps1, ps2 = store_with(np.zeros(3)), store_with(np.zeros(3))
        adamw_step(ps1, {"w": g.copy()}, flat_cfg(0.05, eps=1e-15), step=1)
        adamw_step(ps2, {"w": 10.0 * g}, flat_cfg(0.05, eps=1e-15), step=1)
        assert np.allclose(ps1["w"], ps2["w"], rtol=1e-8)

    def test_non_finite_gradient_names_parameter(self):
        ps = store_with([1.0])
        with pytest.raises(NumericError, match="'w'"):
            adamw_step(ps, {"w": np.array([np.nan])}, flat_cfg(0.1), step=1)

    def test_matches_reference_two_steps(self):
        # straight transcription of the update rule as an oracle
        theta = np.array([1.0, -0.5])
        m = np.zeros(2)
        v = np.zeros(2)
        lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.1
        ps = store_with(theta.copy())
        cfg = OptimizerConfig(learning_rate_max=lr, learning_rate_min=lr, total_steps=10,
                              betas=(b1, b2), epsilon=eps, weight_decay=wd)
        for step, g in ((1, np.array([0.2, -0.4])), (2, np.array([-0.1, 0.3]))):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh = m / (1 - b1 ** step)
            vh = v / (1 - b2 ** step)
            theta = theta - lr * mh / (np.sqrt(vh) + eps)
            theta = theta - lr * wd * theta
            adamw_step(ps, {"w": g.copy()}, cfg, step=step)
            assert np.allclose(ps["w"], theta, rtol=1e-12)

    def test_cosine_schedule_applied(self):
        cfg = OptimizerConfig(learning_rate_max=0.2, learning_rate_min=0.0001, total_steps=2,
                              weight_decay=0.0, epsilon=1e-15)
        g = np.array([1.0])
        ps = store_with([0.0])
        adamw_step(ps, {"w": g.copy()}, cfg, step=1)
        # at step 1 of 2 the cosine sits at the midpoint of the band
        lr1 = 0.0001 + 0.5 * (0.2 - 0.0001)
        assert ps["w"][0] == pytest.approx(-lr1, rel=1e-6)

    def test_step_must_be_positive(self):
        ps = store_with([1.0])
        with pytest.raises(ArgumentError):
            adamw_step(ps, {"w": np.zeros(1)}, flat_cfg(0.1), step=0)

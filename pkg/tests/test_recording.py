"""Recording-factor losses, closed-form factor and calibration."""

import numpy as np
import pytest

from voxlevel import autodiff as ad
from voxlevel.estimator import EstimatorModel
from voxlevel.recording import (
    DegenerateContourError,
    FactorTable,
    UnknownGroupError,
    adaptive_factor,
    calibrate,
    learned_factor_loss,
    scalar_product_loss,
    squared_error,
)


def _positive(rng, n=12):
    return rng.uniform(0.05, 3.0, n)


class TestLearnedFactorLoss:
    def test_exact_fit(self):
        p = np.array([0.3, 1.2, 2.0])
        assert learned_factor_loss(p, p, 0.0).item() == 0.0

    def test_factor_absorbs_scale(self):
        assert learned_factor_loss([2.0, 2.0], [1.0, 1.0], np.log(2.0)).item() == pytest.approx(0.0, abs=1e-24)

    def test_hand_value(self):
        assert learned_factor_loss([1.0, 2.0], [1.0, 1.0], 0.0).item() == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="shapes differ"):
            learned_factor_loss([1.0, 2.0, 3.0], [1.0, 1.0], 0.0)

    def test_batched_rows(self):
        p = np.array([[1.0, 2.0], [2.0, 2.0]])
        q = np.ones((2, 2))
        out = learned_factor_loss(p, q, np.array([0.0, np.log(2.0)])).data
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-24)

    def test_gradient_reaches_log_factor_and_q(self):
        log_a = ad.Parameter(np.array(0.2), "log_a")
        q = ad.Parameter(np.array([1.0, 0.5]), "q")
        with ad.Tape():
            loss = learned_factor_loss([1.0, 2.0], q, log_a)
        ad.backward(loss)
        a = np.exp(0.2)
        r = np.array([1.0, 2.0]) - a * q.data
        np.testing.assert_allclose(log_a.grad, -2 * a * np.dot(r, q.data))
        np.testing.assert_allclose(q.grad, -2 * a * r)


class TestAdaptiveFactor:
    def test_double(self):
        assert adaptive_factor([2.0, 4.0], [1.0, 2.0]) == 2.0

    def test_identity(self):
        p = np.array([0.2, 0.7, 1.3])
        assert adaptive_factor(p, p) == pytest.approx(1.0, rel=1e-15)

    def test_grid_search(self):
        a_hat = adaptive_factor([3.0, 0.0], [1.0, 1.0])
        assert a_hat == 1.5
        grid = np.arange(0.0, 3.0 + 5e-5, 1e-4)
        e = squared_error(np.tile([3.0, 0.0], (grid.size, 1)), np.ones((grid.size, 2)), grid)
        assert abs(grid[np.argmin(e)] - a_hat) <= 1e-4

    def test_zero_q_rejected(self):
        with pytest.raises(DegenerateContourError):
            adaptive_factor([1.0, 1.0], [0.0, 0.0])

    def test_positive_for_positive_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            assert adaptive_factor(_positive(rng), _positive(rng)) > 0

    def test_optimal_against_fine_grid(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            p, q = _positive(rng), _positive(rng)
            a_hat = adaptive_factor(p, q)
            grid = np.linspace(0.0, 3 * a_hat, 3001)
            e_grid = np.sum((p[None] - grid[:, None] * q[None]) ** 2, axis=1)
            assert squared_error(p, q, a_hat) <= e_grid.min() + 1e-9

    def test_batched(self):
        p = np.array([[2.0, 4.0], [3.0, 3.0]])
        q = np.array([[1.0, 2.0], [1.0, 1.0]])
        np.testing.assert_allclose(adaptive_factor(p, q), [2.0, 3.0])


class TestScalarProductLoss:
    def test_parallel(self):
        assert scalar_product_loss([1.0, 2.0], [2.0, 4.0]).item() == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal(self):
        assert scalar_product_loss([1.0, 0.0], [0.0, 1.0]).item() == 1.0

    def test_hand_value_and_identity(self):
        p, q = np.array([3.0, 4.0]), np.array([1.0, 0.0])
        e_scp = scalar_product_loss(p, q).item()
        np.testing.assert_allclose(e_scp, 0.64, rtol=1e-12)
        e_hat = squared_error(p, q, adaptive_factor(p, q))
        np.testing.assert_allclose(e_scp * np.dot(p, p), e_hat, atol=1e-9)

    def test_identity_random(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            p, q = _positive(rng), _positive(rng)
            e_hat = squared_error(p, q, adaptive_factor(p, q))
            assert abs(scalar_product_loss(p, q).item() * np.dot(p, p) - e_hat) <= 1e-9

    @pytest.mark.parametrize("c", [1e-3, 1.0, 1e3])
    def test_scale_invariance(self, c):
        rng = np.random.default_rng(3)
        p, q = _positive(rng), _positive(rng)
        base = scalar_product_loss(p, q).item()
        assert abs(scalar_product_loss(p, c * q).item() - base) <= 1e-10
        assert abs(scalar_product_loss(c * p, q).item() - base) <= 1e-10

    def test_range(self):
        rng = np.random.default_rng(4)
        vals = [scalar_product_loss(rng.standard_normal(6), rng.standard_normal(6)).item() for _ in range(200)]
        assert min(vals) >= 0.0 and max(vals) <= 1.0

    @pytest.mark.parametrize("p,q", [([0.0, 0.0], [1.0, 2.0]), ([1.0, 2.0], [0.0, 0.0])])
    def test_zero_norm_rejected(self, p, q):
        with pytest.raises(DegenerateContourError):
            scalar_product_loss(p, q)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            scalar_product_loss([1.0, 2.0], [1.0, 2.0, 3.0])


class TestFactorTable:
    def test_log_parameterisation_keeps_positive(self):
        table = FactorTable(["a"])
        table.set_log("a", -50.0)
        assert table.factor("a") > 0

    def test_unknown_group_lists_known(self):
        table = FactorTable(["s00", "s01"])
        with pytest.raises(UnknownGroupError, match=r"s02.*\['s00', 's01'\]"):
            table.param("s02")


class TestCalibrate:
    def _model(self, variant):
        return EstimatorModel(seed=3, variant=variant)

    def test_ad_with_scaled_power(self):
        model = self._model("ad")
        mel = np.random.default_rng(5).standard_normal((20, 80))
        q = model.predict(mel)
        out, factor = calibrate(model, mel, p=2.0 * q)
        np.testing.assert_allclose(factor, 2.0, rtol=1e-12)
        np.testing.assert_allclose(out, 2.0 * q, rtol=1e-12)

    def test_ad_needs_power(self):
        with pytest.raises(ValueError, match="power contour"):
            calibrate(self._model("ad"), np.zeros((8, 80)))

    def test_le_unit_factor_is_identity(self):
        model = self._model("le")
        model.factors.add("g1", 0.0)
        mel = np.random.default_rng(6).standard_normal((10, 80))
        out, factor = calibrate(model, mel, group="g1")
        assert factor == 1.0
        np.testing.assert_array_equal(out, model.predict(mel))

    def test_le_unknown_group(self):
        model = self._model("le")
        model.factors.add("g1", 0.0)
        with pytest.raises(UnknownGroupError, match="g1"):
            calibrate(model, np.zeros((8, 80)), group="nope")

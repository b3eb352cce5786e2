import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treecarbon.allometry import (POOLED, AllometricModel, estimate_height,
                                  fit_all_species, fit_allometry,
                                  load_allometry, save_allometry)
from treecarbon.errors import (CalibrationError, DeserializationError,
                               InsufficientDataError, ParameterError,
                               SingularFitError)


def oracle_fit(d, h):
    """Independent least squares: SVD-based polyfit, our fit uses the
    covariance closed form, so agreement is a genuine cross-check."""
    slope, intercept = np.polyfit(np.asarray(d, float), np.asarray(h, float), 1)
    return float(slope), float(intercept)


def sse(d, h, slope, intercept):
    r = np.asarray(h) - (slope * np.asarray(d) + intercept)
    return float(np.sum(r * r))


class TestFitAllometry:
    def test_exact_line(self):
        model = fit_allometry([(2, 4), (4, 8), (6, 12)], species=0)
        assert model.slope == pytest.approx(2.0)
        assert model.intercept == pytest.approx(0.0, abs=1e-12)
        assert model.r2 == pytest.approx(1.0)
        assert model.n == 3
        assert model.d_range == (2.0, 6.0)

    def test_line_through_two_points(self):
        model = fit_allometry([(1, 3), (2, 5)], species=1)
        assert model.slope == pytest.approx(2.0)
        assert model.intercept == pytest.approx(1.0)

    def test_identical_diameters_singular(self):
        with pytest.raises(SingularFitError):
            fit_allometry([(2, 4), (2, 6)], species=0)

    def test_single_pair_insufficient(self):
        with pytest.raises(InsufficientDataError):
            fit_allometry([(2, 4)], species=0)

    def test_nonpositive_diameter_rejected(self):
        with pytest.raises(ParameterError):
            fit_allometry([(0.0, 4), (2, 6)], species=0)

    def test_constant_height_r2_one(self):
        model = fit_allometry([(1, 5), (2, 5), (3, 5)], species=0)
        assert model.slope == pytest.approx(0.0, abs=1e-12)
        assert model.r2 == 1.0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_independent_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 101))
        d = rng.uniform(0.5, 20, n)
        if len(np.unique(d)) < 2:
            d[0] += 1.0
        h = rng.uniform(0, 2, 1)[0] * d + rng.normal(5, 3) \
            + rng.normal(0, 1.5, n)
        h = np.maximum(h, 0)
        model = fit_allometry(list(zip(d, h)), species=0)
        o_slope, o_intercept = oracle_fit(d, h)
        assert model.slope == pytest.approx(o_slope, rel=1e-9, abs=1e-9)
        assert model.intercept == pytest.approx(o_intercept, rel=1e-9, abs=1e-9)
        # optimality: no perturbed line does better
        best = sse(d, h, model.slope, model.intercept)
        for ds in (-1e-3, 1e-3):
            for di in (-1e-3, 0, 1e-3):
                assert best <= sse(d, h, model.slope + ds,
                                   model.intercept + di) + 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_residual_orthogonality(self, seed):
        rng = np.random.default_rng(100 + seed)
        d = rng.uniform(1, 15, 40)
        h = 1.3 * d + 2 + rng.normal(0, 2, 40)
        h = np.maximum(h, 0)
        model = fit_allometry(list(zip(d, h)), species=0)
        residuals = h - (model.slope * d + model.intercept)
        scale = max(1.0, float(np.abs(h).sum()))
        assert abs(residuals.sum()) / scale < 1e-9
        assert abs((residuals * d).sum()) / max(1.0, float(np.abs(d * h).sum())) < 1e-9


class TestEstimateHeight:
    def model(self, slope, intercept, d_range=(1.0, 10.0)):
        return AllometricModel(0, slope, intercept, 10, 0.9, d_range)

    def test_affine(self):
        est = estimate_height(self.model(2.0, 0.0), 5.0)
        assert est.height_m == 10.0
        assert not est.extrapolated and not est.clamped

    def test_clamp_at_floor(self):
        est = estimate_height(self.model(-1.0, 1.0), 5.0)
        assert est.height_m == 0.0
        assert est.clamped

    def test_extrapolation_flagged(self):
        est = estimate_height(self.model(2.0, 1.0), 50.0)
        assert est.height_m == pytest.approx(101.0)
        assert est.extrapolated

    def test_nonpositive_diameter(self):
        with pytest.raises(ParameterError):
            estimate_height(self.model(2.0, 0.0), 0.0)

    @given(st.floats(0.1, 50), st.floats(-5, 5), st.floats(0, 10))
    @settings(max_examples=50, deadline=None)
    def test_affine_above_clamp(self, d, slope, intercept):
        model = self.model(slope, intercept)
        est = estimate_height(model, d)
        raw = slope * d + intercept
        assert est.height_m == (raw if raw >= 0 else 0.0)


class TestFitAllSpecies:
    def test_two_exact_species(self):
        samples = [(d, 2.0 * d, 0) for d in range(1, 25)]
        samples += [(d, 1.5 * d + 3.0, 1) for d in range(1, 25)]
        fit = fit_all_species(samples, n_min=20)
        assert fit.models[0].slope == pytest.approx(2.0)
        assert fit.models[0].r2 == pytest.approx(1.0)
        assert fit.models[1].slope == pytest.approx(1.5)
        assert fit.models[1].intercept == pytest.approx(3.0)

    def test_below_n_min_uses_fallback(self):
        samples = [(d, 2.0 * d, 0) for d in range(1, 25)]
        samples += [(3.0, 7.0, 1), (5.0, 11.0, 1)]  # species 1 undersampled
        fit = fit_all_species(samples, n_min=20)
        assert 1 not in fit.models
        model, used_fallback = fit.model_for(1)
        assert used_fallback and model.species == POOLED

    def test_empty_input(self):
        with pytest.raises(CalibrationError):
            fit_all_species([], n_min=5)

    def test_unclassified_feeds_pooled_only(self):
        samples = [(d, 2.0 * d, None) for d in range(1, 30)]
        fit = fit_all_species(samples, n_min=5)
        assert fit.models == {}
        assert fit.fallback is not None
        assert fit.fallback.slope == pytest.approx(2.0)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        samples = [(d, 2.0 * d + 1, 0) for d in range(1, 30)]
        samples += [(d, 1.1 * d + 4, 1) for d in range(1, 30)]
        fit = fit_all_species(samples, n_min=10)
        path = tmp_path / "allometry.json"
        save_allometry(fit, path)
        back = load_allometry(path)
        assert back.models.keys() == fit.models.keys()
        for s in fit.models:
            assert back.models[s] == fit.models[s]
        assert back.fallback == fit.fallback

    def test_bad_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(DeserializationError):
            load_allometry(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "v9.json"
        path.write_text('{"format": "treecarbon-allometry", "version": 9}',
                        encoding="utf-8")
        with pytest.raises(DeserializationError):
            load_allometry(path)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bubbledetect import detectors as D
from bubbledetect import pricing as P
from bubbledetect.errors import (ConstructionError, InapplicableError, IndeterminateError,
                                 RecoveryFailedError)
from bubbledetect.model_zoo import DisplacedCev, is_strict_local_martingale, local_vol
from bubbledetect.surfaces import PriceSurface, SurfaceGrid

TAIL_GRID = SurfaceGrid(np.linspace(1, 2, 100), np.linspace(1, 10, 51))
SMALL_K_GRID = SurfaceGrid(np.linspace(1, 2, 5),
                           np.concatenate([[0.01, 0.02], np.linspace(0.5, 10, 20)]))


def atm_scaled(beta, d, x0=2.0, atm_vol=0.4):
    """CEV spec whose local vol at the spot equals ``atm_vol``."""
    return DisplacedCev(atm_vol * x0 / (x0 + d) ** beta, beta, d, x0)


def synthetic(grid, fn, alpha=1.0, x0=2.0):
    t, k = np.meshgrid(grid.maturities, grid.strikes, indexing="ij")
    return PriceSurface(grid, alpha, x0, fn(t, k))


class TestStencils:
    def test_polynomial_exactness(self):
        grid = SurfaceGrid.uniform(1, 2, 7, 0.5, 3.0, 9)
        surf = synthetic(grid, lambda t, k: 0.3 * t + 0.7 * k ** 2)
        d_t, d_kk = D.surface_derivatives(surf)
        np.testing.assert_allclose(d_t, 0.3, atol=1e-12)
        np.testing.assert_allclose(d_kk, 1.4, atol=1e-9)

    def test_nonuniform_cubic_in_strike(self):
        k = np.array([0.5, 0.6, 0.9, 1.4, 2.0, 2.1, 3.0])
        f = k ** 3 - 2 * k
        # the interior three-point stencil is only first order on a nonuniform
        # grid; the edges use four points and are exact for cubics
        d_kk = D.second_difference(f, k)
        assert d_kk[0] == pytest.approx(6 * k[0], abs=1e-9)
        assert d_kk[-1] == pytest.approx(6 * k[-1], abs=1e-9)

    def test_flat_surface(self):
        grid = SurfaceGrid.uniform(1, 2, 5, 1, 3, 5)
        d_t, d_kk = D.surface_derivatives(synthetic(grid, lambda t, k: 0 * t + 1.5))
        assert np.all(np.abs(d_t) < 1e-12) and np.all(np.abs(d_kk) < 1e-12)

    def test_grid_too_small(self):
        grid = SurfaceGrid.uniform(1, 2, 2, 1, 3, 5)
        with pytest.raises(ConstructionError):
            D.surface_derivatives(synthetic(grid, lambda t, k: t + k))

    def test_cev_theta_nonnegative(self):
        surf = P.price_surface(DisplacedCev(0.2, 1.5, 0.1, 2.0), TAIL_GRID, 1.0)
        d_t, _ = D.surface_derivatives(surf)
        assert d_t.min() >= -1e-8


class TestRecovery:
    def test_gbm_node(self):
        grid = SurfaceGrid(np.linspace(1, 2, 100), np.linspace(0.5, 5.5, 51))
        est = D.recover_local_vol(P.price_surface(DisplacedCev(0.2, 1.0, 0.0, 2.0), grid, 1.0))
        i = np.argmin(np.abs(est.maturities - 1.5))
        j = np.argmin(np.abs(est.strikes - 2.0))
        assert est.strikes[j] == pytest.approx(2.0)
        assert est.vol[i, j] == pytest.approx(0.4, rel=0.01)

    def test_cev_interior(self):
        spec = DisplacedCev(0.2, 1.2, 0.1, 2.0)
        est = D.recover_local_vol(P.price_surface(spec, TAIL_GRID, 1.0))
        truth = local_vol(spec, 0.0, est.strikes)[None, :]
        assert est.masked_fraction == 0.0
        assert np.max(np.abs(est.vol / truth - 1)) < 0.01

    def test_price_method_agrees_in_the_body(self):
        spec = DisplacedCev(0.4, 1.0, 0.0, 2.0)
        grid = SurfaceGrid(np.linspace(1, 2, 100), np.linspace(1.5, 3.0, 61))
        est = D.recover_local_vol(P.price_surface(spec, grid, 1.0), method="price")
        truth = local_vol(spec, 0.0, est.strikes)[None, :]
        assert np.nanmax(np.abs(est.vol / truth - 1)) < 0.01

    def test_no_theta_fails(self):
        grid = SurfaceGrid.uniform(1, 2, 6, 1, 3, 6)
        with pytest.raises(RecoveryFailedError):
            D.recover_local_vol(synthetic(grid, lambda t, k: 0 * t + (3 - k) ** 2 / 4),
                                method="price")

    def test_needs_full_collateral(self):
        surf = P.price_surface(DisplacedCev(0.2, 1.0, 0.0, 2.0), TAIL_GRID, 0.5)
        with pytest.raises(InapplicableError):
            D.recover_local_vol(surf)

    def test_unknown_method(self):
        surf = P.price_surface(DisplacedCev(0.2, 1.0, 0.0, 2.0), TAIL_GRID, 1.0)
        with pytest.raises(ConstructionError):
            D.recover_local_vol(surf, method="spline")

    @pytest.mark.parametrize("beta,d", [(0.8, 0.0), (1.5, 0.2)])
    def test_maturity_refinement(self, beta, d):
        spec = atm_scaled(beta, d)
        coarse = SurfaceGrid(np.linspace(1, 2, 51), TAIL_GRID.strikes)
        fine = SurfaceGrid(np.linspace(1, 2, 101), TAIL_GRID.strikes)
        a = D.recover_local_vol(P.price_surface(spec, coarse, 1.0))
        b = D.recover_local_vol(P.price_surface(spec, fine, 1.0))
        # every coarse interior maturity is also a fine node
        rows = np.searchsorted(b.maturities, a.maturities - 1e-12)
        np.testing.assert_allclose(b.maturities[rows], a.maturities)
        assert np.max(np.abs(b.vol[rows] / a.vol - 1)) < 0.005


class TestTail:
    @pytest.mark.parametrize("beta,expected", [(1.3, D.BUBBLE), (0.8, D.NO_BUBBLE)])
    def test_examples(self, beta, expected):
        grid = SurfaceGrid(np.linspace(1, 2, 50), np.linspace(1, 20, 51))
        surf = P.price_surface(atm_scaled(beta, 0.0), grid, 1.0)
        assert D.tail_divergence_detect(surf).verdict == expected

    def test_capped_strikes(self):
        grid = SurfaceGrid(np.linspace(1, 2, 20), np.linspace(1, 2.4, 21))
        surf = P.price_surface(atm_scaled(1.3, 0.0), grid, 1.0)
        verdict = D.tail_divergence_detect(surf)
        assert verdict.verdict == D.INDETERMINATE
        assert "reason" in verdict.details

    def test_verdict_serializes(self):
        surf = P.price_surface(atm_scaled(1.5, 0.0), TAIL_GRID, 1.0)
        out = D.tail_divergence_detect(surf).to_dict()
        assert out["detector"] == "tail" and out["verdict"] == D.BUBBLE

    @settings(max_examples=10)
    @given(st.sampled_from([0.6, 0.7, 0.8, 0.9, 1.1, 1.2, 1.5, 2.0, 2.5]),
           st.sampled_from([0.0, 0.2]))
    def test_round_trip_matches_truth(self, beta, d):
        spec = atm_scaled(beta, d)
        verdict = D.tail_divergence_detect(P.price_surface(spec, TAIL_GRID, 1.0)).verdict
        assert verdict == (D.BUBBLE if is_strict_local_martingale(spec) else D.NO_BUBBLE)


class TestLocalMax:
    def test_peak_row_detected(self):
        grid = SurfaceGrid.uniform(1, 2, 5, 1, 3, 4)
        vol = np.ones((5, 4))
        vol[2] = 2.0
        est = D.LocalVolEstimate(grid.maturities, grid.strikes, vol, np.zeros_like(vol, bool))
        assert D.local_max_maturities(est) == [1.5]

    def test_partial_peak_ignored(self):
        grid = SurfaceGrid.uniform(1, 2, 5, 1, 3, 4)
        vol = np.ones((5, 4))
        vol[2, :3] = 2.0
        est = D.LocalVolEstimate(grid.maturities, grid.strikes, vol, np.zeros_like(vol, bool))
        assert D.local_max_maturities(est) == []


class TestSmallStrike:
    def test_martingale(self):
        surf = P.price_surface(DisplacedCev(0.2, 0.8, 0.0, 2.0), SMALL_K_GRID, 0.5)
        verdict = D.small_strike_detect(surf)
        assert verdict.verdict == D.NO_BUBBLE
        assert verdict.details["limit"] == pytest.approx(2.0, abs=1e-6)

    def test_bubble_limit(self):
        spec = DisplacedCev(0.5, 1.5, 0.0, 2.0)
        m2 = float(P.martingale_defect(spec, 2.0))
        verdict = D.small_strike_detect(P.price_surface(spec, SMALL_K_GRID, 0.5))
        assert verdict.verdict == D.BUBBLE
        assert verdict.details["limit"] == pytest.approx(2.0 - 0.5 * m2, rel=1e-6)

    def test_full_collateral_inapplicable(self):
        with pytest.raises(InapplicableError):
            D.small_strike_detect(P.price_surface(DisplacedCev(0.2, 1.5, 0.0, 2.0),
                                                  SMALL_K_GRID, 1.0))

    def test_strikes_too_high(self):
        surf = P.price_surface(DisplacedCev(0.2, 1.5, 0.0, 2.0), TAIL_GRID, 0.5)
        with pytest.raises(IndeterminateError):
            D.small_strike_detect(surf)

    @settings(max_examples=15)
    @given(st.floats(0.0, 0.95))
    def test_gap_scales_with_alpha(self, alpha):
        spec = DisplacedCev(0.3, 2.0, 0.2, 2.0)
        m2 = float(P.martingale_defect(spec, 2.0))
        gap = D.small_strike_detect(P.price_surface(spec, SMALL_K_GRID, alpha)).details["gap"]
        assert gap == pytest.approx((1 - alpha) * m2, rel=1e-4)

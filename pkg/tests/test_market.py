import numpy as np
import pytest

from bubbledetect import market, mlp
from bubbledetect import pricing as P
from bubbledetect.errors import ConstructionError, CoverageError, FormatError, WidthMismatchError
from bubbledetect.model_zoo import DisplacedCev
from bubbledetect.surfaces import SurfaceGrid

UNIT_GRID = SurfaceGrid(np.linspace(0.25, 1.0, 4), np.linspace(0.8, 1.6, 5))


def unit_surface(beta=1.3):
    return P.price_surface(DisplacedCev(0.3, beta, 0.0, 1.0), UNIT_GRID, 1.0)


class TestChain:
    def test_validation(self):
        with pytest.raises(FormatError):
            market.Chain([1.0], [1.0, 2.0], [0.1])
        with pytest.raises(FormatError):
            market.Chain([0.0], [1.0], [0.1])
        with pytest.raises(FormatError):
            market.Chain([1.0], [1.0], [-0.1])

    def test_duplicates_averaged(self):
        chain = market.Chain([1, 1, 1], [2.0, 2.0, 3.0], [0.4, 0.6, 0.1])
        k, p = chain.slices()[1.0]
        np.testing.assert_array_equal(k, [2.0, 3.0])
        np.testing.assert_allclose(p, [0.5, 0.1])

    def test_csv_round_trip(self, tmp_path):
        chain = market.chain_from_surface(unit_surface(), spot=120.0)
        path = tmp_path / "chain.csv"
        market.write_chain(path, chain)
        back = market.read_chain(path)
        np.testing.assert_array_equal(back.prices, chain.prices)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "chain.csv"
        path.write_text("1.0,100,5\n")
        with pytest.raises(FormatError, match="header"):
            market.read_chain(path)

    def test_bad_field(self, tmp_path):
        path = tmp_path / "chain.csv"
        path.write_text("maturity_years,strike,mid_price\n1.0,abc,5\n")
        with pytest.raises(FormatError, match="line 2"):
            market.read_chain(path)

    def test_empty(self, tmp_path):
        path = tmp_path / "chain.csv"
        path.write_text("maturity_years,strike,mid_price\n")
        with pytest.raises(FormatError):
            market.read_chain(path)


class TestInterpolation:
    def test_on_grid_passthrough(self):
        surf = unit_surface()
        spot = 250.0
        grid = SurfaceGrid(UNIT_GRID.maturities, UNIT_GRID.strikes * spot)
        quotes = market.interpolate_to_grid(market.chain_from_surface(surf, spot), grid, spot)
        assert quotes.coverage == 1.0 and quotes.filled == []
        np.testing.assert_allclose(quotes.surface.prices, surf.prices, rtol=1e-13)
        assert quotes.surface.x0 == 1.0 and quotes.surface.source == "ingested"

    def test_interpolates_between_strikes_and_maturities(self):
        fine = SurfaceGrid(np.linspace(0.25, 1.0, 7), np.linspace(0.8, 1.6, 9))
        surf = P.price_surface(DisplacedCev(0.3, 1.0, 0.0, 1.0), fine, 1.0)
        chain = market.chain_from_surface(surf)
        keep = ~np.isclose(chain.maturities, fine.maturities[3]) & \
            ~np.isclose(chain.strikes, fine.strikes[4])
        chain = market.Chain(chain.maturities[keep], chain.strikes[keep], chain.prices[keep])
        quotes = market.interpolate_to_grid(chain, fine, 1.0)
        assert quotes.coverage == 1.0
        np.testing.assert_allclose(quotes.surface.prices, surf.prices, atol=2e-3)

    def test_single_maturity_is_a_coverage_error(self):
        chain = market.Chain([0.5] * 5, UNIT_GRID.strikes, [0.3, 0.2, 0.1, 0.05, 0.02])
        with pytest.raises(CoverageError) as info:
            market.interpolate_to_grid(chain, UNIT_GRID, 1.0)
        # the quoted maturity is a grid row, every other row is missing
        assert len(info.value.missing) == UNIT_GRID.size - 5

    def test_partial_coverage_is_filled(self):
        grid = SurfaceGrid(np.linspace(0.25, 1.0, 4), np.linspace(0.8, 1.6, 9))
        surf = P.price_surface(DisplacedCev(0.3, 1.0, 0.0, 1.0), grid, 1.0)
        chain = market.chain_from_surface(surf)
        drop = np.isclose(chain.strikes, 1.6) & np.isclose(chain.maturities, 0.25)
        chain = market.Chain(chain.maturities[~drop], chain.strikes[~drop], chain.prices[~drop])
        quotes = market.interpolate_to_grid(chain, grid, 1.0)
        assert quotes.filled == [(0.25, 1.6)]
        assert quotes.surface.prices[0, -1] == surf.prices[1, -1]

    def test_bad_spot(self):
        with pytest.raises(ConstructionError):
            market.interpolate_to_grid(market.chain_from_surface(unit_surface()), UNIT_GRID, 0.0)


class TestInference:
    def test_infer_shape_and_scaling(self):
        model = mlp.init((UNIT_GRID.size, 4, 4), seed=0)
        spot = 50.0
        grid = SurfaceGrid(UNIT_GRID.maturities, UNIT_GRID.strikes * spot)
        out = market.infer(model, market.chain_from_surface(unit_surface(), spot), grid, spot)
        assert 0.0 <= out["p_b"] <= 1.0
        assert out["label"] in ("bubble", "no_bubble")
        direct = mlp.predict(model, unit_surface().prices.reshape(1, -1))
        assert out["p_b"] == pytest.approx(float(direct[0][0]), rel=1e-12)
        assert out["defect_estimate"] == pytest.approx(float(direct[1][0]) * spot, rel=1e-12)

    def test_width_mismatch(self):
        model = mlp.init((3, 4, 4))
        with pytest.raises(WidthMismatchError):
            market.infer(model, market.chain_from_surface(unit_surface()), UNIT_GRID, 1.0)

    def test_train_on_the_fly_size(self):
        with pytest.raises(ConstructionError):
            market.train_on_the_fly(UNIT_GRID, n_train=6)

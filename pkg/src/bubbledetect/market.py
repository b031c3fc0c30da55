"""Option-chain ingestion and bubble inference on market quotes.

A chain is a CSV of ``maturity_years,strike,mid_price`` rows.  Everything is
expressed in units of the spot before it meets a network: strikes and
prices are divided by the spot, so networks trained on unit-spot models
apply to any underlying.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import datasets as ds
from . import mlp
from .errors import ConstructionError, CoverageError, FormatError
from .model_zoo import market_cev_protocol, market_sabr_protocol
from .monte_carlo import McConfig
from .surfaces import PriceSurface, SurfaceGrid

CHAIN_COLUMNS = ("maturity_years", "strike", "mid_price")
MIN_COVERAGE = 0.9
ON_THE_FLY_MC = McConfig(n_paths=20000, dt=0.02)
ON_THE_FLY_EPOCHS = 200


@dataclass
class Chain:
    maturities: np.ndarray
    strikes: np.ndarray
    prices: np.ndarray

    def __post_init__(self):
        self.maturities = np.asarray(self.maturities, dtype=float)
        self.strikes = np.asarray(self.strikes, dtype=float)
        self.prices = np.asarray(self.prices, dtype=float)
        n = self.maturities.size
        if n == 0 or self.strikes.shape != (n,) or self.prices.shape != (n,):
            raise FormatError("a chain needs equal-length, nonempty columns")
        if not (np.all(np.isfinite(self.maturities)) and np.all(self.maturities > 0)):
            raise FormatError("maturities must be finite and positive")
        if not (np.all(np.isfinite(self.strikes)) and np.all(self.strikes > 0)):
            raise FormatError("strikes must be finite and positive")
        if not (np.all(np.isfinite(self.prices)) and np.all(self.prices >= 0)):
            raise FormatError("mid prices must be finite and nonnegative")

    def slices(self):
        """{maturity: (sorted strikes, prices)}; duplicate quotes are averaged."""
        out = {}
        for t in np.unique(self.maturities):
            sel = self.maturities == t
            k, inverse = np.unique(self.strikes[sel], return_inverse=True)
            p = np.bincount(inverse, weights=self.prices[sel]) / np.bincount(inverse)
            out[float(t)] = (k, p)
        return out


def read_chain(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CHAIN_COLUMNS:
            raise FormatError(f"chain header must be {','.join(CHAIN_COLUMNS)}, got {header}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise FormatError(f"line {line_no}: expected 3 fields, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise FormatError(f"line {line_no}: {exc}") from exc
    if not rows:
        raise FormatError("chain has no quotes")
    data = np.asarray(rows)
    return Chain(data[:, 0], data[:, 1], data[:, 2])


def write_chain(path, chain):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CHAIN_COLUMNS)
        for t, k, p in zip(chain.maturities, chain.strikes, chain.prices):
            writer.writerow([repr(float(t)), repr(float(k)), repr(float(p))])


def chain_from_surface(surface, spot=1.0):
    """Quotes at every node of a unit-spot surface, scaled to ``spot``."""
    t, k = np.meshgrid(surface.maturities, surface.strikes, indexing="ij")
    return Chain(t.ravel(), k.ravel() * spot, surface.prices.ravel() * spot)


@dataclass
class GridQuotes:
    surface: PriceSurface      # unit-spot surface on the normalised grid
    coverage: float
    filled: list               # (maturity, strike) cells filled without a bracketing quote


def interpolate_to_grid(chain, grid, spot, min_coverage=MIN_COVERAGE):
    """Map quotes onto ``grid`` (given in the chain's units) and normalise by ``spot``.

    Within each quoted maturity prices are interpolated in strike with a
    shape-preserving cubic (PCHIP), only inside the quoted strike range.
    Across maturities the interpolation is linear between the two quoted
    maturities that bracket a grid maturity.  Cells that neither route
    reaches count as missing; below ``min_coverage`` the run fails with the
    list of missing cells.  Otherwise each missing cell takes the value of
    the nearest reached cell in its strike column (or, for an empty
    column, in its maturity row) and is reported in ``filled``.
    """
    if not spot > 0:
        raise ConstructionError("spot must be positive")
    slices = chain.slices()
    quoted_t = np.array(sorted(slices))
    by_maturity = np.full((quoted_t.size, grid.strikes.size), np.nan)
    for i, t in enumerate(quoted_t):
        k, p = slices[float(t)]
        if k.size == 1:
            by_maturity[i, grid.strikes == k[0]] = p[0]
            continue
        by_maturity[i] = PchipInterpolator(k, p, extrapolate=False)(grid.strikes)
    values = np.full(grid.shape, np.nan)
    for i, t in enumerate(grid.maturities):
        j = np.searchsorted(quoted_t, t)
        if j < quoted_t.size and quoted_t[j] == t:
            values[i] = by_maturity[j]
        elif 0 < j < quoted_t.size:
            w = (t - quoted_t[j - 1]) / (quoted_t[j] - quoted_t[j - 1])
            values[i] = (1.0 - w) * by_maturity[j - 1] + w * by_maturity[j]
    reached = np.isfinite(values)
    coverage = float(reached.mean())
    missing = [(float(grid.maturities[i]), float(grid.strikes[j]))
               for i, j in zip(*np.nonzero(~reached))]
    if coverage < min_coverage:
        raise CoverageError(f"quotes reach {coverage:.1%} of grid cells (need {min_coverage:.0%})",
                            missing)
    if missing:
        values = _fill_nearest(values, reached)
    norm_grid = SurfaceGrid(grid.maturities, grid.strikes / spot)
    surface = PriceSurface(norm_grid, 1.0, 1.0, values / spot, source="ingested")
    return GridQuotes(surface, coverage, missing)


def _fill_nearest(values, reached):
    out = values.copy()
    n_t, n_k = values.shape
    for j in range(n_k):
        rows = np.nonzero(reached[:, j])[0]
        if rows.size == 0:
            continue
        for i in np.nonzero(~reached[:, j])[0]:
            out[i, j] = values[rows[np.argmin(np.abs(rows - i))], j]
    col_ok = reached.any(axis=0)
    cols = np.nonzero(col_ok)[0]
    for j in np.nonzero(~col_ok)[0]:
        out[:, j] = out[:, cols[np.argmin(np.abs(cols - j))]]
    return out


def train_on_the_fly(unit_grid, n_train=8000, seed=0, config=None, mc_config=ON_THE_FLY_MC,
                     progress=None):
    """Train on unit-spot displaced CEV and SABR models priced on ``unit_grid``.

    The training set is split equally between the two families; each half
    is itself balanced between martingales and bubbles.  Unless ``config``
    says otherwise the network sees standardized prices and trains for
    ON_THE_FLY_EPOCHS: the effective volatility level varies by an order of
    magnitude across the sampling ranges and raw prices leave the skew,
    which carries the label, too small to learn at the default settings.
    """
    if n_train < 4 or n_train % 4:
        raise ConstructionError("n_train must be a positive multiple of 4")
    half = n_train // 2
    data = ds.generate([(market_cev_protocol(), half), (market_sabr_protocol(), half)],
                       unit_grid, alpha=1.0, seed=seed, mc_config=mc_config, progress=progress)
    cfg = config or mlp.TrainConfig(seed=seed, standardize=True, epochs=ON_THE_FLY_EPOCHS)
    model, history = mlp.train(data.features, data.labels, data.defects, cfg)
    return model, history, data


def infer(model, chain, grid, spot, min_coverage=MIN_COVERAGE):
    """P_b for a chain, after interpolation onto the model's training grid."""
    quotes = interpolate_to_grid(chain, grid, spot, min_coverage)
    row = quotes.surface.prices.reshape(1, -1)
    if row.shape[1] != model.dims[0]:
        from .errors import WidthMismatchError
        raise WidthMismatchError(f"grid has {row.shape[1]} cells, model expects {model.dims[0]}")
    p_b, defect = mlp.predict(model, row)
    p_b = float(p_b[0])
    return {"p_b": p_b, "label": "bubble" if p_b > 0.5 else "no_bubble",
            "defect_estimate": float(defect[0]) * spot, "coverage": quotes.coverage,
            "filled_cells": quotes.filled}

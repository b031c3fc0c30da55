"""Analytic call prices, means and martingale defects.

All rates are zero.  The displaced CEV process X = Y - d is priced through
Y, which is a driftless CEV process absorbed at zero.  Writing
b = 1 - beta, the transform Z = Y**(2b) / (sigma b)**2 turns Y into a
squared Bessel process, so every CEV quantity below is a noncentral
chi-square probability in the two arguments

    x = F**(2b) / (b**2 sigma**2 T),   y = Ky**(2b) / (b**2 sigma**2 T),

with F = x0 + d and Ky = K + d.  For beta > 1 the Bessel dimension is
below two and the process is a strict local martingale; the formulas then
come from the h-transform of the reflected process and carry the mass
deficit E[Y_T] = F * P(chi2(nu) <= x) with nu = 1 / (beta - 1).
"""

import numpy as np
from scipy import special as sps

from .errors import ConstructionError, UnsupportedError
from .model_zoo import DisplacedCev, Sabr, SinSv, is_strict_local_martingale
from .special import noncentral_chi2_cdf, noncentral_chi2_sf, normal_cdf
from .surfaces import PriceSurface, SurfaceGrid

BETA_SNAP = 1e-6
BACKENDS = ("analytic", "monte_carlo")


def black_call(f0, k, t, vol):
    """Zero-rate lognormal call price, vectorised."""
    f0, k, t, vol = (np.asarray(a, dtype=float) for a in (f0, k, t, vol))
    sd = vol * np.sqrt(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = np.log(f0 / k) / sd + 0.5 * sd
    d2 = d1 - sd
    price = f0 * normal_cdf(d1) - k * normal_cdf(d2)
    intrinsic = np.maximum(f0 - k, 0.0)
    price = np.where(sd > 0, price, intrinsic)
    price = np.maximum(price, intrinsic)
    return price[()] if price.ndim == 0 else price


def black_put(f0, k, t, vol):
    return black_call(f0, k, t, vol) - (np.asarray(f0, float) - np.asarray(k, float))


def implied_total_stdev(price, f0, k, iterations=100):
    """Black total standard deviation vol * sqrt(t) reproducing ``price``.

    Solved by bisection in log(stdev), which is robust for deep
    out-of-the-money quotes.  Prices outside the open no-arbitrage interval
    ((f0 - k)^+, f0) give NaN.
    """
    price, k = np.broadcast_arrays(np.asarray(price, dtype=float), np.asarray(k, dtype=float))
    intrinsic = np.maximum(f0 - k, 0.0)
    valid = (price > intrinsic) & (price < f0)
    lo = np.full(price.shape, np.log(1e-8))
    hi = np.full(price.shape, np.log(50.0))
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        too_high = black_call(f0, k, 1.0, np.exp(mid)) > price
        hi = np.where(too_high, mid, hi)
        lo = np.where(too_high, lo, mid)
    out = np.where(valid, np.exp(0.5 * (lo + hi)), np.nan)
    return out[()] if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Displaced CEV
# --------------------------------------------------------------------------

def _cev_args(spec, t, k):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("maturity must be positive")
    f = spec.x0 + spec.d
    b = 1.0 - spec.beta
    scale = b * b * spec.sigma ** 2 * t
    x = f ** (2.0 * b) / scale
    if k is None:
        return f, b, x, None, None
    ky = np.asarray(k, dtype=float) + spec.d
    if np.any(np.asarray(k) <= 0):
        raise ValueError("strike must be positive")
    y = ky ** (2.0 * b) / scale
    return f, b, x, y, ky


def _lognormal(spec):
    return abs(spec.beta - 1.0) < BETA_SNAP


def cev_mean_y(spec, t):
    """E[Y_t] for Y = X + d."""
    f = spec.x0 + spec.d
    if spec.beta <= 1.0 or _lognormal(spec):
        return np.broadcast_to(f, np.shape(t)).astype(float)[()]
    _, b, x, _, _ = _cev_args(spec, t, None)
    nu = -1.0 / b
    return f * sps.gammainc(0.5 * nu, 0.5 * x)


def _cev_defect(spec, t):
    """x0 - E[X_t] from the upper gamma tail, so tiny defects do not cancel to 0."""
    if spec.beta <= 1.0 or _lognormal(spec):
        return np.zeros(np.shape(t))[()]
    f, b, x, _, _ = _cev_args(spec, t, None)
    return f * sps.gammaincc(-0.5 / b, 0.5 * x)


def cev_mean(spec, t):
    """E[X_t]; equals x0 exactly when beta <= 1."""
    return cev_mean_y(spec, t) - spec.d


def _cev_call_parts(spec, t, k):
    """Return (E[(Y - Ky)^+], E[Y 1{Y <= Ky}], P(Y <= Ky)) on the broadcast grid."""
    if _lognormal(spec):
        f = spec.x0 + spec.d
        ky = np.asarray(k, dtype=float) + spec.d
        t = np.asarray(t, dtype=float)
        sd = spec.sigma * np.sqrt(t)
        d1 = np.log(f / ky) / sd + 0.5 * sd
        call = black_call(f, ky, t, spec.sigma)
        return call, f * normal_cdf(-d1), normal_cdf(-(d1 - sd))
    f, b, x, y, ky = _cev_args(spec, t, k)
    x, y = np.broadcast_arrays(x, y)
    if spec.beta < 1.0:
        df = 1.0 / b
        upper_mass = f * noncentral_chi2_sf(y, 2.0 + df, x)   # E[Y 1{Y > Ky}]
        below = noncentral_chi2_cdf(x, df, y)                # P(Y > Ky)
        call = upper_mass - ky * below
        return call, f - upper_mass, 1.0 - below
    nu = -1.0 / b
    central = sps.gammainc(0.5 * nu, 0.5 * x)
    y_mass_below = f * noncentral_chi2_cdf(x, nu, y)         # E[Y 1{Y <= Ky}]
    prob_above = noncentral_chi2_cdf(y, 2.0 + nu, x)         # P(Y > Ky)
    call = f * central - y_mass_below - ky * prob_above
    return call, y_mass_below, noncentral_chi2_sf(y, 2.0 + nu, x)


def cev_call(spec, t, k):
    """E[(X_t - k)^+] under the displaced CEV law, without a defect term."""
    call = _cev_call_parts(spec, t, k)[0]
    call = np.maximum(call, 0.0)
    return call[()] if np.ndim(call) == 0 else call


def cev_put(spec, t, k):
    """E[(k - X_t)^+], computed from the same chi-square parameterisation."""
    _, y_below, p_below = _cev_call_parts(spec, t, k)
    ky = np.asarray(k, dtype=float) + spec.d
    put = np.maximum(ky * p_below - y_below, 0.0)
    return put[()] if np.ndim(put) == 0 else put


# --------------------------------------------------------------------------
# SABR (gamma = 1)
# --------------------------------------------------------------------------

def hagan_implied_vol(spec, t, k):
    """Hagan's lognormal implied-volatility expansion for gamma = 1."""
    if spec.gamma != 1.0:
        raise UnsupportedError("Hagan vol implemented for gamma = 1 only")
    t = np.asarray(t, dtype=float)
    k = np.asarray(k, dtype=float)
    a, nu, rho = spec.sigma0, spec.volvol, spec.rho
    z = (nu / a) * np.log(spec.f0 / k)
    # z / x(z) with a series near z = 0 so the at-the-money limit is smooth.
    small = np.abs(z) < 1e-7
    zs = np.where(small, 1.0, z)
    root = np.sqrt(1.0 - 2.0 * rho * zs + zs * zs)
    with np.errstate(divide="ignore", invalid="ignore"):
        xz = np.log((root + zs - rho) / (1.0 - rho))
        ratio = np.where(small, 1.0 - 0.5 * rho * z, zs / xz)
    correction = 1.0 + (0.25 * rho * nu * a + (2.0 - 3.0 * rho * rho) * nu * nu / 24.0) * t
    vol = a * ratio * correction
    return vol[()] if vol.ndim == 0 else vol


def sabr_call(spec, t, k):
    """Black price at the Hagan vol: the undefected expectation for SABR."""
    return black_call(spec.f0, k, t, hagan_implied_vol(spec, t, k))


# --------------------------------------------------------------------------
# Defects and collateralised prices
# --------------------------------------------------------------------------

def _check_backend(backend):
    if backend not in BACKENDS:
        raise ConstructionError(f"backend must be one of {BACKENDS}, got {backend!r}")


def martingale_defect(spec, t, backend="analytic", mc_config=None, return_std_error=False):
    """m(t) = x0 - E[X_t].

    ``analytic`` is exact for displaced CEV.  ``monte_carlo`` estimates the
    mean from simulated paths of any family.
    """
    _check_backend(backend)
    if backend == "analytic":
        if not isinstance(spec, DisplacedCev):
            raise UnsupportedError(f"no analytic defect for family {spec.family!r}")
        m = _cev_defect(spec, t)
        m = m[()] if np.ndim(m) == 0 else m
        return (m, np.zeros_like(m)) if return_std_error else m
    from .monte_carlo import McConfig, mc_terminal_mean

    cfg = mc_config or McConfig()
    mean, se = mc_terminal_mean(spec, np.atleast_1d(t), cfg)
    m = spec.spot - mean
    if np.ndim(t) == 0:
        m, se = float(np.ravel(m)[0]), float(np.ravel(se)[0])
    return (m, se) if return_std_error else m


def collateralized_call(spec, t, k, alpha, backend="analytic", mc_config=None):
    """C^alpha(t, k) = E[(X_t - k)^+] + alpha m(t)."""
    grid = SurfaceGrid(np.atleast_1d(t), np.atleast_1d(k))
    surface = price_surface(spec, grid, alpha, backend, mc_config)
    prices = surface.prices
    if np.ndim(t) == 0 and np.ndim(k) == 0:
        return float(prices[0, 0])
    if np.ndim(t) == 0:
        return prices[0]
    if np.ndim(k) == 0:
        return prices[:, 0]
    return prices


def price_surface(spec, grid, alpha, backend="analytic", mc_config=None):
    """Collateralised call surface of ``spec`` on ``grid``.

    Analytic pricing covers displaced CEV exactly and SABR (gamma = 1) via
    the Hagan approximation; for a SABR bubble with alpha > 0 the defect is
    still estimated by Monte Carlo.  The Sin family has Monte Carlo only.
    """
    return price_surface_and_defect(spec, grid, alpha, backend, mc_config)[0]


def price_surface_and_defect(spec, grid, alpha, backend="analytic", mc_config=None):
    """Like :func:`price_surface`, also returning m(T) for every maturity of the grid."""
    _check_backend(backend)
    if not 0.0 <= alpha <= 1.0:
        raise ConstructionError(f"alpha must lie in [0, 1], got {alpha}")
    from .monte_carlo import McConfig, mc_surface_and_defect

    if backend == "monte_carlo":
        surface, defect, _ = mc_surface_and_defect(spec, grid, alpha, mc_config or McConfig())
        return surface, defect
    t = grid.maturities[:, None]
    k = grid.strikes[None, :]
    bubble = is_strict_local_martingale(spec)
    if isinstance(spec, DisplacedCev):
        prices = np.maximum(_cev_call_parts(spec, t, k)[0], 0.0)
        defect = martingale_defect(spec, grid.maturities, "analytic")
        if alpha > 0 and bubble:
            prices = prices + alpha * defect[:, None]
        return PriceSurface(grid, alpha, spec.x0, prices, source="analytic"), defect
    if isinstance(spec, Sabr):
        prices = sabr_call(spec, t, k)
        defect = np.zeros(grid.maturities.size)
        if alpha > 0 and bubble:
            raw = martingale_defect(spec, grid.maturities, "monte_carlo", mc_config or McConfig())
            defect = np.maximum(raw, 0.0)
            prices = prices + alpha * defect[:, None]
        return PriceSurface(grid, alpha, spec.f0, prices, source="analytic"), defect
    if isinstance(spec, SinSv):
        raise UnsupportedError("the Sin family has no analytic prices; use monte_carlo")
    raise TypeError(f"not a model spec: {spec!r}")

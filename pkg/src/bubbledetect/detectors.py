"""Rule-based bubble detectors working directly on a call-price surface.

With full collateral (alpha = 1) the call surface solves Dupire's forward
equation dC/dT = sigma(T, K)**2 / 2 * d2C/dK2, so the local volatility can
be read off the surface and fed to the tail-integral test.  With partial
collateral the zero-strike limit of the surface, alpha x0 + (1 - alpha)
E[X_T], drops below x0 exactly when there is a bubble.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (ConstructionError, InapplicableError, IndeterminateError,
                     RecoveryFailedError)
from .model_zoo import TAIL_MARGIN, TAIL_SAMPLES, TAIL_WINDOW, tail_integral_label

CURVATURE_FLOOR = 1e-10
MAX_MASKED = 0.5
TAIL_REACH = 3.0
SMALL_STRIKE = 0.05
BUBBLE, NO_BUBBLE, INDETERMINATE = "bubble", "no_bubble", "indeterminate"


@dataclass
class Verdict:
    verdict: str
    detector: str
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {"verdict": self.verdict, "detector": self.detector, "details": self.details}


def _second_derivative_weights(nodes, at):
    """Weights w with sum(w * f(nodes)) = f''(at), exact for polynomials of degree < len(nodes)."""
    nodes = np.asarray(nodes, dtype=float) - at
    n = nodes.size
    vander = np.vander(nodes, n, increasing=True).T
    rhs = np.zeros(n)
    rhs[2] = 2.0
    return np.linalg.solve(vander, rhs)


def second_difference(values, x, axis=-1):
    """d2/dx2 along ``axis`` on a possibly nonuniform grid.

    Interior nodes use the three-point stencil
    2 [(f+ - f0)/h+ - (f0 - f-)/h-] / (h+ + h-); the two edge nodes use a
    one-sided four-point stencil (second order) when four nodes exist.
    """
    f = np.moveaxis(np.asarray(values, dtype=float), axis, -1)
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 3:
        raise ConstructionError("second differences need at least 3 nodes")
    out = np.empty_like(f)
    hm = x[1:-1] - x[:-2]
    hp = x[2:] - x[1:-1]
    out[..., 1:-1] = 2.0 * ((f[..., 2:] - f[..., 1:-1]) / hp
                            - (f[..., 1:-1] - f[..., :-2]) / hm) / (hp + hm)
    width = min(n, 4)
    w_lo = _second_derivative_weights(x[:width], x[0])
    w_hi = _second_derivative_weights(x[-width:], x[-1])
    out[..., 0] = f[..., :width] @ w_lo
    out[..., -1] = f[..., -width:] @ w_hi
    return np.moveaxis(out, -1, axis)


def surface_derivatives(surface):
    """(dC/dT, d2C/dK2) on every grid node."""
    n_t, n_k = surface.grid.shape
    if n_t < 3 or n_k < 3:
        raise ConstructionError("surface needs at least 3 maturities and 3 strikes")
    d_t = np.gradient(surface.prices, surface.maturities, axis=0, edge_order=2)
    d_kk = second_difference(surface.prices, surface.strikes, axis=1)
    return d_t, d_kk


@dataclass
class LocalVolEstimate:
    maturities: np.ndarray
    strikes: np.ndarray
    vol: np.ndarray      # NaN where masked
    mask: np.ndarray     # True where the node was rejected

    @property
    def masked_fraction(self):
        return float(self.mask.mean())


def _implied_local_variance(surface):
    """Dupire local variance written in Black total implied variance w(T, y).

    With y = log(K / x0) the forward equation gives the relative local variance

        dw/dT / [1 - y w_y / w + (-1/4 - 1/w + y**2 / w**2) w_y**2 / 4 + w_yy / 2].

    It is the same equation as 2 dC/dT / d2C/dK2, but w is nearly affine in
    (T, y), so finite differences of w are far more accurate than second
    differences of the prices on a coarse strike grid.
    """
    from .pricing import implied_total_stdev

    w = implied_total_stdev(surface.prices, surface.x0, surface.strikes[None, :]) ** 2
    y = np.log(surface.strikes / surface.x0)
    w_t = np.gradient(w, surface.maturities, axis=0, edge_order=2)
    w_y = np.gradient(w, y, axis=1, edge_order=2)
    w_yy = second_difference(w, y, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = (1.0 - y * w_y / w + 0.25 * (-0.25 - 1.0 / w + y * y / (w * w)) * w_y ** 2
                 + 0.5 * w_yy)
        local_var = np.where(denom > 0, w_t / denom, np.nan)
    # w is a relative (lognormal) variance; the model's sigma(T, K) is absolute.
    return local_var * surface.strikes[None, :] ** 2


def recover_local_vol(surface, floor=CURVATURE_FLOOR, max_masked=MAX_MASKED, method="implied"):
    """Dupire local volatility on interior nodes.

    ``method="price"`` evaluates sqrt(2 dC/dT / d2C/dK2) with the grid
    stencils directly; ``method="implied"`` (default) evaluates the same
    equation through the Black implied variance.  Either way, nodes whose
    price curvature is at most ``floor`` or whose theta is negative are
    masked rather than estimated.
    """
    if surface.alpha != 1.0:
        raise InapplicableError("local-vol recovery needs a fully collateralised (alpha = 1) surface")
    if method not in ("implied", "price"):
        raise ConstructionError(f"unknown recovery method {method!r}")
    d_t, d_kk = surface_derivatives(surface)
    if method == "price":
        with np.errstate(divide="ignore", invalid="ignore"):
            local_var = 2.0 * d_t / d_kk
    else:
        local_var = _implied_local_variance(surface)
    inner = (slice(1, -1), slice(1, -1))
    d_t, d_kk, local_var = d_t[inner], d_kk[inner], local_var[inner]
    mask = (d_kk <= floor) | (d_t < 0) | ~np.isfinite(local_var) | (local_var <= 0)
    vol = np.full(d_t.shape, np.nan)
    vol[~mask] = np.sqrt(local_var[~mask])
    estimate = LocalVolEstimate(surface.maturities[1:-1], surface.strikes[1:-1], vol, mask)
    if estimate.masked_fraction > max_masked:
        raise RecoveryFailedError(
            f"{estimate.masked_fraction:.0%} of interior nodes masked (limit {max_masked:.0%})")
    return estimate


def local_max_maturities(estimate):
    """Maturities where the recovered vol is a strict local max in T for every strike."""
    v = estimate.vol
    if v.shape[0] < 3:
        return []
    with np.errstate(invalid="ignore"):
        peak = (v[1:-1] > v[:-2]) & (v[1:-1] > v[2:])
    hits = np.all(peak, axis=1)
    return [float(t) for t in estimate.maturities[1:-1][hits]]


def _interpolated_vol(strikes, vols):
    ok = np.isfinite(vols)
    lk, lv = np.log(strikes[ok]), np.log(vols[ok])

    def vol_fn(_t, x):
        if lk.size == 0 or not lk[0] <= np.log(x) <= lk[-1]:
            return np.nan
        return float(np.exp(np.interp(np.log(x), lk, lv)))

    return vol_fn


def tail_divergence_detect(surface, c=None, margin=TAIL_MARGIN, n_samples=TAIL_SAMPLES):
    """Tail-integral test on the Dupire-recovered local volatility.

    The default cutoff is a third of the largest interior strike, so the
    fit window [c, min(10 c, K_max)] covers the far end of the strike range,
    where a displaced power law is closest to its asymptotic exponent.
    Maturities where the recovered vol peaks in T for every strike are
    excluded.  Returns bubble
    if the fitted tail exponent exceeds 1 + margin at some maturity.
    """
    details = {}
    if surface.strikes[-1] < TAIL_REACH * surface.x0:
        details["reason"] = f"strikes stop below {TAIL_REACH:g} x0"
        return Verdict(INDETERMINATE, "tail", details)
    estimate = recover_local_vol(surface)
    k_max = estimate.strikes[-1]
    c = k_max / TAIL_REACH if c is None else float(c)
    excluded = local_max_maturities(estimate)
    details.update(cutoff=c, excluded_maturities=excluded,
                   masked_fraction=estimate.masked_fraction)
    labels, undecided = {}, 0
    for i, t in enumerate(estimate.maturities):
        if float(t) in excluded:
            continue
        vol_fn = _interpolated_vol(estimate.strikes, estimate.vol[i])
        try:
            labels[float(t)] = tail_integral_label(
                vol_fn, c, [float(t)], c_max=min(TAIL_WINDOW * c, k_max),
                n_samples=n_samples, margin=margin)
        except IndeterminateError:
            undecided += 1
    details["undecided_maturities"] = undecided
    details["bubble_maturities"] = sum(labels.values())
    if not labels:
        details["reason"] = "no maturity admits a clean tail fit"
        return Verdict(INDETERMINATE, "tail", details)
    return Verdict(BUBBLE if any(labels.values()) else NO_BUBBLE, "tail", details)


def zero_strike_limit(surface):
    """Per-maturity linear extrapolation of C(T, K) to K = 0 from the two smallest strikes."""
    k1, k2 = surface.strikes[:2]
    c1, c2 = surface.prices[:, 0], surface.prices[:, 1]
    return c1 - k1 * (c2 - c1) / (k2 - k1)


def small_strike_detect(surface, tol=None):
    """Bubble iff the zero-strike limit at the last maturity is below x0 - tol."""
    if surface.alpha >= 1.0:
        raise InapplicableError("small-strike test carries no signal at alpha = 1")
    if surface.strikes[0] > SMALL_STRIKE * surface.x0:
        raise IndeterminateError(
            f"smallest strike {surface.strikes[0]:g} exceeds {SMALL_STRIKE:g} x0")
    tol = 1e-3 * surface.x0 if tol is None else float(tol)
    limits = zero_strike_limit(surface)
    gap = surface.x0 - limits[-1]
    details = {"limit": float(limits[-1]), "gap": float(gap), "tol": tol}
    return Verdict(BUBBLE if gap > tol else NO_BUBBLE, "small_strike", details)

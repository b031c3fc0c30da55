"""Normal and noncentral chi-square distribution functions.

The noncentral chi-square CDF is evaluated as a Poisson mixture of central
chi-square CDFs.  Central terms come from the regularised incomplete gamma
function and are advanced with the three-term relation

    P(a + 1, z) = P(a, z) - z**a * exp(-z) / Gamma(a + 1),

always in the direction in which the update *adds* positive terms, so the
lower tail (CDF) and the upper tail (survival function) each keep relative
accuracy.  For noncentrality above ``SADDLEPOINT_NC`` the Lugannani-Rice
saddlepoint approximation replaces the series.
"""

import numpy as np
from scipy import special as sps

from .errors import NumericalError

SERIES_TOL = 1e-12
SADDLEPOINT_NC = 1e4
MAX_TERMS = 1_000_000
TINY_Z = 1e-100
TINY_NC = 1e-250


def normal_cdf(x):
    return sps.ndtr(x)


def normal_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def noncentral_chi2_cdf(x, df, nc, tol=SERIES_TOL):
    """P(chi2'(df, nc) <= x), broadcasting over all arguments."""
    return _ncx2(x, df, nc, tol, upper=False)


def noncentral_chi2_sf(x, df, nc, tol=SERIES_TOL):
    """P(chi2'(df, nc) > x) computed without subtracting from one."""
    return _ncx2(x, df, nc, tol, upper=True)


def _ncx2(x, df, nc, tol, upper):
    x, df, nc = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x, df, nc)))
    shape = x.shape
    x, df, nc = (a.ravel() for a in (x, df, nc))
    if np.any(df <= 0) or np.any(nc < 0):
        raise ValueError("df must be positive and nc nonnegative")
    if np.any(np.isnan(x)):
        raise ValueError("x must not be NaN")
    out = np.empty_like(x)
    nonpos = x <= 0
    out[nonpos] = 1.0 if upper else 0.0

    # Below TINY_NC the mixture differs from its central term by at most nc.
    central = ~nonpos & (nc < TINY_NC)
    if central.any():
        f = sps.gammaincc if upper else sps.gammainc
        out[central] = f(0.5 * df[central], 0.5 * x[central])

    big = ~nonpos & (nc > SADDLEPOINT_NC)
    if big.any():
        out[big] = _saddlepoint(x[big], df[big], nc[big], upper)

    series = ~nonpos & ~central & ~big
    if series.any():
        out[series] = _series(x[series], df[series], nc[series], tol, upper)
    out = np.clip(out, 0.0, 1.0).reshape(shape)
    return out[()] if out.ndim == 0 else out


def _series(x, df, nc, tol, upper):
    if not tol > 0:
        raise ValueError("series tolerance must be positive")
    lam = 0.5 * nc
    a = 0.5 * df
    z = 0.5 * x
    # For tiny z every Poisson term past j = 0 is smaller by a factor z, so
    # the mixture collapses to its first term (and the recursions would
    # overflow dividing by z).
    tiny = z < TINY_Z
    if tiny.any():
        out = np.empty_like(z)
        first = np.exp(-lam[tiny]) * sps.gammainc(a[tiny], z[tiny])
        out[tiny] = 1.0 - first if upper else first
        rest = ~tiny
        if rest.any():
            out[rest] = _series(x[rest], df[rest], nc[rest], tol, upper)
        return out
    # Poisson window holding all but ``tol`` of the mixing mass, from the
    # Bernstein tail bounds exp(-t^2 / (2 (lam + t/3))) and exp(-t^2 / (2 lam)).
    log_tail = np.log(4.0 / tol)
    up = log_tail / 3.0 + np.sqrt(log_tail ** 2 / 9.0 + 2.0 * lam * log_tail)
    down = np.sqrt(2.0 * lam * log_tail)
    lo = np.maximum(np.floor(lam - down) - 1.0, 0.0)
    hi = np.ceil(lam + up) + 1.0
    # For small lam the Bernstein bound is loose enough that the starting
    # weight would underflow; cap the window with the exact Poisson tail.
    small = lam < 1.0
    if small.any():
        ks = np.arange(1.0, hi[small].max() + 1.0)
        logpmf = ks[None, :] * np.log(lam[small, None]) - sps.gammaln(ks + 1.0)[None, :]
        below = logpmf < np.log(tol) - 7.0
        hi[small] = np.minimum(hi[small], ks[np.argmax(below, axis=1)])
    nterms = int((hi - lo).max()) + 1
    if nterms > _max_terms():
        raise NumericalError(
            f"noncentral chi-square series needs {nterms} terms (limit {_max_terms()})")
    with np.errstate(all="ignore"):
        if upper:
            return _upper_walk(a, z, lam, lo, nterms)
        return _lower_walk(a, z, lam, hi, nterms)


def _max_terms():
    return MAX_TERMS


def _log_term(m, z):
    """log(z**m * exp(-z) / Gamma(m + 1)) without large cancelling terms.

    Written as -(m log(m/z) + z - m) - log(2 pi m)/2 - stirlerr(m); the
    deviance in brackets is evaluated through log1p so its rounding error is
    relative to the (small) result rather than to m log z.
    """
    m = np.asarray(m, dtype=float)
    z = np.asarray(z, dtype=float)
    out = np.empty(np.broadcast(m, z).shape)
    m, z = np.broadcast_arrays(m, z)
    large = m >= 15.0
    ml, zl = m[large], z[large]
    r = (ml - zl) / zl
    # log1p keeps accuracy near m = z; far below (r -> -1) the direct form
    # is exact enough and avoids 0 * log(0).
    near = r > -0.5
    r_near = np.where(near, r, 0.0)
    dev = np.where(near, zl * ((1.0 + r_near) * np.log1p(r_near) - r_near),
                   ml * (np.log(ml) - np.log(zl)) + zl - ml)
    inv = 1.0 / ml
    inv2 = inv * inv
    stirl = inv * (1.0 / 12 - inv2 * (1.0 / 360 - inv2 * (1.0 / 1260 - inv2 / 1680)))
    out[large] = -dev - 0.5 * np.log(2.0 * np.pi * ml) - stirl
    ms, zs = m[~large], z[~large]
    out[~large] = ms * np.log(zs) - zs - sps.gammaln(ms + 1.0)
    return out


# Walking past the window only adds (correct) negligible terms, so elements
# with narrower windows need no masking.  Dividing by the accumulated Poisson
# mass removes the drift of the recursively updated weights.

def _upper_walk(a, z, lam, lo, nterms):
    # Q(a+j+1) = Q(a+j) + g_j with g_j = z**(a+j) e^-z / Gamma(a+j+1).
    j = lo.copy()
    w = np.exp(_log_term(j, lam))
    q = sps.gammaincc(a + j, z)
    g = np.exp(_log_term(a + j, z))
    total = w * q
    wsum = w.copy()
    tmp = np.empty_like(total)
    for _ in range(1, nterms):
        j += 1.0
        q += g
        np.divide(lam, j, out=tmp)
        w *= tmp
        wsum += w
        np.add(a, j, out=tmp)
        np.divide(z, tmp, out=tmp)
        g *= tmp
        np.multiply(w, q, out=tmp)
        total += tmp
    return total / wsum


def _lower_walk(a, z, lam, hi, nterms):
    # P(a+j-1) = P(a+j) + g_{j-1}; the walk stops contributing at j = 0.
    j = hi.copy()
    w = np.exp(_log_term(j, lam))
    p = sps.gammainc(a + j, z)
    g = np.exp(_log_term(a + j - 1.0, z))
    total = w * p
    wsum = w.copy()
    tmp = np.empty_like(total)
    for _ in range(1, min(nterms, int(hi.max()) + 1)):
        j -= 1.0
        p += g
        np.add(j, 1.0, out=tmp)
        np.maximum(tmp, 0.0, out=tmp)
        tmp /= lam
        w *= tmp
        wsum += w
        np.add(a, j, out=tmp)
        np.maximum(tmp, 0.0, out=tmp)
        tmp /= z
        g *= tmp
        np.multiply(w, p, out=tmp)
        total += tmp
    return total / wsum


def _saddlepoint(x, df, nc, upper):
    """Lugannani-Rice tail probability for chi2'(df, nc).

    In terms of u = 1/(1-2t) the saddle equation is df*u + nc*u**2 = x, and
    t*x - K(t) = df/2 * (u - 1 - log u) + nc/2 * (u - 1)**2.
    """
    k, lam = df, nc
    root = np.sqrt(k * k + 4.0 * lam * x)
    eps = 2.0 * (x - k - lam) / (root + k + 2.0 * lam)  # u - 1, cancellation free
    u = 1.0 + eps
    small = np.abs(eps) < 1e-4
    e_safe = np.where(small, 1.0, eps)
    u_minus_log = np.where(
        small,
        eps ** 2 / 2 - eps ** 3 / 3 + eps ** 4 / 4 - eps ** 5 / 5,
        e_safe - np.log1p(e_safe),
    )
    gap = 0.5 * k * u_minus_log + 0.5 * lam * eps ** 2
    w = np.sign(eps) * np.sqrt(2.0 * np.maximum(gap, 0.0))
    t = eps / (2.0 * u)
    k2 = 2.0 * k * u ** 2 + 4.0 * lam * u ** 3
    v = t * np.sqrt(k2)

    # Near the saddle at t = 0 the two correction terms cancel; use the
    # limit of 1/w - 1/v there instead.
    kappa2 = 2.0 * (k + 2.0 * lam)
    kappa3 = 8.0 * (k + 3.0 * lam)
    rho3 = kappa3 / kappa2 ** 1.5
    w_safe = np.where(w == 0, 1.0, w)
    v_safe = np.where(v == 0, 1.0, v)
    corr = np.where(np.abs(w) < 1e-3, rho3 / 6.0, 1.0 / w_safe - 1.0 / v_safe)
    lower = normal_cdf(w) + normal_pdf(w) * corr
    if upper:
        return normal_cdf(-w) - normal_pdf(w) * corr
    return lower

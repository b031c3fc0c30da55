"""Path simulation and Monte Carlo call surfaces.

Paths are simulated in fixed-size blocks.  Block ``b`` draws its normals
from the substream keyed by ``(seed, PATHS, b)``, so every path depends on
its index alone: blocks can run in any order (or in parallel) and the
assembled terminal sample is bitwise the same.

Two schemes are available.  ``log_euler`` advances every positive state
variable in log space with the Ito correction, which keeps prices positive
and makes each step exactly mean preserving.  ``euler_full_truncation``
is the plain Euler scheme; negative variance excursions are floored at
zero inside the coefficients and the price is absorbed at zero.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import rng as _rng
from .errors import ConstructionError, NumericalError
from .model_zoo import DisplacedCev, Sabr, SinSv
from .surfaces import PriceSurface

BLOCK = 8192
SCHEMES = ("log_euler", "euler_full_truncation")
GRID_TOL = 1e-12


@dataclass(frozen=True)
class McConfig:
    n_paths: int = 200_000
    dt: float = 0.01
    seed: int = 0
    scheme: str = "log_euler"
    antithetic: bool = False

    def __post_init__(self):
        if int(self.n_paths) != self.n_paths or self.n_paths < 2:
            raise ConstructionError("n_paths must be an integer >= 2")
        if not self.dt > 0:
            raise ConstructionError("dt must be positive")
        if self.scheme not in SCHEMES:
            raise ConstructionError(f"scheme must be one of {SCHEMES}")
        if self.antithetic and self.n_paths % 2:
            raise ConstructionError("antithetic sampling needs an even n_paths")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def time_grid(maturities, dt):
    """Step times: multiples of dt merged with the maturities.

    Returns (times, index) where ``times[index[i]] == maturities[i]``.  A
    maturity within 1e-12 of a multiple of dt reuses that node; otherwise
    a partial step lands on it exactly.
    """
    maturities = np.asarray(maturities, dtype=float)
    if maturities.ndim != 1 or np.any(maturities <= 0):
        raise ConstructionError("maturities must be a 1-d array of positive times")
    n = int(np.ceil(maturities.max() / dt - GRID_TOL))
    regular = dt * np.arange(1, n + 1)
    regular = regular[regular < maturities.max() - GRID_TOL]
    keep = np.ones(regular.size, dtype=bool)
    for t in maturities:
        keep &= np.abs(regular - t) > GRID_TOL
    times = np.union1d(regular[keep], maturities)
    index = np.searchsorted(times, maturities)
    return times, index


# --------------------------------------------------------------------------
# Per-family steppers.  ``init`` returns the state for a block of paths,
# ``step`` advances it in place, ``value`` extracts the traded price.
# --------------------------------------------------------------------------

class _CevStepper:
    """Vectorised over a batch of CEV specs sharing the same normals."""

    n_factors = 1

    def __init__(self, specs, scheme):
        self.scheme = scheme
        col = lambda vals: np.asarray(vals, dtype=float)[:, None]
        self.sigma = col([s.sigma for s in specs])
        self.expo = col([s.beta - 1.0 for s in specs])
        self.beta = col([s.beta for s in specs])
        self.d = col([s.d for s in specs])
        self.y0 = col([s.x0 + s.d for s in specs])
        self.log_sigma = np.log(self.sigma)

    def init(self, n):
        shape = (self.y0.shape[0], n)
        if self.scheme == "log_euler":
            return {"ly": np.broadcast_to(np.log(self.y0), shape).copy()}
        return {"y": np.broadcast_to(self.y0, shape).copy()}

    def step(self, state, z, h):
        sq = np.sqrt(h)
        if self.scheme == "log_euler":
            # ly += s dW - s**2 h / 2 with s = sigma y**(beta - 1), all in place
            ly = state["ly"]
            s = np.multiply(self.expo, ly)
            s += self.log_sigma
            np.exp(s, out=s)
            incr = s * (-0.5 * h)
            incr += sq * z[0]
            incr *= s
            ly += incr
        else:
            y = state["y"]
            y += self.sigma * np.maximum(y, 0.0) ** self.beta * (sq * z[0])
            np.maximum(y, 0.0, out=y)

    def value(self, state):
        y = np.exp(state["ly"]) if self.scheme == "log_euler" else state["y"]
        return y - self.d


class _SabrStepper:
    n_factors = 2

    def __init__(self, spec, scheme):
        self.spec = spec
        self.scheme = scheme
        self.rho_c = np.sqrt(max(1.0 - spec.rho ** 2, 0.0))

    def init(self, n):
        s = self.spec
        state = {"ls": np.full(n, np.log(s.sigma0))}
        if self.scheme == "log_euler":
            state["lf"] = np.full(n, np.log(s.f0))
        else:
            state["f"] = np.full(n, float(s.f0))
        return state

    def step(self, state, z, h):
        s = self.spec
        sq = np.sqrt(h)
        w = z[0]
        zz = s.rho * z[0] + self.rho_c * z[1]
        vol = np.exp(state["ls"])
        if self.scheme == "log_euler":
            lf = state["lf"]
            loc = vol if s.gamma == 1.0 else vol * np.exp((s.gamma - 1.0) * lf)
            lf += loc * (sq * w) - (0.5 * h) * loc * loc
        else:
            f = state["f"]
            f += vol * np.maximum(f, 0.0) ** s.gamma * (sq * w)
            np.maximum(f, 0.0, out=f)
        state["ls"] += s.volvol * sq * zz - 0.5 * s.volvol ** 2 * h

    def value(self, state):
        return np.exp(state["lf"]) if self.scheme == "log_euler" else state["f"]


class _SinStepper:
    n_factors = 2

    def __init__(self, spec, scheme):
        self.spec = spec
        self.scheme = scheme
        self.var_y = spec.sigma1 ** 2 + spec.sigma2 ** 2
        self.var_v = spec.a1 ** 2 + spec.a2 ** 2

    def init(self, n):
        s = self.spec
        if self.scheme == "log_euler":
            return {"ly": np.full(n, np.log(s.y0)), "lv": np.full(n, np.log(s.v0))}
        return {"y": np.full(n, float(s.y0)), "v": np.full(n, float(s.v0))}

    def step(self, state, z, h):
        s = self.spec
        sq = np.sqrt(h)
        dy = s.sigma1 * z[0] + s.sigma2 * z[1]
        dv = s.a1 * z[0] + s.a2 * z[1]
        if self.scheme == "log_euler":
            lv = state["lv"]
            scale = np.exp(s.alpha_exp * lv)
            state["ly"] += scale * (sq * dy) - (0.5 * h * self.var_y) * scale * scale
            drift = -0.5 * self.var_v
            if s.kappa:
                lv += sq * dv + (drift - s.kappa) * h + (s.kappa * s.big_l * h) * np.exp(-lv)
            else:
                lv += sq * dv + drift * h
        else:
            y, v = state["y"], state["v"]
            vp = np.maximum(v, 0.0)
            scale = vp ** s.alpha_exp
            y += scale * y * (sq * dy)
            np.maximum(y, 0.0, out=y)
            v += vp * (sq * dv) + s.kappa * (s.big_l - vp) * h

    def value(self, state):
        return np.exp(state["ly"]) if self.scheme == "log_euler" else state["y"]

    def variance(self, state):
        return np.exp(state["lv"]) if self.scheme == "log_euler" else state["v"]


def _stepper(spec, scheme):
    if isinstance(spec, DisplacedCev):
        return _CevStepper([spec], scheme)
    if isinstance(spec, Sabr):
        return _SabrStepper(spec, scheme)
    if isinstance(spec, SinSv):
        return _SinStepper(spec, scheme)
    raise TypeError(f"not a model spec: {spec!r}")


# --------------------------------------------------------------------------
# Simulation driver
# --------------------------------------------------------------------------

def _blocks(cfg):
    """(block id, first source index, source count) with antithetic pairs counted once."""
    n_src = cfg.n_paths // 2 if cfg.antithetic else cfg.n_paths
    n_blocks = -(-n_src // BLOCK)
    return n_src, [(b, b * BLOCK, min(BLOCK, n_src - b * BLOCK)) for b in range(n_blocks)]


def _simulate(stepper, maturities, cfg, block_order=None, extra=None):
    """Terminal values of shape (batch..., n_maturities, n_paths).

    With antithetic sampling, path ``i`` and path ``i + n_paths/2`` are
    driven by opposite normals.
    """
    times, index = time_grid(maturities, cfg.dt)
    steps = np.diff(np.concatenate(([0.0], times)))
    record_at = np.full(times.size, -1)
    record_at[index] = np.arange(index.size)
    n_src, blocks = _blocks(cfg)
    if block_order is not None:
        blocks = [blocks[i] for i in block_order]
    batch = stepper.init(1)
    lead = next(iter(batch.values())).shape[:-1]
    out = np.empty(lead + (len(maturities), cfg.n_paths))
    side = None if extra is None else np.empty_like(out)
    for b, start, count in blocks:
        gen = _rng.substream(cfg.seed, _rng.PATHS, b)
        n = 2 * count if cfg.antithetic else count
        state = stepper.init(n)
        for i, h in enumerate(steps):
            z = gen.standard_normal((stepper.n_factors, count))
            if cfg.antithetic:
                z = np.concatenate((z, -z), axis=1)
            stepper.step(state, z, h)
            j = record_at[i]
            if j >= 0:
                val = stepper.value(state)
                if cfg.antithetic:
                    out[..., j, start:start + count] = val[..., :count]
                    out[..., j, n_src + start:n_src + start + count] = val[..., count:]
                else:
                    out[..., j, start:start + count] = val
                if side is not None:
                    aux = extra(state)
                    side[..., j, start:start + count] = aux[..., :count]
                    if cfg.antithetic:
                        side[..., j, n_src + start:n_src + start + count] = aux[..., count:]
    if not np.all(np.isfinite(out)):
        raise NumericalError("simulation produced non-finite values")
    return out if side is None else (out, side)


def simulate_terminal(spec, maturities, cfg, block_order=None):
    """Simulated X_T of shape (n_maturities, n_paths) for any model family."""
    out = _simulate(_stepper(spec, cfg.scheme), np.atleast_1d(maturities), cfg, block_order)
    return out[0] if isinstance(spec, DisplacedCev) else out


def simulate_cev_batch(specs, maturities, cfg):
    """CEV terminal values for several specs on common random numbers.

    Returns an array of shape (n_specs, n_maturities, n_paths).
    """
    if not all(isinstance(s, DisplacedCev) for s in specs):
        raise TypeError("simulate_cev_batch takes DisplacedCev specs only")
    return _simulate(_CevStepper(list(specs), cfg.scheme), np.atleast_1d(maturities), cfg)


def simulate_sin_terminal(spec, t, cfg, block_order=None):
    """Terminal (Y_t, v_t) samples of the Sin model, each of length n_paths."""
    if not isinstance(spec, SinSv):
        raise TypeError("simulate_sin_terminal needs a SinSv spec")
    stepper = _SinStepper(spec, cfg.scheme)
    y, v = _simulate(stepper, np.atleast_1d(float(t)), cfg, block_order, extra=stepper.variance)
    return y[0], v[0]


# --------------------------------------------------------------------------
# Estimators
# --------------------------------------------------------------------------

def _pair_means(h, antithetic):
    if not antithetic:
        return h
    half = h.shape[-1] // 2
    return 0.5 * (h[..., :half] + h[..., half:])


def sample_mean_se(values, antithetic=False):
    """Sample mean and standard error along the last axis."""
    u = _pair_means(np.asarray(values, dtype=float), antithetic)
    n = u.shape[-1]
    mean = u.mean(axis=-1)
    se = u.std(axis=-1, ddof=1) / np.sqrt(n)
    return mean, se


def mc_terminal_mean(spec, maturities, cfg):
    """Monte Carlo E[X_T] and its standard error per maturity."""
    return sample_mean_se(simulate_terminal(spec, maturities, cfg), cfg.antithetic)


def call_estimates(terminal, strikes, alpha, x0, antithetic=False):
    """Prices and standard errors of (X - K)^+ + alpha (x0 - X) per strike.

    ``terminal`` has shape (n_maturities, n_paths).  Without antithetic
    pairing the sums over paths above each strike come from suffix sums of
    the sorted sample, which costs one sort per maturity.  Rounding can
    make the suffix-sum prices non-monotone by an ulp; a running minimum
    over strikes restores the pathwise ordering exactly.
    """
    terminal = np.atleast_2d(np.asarray(terminal, dtype=float))
    strikes = np.asarray(strikes, dtype=float)
    n_t, n = terminal.shape
    prices = np.empty((n_t, strikes.size))
    se = np.empty_like(prices)
    if antithetic:
        for i in range(n_t):
            x = terminal[i]
            h = np.maximum(x[None, :] - strikes[:, None], 0.0) + alpha * (x0 - x)[None, :]
            prices[i], se[i] = sample_mean_se(h, antithetic=True)
    else:
        for i in range(n_t):
            x = np.sort(terminal[i])
            # suffix sums S1[j] = sum_{m >= j} x_m, S2 likewise for x**2
            s1 = np.concatenate((np.cumsum(x[::-1])[::-1], [0.0]))
            s2 = np.concatenate((np.cumsum((x * x)[::-1])[::-1], [0.0]))
            j = np.searchsorted(x, strikes, side="right")
            cnt = n - j
            a1, a2 = s1[j], s2[j]
            pay = a1 - strikes * cnt                                   # sum p
            pay2 = a2 - 2.0 * strikes * a1 + strikes * strikes * cnt   # sum p^2
            pay_x = a2 - strikes * a1                                  # sum p x
            sx, sxx = s1[0], s2[0]
            mean_x = sx / n
            mean_p = pay / n
            var_p = (pay2 - n * mean_p ** 2) / (n - 1)
            var_x = (sxx - n * mean_x ** 2) / (n - 1)
            cov = (pay_x - n * mean_p * mean_x) / (n - 1)
            var_h = np.maximum(var_p + alpha ** 2 * var_x - 2.0 * alpha * cov, 0.0)
            prices[i] = np.minimum.accumulate(mean_p + alpha * (x0 - mean_x))
            se[i] = np.sqrt(var_h / n)
    return prices, se


def mc_surface_and_defect(spec, grid, alpha, cfg):
    """Surface plus the defect estimate x0 - mean(X_T) and its standard error.

    Prices and defects come from the same simulated paths.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConstructionError(f"alpha must lie in [0, 1], got {alpha}")
    terminal = simulate_terminal(spec, grid.maturities, cfg)
    prices, se = call_estimates(terminal, grid.strikes, alpha, spec.spot, cfg.antithetic)
    mean, mean_se = sample_mean_se(terminal, cfg.antithetic)
    surface = PriceSurface(grid, alpha, spec.spot, prices, se, source="monte_carlo", seed=cfg.seed)
    return surface, spec.spot - mean, mean_se


def mc_call_surface(spec, grid, alpha, cfg):
    """Collateralised call surface from one simulation shared by all strikes."""
    return mc_surface_and_defect(spec, grid, alpha, cfg)[0]

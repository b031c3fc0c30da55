"""Model families, their bubble labels and parameter sampling.

Three families are supported:

* ``DisplacedCev``: dX = sigma (X + d)**beta dW.
* ``Sabr``: dF = s F**gamma dW, ds = volvol s dZ, d<W, Z> = rho dt.
* ``SinSv``: dY = v**alpha_exp Y (sigma1 dB1 + sigma2 dB2),
  dv = v (a1 dB1 + a2 dB2) + kappa (big_l - v) dt.
"""

import itertools
import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import rng as _rng
from .errors import ConstructionError, IndeterminateError, UnsupportedError

TAIL_SAMPLES = 32
TAIL_WINDOW = 10.0
TAIL_MARGIN = 0.05
MIN_TAIL_SAMPLES = 4
TAIL_FIT_TOL = 0.05


def _positive(name, value):
    if not (np.isfinite(value) and value > 0):
        raise ConstructionError(f"{name} must be positive and finite, got {value!r}")


def _nonnegative(name, value):
    if not (np.isfinite(value) and value >= 0):
        raise ConstructionError(f"{name} must be nonnegative and finite, got {value!r}")


def _finite(name, value):
    if not np.isfinite(value):
        raise ConstructionError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class DisplacedCev:
    sigma: float
    beta: float
    d: float
    x0: float

    family = "cev"

    def __post_init__(self):
        _positive("sigma", self.sigma)
        _positive("beta", self.beta)
        _nonnegative("d", self.d)
        _positive("x0", self.x0)

    @property
    def spot(self):
        return self.x0


@dataclass(frozen=True)
class Sabr:
    f0: float
    sigma0: float
    gamma: float
    volvol: float
    rho: float

    family = "sabr"

    def __post_init__(self):
        _positive("f0", self.f0)
        _positive("sigma0", self.sigma0)
        _positive("gamma", self.gamma)
        _positive("volvol", self.volvol)
        if not (-1.0 <= self.rho <= 1.0):
            raise ConstructionError(f"rho must lie in [-1, 1], got {self.rho!r}")

    @property
    def spot(self):
        return self.f0


@dataclass(frozen=True)
class SinSv:
    y0: float
    v0: float
    alpha_exp: float
    kappa: float
    big_l: float
    sigma1: float
    sigma2: float
    a1: float
    a2: float

    family = "sin"

    def __post_init__(self):
        _positive("y0", self.y0)
        _positive("v0", self.v0)
        _positive("alpha_exp", self.alpha_exp)
        _nonnegative("kappa", self.kappa)
        _nonnegative("big_l", self.big_l)
        for name in ("sigma1", "sigma2", "a1", "a2"):
            _finite(name, getattr(self, name))

    @property
    def spot(self):
        return self.y0


FAMILIES = {cls.family: cls for cls in (DisplacedCev, Sabr, SinSv)}


def spec_to_dict(spec):
    return {"family": spec.family, **asdict(spec)}


def spec_from_dict(data):
    data = dict(data)
    try:
        cls = FAMILIES[data.pop("family")]
    except KeyError as exc:
        raise ConstructionError(f"unknown or missing model family in {data!r}") from exc
    names = {f.name for f in fields(cls)}
    if set(data) != names:
        raise ConstructionError(f"{cls.__name__} needs fields {sorted(names)}, got {sorted(data)}")
    return cls(**{k: float(v) for k, v in data.items()})


def is_strict_local_martingale(spec):
    """Ground-truth bubble label of a model specification."""
    if isinstance(spec, DisplacedCev):
        return spec.beta > 1.0
    if isinstance(spec, Sabr):
        if spec.gamma != 1.0:
            raise UnsupportedError("closed-form SABR label only available for gamma = 1")
        return spec.rho > 0.0
    if isinstance(spec, SinSv):
        return spec.a1 * spec.sigma1 + spec.a2 * spec.sigma2 > 0.0
    raise TypeError(f"not a model spec: {spec!r}")


def local_vol(spec, t, x):
    """sigma * (x + d)**beta; time-homogeneous."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("local_vol needs x > 0")
    return spec.sigma * (x + spec.d) ** spec.beta


# --------------------------------------------------------------------------
# Tail-integral test
# --------------------------------------------------------------------------

def fit_tail_exponent(x, vol, fit_tol=TAIL_FIT_TOL):
    """Least-squares slope of log(vol) against log(x).

    Raises IndeterminateError when fewer than four usable samples remain or
    when log(vol) moves against the fitted trend by more than ``fit_tol``
    (a drawdown below the running maximum for an increasing fit, and the
    mirror image for a decreasing one).  Smooth curvature is tolerated;
    noise is not.
    """
    x = np.asarray(x, dtype=float)
    vol = np.asarray(vol, dtype=float)
    ok = np.isfinite(vol) & (vol > 0) & (x > 0)
    if ok.sum() < MIN_TAIL_SAMPLES:
        raise IndeterminateError(
            f"tail fit needs at least {MIN_TAIL_SAMPLES} samples, got {int(ok.sum())}")
    order = np.argsort(x[ok])
    lx, lv = np.log(x[ok][order]), np.log(vol[ok][order])
    slope = np.polyfit(lx, lv, 1)[0]
    if slope >= 0:
        fluctuation = np.max(np.maximum.accumulate(lv) - lv)
    else:
        fluctuation = np.max(lv - np.minimum.accumulate(lv))
    if fluctuation > fit_tol:
        raise IndeterminateError(
            f"log-vol fluctuates against its trend by {fluctuation:.3g} > {fit_tol}")
    return float(slope)


def tail_integral_label(vol_fn, c, t_grid, local_max_times=(), c_max=None,
                        n_samples=TAIL_SAMPLES, margin=TAIL_MARGIN):
    """Decide whether int_c^inf x / vol(t, x)**2 dx is finite for some t.

    For vol ~ C x**p the integrand behaves like x**(1 - 2p), so the integral
    converges iff p > 1.  The exponent is fitted on ``n_samples`` log-spaced
    points of [c, c_max] (default c_max = 10 c) and convergence is declared
    when it exceeds 1 + margin.  Returns True (strict local martingale) if
    any time outside ``local_max_times`` has a convergent integral.
    """
    if not c > 0:
        raise ValueError("cutoff c must be positive")
    t_grid = list(t_grid)
    if not t_grid:
        raise ValueError("t_grid must be nonempty")
    excluded = set(local_max_times)
    times = [t for t in t_grid if t not in excluded]
    if not times:
        raise IndeterminateError("every time in t_grid is excluded as a local maximum")
    c_max = TAIL_WINDOW * c if c_max is None else c_max
    xs = np.geomspace(c, c_max, n_samples)
    for t in times:
        vol = np.asarray([vol_fn(t, x) for x in xs], dtype=float)
        if fit_tail_exponent(xs, vol) > 1.0 + margin:
            return True
    return False


# --------------------------------------------------------------------------
# Parameter sampling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Interval:
    """Uniform range; ``open_lo`` samples (lo, hi], otherwise [lo, hi)."""

    lo: float
    hi: float
    open_lo: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi) and self.lo <= self.hi):
            raise ConstructionError(f"bad interval [{self.lo}, {self.hi}]")

    def draw(self, u):
        if self.open_lo:
            return self.hi - u * (self.hi - self.lo)
        return self.lo + u * (self.hi - self.lo)

    def included_endpoints(self):
        """Endpoints, with the excluded one nudged one ulp inside."""
        if self.lo == self.hi:
            return [self.lo]
        if self.open_lo:
            return [float(np.nextafter(self.lo, self.hi)), self.hi]
        return [self.lo, float(np.nextafter(self.hi, self.lo))]

    def to_list(self):
        return [self.lo, self.hi, self.open_lo]

    @classmethod
    def from_any(cls, value):
        if isinstance(value, Interval):
            return value
        if isinstance(value, dict):
            return cls(float(value["lo"]), float(value["hi"]), bool(value.get("open_lo", False)))
        value = list(value)
        return cls(float(value[0]), float(value[1]), bool(value[2]) if len(value) > 2 else False)


@dataclass(frozen=True)
class SamplingProtocol:
    """How to draw labelled model specs of one family.

    ``fixed`` holds constant parameters, ``shared`` ranges apply to both
    halves and ``martingale``/``bubble`` ranges define the two halves.
    """

    family: str
    fixed: dict = field(default_factory=dict)
    shared: dict = field(default_factory=dict)
    martingale: dict = field(default_factory=dict)
    bubble: dict = field(default_factory=dict)
    balance: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConstructionError(f"unknown family {self.family!r}")
        if not 0.0 <= self.balance <= 1.0:
            raise ConstructionError("balance must lie in [0, 1]")
        for name in ("shared", "martingale", "bubble"):
            object.__setattr__(self, name, {k: Interval.from_any(v)
                                            for k, v in getattr(self, name).items()})
        object.__setattr__(self, "fixed", {k: float(v) for k, v in self.fixed.items()})
        names = {f.name for f in fields(FAMILIES[self.family])}
        for half in ("martingale", "bubble"):
            keys = [set(self.fixed), set(self.shared), set(getattr(self, half))]
            union = set().union(*keys)
            if union != names or sum(map(len, keys)) != len(union):
                raise ConstructionError(
                    f"{half} half must assign each of {sorted(names)} exactly once")
        self._check_halves()

    def _check_halves(self):
        for half, want in (("martingale", False), ("bubble", True)):
            ranges = {**self.shared, **getattr(self, half)}
            keys = sorted(ranges)
            for corner in itertools.product(*(ranges[k].included_endpoints() for k in keys)):
                try:
                    spec = FAMILIES[self.family](**self.fixed, **dict(zip(keys, corner)))
                except ConstructionError as exc:
                    raise ConstructionError(f"{half} range corner invalid: {exc}") from exc
                if is_strict_local_martingale(spec) != want:
                    raise ConstructionError(
                        f"{half} ranges contain {dict(zip(keys, corner))}, labelled {not want}")

    def draw(self, index, bubble):
        gen = _rng.substream(self.seed, _rng.SAMPLE, index)
        ranges = {**self.shared, **(self.bubble if bubble else self.martingale)}
        keys = sorted(ranges)
        u = gen.random(len(keys))
        params = {k: float(ranges[k].draw(ui)) for k, ui in zip(keys, u)}
        return FAMILIES[self.family](**self.fixed, **params)

    def to_dict(self):
        return {
            "family": self.family,
            "fixed": dict(self.fixed),
            "shared": {k: v.to_list() for k, v in self.shared.items()},
            "martingale": {k: v.to_list() for k, v in self.martingale.items()},
            "bubble": {k: v.to_list() for k, v in self.bubble.items()},
            "balance": self.balance,
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


def sample_models(protocol, n):
    """Draw ``n`` labelled specs; the first ``n * balance`` are bubbles."""
    n_bubble = n * protocol.balance
    if n < 2 or abs(n_bubble - round(n_bubble)) > 1e-9:
        raise ConstructionError(f"need n >= 2 with n * balance integral, got n={n}")
    n_bubble = int(round(n_bubble))
    out = []
    for i in range(n):
        bubble = i < n_bubble
        spec = protocol.draw(i, bubble)
        if is_strict_local_martingale(spec) != bubble:
            raise ConstructionError(f"sample {i} landed outside its half: {spec}")
        out.append((spec, bubble))
    return out


def dumps(obj):
    if isinstance(obj, SamplingProtocol):
        return json.dumps(obj.to_dict(), sort_keys=True)
    return json.dumps(spec_to_dict(obj), sort_keys=True)


def loads(text):
    data = json.loads(text)
    if "fixed" in data or "martingale" in data:
        return SamplingProtocol.from_dict(data)
    return spec_from_dict(data)


# --------------------------------------------------------------------------
# Experiment protocols
# --------------------------------------------------------------------------

def cev_protocol(a=0.5, big_a=3.0, big_d=0.2, sigma=0.2, x0=2.0, balance=0.5, seed=0, d=None):
    """Random exponent and displacement; pass ``d`` to fix the displacement."""
    fixed = {"sigma": sigma, "x0": x0}
    shared = {}
    if d is None:
        shared["d"] = Interval(0.0, big_d)
    else:
        fixed["d"] = d
    return SamplingProtocol(
        "cev", fixed=fixed, shared=shared,
        martingale={"beta": Interval(a, 1.0, open_lo=True)},
        bubble={"beta": Interval(1.0, big_a, open_lo=True)},
        balance=balance, seed=seed)


def sabr_protocol(f0=2.0, sigma0=1.0, volvol=0.5, rho_max=0.8, balance=0.5, seed=0):
    return SamplingProtocol(
        "sabr", fixed={"f0": f0, "sigma0": sigma0, "volvol": volvol, "gamma": 1.0},
        martingale={"rho": Interval(-rho_max, 0.0)},
        bubble={"rho": Interval(0.0, rho_max, open_lo=True)},
        balance=balance, seed=seed)


def sin_protocol(y0=2.0, v0=0.5, alpha_exp=1.0, kappa=0.0, big_l=0.0, sigma2=-0.5,
                 a1=1.8, a2=1.2, sigma1_max=1.0, balance=0.5, seed=0):
    threshold = -a2 * sigma2 / a1
    return SamplingProtocol(
        "sin", fixed={"y0": y0, "v0": v0, "alpha_exp": alpha_exp, "kappa": kappa,
                      "big_l": big_l, "sigma2": sigma2, "a1": a1, "a2": a2},
        martingale={"sigma1": Interval(0.0, threshold)},
        bubble={"sigma1": Interval(threshold, sigma1_max, open_lo=True)},
        balance=balance, seed=seed)


def market_cev_protocol(x0=1.0, balance=0.5, seed=0):
    return SamplingProtocol(
        "cev", fixed={"x0": x0},
        shared={"sigma": Interval(0.1, 0.9), "d": Interval(0.0, 2.0)},
        martingale={"beta": Interval(0.1, 1.0, open_lo=True)},
        bubble={"beta": Interval(1.0, 1.3, open_lo=True)},
        balance=balance, seed=seed)


def market_sabr_protocol(f0=1.0, balance=0.5, seed=0):
    return SamplingProtocol(
        "sabr", fixed={"f0": f0, "gamma": 1.0},
        shared={"sigma0": Interval(0.1, 0.9), "volvol": Interval(0.1, 0.9)},
        martingale={"rho": Interval(-0.9, 0.0)},
        bubble={"rho": Interval(0.0, 0.9, open_lo=True)},
        balance=balance, seed=seed)


PROTOCOLS = {
    "cev": cev_protocol,
    "sabr": sabr_protocol,
    "sin": sin_protocol,
    "market_cev": market_cev_protocol,
    "market_sabr": market_sabr_protocol,
}


def named_protocol(name, **kwargs):
    try:
        return PROTOCOLS[name](**kwargs)
    except KeyError as exc:
        raise ConstructionError(f"unknown protocol {name!r}; choose from {sorted(PROTOCOLS)}") from exc

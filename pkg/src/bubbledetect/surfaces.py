"""Maturity/strike grids and call-price surfaces, with CSV persistence."""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConstructionError, FormatError

SOURCES = ("analytic", "monte_carlo", "ingested")


def _strictly_increasing_positive(name, values):
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ConstructionError(f"{name} must be a nonempty 1-d sequence")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ConstructionError(f"{name} must be finite and positive")
    if np.any(np.diff(arr) <= 0):
        raise ConstructionError(f"{name} must be strictly increasing")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SurfaceGrid:
    maturities: np.ndarray
    strikes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "maturities",
                           _strictly_increasing_positive("maturities", self.maturities))
        object.__setattr__(self, "strikes", _strictly_increasing_positive("strikes", self.strikes))

    @classmethod
    def uniform(cls, t_lo, t_hi, n_t, k_lo, k_hi, n_k):
        return cls(np.linspace(t_lo, t_hi, n_t), np.linspace(k_lo, k_hi, n_k))

    @property
    def shape(self):
        return (self.maturities.size, self.strikes.size)

    @property
    def size(self):
        return self.maturities.size * self.strikes.size

    def __eq__(self, other):
        return (isinstance(other, SurfaceGrid)
                and np.array_equal(self.maturities, other.maturities)
                and np.array_equal(self.strikes, other.strikes))

    def to_dict(self):
        return {"maturities": self.maturities.tolist(), "strikes": self.strikes.tolist()}

    @classmethod
    def from_dict(cls, data):
        if "maturities" in data and isinstance(data["maturities"], list):
            return cls(data["maturities"], data["strikes"])
        t, k = data["maturities"], data["strikes"]
        return cls.uniform(t["lo"], t["hi"], t["n"], k["lo"], k["hi"], k["n"])


def parse_range(text):
    """Parse ``lo:hi:n`` into an evenly spaced array."""
    try:
        lo, hi, n = text.split(":")
        return np.linspace(float(lo), float(hi), int(n))
    except ValueError as exc:
        raise ConstructionError(f"expected lo:hi:n, got {text!r}") from exc


@dataclass(frozen=True, eq=False)
class PriceSurface:
    grid: SurfaceGrid
    alpha: float
    x0: float
    prices: np.ndarray
    std_errors: np.ndarray = None
    source: str = "analytic"
    seed: int = None

    def __post_init__(self):
        prices = np.asarray(self.prices, dtype=float)
        if prices.shape != self.grid.shape:
            raise ConstructionError(f"prices shape {prices.shape} != grid shape {self.grid.shape}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConstructionError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.x0 > 0:
            raise ConstructionError("x0 must be positive")
        if self.source not in SOURCES:
            raise ConstructionError(f"source must be one of {SOURCES}")
        if not np.all(np.isfinite(prices)):
            raise ConstructionError("prices must be finite")
        object.__setattr__(self, "prices", prices)
        if self.std_errors is not None:
            se = np.asarray(self.std_errors, dtype=float)
            if se.shape != prices.shape:
                raise ConstructionError("std_errors shape must match prices")
            object.__setattr__(self, "std_errors", se)

    @property
    def maturities(self):
        return self.grid.maturities

    @property
    def strikes(self):
        return self.grid.strikes

    def check(self, tol=1e-9):
        """Sanity bounds: nonnegative, at most (1 + alpha) x0, nonincreasing in strike.

        Monte Carlo surfaces get a slack of three standard errors.
        """
        slack = tol if self.std_errors is None else 3.0 * self.std_errors + tol
        if np.any(self.prices < -slack):
            raise ConstructionError("negative call prices")
        if np.any(self.prices > (1.0 + self.alpha) * self.x0 + slack):
            raise ConstructionError("call prices above (1 + alpha) x0")
        slack_k = slack if np.ndim(slack) == 0 else slack[:, 1:] + slack[:, :-1]
        if np.any(np.diff(self.prices, axis=1) > slack_k):
            raise ConstructionError("call prices increase with strike")
        return self

    def metadata(self):
        return {
            "alpha": self.alpha,
            "x0": self.x0,
            "source": self.source,
            "seed": self.seed,
            "grid": self.grid.to_dict(),
        }

    def to_csv(self, path):
        """Write ``maturity,strike,price[,std_error]`` rows plus a JSON sidecar."""
        path = Path(path)
        has_se = self.std_errors is not None
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["maturity", "strike", "price"] + (["std_error"] if has_se else []))
            for i, t in enumerate(self.maturities):
                for j, k in enumerate(self.strikes):
                    row = [repr(float(t)), repr(float(k)), repr(float(self.prices[i, j]))]
                    if has_se:
                        row.append(repr(float(self.std_errors[i, j])))
                    writer.writerow(row)
        sidecar_path(path).write_text(json.dumps(self.metadata(), indent=2, sort_keys=True))
        return path

    @classmethod
    def from_csv(cls, path, alpha=None, x0=None):
        path = Path(path)
        meta = {}
        side = sidecar_path(path)
        if side.exists():
            meta = json.loads(side.read_text())
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or reader.fieldnames[:3] != ["maturity", "strike", "price"]:
                raise FormatError(f"{path}: header must start with maturity,strike,price")
            rows = list(reader)
        if not rows:
            raise FormatError(f"{path}: no rows")
        t = np.array([float(r["maturity"]) for r in rows])
        k = np.array([float(r["strike"]) for r in rows])
        p = np.array([float(r["price"]) for r in rows])
        mats, strikes = np.unique(t), np.unique(k)
        if mats.size * strikes.size != len(rows):
            raise FormatError(f"{path}: rows do not form a full maturity x strike grid")
        ti = np.searchsorted(mats, t)
        ki = np.searchsorted(strikes, k)
        prices = np.full((mats.size, strikes.size), np.nan)
        prices[ti, ki] = p
        se = None
        if "std_error" in reader.fieldnames:
            se = np.full_like(prices, np.nan)
            se[ti, ki] = [float(r["std_error"]) for r in rows]
        alpha = meta.get("alpha", 1.0) if alpha is None else alpha
        x0 = meta.get("x0") if x0 is None else x0
        if x0 is None:
            raise FormatError(f"{path}: x0 missing (no sidecar and none supplied)")
        return cls(SurfaceGrid(mats, strikes), float(alpha), float(x0), prices, se,
                   meta.get("source", "ingested"), meta.get("seed"))


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")

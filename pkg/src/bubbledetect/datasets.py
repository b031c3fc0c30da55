"""Labeled price-surface datasets: generation, persistence and splitting.

A dataset row holds the flattened call surface (maturity-major, strike
minor), the martingale defect at the last maturity, and the bubble label.
On disk the rows form one little-endian float64 matrix of width
``n_maturities * n_strikes + 2``, preceded by a JSON header and followed by
a CRC32 of everything before it.
"""

import csv
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as _rng
from .errors import BubbleDetectError, ConstructionError, FormatError, GenerationError
from .model_zoo import SamplingProtocol, sample_models, spec_from_dict, spec_to_dict
from .monte_carlo import McConfig
from .pricing import price_surface_and_defect
from .surfaces import SurfaceGrid

log = logging.getLogger(__name__)

MAGIC = b"BDDS"
VERSION = 1
DEFAULT_BACKENDS = {"cev": "analytic", "sabr": "analytic", "sin": "monte_carlo"}


@dataclass(eq=False)
class Dataset:
    features: np.ndarray
    defects: np.ndarray
    labels: np.ndarray
    specs: list
    grid: SurfaceGrid
    alpha: float
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.defects = np.asarray(self.defects, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        n = self.features.shape[0]
        if self.features.ndim != 2 or self.features.shape[1] != self.grid.size:
            raise ConstructionError(
                f"feature width {self.features.shape[1:]} != grid size {self.grid.size}")
        if self.defects.shape != (n,) or self.labels.shape != (n,):
            raise ConstructionError("defects and labels must have one entry per row")
        if self.specs is not None and len(self.specs) != n:
            raise ConstructionError("specs must have one entry per row")

    def __len__(self):
        return self.features.shape[0]

    @property
    def width(self):
        return self.features.shape[1]

    @property
    def families(self):
        return [s.family for s in self.specs] if self.specs is not None else ["?"] * len(self)

    def subset(self, index):
        index = np.asarray(index, dtype=int)
        meta = dict(self.meta)
        if "row_keys" in meta:
            meta["row_keys"] = [meta["row_keys"][i] for i in index]
        specs = None if self.specs is None else [self.specs[i] for i in index]
        return Dataset(self.features[index], self.defects[index], self.labels[index], specs,
                       self.grid, self.alpha, self.seed, meta)

    def header(self):
        return {
            "version": VERSION,
            "rows": len(self),
            "width": self.width,
            "grid": self.grid.to_dict(),
            "alpha": self.alpha,
            "seed": self.seed,
            "specs": None if self.specs is None else [spec_to_dict(s) for s in self.specs],
            "meta": self.meta,
        }

    def equals(self, other):
        """Bitwise equality of the numeric payload plus equal headers."""
        return (self.header() == other.header()
                and self.features.tobytes() == other.features.tobytes()
                and self.defects.tobytes() == other.defects.tobytes()
                and np.array_equal(self.labels, other.labels))


def concat(datasets):
    first = datasets[0]
    for d in datasets[1:]:
        if d.grid != first.grid or d.alpha != first.alpha:
            raise ConstructionError("can only concatenate datasets on the same grid and alpha")
    specs = None if any(d.specs is None for d in datasets) else sum((d.specs for d in datasets), [])
    meta = {"parts": [d.meta for d in datasets]}
    return Dataset(np.concatenate([d.features for d in datasets]),
                   np.concatenate([d.defects for d in datasets]),
                   np.concatenate([d.labels for d in datasets]),
                   specs, first.grid, first.alpha, first.seed, meta)


def restrict_strikes(dataset, strikes):
    """Keep only the feature columns whose strike is in ``strikes``.

    Every requested strike must be a node of the dataset grid.  The defect
    column belongs to the last maturity and is unaffected.
    """
    strikes = np.asarray(strikes, dtype=float)
    cols = np.searchsorted(dataset.grid.strikes, strikes)
    if np.any(cols >= dataset.grid.strikes.size) or np.any(dataset.grid.strikes[np.minimum(
            cols, dataset.grid.strikes.size - 1)] != strikes):
        raise ConstructionError("requested strikes are not nodes of the dataset grid")
    grid = SurfaceGrid(dataset.grid.maturities, strikes)
    n_t, n_k = dataset.grid.shape
    features = dataset.features.reshape(len(dataset), n_t, n_k)[:, :, cols]
    meta = dict(dataset.meta, restricted_from=dataset.grid.to_dict())
    return Dataset(features.reshape(len(dataset), -1), dataset.defects, dataset.labels,
                   dataset.specs, grid, dataset.alpha, dataset.seed, meta)


# --------------------------------------------------------------------------
# Generation
# --------------------------------------------------------------------------

def row_mc_config(base, seed, key):
    """Monte Carlo config for the row with identity ``key``; independent of row order."""
    row_seed = int(_rng.hash_indices(seed, _rng.PATHS, *key))
    return McConfig(base.n_paths, base.dt, row_seed, base.scheme, base.antithetic)


def price_row(spec, grid, alpha, backend, mc_config):
    """(flattened prices, defect at the last maturity) for one spec."""
    surface, defect = price_surface_and_defect(spec, grid, alpha, backend, mc_config)
    return surface.prices.ravel(), float(defect[-1])


def generate(protocols, grid, alpha=1.0, backends=None, seed=0, mc_config=None, progress=None):
    """Build a dataset from ``[(protocol, count), ...]``.

    Each protocol is re-seeded from ``seed`` and its position, its samples
    are interleaved round-robin with the other protocols, and the combined
    rows are shuffled by a keyed permutation.  Monte Carlo seeds are keyed
    by (protocol position, sample index), so a row's prices do not depend
    on where it lands after shuffling.
    """
    backends = {**DEFAULT_BACKENDS, **(backends or {})}
    mc_config = mc_config or McConfig()
    if not protocols:
        raise ConstructionError("at least one protocol is required")
    drawn = []
    for j, (protocol, count) in enumerate(protocols):
        if count <= 0:
            raise ConstructionError("protocol counts must be positive")
        if not isinstance(protocol, SamplingProtocol):
            raise ConstructionError("protocols must be SamplingProtocol instances")
        p_seed = int(_rng.hash_indices(seed, _rng.SAMPLE, j))
        samples = sample_models(protocol.with_seed(p_seed), count)
        drawn.append([((j, i), spec, label) for i, (spec, label) in enumerate(samples)])
    rows = [r for group in _round_robin(drawn) for r in group]
    order = _rng.keyed_permutation(len(rows), seed, _rng.SHUFFLE)
    rows = [rows[i] for i in order]

    n = len(rows)
    features = np.empty((n, grid.size))
    defects = np.empty(n)
    labels = np.empty(n, dtype=bool)
    for r, (key, spec, label) in enumerate(rows):
        backend = backends[spec.family]
        cfg = row_mc_config(mc_config, seed, key)
        try:
            features[r], defects[r] = price_row(spec, grid, alpha, backend, cfg)
        except BubbleDetectError as exc:
            raise GenerationError(f"pricing failed for row {r}: {exc}", spec_to_dict(spec)) from exc
        except (ValueError, ArithmeticError) as exc:
            raise GenerationError(f"pricing failed for row {r}: {exc}", spec_to_dict(spec)) from exc
        labels[r] = label
        if progress is not None:
            progress(r + 1, n)
    meta = {
        "protocols": [{"protocol": p.to_dict(), "count": c} for p, c in protocols],
        "backends": backends,
        "mc_config": mc_config.to_dict(),
        "row_keys": [list(key) for key, _, _ in rows],
    }
    return Dataset(features, defects, labels, [s for _, s, _ in rows], grid, alpha, seed, meta)


def _round_robin(groups):
    for i in range(max(len(g) for g in groups)):
        yield [g[i] for g in groups if i < len(g)]


def audit(dataset, fraction=0.01, seed=0, n_se=3.0):
    """Re-price a keyed random subset of rows; returns the indices that disagree.

    Analytic rows must match bitwise.  Monte Carlo rows are regenerated with
    their keyed seeds and therefore also match bitwise; ``n_se`` is kept for
    rows re-priced under a different Monte Carlo config.
    """
    meta = dataset.meta
    base = McConfig.from_dict(meta["mc_config"])
    n_check = max(1, math.ceil(fraction * len(dataset)))
    picks = _rng.keyed_permutation(len(dataset), seed, _rng.SPLIT)[:n_check]
    bad = []
    for r in sorted(int(i) for i in picks):
        spec = dataset.specs[r]
        cfg = row_mc_config(base, dataset.seed, tuple(meta["row_keys"][r]))
        prices, defect = price_row(spec, dataset.grid, dataset.alpha,
                                   meta["backends"][spec.family], cfg)
        same = prices.tobytes() == dataset.features[r].tobytes() and defect == dataset.defects[r]
        if not same:
            bad.append(r)
    return bad


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

def _pack(dataset):
    header = json.dumps(dataset.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    matrix = np.empty((len(dataset), dataset.width + 2), dtype="<f8")
    matrix[:, :-2] = dataset.features
    matrix[:, -2] = dataset.defects
    matrix[:, -1] = dataset.labels
    body = MAGIC + struct.pack("<II", VERSION, len(header)) + header + matrix.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def save(dataset, path):
    path = Path(path)
    path.write_bytes(_pack(dataset))
    return path


def load(path):
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not a dataset file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise FormatError(f"{path}: checksum mismatch (corrupt or truncated file)")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    rows, width = header["rows"], header["width"]
    payload = data[12 + hlen:-4]
    if len(payload) != rows * (width + 2) * 8:
        raise FormatError(f"{path}: payload size does not match header")
    matrix = np.frombuffer(payload, dtype="<f8").reshape(rows, width + 2).astype(np.float64)
    specs = header["specs"]
    specs = None if specs is None else [spec_from_dict(s) for s in specs]
    return Dataset(matrix[:, :-2].copy(), matrix[:, -2].copy(), matrix[:, -1] != 0.0, specs,
                   SurfaceGrid.from_dict(header["grid"]), header["alpha"], header["seed"],
                   header["meta"])


def export_csv(dataset, path):
    """One row per sample with columns p_0 ... p_{w-1}, defect, label."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"p_{j}" for j in range(dataset.width)] + ["defect", "label"])
        for row, m, lab in zip(dataset.features, dataset.defects, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(m)), int(lab)])
    return path


# --------------------------------------------------------------------------
# Splitting and scaling
# --------------------------------------------------------------------------

def split(dataset, fraction, seed=0):
    """Keyed stratified partition into ceil(fraction n) and the remaining rows.

    Strata are (family, label).  Each stratum contributes floor or ceil of
    its share to the first part, so every part keeps the per-family label
    balance within one row.
    """
    if not 0.0 < fraction < 1.0:
        raise ConstructionError("fraction must lie strictly between 0 and 1")
    n = len(dataset)
    target = math.ceil(fraction * n)
    strata = {}
    for i, key in enumerate(zip(dataset.families, dataset.labels.tolist())):
        strata.setdefault(key, []).append(i)
    keys = sorted(strata, key=str)
    exact = {k: fraction * len(strata[k]) for k in keys}
    take = {k: math.floor(exact[k]) for k in keys}
    short = target - sum(take.values())
    by_remainder = sorted(keys, key=lambda k: (-(exact[k] - take[k]), str(k)))
    for k in by_remainder[:short]:
        take[k] += 1
    first, second = [], []
    for s, k in enumerate(keys):
        members = np.asarray(strata[k])
        perm = _rng.keyed_permutation(members.size, seed, _rng.SPLIT, s)
        members = members[perm]
        first.extend(members[:take[k]].tolist())
        second.extend(members[take[k]:].tolist())
    first = np.asarray(sorted(first), dtype=int)
    second = np.asarray(sorted(second), dtype=int)
    first = first[_rng.keyed_permutation(first.size, seed, _rng.SPLIT, len(keys))]
    second = second[_rng.keyed_permutation(second.size, seed, _rng.SPLIT, len(keys) + 1)]
    return dataset.subset(first), dataset.subset(second)


@dataclass
class Standardizer:
    """Per-column z-score fitted on training features only."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, features):
        features = np.asarray(features, dtype=float)
        mean = features.mean(axis=0)
        scale = features.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(mean, scale)

    def transform(self, features):
        return (np.asarray(features, dtype=float) - self.mean) / self.scale

"""Experiment matrix: within-model runs, displacement transfer and cross-model runs.

Every run builds its own train and test sets from keyed seeds, trains a
network and returns an :class:`EvalReport`.  Reports carry the published
target next to the achieved value so reduced-size runs can be compared
against the full-size numbers.
"""

import csv
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import datasets as ds
from . import mlp
from . import rng as _rng
from .errors import ConstructionError
from .model_zoo import PROTOCOLS, named_protocol
from .monte_carlo import McConfig
from .surfaces import SurfaceGrid

# Published figures, recorded in reports next to the achieved values.
PAPER_TARGETS = {
    ("cev", "atm"): {"a_train": 0.9861, "a_test": 0.9854, "r2_defect": 0.994},
    ("cev", "otm"): {"a_train": 0.9995, "a_test": 0.9995, "r2_defect": 0.999},
    ("cev_d0_to_d05", "atm"): {"a_train": 0.9982, "a_test": 0.8070, "r2_defect": 0.90},
    ("cev_d0_to_d05", "otm"): {"a_train": 0.9999, "a_test": 0.8620, "r2_defect": 0.94},
    ("cev_d05_to_d0", "atm"): {"a_train": 0.987, "a_test": 0.930, "r2_defect": 0.93},
    ("cev_d05_to_d0", "otm"): {"a_train": 0.9999, "a_test": 0.9545, "r2_defect": 0.96},
    (("cev",), "cev", "low"): {"a_train": 0.985, "a_test": 0.982},
    (("cev",), "cev", "high"): {"a_train": 0.996, "a_test": 0.992},
    (("sin",), "sin", "low"): {"a_train": 0.998, "a_test": 0.996},
    (("sin",), "sin", "high"): {"a_train": 0.998, "a_test": 0.997},
    (("sabr",), "sabr", "low"): {"a_train": 0.944, "a_test": 0.948},
    (("sabr",), "sabr", "high"): {"a_train": 0.983, "a_test": 0.984},
    (("sabr",), "cev", "low"): {"a_train": 0.972, "a_test": 0.672},
    (("sabr",), "cev", "high"): {"a_train": 0.995, "a_test": 0.873},
    (("sin",), "cev", "low"): {"a_train": 0.996, "a_test": 0.500},
    (("sin",), "cev", "high"): {"a_train": 0.997, "a_test": 0.783},
    (("sabr", "sin"), "cev", "low"): {"a_train": 0.935, "a_test": 0.750},
    (("sabr", "sin"), "cev", "high"): {"a_train": 0.980, "a_test": 0.832},
    (("cev",), "sabr", "low"): {"a_train": 0.991, "a_test": 0.500},
    (("cev",), "sabr", "high"): {"a_train": 0.994, "a_test": 0.500},
    (("sin",), "sabr", "low"): {"a_train": 0.994, "a_test": 0.680},
    (("sin",), "sabr", "high"): {"a_train": 0.995, "a_test": 0.885},
    (("cev", "sin"), "sabr", "low"): {"a_train": 0.973, "a_test": 0.922},
    (("cev", "sin"), "sabr", "high"): {"a_train": 0.985, "a_test": 0.957},
}

# Strike windows of the local-volatility runs (51 strikes) and of the
# stochastic-volatility runs (100 strikes).
WITHIN_WINDOWS = {"atm": (1.8, 2.3), "otm": (3.5, 4.0)}
CROSS_WINDOWS = {"low": (1.0, 3.5), "high": (3.0, 5.5)}
WITHIN_MATURITIES = (1.0, 2.0, 100)
CROSS_MATURITIES = (2.0, 5.0, 61)
CROSS_MC = McConfig(n_paths=20000, dt=0.02)

# Keys for the seeds derived from an experiment seed.
_TRAIN_DATA, _TEST_DATA, _NET = 1, 2, 3
EXPERIMENT = 7


def derived_seed(seed, *key):
    return int(_rng.hash_indices(seed, EXPERIMENT, *key))


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

def accuracy(labels, predictions):
    labels = np.asarray(labels, dtype=bool)
    predictions = np.asarray(predictions, dtype=bool)
    if labels.shape != predictions.shape or labels.size < 1:
        raise ConstructionError("labels and predictions need equal nonzero length")
    return float(np.mean(labels == predictions))


def r2_score(y, f):
    """Coefficient of determination 1 - SS_res / SS_tot."""
    y = np.asarray(y, dtype=float)
    f = np.asarray(f, dtype=float)
    if y.shape != f.shape or y.size < 2:
        raise ConstructionError("r2 needs two equal-length vectors of length >= 2")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ArithmeticError("r2 is undefined for a constant target")
    return 1.0 - float(np.sum((y - f) ** 2)) / ss_tot


def confusion(labels, predictions):
    """[[true negatives, false positives], [false negatives, true positives]]."""
    labels = np.asarray(labels, dtype=bool)
    predictions = np.asarray(predictions, dtype=bool)
    return [[int(np.sum(~labels & ~predictions)), int(np.sum(~labels & predictions))],
            [int(np.sum(labels & ~predictions)), int(np.sum(labels & predictions))]]


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

@dataclass
class EvalReport:
    name: str
    a_train: float
    a_test: float
    confusion: list
    r2_defect: float = None
    config: dict = field(default_factory=dict)
    paper: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    wall_clock: float = 0.0

    def __post_init__(self):
        n_test = sum(sum(row) for row in self.confusion)
        correct = self.confusion[0][0] + self.confusion[1][1]
        if n_test and abs(correct / n_test - self.a_test) > 1e-12:
            raise ConstructionError("a_test disagrees with the confusion counts")

    def to_dict(self, wall_clock=True):
        out = asdict(self)
        if not wall_clock:
            out.pop("wall_clock")
        return out

    def to_json(self, wall_clock=True):
        return json.dumps(self.to_dict(wall_clock), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def write_learning_curve(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "accuracy"])
            for h in self.history:
                writer.writerow([h["epoch"], repr(h["loss"]), repr(h["accuracy"])])


def _pct(x):
    return "n/a" if x is None else f"{100 * x:.1f}%"


def markdown_table(reports):
    """One row per report: achieved accuracies and R2 next to the published ones."""
    lines = ["| experiment | a_train | a_test | r2_defect | paper a_train | paper a_test | paper r2 |",
             "|---|---|---|---|---|---|---|"]
    for r in reports:
        r2 = "n/a" if r.r2_defect is None else f"{r.r2_defect:.3f}"
        p = r.paper or {}
        p_r2 = f"{p['r2_defect']:.3f}" if "r2_defect" in p else "n/a"
        lines.append(f"| {r.name} | {_pct(r.a_train)} | {_pct(r.a_test)} | {r2} | "
                     f"{_pct(p.get('a_train'))} | {_pct(p.get('a_test'))} | {p_r2} |")
    return "\n".join(lines) + "\n"


def evaluate(model, train, test, name, config, history, started, with_defect=True, paper=None):
    if len(test) == 0:
        raise ConstructionError("the test set is empty")
    if test.width != model.dims[0]:
        from .errors import WidthMismatchError
        raise WidthMismatchError(f"model expects width {model.dims[0]}, dataset has {test.width}")
    p_train, _ = mlp.predict(model, train.features)
    p_test, d_test = mlp.predict(model, test.features)
    pred_test = p_test > 0.5
    r2 = None
    if with_defect and np.ptp(test.defects) > 0:
        r2 = r2_score(test.defects, d_test)
    return EvalReport(
        name=name,
        a_train=accuracy(train.labels, p_train > 0.5),
        a_test=accuracy(test.labels, pred_test),
        confusion=confusion(test.labels, pred_test),
        r2_defect=r2, config=config, paper=dict(paper or {}), history=list(history),
        wall_clock=time.perf_counter() - started)


def _fit(train, cfg):
    return mlp.train(train.features, train.labels, train.defects, cfg)


# --------------------------------------------------------------------------
# Within-model runs
# --------------------------------------------------------------------------

def window_grid(window, n_strikes, maturities=WITHIN_MATURITIES):
    lo, hi = window
    t_lo, t_hi, n_t = maturities
    return SurfaceGrid(np.linspace(t_lo, t_hi, int(n_t)), np.linspace(lo, hi, int(n_strikes)))


def resolve_window(window, table):
    if isinstance(window, str):
        if window not in table:
            raise ConstructionError(f"unknown strike window {window!r}; known: {sorted(table)}")
        return window, table[window]
    lo, hi = (float(v) for v in window)
    return f"{lo:g}-{hi:g}", (lo, hi)


def run_within_model(family="cev", n_train=10000, n_test=1000, window="otm", n_strikes=51,
                     maturities=WITHIN_MATURITIES, seed=0, train_config=None,
                     train_protocol=None, test_protocol=None, mc_config=None, name=None,
                     paper=None, progress=None):
    """Train and test on one family.

    ``train_protocol`` and ``test_protocol`` are keyword overrides for the
    family's sampling protocol, which is how the displacement transfer
    fixes d differently on the two sides.
    """
    if n_train < 2 or n_test < 2:
        raise ConstructionError("n_train and n_test must both be at least 2")
    if family not in PROTOCOLS:
        raise ConstructionError(f"unknown family {family!r}")
    started = time.perf_counter()
    wname, bounds = resolve_window(window, WITHIN_WINDOWS)
    grid = window_grid(bounds, n_strikes, maturities)
    mc = mc_config or McConfig()
    train_p = named_protocol(family, **(train_protocol or {}))
    test_p = named_protocol(family, **(test_protocol or {}))
    train = ds.generate([(train_p, n_train)], grid, seed=derived_seed(seed, _TRAIN_DATA),
                        mc_config=mc, progress=progress)
    test = ds.generate([(test_p, n_test)], grid, seed=derived_seed(seed, _TEST_DATA),
                       mc_config=mc, progress=progress)
    cfg = train_config or mlp.TrainConfig()
    cfg = mlp.TrainConfig.from_dict({**cfg.to_dict(), "seed": derived_seed(seed, _NET)})
    model, history = _fit(train, cfg)
    name = name or f"{family}/{wname}"
    config = {"family": family, "window": list(bounds), "grid": grid.to_dict(),
              "n_train": n_train, "n_test": n_test, "seed": seed,
              "train_protocol": train_p.to_dict(), "test_protocol": test_p.to_dict(),
              "train_config": cfg.to_dict(), "mc_config": mc.to_dict()}
    if paper is None:
        paper = PAPER_TARGETS.get((family, wname), {})
    report = evaluate(model, train, test, name, config, history, started, paper=paper)
    return report, {"train": train, "test": test, "model": model}


def run_displacement_transfer(train_d=0.0, test_d=0.5, window="otm", **kwargs):
    """Train on displaced CEV with fixed ``train_d`` and test with fixed ``test_d``."""
    wname, _ = resolve_window(window, WITHIN_WINDOWS)
    tag = f"cev_d{train_d:g}_to_d{test_d:g}".replace(".", "")
    paper = PAPER_TARGETS.get((tag, wname), {})
    return run_within_model(
        "cev", window=window, train_protocol={"d": float(train_d)},
        test_protocol={"d": float(test_d)}, name=f"{tag}/{wname}", paper=paper, **kwargs)


# --------------------------------------------------------------------------
# Cross-model runs
# --------------------------------------------------------------------------

class CrossModelPool:
    """Datasets for the cross-model matrix, generated once on the union of both windows.

    Each family has a training pool and, if it is ever tested on, a test
    pool.  Cells restrict the pools to their strike window, so both windows
    see the same underlyings and the same Monte Carlo paths.
    """

    def __init__(self, n_train=2000, n_test=1000, seed=0, mc_config=CROSS_MC,
                 maturities=CROSS_MATURITIES, n_strikes=100, windows=None, progress=None):
        self.n_train, self.n_test, self.seed = int(n_train), int(n_test), int(seed)
        self.mc_config = mc_config
        self.windows = dict(windows or CROSS_WINDOWS)
        self.n_strikes = int(n_strikes)
        t_lo, t_hi, n_t = maturities
        strikes = np.unique(np.concatenate(
            [np.linspace(lo, hi, self.n_strikes) for lo, hi in self.windows.values()]))
        self.grid = SurfaceGrid(np.linspace(t_lo, t_hi, int(n_t)), strikes)
        self.progress = progress
        self._cache = {}

    def window_strikes(self, window):
        lo, hi = self.windows[window]
        return np.linspace(lo, hi, self.n_strikes)

    def pool(self, family, role):
        key = (family, role)
        if key not in self._cache:
            n = self.n_train if role == "train" else self.n_test
            which = _TRAIN_DATA if role == "train" else _TEST_DATA
            fam_index = sorted(PROTOCOLS).index(family)
            report = None if self.progress is None else (
                lambda i, total: self.progress(f"{family}/{role}", i, total))
            self._cache[key] = ds.generate(
                [(named_protocol(family), n)], self.grid,
                seed=derived_seed(self.seed, which, fam_index),
                mc_config=self.mc_config, progress=report)
        return self._cache[key]

    def training_set(self, families, window):
        parts = [self.pool(f, "train") for f in families]
        if len(parts) > 1:
            # Equal split between families, keeping n_train rows overall.
            share = 1.0 / len(parts)
            parts = [ds.split(p, share, derived_seed(self.seed, _TRAIN_DATA, 99, k))[0]
                     for k, p in enumerate(parts)]
        combined = parts[0] if len(parts) == 1 else ds.concat(parts)
        if len(parts) > 1:
            order = _rng.keyed_permutation(len(combined), self.seed, _rng.SHUFFLE, 99)
            combined = combined.subset(order)
        return ds.restrict_strikes(combined, self.window_strikes(window))

    def test_set(self, family, window):
        return ds.restrict_strikes(self.pool(family, "test"), self.window_strikes(window))


def run_cross_model(train_families, test_family, window="high", pool=None, seed=0,
                    train_config=None, **pool_kwargs):
    """One cell of the cross-model matrix; the defect head is switched off (lambda = 0)."""
    started = time.perf_counter()
    train_families = tuple(sorted(train_families))
    pool = pool or CrossModelPool(seed=seed, **pool_kwargs)
    if window not in pool.windows:
        raise ConstructionError(f"unknown window {window!r}; known: {sorted(pool.windows)}")
    train = pool.training_set(train_families, window)
    test = pool.test_set(test_family, window)
    cfg = train_config or mlp.TrainConfig(lam=0.0)
    cfg = mlp.TrainConfig.from_dict({**cfg.to_dict(), "seed": derived_seed(pool.seed, _NET)})
    model, history = _fit(train, cfg)
    name = f"{'+'.join(train_families)}->{test_family}/{window}"
    config = {"train_families": list(train_families), "test_family": test_family,
              "window": list(pool.windows[window]), "grid": train.grid.to_dict(),
              "n_train": len(train), "n_test": len(test), "seed": pool.seed,
              "train_config": cfg.to_dict(), "mc_config": pool.mc_config.to_dict()}
    paper = PAPER_TARGETS.get((train_families, test_family, window), {})
    return evaluate(model, train, test, name, config, history, started,
                    with_defect=False, paper=paper)


TABLE2_TRAINING = (("sabr",), ("sin",), ("sabr", "sin"))
TABLE3_TRAINING = (("cev",), ("sin",), ("cev", "sin"))


def cross_model_matrix(pool=None, seed=0, cells=None, **pool_kwargs):
    """All cells of both cross-model tables (test on CEV, test on SABR), both windows."""
    pool = pool or CrossModelPool(seed=seed, **pool_kwargs)
    if cells is None:
        cells = [(tr, "cev", w) for tr in TABLE2_TRAINING for w in pool.windows]
        cells += [(tr, "sabr", w) for tr in TABLE3_TRAINING for w in pool.windows]
    return [run_cross_model(tr, te, w, pool=pool) for tr, te, w in cells]


# --------------------------------------------------------------------------
# Matrix configs (used by the command line)
# --------------------------------------------------------------------------

def run_matrix(config, progress=None):
    """Run the experiments listed in a JSON-style config.

    ``config = {"seed": 0, "experiments": [{"kind": "within", ...}, ...]}``
    where ``kind`` is ``within``, ``transfer`` or ``cross``; remaining keys
    are passed to the matching runner.
    """
    seed = int(config.get("seed", 0))
    reports = []
    pools = {}
    for entry in config.get("experiments", []):
        entry = dict(entry)
        kind = entry.pop("kind")
        if "train_config" in entry:
            entry["train_config"] = mlp.TrainConfig.from_dict(entry["train_config"])
        if "mc_config" in entry:
            entry["mc_config"] = McConfig.from_dict(entry["mc_config"])
        entry.setdefault("seed", seed)
        if kind == "within":
            reports.append(run_within_model(progress=progress, **entry)[0])
        elif kind == "transfer":
            reports.append(run_displacement_transfer(progress=progress, **entry)[0])
        elif kind == "cross":
            pool_args = {k: entry.pop(k) for k in ("n_train", "n_test", "mc_config")
                         if k in entry}
            pool_key = json.dumps({k: (v.to_dict() if hasattr(v, "to_dict") else v)
                                   for k, v in pool_args.items()}, sort_keys=True)
            pool_key += f"/{entry['seed']}"
            if pool_key not in pools:
                pools[pool_key] = CrossModelPool(seed=entry["seed"], **pool_args)
            cells = entry.pop("cells", None)
            if cells is not None:
                cells = [(tuple(c[0]), c[1], c[2]) for c in cells]
            reports.extend(cross_model_matrix(pool=pools[pool_key], cells=cells))
        else:
            raise ConstructionError(f"unknown experiment kind {kind!r}")
    return reports

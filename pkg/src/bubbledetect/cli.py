"""Command-line entry point (``bubbledetect``).

Every command writes its outputs and a ``manifest.json`` into a run
directory, echoes its resolved configuration to stdout, and on failure
prints a JSON error object to stderr and exits with a nonzero status.
"""

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import datasets as ds
from . import detectors, experiments, market, mlp
from .errors import BubbleDetectError, ConstructionError, WidthMismatchError
from .model_zoo import named_protocol, spec_from_dict
from .monte_carlo import McConfig
from .pricing import price_surface
from .surfaces import PriceSurface, SurfaceGrid, parse_range

BACKEND_FLAGS = {"analytic": "analytic", "mc": "monte_carlo", "monte_carlo": "monte_carlo"}


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------

def _load_json(text_or_path):
    """Parse a JSON document given inline or as a file path."""
    if text_or_path is None:
        return {}
    path = Path(text_or_path)
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    try:
        return json.loads(text_or_path)
    except json.JSONDecodeError as exc:
        raise ConstructionError(f"{text_or_path!r} is neither a file nor inline JSON") from exc


def _resolve_grid(args, base=None):
    grid = base
    if getattr(args, "grid", None):
        grid = SurfaceGrid.from_dict(_load_json(args.grid))
    maturities = grid.maturities if grid is not None else None
    strikes = grid.strikes if grid is not None else None
    if getattr(args, "maturities", None):
        maturities = parse_range(args.maturities)
    if getattr(args, "strikes", None):
        strikes = parse_range(args.strikes)
    if maturities is None or strikes is None:
        raise ConstructionError("a grid is required (--grid, or --maturities and --strikes)")
    return SurfaceGrid(maturities, strikes)


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Run directory with a manifest of resolved config and output digests."""

    def __init__(self, command, run_dir):
        self.command = command
        self.dir = Path(run_dir or Path("runs") / command)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.outputs = {}
        self.started = time.perf_counter()

    def path(self, name):
        return self.dir / name

    def record(self, name):
        self.outputs[name] = _sha256(self.path(name))

    def finish(self, config, result=None):
        manifest = {"command": self.command, "version": __version__, "config": config,
                    "outputs": self.outputs, "result": result,
                    "wall_clock": time.perf_counter() - self.started}
        self.path("manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return manifest


def _echo(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_generate(args):
    """Build a dataset from a JSON config.

    Config keys: ``protocols`` (list of {name, count, params}), ``grid``,
    ``alpha``, ``seed``, ``backends`` (family -> analytic|monte_carlo) and
    ``mc_config``.  Flags override the config.
    """
    cfg = _load_json(args.config)
    grid = SurfaceGrid.from_dict(cfg["grid"]) if "grid" in cfg else None
    grid = _resolve_grid(args, grid)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    alpha = args.alpha if args.alpha is not None else float(cfg.get("alpha", 1.0))
    backends = dict(cfg.get("backends", {}))
    if args.backend:
        backends = {f: BACKEND_FLAGS[args.backend] for f in ("cev", "sabr", "sin")}
        if args.backend == "analytic":
            backends.pop("sin")
    entries = cfg.get("protocols") or [{"name": "cev", "count": 10}]
    protocols = [(named_protocol(e["name"], **e.get("params", {})), int(e["count"]))
                 for e in entries]
    mc = McConfig.from_dict(cfg["mc_config"]) if "mc_config" in cfg else McConfig()
    resolved = {"protocols": entries, "grid": grid.to_dict(), "alpha": alpha, "seed": seed,
                "backends": backends, "mc_config": mc.to_dict(),
                "n": sum(c for _, c in protocols)}
    _echo({"resolved_config": resolved})
    run = Run("generate", args.run_dir)
    data = ds.generate(protocols, grid, alpha=alpha, backends=backends, seed=seed, mc_config=mc)
    ds.save(data, run.path("dataset.bds"))
    run.record("dataset.bds")
    if args.csv:
        ds.export_csv(data, run.path("dataset.csv"))
        run.record("dataset.csv")
    result = {"rows": len(data), "width": data.width, "alpha": alpha,
              "bubbles": int(data.labels.sum()), "path": str(run.path("dataset.bds"))}
    run.finish(resolved, result)
    return result


def cmd_train(args):
    data = ds.load(args.dataset)
    cfg = mlp.TrainConfig.from_dict(_load_json(args.config)) if args.config else mlp.TrainConfig()
    if args.seed is not None:
        cfg = mlp.TrainConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    if args.epochs is not None:
        cfg = mlp.TrainConfig.from_dict({**cfg.to_dict(), "epochs": args.epochs})
    resolved = {"dataset": str(args.dataset), "train_config": cfg.to_dict()}
    _echo({"resolved_config": resolved})
    run = Run("train", args.run_dir)
    model, history = mlp.train(data.features, data.labels, data.defects, cfg)
    mlp.save_weights(model, run.path("weights.bdnn"))
    run.record("weights.bdnn")
    with open(run.path("history.json"), "w") as fh:
        json.dump(history, fh, indent=2)
    run.record("history.json")
    result = {"final": history[-1] if history else None, "path": str(run.path("weights.bdnn"))}
    run.finish(resolved, result)
    return result


def cmd_eval(args):
    model = mlp.load_weights(args.weights)
    data = ds.load(args.dataset)
    resolved = {"weights": str(args.weights), "dataset": str(args.dataset)}
    _echo({"resolved_config": resolved})
    if data.width != model.dims[0]:
        raise WidthMismatchError(f"model expects width {model.dims[0]}, dataset has {data.width}")
    run = Run("eval", args.run_dir)
    p_b, defect = mlp.predict(model, data.features)
    pred = p_b > 0.5
    r2 = None
    if np.ptp(data.defects) > 0:
        r2 = experiments.r2_score(data.defects, defect)
    report = experiments.EvalReport(
        name=f"eval/{Path(args.dataset).name}", a_train=None,
        a_test=experiments.accuracy(data.labels, pred),
        confusion=experiments.confusion(data.labels, pred), r2_defect=r2, config=resolved)
    run.path("report.json").write_text(report.to_json(wall_clock=False))
    run.record("report.json")
    result = {"accuracy": report.a_test, "confusion": report.confusion, "r2_defect": r2}
    run.finish(resolved, result)
    return result


def cmd_price(args):
    """Price one model spec on a grid and write the surface CSV (plus sidecar)."""
    spec = spec_from_dict(_load_json(args.spec))
    grid = _resolve_grid(args)
    alpha = 1.0 if args.alpha is None else args.alpha
    backend = BACKEND_FLAGS[args.backend or "analytic"]
    mc = McConfig(seed=args.seed or 0)
    resolved = {"spec": _load_json(args.spec), "grid": grid.to_dict(), "alpha": alpha,
                "backend": backend}
    _echo({"resolved_config": resolved})
    run = Run("price", args.run_dir)
    surface = price_surface(spec, grid, alpha, backend, mc)
    surface.to_csv(run.path("surface.csv"))
    run.record("surface.csv")
    result = {"path": str(run.path("surface.csv"))}
    run.finish(resolved, result)
    return result


def cmd_detect(args):
    surface = PriceSurface.from_csv(args.surface, alpha=args.alpha, x0=args.spot)
    resolved = {"surface": str(args.surface), "mode": args.mode, "alpha": surface.alpha,
                "x0": surface.x0, "c": args.c, "tol": args.tol}
    _echo({"resolved_config": resolved})
    run = Run("detect", args.run_dir)
    if args.mode == "tail":
        verdict = detectors.tail_divergence_detect(surface, c=args.c)
    else:
        verdict = detectors.small_strike_detect(surface, tol=args.tol)
    run.path("verdict.json").write_text(json.dumps(verdict.to_dict(), indent=2, sort_keys=True))
    run.record("verdict.json")
    result = verdict.to_dict()
    run.finish(resolved, result)
    return result


def cmd_experiments(args):
    cfg = _load_json(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    _echo({"resolved_config": cfg})
    run = Run("experiments", args.run_dir)
    reports = experiments.run_matrix(cfg)
    bundle = [r.to_dict(wall_clock=False) for r in reports]
    run.path("reports.json").write_text(json.dumps(bundle, indent=2, sort_keys=True))
    run.record("reports.json")
    run.path("reports.md").write_text(experiments.markdown_table(reports))
    run.record("reports.md")
    for i, r in enumerate(reports):
        name = f"curve_{i:02d}.csv"
        r.write_learning_curve(run.path(name))
        run.record(name)
    result = {"reports": len(reports),
              "a_test": {r.name: r.a_test for r in reports}}
    run.finish(cfg, result)
    return result


def cmd_infer_market(args):
    if args.spot is None:
        raise ConstructionError("--spot is required")
    chain = market.read_chain(args.chain)
    grid = _resolve_grid(args)
    unit_grid = SurfaceGrid(grid.maturities, grid.strikes / args.spot)
    resolved = {"chain": str(args.chain), "spot": args.spot, "grid": grid.to_dict(),
                "weights": args.weights, "train_on_the_fly": args.train_on_the_fly,
                "n_train": args.n_train, "seed": args.seed or 0}
    _echo({"resolved_config": resolved})
    run = Run("infer-market", args.run_dir)
    if args.train_on_the_fly:
        model, _, _ = market.train_on_the_fly(unit_grid, n_train=args.n_train, seed=args.seed or 0)
        mlp.save_weights(model, run.path("weights.bdnn"))
        run.record("weights.bdnn")
    elif args.weights:
        model = mlp.load_weights(args.weights)
    else:
        raise ConstructionError("pass --weights or --train-on-the-fly")
    result = market.infer(model, chain, grid, args.spot)
    run.path("inference.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    run.record("inference.json")
    run.finish(resolved, result)
    return result


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _grid_flags(p):
    p.add_argument("--grid", help="grid JSON (file or inline), as written by SurfaceGrid.to_dict")
    p.add_argument("--maturities", help="maturity range lo:hi:n")
    p.add_argument("--strikes", help="strike range lo:hi:n")


def build_parser():
    parser = argparse.ArgumentParser(prog="bubbledetect",
                                     description="Bubble detection from call-price surfaces")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--run-dir", help="output directory (default runs/<command>)")
        p.add_argument("--seed", type=int)
        return p

    p = add("generate", cmd_generate, "generate a labelled dataset")
    p.add_argument("--config", help="generation config JSON")
    p.add_argument("--alpha", type=float)
    p.add_argument("--backend", choices=sorted(BACKEND_FLAGS))
    p.add_argument("--csv", action="store_true", help="also export a CSV copy")
    _grid_flags(p)

    p = add("train", cmd_train, "train a network on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--epochs", type=int)

    p = add("eval", cmd_eval, "evaluate weights on a dataset")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True)

    p = add("price", cmd_price, "price one model spec into a surface CSV")
    p.add_argument("--spec", required=True, help="model spec JSON (file or inline)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--backend", choices=sorted(BACKEND_FLAGS))
    _grid_flags(p)

    p = add("detect", cmd_detect, "rule-based detection on a surface CSV")
    p.add_argument("--surface", required=True)
    p.add_argument("--mode", choices=("tail", "small_strike"), default="tail")
    p.add_argument("--alpha", type=float, help="override the sidecar alpha")
    p.add_argument("--spot", type=float, help="override the sidecar x0")
    p.add_argument("--c", type=float, help="tail cutoff")
    p.add_argument("--tol", type=float, help="small-strike tolerance")

    p = add("experiments", cmd_experiments, "run an experiment matrix")
    p.add_argument("--config", required=True, help="matrix config JSON")

    p = add("infer-market", cmd_infer_market, "bubble probability for an option chain")
    p.add_argument("--chain", required=True, help="CSV with maturity_years,strike,mid_price")
    p.add_argument("--spot", type=float)
    p.add_argument("--weights")
    p.add_argument("--train-on-the-fly", action="store_true")
    p.add_argument("--n-train", type=int, default=8000)
    _grid_flags(p)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = args.func(args)
    except BubbleDetectError as exc:
        print(json.dumps(exc.to_dict(), sort_keys=True), file=sys.stderr)
        return 2
    except (OSError, KeyError, ValueError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1
    _echo({"result": result})
    return 0


if __name__ == "__main__":
    sys.exit(main())

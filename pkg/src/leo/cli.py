"""Command-line entry point.

Every command resolves its settings as built-in defaults, then ``--config``
(a previously written echo), then explicit flags, and writes the resolved
settings next to its outputs. Wall-clock numbers always go to separate
timing files so the remaining outputs are reproducible byte for byte.

Exit codes: 0 success, 2 usage, 3 training abort, 4 I/O.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import baselines, hmc, learning, navsim, toy1d
from .errors import ConfigurationError, TrainingAbort
from .graph import SolverConfig
from .models import ThetaParams

log = logging.getLogger("leo")

EXIT_USAGE = 2
EXIT_ABORT = 3
EXIT_IO = 4

METHODS = ("leo", "perceptron", "nelder-mead", "surrogate")
LR_KEYS = ("lr", "samples", "temperature", "epochs", "optimizer", "temperature_decay")


class UsageError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get("LEO_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"LEO_SEED must be an integer, got {raw!r}") from None


def default_jobs() -> int:
    return os.cpu_count() or 1


# -- settings resolution --------------------------------------------------------

SKIP = ("config", "out", "func", "verbose", "command", "toy_command")


def resolve(command: str, defaults: dict, args: argparse.Namespace, skip=SKIP) -> dict:
    """defaults < config file < explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
        if loaded.get("command", command) != command:
            raise UsageError(f"config {args.config} was written by {loaded['command']!r}, not {command!r}")
        unknown = set(loaded) - set(defaults) - {"command"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update({k: v for k, v in loaded.items() if k != "command"})
    for k, v in vars(args).items():
        if k not in skip and v is not None:
            cfg[k] = v
    return {"command": command, **cfg}


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _mkdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- dataset-gen ------------------------------------------------------------------

def cmd_dataset_gen(args) -> int:
    defaults = {"id": None, "seed": default_seed(), "num_traj": 50, "steps": 300, "train_count": 30,
                "label_stay": 0.95, "sigma_odom": None, "sigma_gps": None}
    cfg = resolve("dataset-gen", defaults, args)
    if cfg["id"] is None:
        raise UsageError("dataset-gen requires --id (N1, N2, N3 or N4)")
    if not args.out:
        raise UsageError("dataset-gen requires -o/--out")
    kw = dict(dataset_id=navsim.DatasetId(cfg["id"]), num_traj=cfg["num_traj"], steps_T=cfg["steps"],
              train_count=cfg["train_count"], label_stay=cfg["label_stay"], seed=cfg["seed"])
    if cfg["sigma_odom"] is not None:
        kw["sigma_odom"] = cfg["sigma_odom"]
    if cfg["sigma_gps"] is not None:
        kw["sigma_gps"] = cfg["sigma_gps"]
    try:
        spec = navsim.GenSpec(**kw)
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid dataset spec: {exc}") from exc
    ds = navsim.generate(spec)
    navsim.save(ds, args.out)
    write_json(str(args.out) + ".config.json", cfg)
    print(json.dumps({"episodes": len(ds), "train": len(ds.train), "test": len(ds.test), "out": str(args.out)}))
    return 0


# -- train -------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "method": None,
    "dataset": None,
    "seed": None,
    "lr": 1e-2,
    "samples": 10,
    "temperature": 1.0,
    "epochs": 100,
    "optimizer": "adam",
    "temperature_decay": 1.0,
    "convergence_window": 10,
    "convergence_tol": 1e-3,
    "solver_tol": 1e-6,
    "solver_max_iters": 50,
    "init": "constant",
    "init_log_std": 0.0,
    "init_seed": 0,
    "init_low": -3.0,
    "init_high": 1.0,
    "budget_fevals": None,
    "nm_init_step": 0.5,
    "jobs": None,
}


def load_dataset(path) -> navsim.Dataset:
    try:
        return navsim.load(path)
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc


def initial_theta(cfg: dict, dataset_id) -> ThetaParams:
    if cfg["init"] == "constant":
        return navsim.model_theta(dataset_id, cfg["init_log_std"])
    if cfg["init"] == "random":
        return navsim.random_theta(dataset_id, cfg["init_seed"], cfg["init_low"], cfg["init_high"])
    raise UsageError(f"unknown init {cfg['init']!r}; use constant or random")


def leo_config(cfg: dict) -> learning.LeoConfig:
    return learning.LeoConfig(
        samples_S=cfg["samples"], temperature_T=cfg["temperature"], lr_eta=cfg["lr"], optimizer=cfg["optimizer"],
        max_epochs=cfg["epochs"], seed=cfg["seed"], convergence_window=cfg["convergence_window"],
        convergence_tol=cfg["convergence_tol"], temperature_decay=cfg["temperature_decay"], jobs=cfg["jobs"],
        solver=SolverConfig(tol=cfg["solver_tol"], max_iters=cfg["solver_max_iters"]),
    )


def cmd_train(args) -> int:
    cfg = resolve("train", TRAIN_DEFAULTS, args)
    if cfg["method"] not in METHODS:
        raise UsageError(f"method must be one of {METHODS}, got {cfg['method']!r}")
    if cfg["dataset"] is None:
        raise UsageError("train requires a dataset path")
    if not args.out:
        raise UsageError("train requires -o/--out")
    cfg["seed"] = default_seed() if cfg["seed"] is None else cfg["seed"]
    cfg["jobs"] = default_jobs() if cfg["jobs"] is None else cfg["jobs"]
    method = cfg["method"]
    if method == "surrogate":
        given = [k for k in LR_KEYS if getattr(args, k, None) is not None]
        if given:
            log.warning("surrogate fitting ignores %s", ", ".join("--" + k for k in given))
    if method == "perceptron":
        cfg["temperature"] = 0.0

    ds = load_dataset(cfg["dataset"])
    if not ds.episodes:
        raise UsageError(f"dataset {cfg['dataset']} is empty")
    did = ds.episodes[0].dataset_id
    train_set = [e.to_example() for e in ds.train]
    test_set = [e.to_example() for e in ds.test]
    theta0 = initial_theta(cfg, did)
    if cfg["budget_fevals"] is None:
        cfg["budget_fevals"] = cfg["epochs"] * len(train_set)
    out = _mkdir(args.out)
    write_json(out / "config.json", cfg)

    try:
        lc = leo_config(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        if method == "leo":
            theta, tlog = learning.train(train_set, theta0, lc)
        elif method == "perceptron":
            theta, tlog = baselines.perceptron_train(train_set, theta0, lc)
        elif method == "nelder-mead":
            need = (theta0.vector().size + 1) * len(train_set)
            if cfg["budget_fevals"] < need:
                raise UsageError(f"--budget-fevals {cfg['budget_fevals']} cannot cover the initial simplex ({need})")
            theta, tlog = baselines.blackbox_nelder_mead(
                train_set, theta0, cfg["budget_fevals"], cfg["nm_init_step"], lc.solver)
        else:
            theta = baselines.surrogate_fit(train_set, theta0)
            tlog = learning.TrainLog()
            tlog.append(epoch=0, fevals=0, theta=theta.vector().tolist())
    except TrainingAbort as exc:
        exc.log.to_jsonl(out / "trainlog.jsonl", out / "timing.jsonl")
        log.error("training aborted: %s", exc)
        return EXIT_ABORT

    theta.save(out / "theta.json")
    tlog.to_jsonl(out / "trainlog.jsonl", out / "timing.jsonl")
    metrics = {}
    if test_set:
        m = learning.evaluate(test_set, theta, lc.solver, cfg["jobs"])
        metrics = {k: v for k, v in learning.public_metrics(m).items() if k not in learning.TIMING_KEYS}
    metrics["fevals"] = tlog.fevals
    write_json(out / "metrics.json", metrics)
    print(json.dumps({k: metrics.get(k) for k in ("trans_rmse_mean", "rot_rmse_mean", "fevals")}))
    return 0


# -- eval --------------------------------------------------------------------------

def cmd_eval(args) -> int:
    defaults = {"theta": None, "dataset": None, "split": "test", "solver_tol": 1e-6, "solver_max_iters": 50,
                "jobs": None}
    cfg = resolve("eval", defaults, args)
    if cfg["theta"] is None or cfg["dataset"] is None:
        raise UsageError("eval requires a theta checkpoint and a dataset")
    cfg["jobs"] = default_jobs() if cfg["jobs"] is None else cfg["jobs"]
    try:
        theta = ThetaParams.load(cfg["theta"])
    except OSError as exc:
        raise OSError(f"cannot read theta {cfg['theta']}: {exc}") from exc
    ds = load_dataset(cfg["dataset"])
    try:
        episodes = ds.split(cfg["split"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    examples = [e.to_example() for e in episodes]
    if not examples:
        raise UsageError(f"split {cfg['split']!r} of {cfg['dataset']} is empty")
    solver = SolverConfig(tol=cfg["solver_tol"], max_iters=cfg["solver_max_iters"])
    try:
        m = learning.evaluate(examples, theta, solver, cfg["jobs"])
    except ConfigurationError as exc:
        raise UsageError(f"theta does not fit the dataset: {exc}") from exc
    metrics = {k: v for k, v in learning.public_metrics(m).items() if k not in learning.TIMING_KEYS}
    print(json.dumps({k: v for k, v in metrics.items() if k != "per_episode"}))
    if args.out:
        out = _mkdir(args.out)
        write_json(out / "config.json", cfg)
        write_json(out / "metrics.json", metrics)
        write_json(out / "timing.json", {k: m[k] for k in learning.TIMING_KEYS if k in m})
        with open(out / "trajectories.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["episode", "step", "x", "y", "theta", "gt_x", "gt_y", "gt_theta"])
            for ep, mean in zip(episodes, m.get("_means", [])):
                if mean is None:
                    continue
                for k, (p, q) in enumerate(zip(mean, ep.gt)):
                    wr.writerow([ep.index, k, *map(repr, map(float, p)), *map(repr, map(float, q))])
    return 0


# -- toy1d -------------------------------------------------------------------------

TOY_DEFAULTS = {f.name: f.default for f in dataclasses.fields(toy1d.ToyConfig)}
TOY_DEFAULTS.update(method="leo", inner="gn", init_scheme="zero", y_range=[-7.0, 4.0], x_scale=0.5, y_scale=0.03)


def toy_config(cfg: dict) -> toy1d.ToyConfig:
    names = {f.name for f in dataclasses.fields(toy1d.ToyConfig)}
    return toy1d.ToyConfig(**{k: v for k, v in cfg.items() if k in names})


def cmd_toy_train(args) -> int:
    cfg = resolve("toy1d-train", dict(TOY_DEFAULTS), args)
    if cfg["seed"] is None:
        cfg["seed"] = default_seed()
    if cfg["method"] not in ("leo", "unrolled"):
        raise UsageError("toy1d train --method must be leo or unrolled")
    if not args.out:
        raise UsageError("toy1d train requires -o/--out")
    try:
        tc = toy_config(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    out = _mkdir(args.out)
    write_json(out / "config.json", cfg)
    data = toy1d.make_data(tc.num_points)
    toy1d.write_data_csv(out / "data.csv", *data)
    w0 = toy1d.MlpWeights.init(tc.H, tc.seed, cfg["x_scale"], cfg["y_scale"])
    try:
        if cfg["method"] == "leo":
            w, tlog = toy1d.toy_leo_train(data, w0, tc)
        else:
            w, tlog = toy1d.toy_unrolled_train(data, w0, tc)
    except TrainingAbort as exc:
        exc.log.to_jsonl(out / "trainlog.jsonl", out / "timing.jsonl")
        return EXIT_ABORT
    ThetaParams({}, w).save(out / "theta.json")
    tlog.to_jsonl(out / "trainlog.jsonl", out / "timing.jsonl")
    grid = toy1d.Grid.from_config(tc)
    summary = toy1d.summarize(w, grid)
    summary["final_train_loss"] = tlog.records[-1]["train_loss"] if tlog.records else None
    write_json(out / "summary.json", summary)
    print(json.dumps({k: summary[k] for k in ("argmin_hit_rate", "median_basins", "final_train_loss")}))
    return 0


def cmd_toy_surface(args) -> int:
    defaults = {"theta": None, "grid_nx": 64, "grid_ny": 551, "y_range": [-7.0, 4.0]}
    cfg = resolve("toy1d-surface", defaults, args)
    if cfg["theta"] is None or not args.out:
        raise UsageError("toy1d surface requires a theta checkpoint and -o/--out")
    try:
        theta = ThetaParams.load(cfg["theta"])
    except OSError as exc:
        raise OSError(f"cannot read theta {cfg['theta']}: {exc}") from exc
    if theta.mlp is None:
        raise UsageError(f"{cfg['theta']} holds no MLP weights")
    grid = toy1d.Grid(cfg["grid_nx"], cfg["grid_ny"], tuple(cfg["y_range"]))
    toy1d.export_surface(theta.mlp, grid, args.out)
    write_json(str(args.out) + ".config.json", cfg)
    print(json.dumps({"rows": grid.nx * grid.ny, "out": str(args.out)}))
    return 0


# -- bench-sampler -------------------------------------------------------------------

def cmd_bench(args) -> int:
    defaults = {"dataset": None, "episode": 0, "samples": 200, "leapfrog": 10, "burn_in": None, "seed": None,
                "theta": None}
    cfg = resolve("bench-sampler", defaults, args)
    if cfg["dataset"] is None or not args.out:
        raise UsageError("bench-sampler requires a dataset and -o/--out")
    cfg["seed"] = default_seed() if cfg["seed"] is None else cfg["seed"]
    ds = load_dataset(cfg["dataset"])
    if not 0 <= cfg["episode"] < len(ds.episodes):
        raise UsageError(f"episode index {cfg['episode']} out of range (dataset has {len(ds.episodes)})")
    ep = ds.episodes[cfg["episode"]]
    theta = ThetaParams.load(cfg["theta"]) if cfg["theta"] else navsim.generating_theta(ds.spec) if ds.spec \
        else navsim.model_theta(ep.dataset_id)
    ex = ep.to_example()
    report = hmc.bench_samplers(ex.graph, theta, cfg["samples"], init=ex.init, seed=cfg["seed"],
                                leapfrog_L=cfg["leapfrog"], burn_in=cfg["burn_in"])
    timing = report.pop("timing")
    out = _mkdir(args.out)
    write_json(out / "config.json", cfg)
    write_json(out / "report.json", report)
    write_json(out / "timing.json", timing)
    print(json.dumps({**report, "speedup": timing["speedup"]}))
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="leo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("dataset-gen", help="generate a navigation dataset")
    g.add_argument("--id", choices=[d.value for d in navsim.DatasetId])
    g.add_argument("--seed", type=int)
    g.add_argument("--num-traj", dest="num_traj", type=int)
    g.add_argument("--steps", type=int)
    g.add_argument("--train-count", dest="train_count", type=int)
    g.add_argument("--label-stay", dest="label_stay", type=float)
    g.add_argument("--config")
    g.add_argument("-o", "--out")
    g.set_defaults(func=cmd_dataset_gen)

    t = sub.add_parser("train", help="fit theta on a dataset's train split")
    t.add_argument("method", nargs="?", choices=METHODS)
    t.add_argument("dataset", nargs="?")
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--samples", type=int)
    t.add_argument("--temperature", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--optimizer", choices=["adam", "sgd"])
    t.add_argument("--temperature-decay", dest="temperature_decay", type=float)
    t.add_argument("--convergence-window", dest="convergence_window", type=int)
    t.add_argument("--convergence-tol", dest="convergence_tol", type=float)
    t.add_argument("--solver-tol", dest="solver_tol", type=float)
    t.add_argument("--solver-max-iters", dest="solver_max_iters", type=int)
    t.add_argument("--init", choices=["constant", "random"])
    t.add_argument("--init-log-std", dest="init_log_std", type=float)
    t.add_argument("--init-seed", dest="init_seed", type=int)
    t.add_argument("--init-low", dest="init_low", type=float)
    t.add_argument("--init-high", dest="init_high", type=float)
    t.add_argument("--budget-fevals", dest="budget_fevals", type=int)
    t.add_argument("--nm-init-step", dest="nm_init_step", type=float)
    t.add_argument("--jobs", type=int)
    t.add_argument("--config")
    t.add_argument("-o", "--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a theta checkpoint on a split")
    e.add_argument("theta", nargs="?")
    e.add_argument("dataset", nargs="?")
    e.add_argument("--split", choices=["train", "test", "all"])
    e.add_argument("--solver-tol", dest="solver_tol", type=float)
    e.add_argument("--solver-max-iters", dest="solver_max_iters", type=int)
    e.add_argument("--jobs", type=int)
    e.add_argument("--config")
    e.add_argument("-o", "--out")
    e.set_defaults(func=cmd_eval)

    y = sub.add_parser("toy1d", help="1-D energy regression experiments")
    ysub = y.add_subparsers(dest="toy_command", required=True)
    yt = ysub.add_parser("train")
    yt.add_argument("--method", choices=["leo", "unrolled"])
    yt.add_argument("--inner", choices=["gn", "gd"])
    yt.add_argument("--init-scheme", dest="init_scheme", choices=["zero", "gt"])
    for name, typ in (("H", int), ("num_points", int), ("K", int), ("S", int), ("T", float), ("lr", float),
                      ("epochs", int), ("seed", int), ("gd_step", float), ("fd_h", float), ("grid_nx", int),
                      ("grid_ny", int), ("x_scale", float), ("y_scale", float)):
        yt.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    yt.add_argument("--y-range", dest="y_range", type=float, nargs=2)
    yt.add_argument("--config")
    yt.add_argument("-o", "--out")
    yt.set_defaults(func=cmd_toy_train)
    ys = ysub.add_parser("surface")
    ys.add_argument("theta", nargs="?")
    ys.add_argument("--nx", dest="grid_nx", type=int)
    ys.add_argument("--ny", dest="grid_ny", type=int)
    ys.add_argument("--y-range", dest="y_range", type=float, nargs=2)
    ys.add_argument("--config")
    ys.add_argument("-o", "--out")
    ys.set_defaults(func=cmd_toy_surface)

    b = sub.add_parser("bench-sampler", help="time Laplace vs HMC sampling on one episode")
    b.add_argument("dataset", nargs="?")
    b.add_argument("--episode", type=int)
    b.add_argument("--samples", type=int)
    b.add_argument("--leapfrog", type=int)
    b.add_argument("--burn-in", dest="burn_in", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--theta")
    b.add_argument("--config")
    b.add_argument("-o", "--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"leo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"leo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, navsim.DatasetParseError) as exc:
        print(f"leo: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

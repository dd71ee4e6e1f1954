"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data error (missing or malformed
input), 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from .data import DataError, load_dataset, save_dataset, split_dataset
from .estimator import SAHP
from .evaluation import (
    PredictionError, TrueModel, attention_map, evaluate, predict_next, qq_by_type, write_matrix_csv,
    write_qq_csv,
)
from .hawkes import ExpHawkes, HawkesParams, NumericalError
from .simulation import load_spec, simulate_dataset, synthetic_spec

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SEED_STREAMS = ("simulation", "split", "model")

logger = logging.getLogger("sahp")

# Defaults per command; --config files and explicit flags override them.
SAHP_DEFAULTS = {
    "model_dim": 16, "num_heads": 2, "num_layers": 2, "dropout": 0.1, "encoding": "time_shifted",
    "scale_similarity": False, "time_unit": "auto", "learning_rate": 1e-4, "warmup_steps": 500,
    "batch_size": 16, "max_epochs": 100, "early_stop_delta": 1e-3, "patience": 5, "mc_samples": 10,
}
# Reproduction uses a faster schedule; the plain train command keeps the
# library defaults.
REPRODUCE_SAHP = dict(SAHP_DEFAULTS, learning_rate=3e-3, warmup_steps=50, max_epochs=40)

DEFAULTS = {
    "simulate": {"spec": None, "horizon": 156.0, "n": 500, "split": None, "seed": 0, "out": None},
    "fit-hp": {"data": None, "split": "train", "max_iter": 1000, "tol": 1e-6, "shared_decay": False,
               "out": None},
    "train": dict(SAHP_DEFAULTS, data=None, seed=0, out=None),
    "evaluate": {"model": None, "data": None, "split": "test", "n_mc": 10, "seed": 0, "spec": None,
                 "attention": False, "out": None},
    "predict": {"model": None, "data": None, "split": "test", "out": None},
    "qq": {"model": None, "data": None, "spec": None, "split": "test", "out": None},
    "attn": {"model": None, "data": None, "split": "test", "out": None},
    "reproduce": dict(REPRODUCE_SAHP, seed=0, scale=1.0, horizon=156.0, n=500, n_mc=10, out=None),
}


class UsageError(Exception):
    pass


def named_seeds(seed: int, names=SEED_STREAMS) -> dict:
    """Independent integer seeds for named sub-streams of one root seed."""
    children = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


# -- helpers -----------------------------------------------------------------

def _write_config(path: Path, command: str, cfg: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n"
    path.write_text(text, encoding="utf-8")


def _config_path(out: str) -> Path:
    p = Path(out)
    return p.with_name(p.name + ".config.json")


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _load_data(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"data file not found: {path}")
    return load_dataset(path)


def _select(dataset, split):
    if split and dataset.splits is not None:
        return dataset.split(split)
    return list(dataset.sequences)


def load_model(path):
    """Fitted classic Hawkes parameters (``.json``) or a SAHP checkpoint."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    if p.suffix == ".json":
        return ExpHawkes.from_params(HawkesParams.load(p))
    return SAHP.load(p)


def _sahp_kwargs(cfg):
    return {k: cfg[k] for k in SAHP_DEFAULTS}


# -- commands ----------------------------------------------------------------

def cmd_simulate(cfg):
    _require(cfg, "out")
    spec = load_spec(cfg["spec"]) if cfg["spec"] else synthetic_spec()
    seeds = named_seeds(cfg["seed"])
    ds = simulate_dataset(spec, float(cfg["horizon"]), int(cfg["n"]), seeds["simulation"])
    if cfg["split"]:
        fractions = tuple(float(x) for x in str(cfg["split"]).split(","))
        ds = split_dataset(ds, fractions, seeds["split"])
    save_dataset(ds, cfg["out"])
    return [cfg["out"]]


def cmd_fit_hp(cfg):
    _require(cfg, "data", "out")
    ds = _load_data(cfg["data"])
    model = ExpHawkes(num_types=ds.num_types, max_iter=cfg["max_iter"], tol=cfg["tol"],
                      shared_decay=cfg["shared_decay"])
    model.fit(_select(ds, cfg["split"]))
    model.params_.save(cfg["out"])
    diag = str(cfg["out"]) + ".history.csv"
    with open(diag, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "nll_per_event"])
        writer.writerows((i, repr(float(v))) for i, v in model.history_)
    return [cfg["out"], diag]


def cmd_train(cfg):
    _require(cfg, "data", "out")
    ds = _load_data(cfg["data"])
    if ds.splits is None:
        raise DataError("training data must carry train/val split labels")
    model = SAHP(num_types=ds.num_types, random_state=named_seeds(cfg["seed"])["model"],
                 **_sahp_kwargs(cfg))
    model.fit(ds)
    model.save(cfg["out"])
    history = str(cfg["out"]) + ".history.csv"
    _write_history(model.history_, history)
    return [cfg["out"], history]


def _write_history(history, path):
    from .training import write_history_csv

    write_history_csv(history, path)


def cmd_evaluate(cfg):
    _require(cfg, "model", "data", "out")
    model = load_model(cfg["model"])
    ds = _load_data(cfg["data"])
    truth = load_spec(cfg["spec"]) if cfg["spec"] else None
    report = evaluate(model, _select(ds, cfg["split"]), cfg["n_mc"], cfg["seed"], truth=truth,
                      with_attention=bool(cfg["attention"]) and isinstance(model, SAHP))
    Path(cfg["out"]).write_text(report.to_json(), encoding="utf-8")
    return [cfg["out"]]


def cmd_predict(cfg):
    _require(cfg, "model", "data", "out")
    model = load_model(cfg["model"])
    ds = _load_data(cfg["data"])
    with open(cfg["out"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sequence", "predicted_time", "predicted_type"]
                        + [f"score_{u}" for u in range(model.num_types_)])
        for i, seq in enumerate(_select(ds, cfg["split"])):
            if len(seq) == 0:
                continue
            res = predict_next(model, seq)
            writer.writerow([i, repr(res.predicted_time), res.predicted_type]
                            + [repr(float(s)) for s in res.type_scores])
    return [cfg["out"]]


def cmd_qq(cfg):
    _require(cfg, "model", "data", "spec", "out")
    model = load_model(cfg["model"])
    ds = _load_data(cfg["data"])
    write_qq_csv(cfg["out"], qq_by_type(load_spec(cfg["spec"]), model, _select(ds, cfg["split"])))
    return [cfg["out"]]


def cmd_attn(cfg):
    _require(cfg, "model", "data", "out")
    model = load_model(cfg["model"])
    if not isinstance(model, SAHP):
        raise UsageError("attention maps need a SAHP checkpoint")
    ds = _load_data(cfg["data"])
    matrix, uniform = attention_map(model, _select(ds, cfg["split"]))
    if uniform:
        logger.warning("query types never observed, rows set uniform: %s", uniform)
    write_matrix_csv(cfg["out"], matrix)
    return [cfg["out"]]


def reproduce_synthetic(seed=0, scale=1.0, out_dir="reproduce", horizon=156.0, n=500, n_mc=10,
                        **sahp_overrides) -> dict:
    """Simulate the two-type benchmark process, fit the classic Hawkes
    baseline, train SAHP and write the comparison report and QQ data.

    ``scale`` multiplies the number of simulated sequences. Returns the paths
    of the written artifacts keyed by name.
    """
    if not (scale > 0 and math.isfinite(scale)):
        raise ValueError("scale must be a positive finite number")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = named_seeds(seed)
    sahp_cfg = dict(REPRODUCE_SAHP, **sahp_overrides)
    unknown = set(sahp_cfg) - set(SAHP_DEFAULTS)
    if unknown:
        raise ValueError(f"unknown SAHP options: {sorted(unknown)}")
    n_seq = max(int(round(n * scale)), 10)
    paths = {k: out / v for k, v in {
        "dataset": "dataset.jsonl", "hp": "hp_params.json", "sahp": "sahp.npz",
        "report": "report.json", "qq": "qq.csv", "history": "history.csv", "config": "config.json",
    }.items()}
    _write_config(paths["config"], "reproduce", {
        "seed": seed, "scale": scale, "horizon": horizon, "n": n, "n_mc": n_mc, **sahp_cfg,
    })

    def stage(name, fn):
        try:
            return fn()
        except Exception as exc:
            raise type(exc)(f"[{name}] {exc}") from exc

    spec = synthetic_spec()
    ds = stage("simulate", lambda: split_dataset(
        simulate_dataset(spec, horizon, n_seq, seeds["simulation"]), (0.8, 0.1, 0.1), seeds["split"]))
    save_dataset(ds, paths["dataset"])
    test = ds.split("test")

    hp = stage("fit-hp", lambda: ExpHawkes(num_types=2).fit(ds.split("train")))
    hp.params_.save(paths["hp"])

    sahp = stage("train", lambda: SAHP(num_types=2, random_state=seeds["model"], **sahp_cfg).fit(ds))
    sahp.save(paths["sahp"])
    _write_history(sahp.history_, paths["history"])

    reports = stage("evaluate", lambda: {
        "sahp": evaluate(sahp, test, n_mc, seed, truth=spec, with_attention=True),
        "hp": evaluate(hp, test, n_mc, seed, truth=spec),
        "true": evaluate(TrueModel(spec), test, n_mc, seed),
    })
    comparison = {name: r.nll_per_event for name, r in reports.items()}
    comparison["hp_minus_sahp"] = comparison["hp"] - comparison["sahp"]
    summary = {
        "seed": seed, "scale": scale, "num_sequences": n_seq,
        "split_sizes": ds.statistics()["split_sizes"],
        "time_unit": sahp.time_unit_,
        "nll_per_event": comparison,
        "reports": {name: r.to_dict() for name, r in reports.items()},
    }
    paths["report"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(paths["qq"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", "type", "percentile", "q_true", "q_est"])
        for name in ("sahp", "hp"):
            for u, pairs in enumerate(reports[name].qq_pairs):
                for p, (a, b) in zip(range(1, 100), pairs):
                    writer.writerow([name, u, p, repr(float(a)), repr(float(b))])
    return {k: str(v) for k, v in paths.items()}


def cmd_reproduce(cfg):
    if cfg["out"] is None:
        raise UsageError("missing required option: --out")
    kwargs = _sahp_kwargs(cfg)
    paths = reproduce_synthetic(cfg["seed"], float(cfg["scale"]), cfg["out"], float(cfg["horizon"]),
                                int(cfg["n"]), int(cfg["n_mc"]), **kwargs)
    return list(paths.values())


COMMANDS = {
    "simulate": cmd_simulate, "fit-hp": cmd_fit_hp, "train": cmd_train, "evaluate": cmd_evaluate,
    "predict": cmd_predict, "qq": cmd_qq, "attn": cmd_attn, "reproduce": cmd_reproduce,
}


# -- argument parsing ----------------------------------------------------------

def _add(p, name, type_=None, flag=False, choices=None):
    opt = "--" + name.replace("_", "-")
    if flag:
        p.add_argument(opt, dest=name, action="store_true", default=argparse.SUPPRESS)
    else:
        p.add_argument(opt, dest=name, type=type_, choices=choices, default=argparse.SUPPRESS)


def _add_sahp(p):
    for k in ("model_dim", "num_heads", "num_layers", "warmup_steps", "batch_size", "max_epochs",
              "patience", "mc_samples"):
        _add(p, k, int)
    for k in ("dropout", "learning_rate", "early_stop_delta"):
        _add(p, k, float)
    _add(p, "encoding", str, choices=["time_shifted", "conventional"])
    _add(p, "scale_similarity", flag=True)
    _add(p, "time_unit", str)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sahp", description="Self-attentive Hawkes process toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    help_ = {
        "simulate": "simulate a multivariate Hawkes dataset",
        "fit-hp": "fit the exponential Hawkes baseline",
        "train": "train a SAHP model",
        "evaluate": "evaluate a model on a dataset split",
        "predict": "predict the next event of each sequence",
        "qq": "QQ data of true vs estimated intensities",
        "attn": "type-to-type attention map",
        "reproduce": "run the synthetic benchmark end to end",
    }
    parsers = {name: sub.add_parser(name, help=h) for name, h in help_.items()}
    for name, p in parsers.items():
        p.add_argument("--config", default=None, help="JSON file with option values")
        p.add_argument("--workers", type=int, default=1, help="maximum CPU threads")
        _add(p, "out", str)
    s = parsers["simulate"]
    _add(s, "spec", str), _add(s, "horizon", float), _add(s, "n", int), _add(s, "seed", int)
    _add(s, "split", str)
    f = parsers["fit-hp"]
    _add(f, "data", str), _add(f, "split", str), _add(f, "max_iter", int), _add(f, "tol", float)
    _add(f, "shared_decay", flag=True)
    t = parsers["train"]
    _add(t, "data", str), _add(t, "seed", int)
    _add_sahp(t)
    for name in ("evaluate", "predict", "qq", "attn"):
        p = parsers[name]
        _add(p, "model", str), _add(p, "data", str), _add(p, "split", str)
    e = parsers["evaluate"]
    _add(e, "n_mc", int), _add(e, "seed", int), _add(e, "spec", str), _add(e, "attention", flag=True)
    _add(parsers["qq"], "spec", str)
    r = parsers["reproduce"]
    _add(r, "seed", int), _add(r, "scale", float), _add(r, "horizon", float), _add(r, "n", int)
    _add(r, "n_mc", int)
    _add_sahp(r)
    return parser


def resolve_config(command, flags: dict, config_file=None) -> dict:
    cfg = dict(DEFAULTS[command])
    if config_file:
        path = Path(config_file)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {config_file}")
        loaded = json.loads(path.read_text(encoding="utf-8"))
        loaded.pop("command", None)
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update(flags)
    if "time_unit" in cfg and cfg["time_unit"] != "auto":
        try:
            cfg["time_unit"] = float(cfg["time_unit"])
        except ValueError as exc:
            raise UsageError("--time-unit must be a number or 'auto'") from exc
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "workers", "verbose")}
    try:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        torch.set_num_threads(args.workers)
        cfg = resolve_config(args.command, flags, args.config)
        if args.command != "reproduce" and cfg.get("out"):
            _write_config(_config_path(cfg["out"]), args.command, cfg)
        outputs = COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"sahp {args.command}: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DataError, json.JSONDecodeError, KeyError) as exc:
        print(f"sahp {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, PredictionError, FloatingPointError, ArithmeticError) as exc:
        print(f"sahp {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"sahp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for path in outputs:
        logger.info("wrote %s", path)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

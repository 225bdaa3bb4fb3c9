"""Command-line entry point.

Every subcommand writes only under ``--out DIR`` and records a ``run.json``
that, passed back through ``--config``, reproduces the run's CSVs.

Exit codes: 0 ok, 1 usage error, 2 runtime error, 3 diverged training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, bounds, kernels
from .data import GenConfig, generate, load_dataset, save_dataset, split
from .experiments import (DIAG_HEADER, ExperimentConfig, Pool, grand_means, isotonic_deviation, paired_gaps,
                          prepare_pool, sweep_n, sweep_xstar_fraction, variance_diagnostics, write_csv,
                          write_sweep)
from .models import MODEL_KINDS, ArchConfig, build_model, checkpoint_document, from_checkpoint
from .serialization import read_json, write_json
from .tensor import RngState
from .training import TrainConfig, evaluate, train, write_metrics_csv

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3

RUN_DEFAULTS = {"model": "lupi", "n": None, "fraction": 1.0, "data": None, "checkpoint": None}
EXPERIMENT_FIELDS = ("pool_size", "data_seed", "sizes", "seeds", "models", "fractions", "fraction_n",
                     "diagnostics_n")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration document


def default_document() -> dict:
    exp = ExperimentConfig()
    return {
        "gen": dataclasses.asdict(exp.gen),
        "train": dataclasses.asdict(exp.train),
        "arch": dataclasses.asdict(exp.arch),
        "experiment": {k: getattr(exp, k) for k in EXPERIMENT_FIELDS},
        "run": dict(RUN_DEFAULTS),
    }


def _jsonable(doc):
    return json.loads(json.dumps(doc, default=list))


def merge_document(base: dict, update: dict, origin: str) -> dict:
    """Overlay ``update`` on ``base``; unknown sections or keys are errors."""
    out = {k: dict(v) for k, v in base.items()}
    for section, values in update.items():
        if section not in out or not isinstance(values, dict):
            raise UsageError(f"unknown config section {section!r} in {origin}")
        for key, value in values.items():
            if key not in out[section]:
                raise UsageError(f"unknown config key '{section}.{key}' in {origin}")
            out[section][key] = value
    return out


def _coerce(text: str, current, name: str):
    try:
        if isinstance(current, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError
            return text.lower() in ("true", "1")
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, (list, tuple)):
            if text.strip().startswith("["):
                return json.loads(text)
            kind = type(current[0]) if current else float
            return [kind(t) if kind is not str else t for t in text.split(",") if t]
        if current is None:
            try:
                return json.loads(text)
            except json.JSONDecodeError:
                return text
        return text
    except (ValueError, json.JSONDecodeError):
        raise UsageError(f"cannot parse value {text!r} for --{name}") from None


def apply_dotted(doc: dict, extras: list[str]) -> dict:
    """Apply ``--section.key value`` / ``--section.key=value`` overrides."""
    doc = {k: dict(v) for k, v in doc.items()}
    i = 0
    while i < len(extras):
        tok = extras[i]
        if not tok.startswith("--") or "." not in tok.split("=")[0]:
            raise UsageError(f"unrecognized argument: {tok}")
        name, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extras):
                raise UsageError(f"flag --{name} expects a value")
            value = extras[i + 1]
            i += 1
        section, _, key = name.partition(".")
        if section not in doc or key not in doc[section]:
            raise UsageError(f"unrecognized argument: --{name}")
        doc[section][key] = _coerce(value, doc[section][key], name)
        i += 1
    return doc


def _build(cls, values: dict, section: str):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in values:
            v = values[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {section} config: {exc}") from None


def experiment_from(doc: dict) -> ExperimentConfig:
    exp = {k: tuple(v) if isinstance(v, list) else v for k, v in doc["experiment"].items()}
    try:
        return ExperimentConfig(gen=_build(GenConfig, doc["gen"], "gen"),
                                train=_build(TrainConfig, doc["train"], "train"),
                                arch=_build(ArchConfig, doc["arch"], "arch"), **exp)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid experiment config: {exc}") from None


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lupi", description="Heteroscedastic-dropout training under privileged information.")
    p.add_argument("--version", action="version", version=f"lupi {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(sp, out_required=True, seed=True):
        sp.add_argument("--out", required=out_required, help="output directory (all files go here)")
        sp.add_argument("--config", help="JSON config document or a previous run.json")
        sp.add_argument("--jobs", type=int, default=1, help="maximum concurrent training runs")
        if seed:
            sp.add_argument("--seed", type=int, help="seed (default: $LUPI_SEED, then config)")
        return sp

    g = common(sub.add_parser("gen-data", help="generate a synthetic triplet dataset"))
    g.add_argument("--n", type=int, help="number of samples (default: experiment.pool_size)")
    g.add_argument("--fraction", type=float, help="fraction of records carrying x*")

    t = common(sub.add_parser("train", help="train one model"))
    t.add_argument("--model", choices=MODEL_KINDS)
    t.add_argument("--n", type=int, help="training-set size (nested prefix of the pool)")
    t.add_argument("--fraction", type=float, help="fraction of training records with x*")
    t.add_argument("--data", help="dataset JSON from gen-data (default: generate the pool)")

    e = common(sub.add_parser("eval", help="evaluate a checkpoint"), seed=False)
    e.add_argument("--checkpoint", required=False)
    e.add_argument("--data", help="dataset JSON (default: the pool's test split)")

    common(sub.add_parser("sweep-n", help="training-set size sweep"), seed=False)
    common(sub.add_parser("sweep-xstar", help="privileged-fraction sweep"), seed=False)

    d = common(sub.add_parser("diagnostics", help="per-unit variance statistics"), seed=False)
    d.add_argument("--checkpoint")
    d.add_argument("--data", help="dataset JSON (default: the pool's validation split)")

    b = sub.add_parser("bounds", help="bound calculators and checks")
    bsub = b.add_subparsers(dest="op", parser_class=_Parser, required=True)

    def bcommon(sp):
        sp.add_argument("--out", help="optional output directory for bounds.csv")
        sp.add_argument("--config", help=argparse.SUPPRESS)
        return sp

    b1 = bcommon(bsub.add_parser("prop1"))
    b1.add_argument("--lambda", dest="lambda_l", type=float, required=True)
    b1.add_argument("--eps", type=float, required=True)
    b1.add_argument("--L", type=float, required=True)
    b1.add_argument("--K", type=float, required=True)
    b1.add_argument("--delta", type=float, required=True)
    b1.add_argument("--n", type=int, required=True)

    b2 = bcommon(bsub.add_parser("prop2"))
    for name in ("C", "xi", "M_w", "M_z", "P", "delta"):
        b2.add_argument(f"--{name}", type=float, required=True)
    b2.add_argument("--n", type=int, required=True)
    b2.add_argument("--eps_y", type=float, default=0.0)

    bp = bcommon(bsub.add_parser("paths"))
    bp.add_argument("--input-dim", type=int, default=6)
    bp.add_argument("--layers", default="affine:5,relu,affine:4,relu,maxpool:2,affine:3",
                    help="comma list of affine:W, relu, maxpool:K")
    bp.add_argument("--seed", type=int)

    bb = bcommon(bsub.add_parser("bernstein"))
    bb.add_argument("--ensemble", choices=bounds.ENSEMBLES, default="rademacher_scalar")
    bb.add_argument("--d", type=int, default=1)
    bb.add_argument("--N", type=int, default=16)
    bb.add_argument("--R", type=float, default=1.0)
    bb.add_argument("--delta", type=float, default=0.05)
    bb.add_argument("--trials", type=int, default=10_000)
    bb.add_argument("--seed", type=int)

    bc = bcommon(bsub.add_parser("cover"))
    bc.add_argument("--dim", type=int, required=True)
    bc.add_argument("--diameter", type=float, required=True)
    bc.add_argument("--eps", type=float, required=True)

    br = bcommon(bsub.add_parser("ratefit"))
    br.add_argument("--gaps", required=True, help="gaps CSV written by sweep-n")
    br.add_argument("--model", required=True)
    return p


# ---------------------------------------------------------------------------
# helpers


def _env_seed():
    raw = os.environ.get("LUPI_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"LUPI_SEED must be an integer, got {raw!r}") from None


def _resolve(args, extras) -> dict:
    doc = default_document()
    env_seed = _env_seed()
    if env_seed is not None:
        doc["train"]["seed"] = env_seed
    if getattr(args, "config", None):
        try:
            loaded = read_json(args.config)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if "config" in loaded and "command" in loaded:  # a run.json
            loaded = loaded["config"]
        doc = merge_document(doc, loaded, args.config)
    doc = apply_dotted(doc, extras)
    run = doc["run"]
    for key in ("model", "n", "fraction", "data", "checkpoint"):
        value = getattr(args, key, None)
        if value is not None:
            run[key] = value
    return _jsonable(doc)


def _versions() -> dict:
    import scipy

    return {"lupi": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _write_run_json(out: Path, command: str, argv: list[str], doc: dict, seeds, jobs: int | None = None) -> None:
    write_json(out / "run.json", {"command": command, "argv": argv, "config": doc, "seeds": seeds,
                                  "versions": _versions(), "backend": kernels.BACKEND, "jobs": jobs})


def _pool(doc: dict, exp: ExperimentConfig) -> Pool:
    path = doc["run"]["data"]
    if path:
        ds = load_dataset(path)
        return Pool(*split(ds, exp.gen.split, exp.data_seed))
    return prepare_pool(exp)


def _fmt(v: float) -> str:
    return f"{v:.4f}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, doc, out, argv) -> int:
    if args.seed is not None:
        doc["experiment"]["data_seed"] = args.seed
    elif _env_seed() is not None and not args.config:
        doc["experiment"]["data_seed"] = _env_seed()
    exp = experiment_from(doc)
    n = doc["run"]["n"] or exp.pool_size
    ds = generate(exp.gen, n, doc["run"]["fraction"], exp.data_seed)
    save_dataset(out / "dataset.json", ds)
    _write_run_json(out, "gen-data", argv, doc, [exp.data_seed])
    print(f"wrote {len(ds)} records to {out / 'dataset.json'}")
    return EXIT_OK


def cmd_train(args, doc, out, argv) -> int:
    if args.seed is not None:
        doc["train"]["seed"] = args.seed
    exp = experiment_from(doc)
    run = doc["run"]
    pool = _pool(doc, exp)
    train_set = pool.train
    seed = exp.train.seed
    if run["n"] is not None:
        from .experiments import nested_subset

        train_set = nested_subset(pool.train, int(run["n"]), seed)
    if run["fraction"] < 1.0:
        train_set = train_set.with_fraction(run["fraction"], seed)
    model = build_model(run["model"], exp.arch, seed=seed)
    record = train(model, train_set, pool.val, exp.train, pool.test)
    write_metrics_csv(out / "metrics.csv", record)
    write_json(out / "checkpoint.json", checkpoint_document(model))
    write_json(out / "final.json", {"status": record.status, "last_finite_epoch": record.last_finite_epoch,
                                    **record.final})
    _write_run_json(out, "train", argv, doc, [seed])
    print(json.dumps({"status": record.status, **record.final}, sort_keys=True))
    return EXIT_DIVERGED if record.status == "diverged" else EXIT_OK


def _load_checkpoint(doc):
    path = doc["run"]["checkpoint"]
    if not path:
        raise UsageError("--checkpoint is required")
    try:
        return from_checkpoint(read_json(path))
    except OSError as exc:
        raise RuntimeError(f"cannot read checkpoint {path}: {exc}") from None


def cmd_eval(args, doc, out, argv) -> int:
    model = _load_checkpoint(doc)
    if doc["run"]["data"]:
        ds = load_dataset(doc["run"]["data"])
    else:
        ds = prepare_pool(experiment_from(doc)).test
    result = evaluate(model, ds)
    write_json(out / "eval.json", result)
    _write_run_json(out, "eval", argv, doc, [])
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_diagnostics(args, doc, out, argv) -> int:
    model = _load_checkpoint(doc)
    if doc["run"]["data"]:
        ds = load_dataset(doc["run"]["data"])
    else:
        ds = prepare_pool(experiment_from(doc)).val
    rows = variance_diagnostics(model, ds)
    write_csv(out / "diagnostics.csv", DIAG_HEADER, rows)
    _write_run_json(out, "diagnostics", argv, doc, [])
    print(json.dumps(grand_means(rows), sort_keys=True))
    return EXIT_OK


def cmd_sweep_n(args, doc, out, argv) -> int:
    exp = experiment_from(doc)
    rows = sweep_n(exp, jobs=args.jobs)
    write_sweep(out, rows, "sweep_n")
    summary = {}
    base = "noxstar" if "noxstar" in exp.models else None
    for n in exp.sizes:
        entry = {m: float(np.mean([r["top1"] for r in rows if r["model"] == m and r["n"] == n])) for m in exp.models}
        if base and "lupi" in exp.models:
            entry["paired_gaps"] = paired_gaps(rows, "lupi", base, n)
        summary[str(n)] = entry
    write_json(out / "summary.json", summary)
    _write_run_json(out, "sweep-n", argv, doc, list(exp.seeds), args.jobs)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_DIVERGED if any(r["status"] == "diverged" for r in rows) else EXIT_OK


def cmd_sweep_xstar(args, doc, out, argv) -> int:
    exp = experiment_from(doc)
    rows = sweep_xstar_fraction(exp, jobs=args.jobs)
    write_sweep(out, rows, "sweep_xstar")
    lupi = [r for r in rows if r["model"] == "lupi"]
    summary = {"isotonic": isotonic_deviation([r["fraction"] for r in lupi], [r["top1"] for r in lupi])}
    write_json(out / "summary.json", summary)
    _write_run_json(out, "sweep-xstar", argv, doc, list(exp.seeds), args.jobs)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_DIVERGED if any(r["status"] == "diverged" for r in rows) else EXIT_OK


def _parse_layers(text: str, input_dim: int, rng: RngState) -> list:
    layers, width = [], input_dim
    for i, tok in enumerate(t.strip() for t in text.split(",") if t.strip()):
        name, _, arg = tok.partition(":")
        if name == "affine":
            out = int(arg)
            layers.append(rng.child(i).normal((out, width)))
            width = out
        elif name == "relu":
            layers.append(bounds.RELU)
        elif name == "maxpool":
            k = int(arg)
            layers.append(bounds.MaxPool(k))
            width = -(-width // k)
        else:
            raise UsageError(f"unknown layer {tok!r} in --layers")
    return layers


def cmd_bounds(args, argv) -> int:
    op = args.op
    if op == "prop1":
        inp = bounds.Prop1Inputs(args.lambda_l, args.eps, args.L, args.K, args.delta, args.n)
        value = bounds.prop1_bound(inp)
        inputs = dataclasses.asdict(inp)
        print(_fmt(value))
    elif op == "prop2":
        inp = bounds.Prop2Inputs(args.C, args.xi, args.M_w, args.M_z, args.P, args.delta, args.n, args.eps_y)
        value = bounds.prop2_bound(inp)
        inputs = dataclasses.asdict(inp)
        print(f"{value:.5f}")
    elif op == "cover":
        value = bounds.covering_number_grid(args.dim, args.diameter, args.eps)
        inputs = {"dim": args.dim, "diameter": args.diameter, "eps": args.eps}
        print(value)
    elif op == "paths":
        seed = args.seed if args.seed is not None else (_env_seed() or 0)
        rng = RngState(seed)
        layers = _parse_layers(args.layers, args.input_dim, rng.child(0))
        x = rng.child(1).normal(args.input_dim)
        dec = bounds.enumerate_paths(layers, x)
        err = float(np.max(np.abs(dec.path_sum - dec.forward))) if dec.forward.size else 0.0
        inputs = {"input_dim": args.input_dim, "layers": args.layers, "seed": seed}
        value = dec.P
        print(json.dumps({"P": dec.P, "M_w": dec.M_w, "path_sum": dec.path_sum.tolist(),
                          "forward": dec.forward.tolist(), "max_abs_error": err}))
    elif op == "bernstein":
        seed = args.seed if args.seed is not None else (_env_seed() or 0)
        cfg = bounds.BernsteinConfig(args.ensemble, args.d, args.N, args.R, args.delta, args.trials)
        res = bounds.bernstein_check(cfg, RngState(seed))
        inputs = {**dataclasses.asdict(cfg), "seed": seed}
        value = res.empirical_violation_rate
        print(json.dumps(res._asdict(), sort_keys=True))
    else:  # ratefit
        res = bounds.rate_fit(args.gaps, args.model)
        inputs = {"gaps": args.gaps, "model": args.model}
        value = res.slope
        print(json.dumps(res._asdict(), sort_keys=True))
    if args.out:
        out = Path(args.out)
        header, row = bounds.bounds_csv_row(op, inputs, value)
        out.mkdir(parents=True, exist_ok=True)
        import csv

        with open(out / "bounds.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        write_json(out / "run.json", {"command": f"bounds {op}", "argv": argv, "config": inputs, "seeds": [],
                                      "versions": _versions(), "backend": kernels.BACKEND})
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "diagnostics": cmd_diagnostics,
            "sweep-n": cmd_sweep_n, "sweep-xstar": cmd_sweep_xstar}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
        if args.command == "bounds":
            if extras:
                raise UsageError(f"unrecognized arguments: {' '.join(extras)}")
            return cmd_bounds(args, argv)
        doc = _resolve(args, extras)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, doc, out, argv)
    except UsageError as exc:
        print(f"lupi: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, RuntimeError, OSError, OverflowError, KeyError) as exc:
        print(f"lupi: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Seeded experiment sweeps over training-set size and privileged-input
fraction, plus per-unit variance diagnostics.

Every sweep cell is an independent ``(model, n, fraction, seed)`` training
run. Cells can fan out over processes; rows are always reassembled in cell
order so CSV output does not depend on ``jobs``.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .data import GenConfig, TripletDataset, generate, split
from .models import MODEL_KINDS, ArchConfig, Classifier, build_model
from .training import TrainConfig, predict_logits, train
from .tensor import RngState

SWEEP_HEADER = ("model", "n", "fraction", "seed", "top1", "status")
GAPS_HEADER = ("model", "n", "fraction", "seed", "train_top1", "top1")
DIAG_HEADER = ("unit_index", "group", "mean_sigma", "count")
GROUPS = ("correct", "misclassified")


@dataclass(frozen=True)
class ExperimentConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    pool_size: int = 6000
    data_seed: int = 0
    sizes: tuple = (100, 200, 400, 800, 1600, 3200)
    seeds: tuple = (0, 1, 2, 3, 4)
    models: tuple = ("lupi", "noxstar")
    fractions: tuple = (0.0, 0.02, 0.1, 0.5, 1.0)
    fraction_n: int = 800
    diagnostics_n: int = 800

    def __post_init__(self):
        if list(self.sizes) != sorted(self.sizes) or any(s < 1 for s in self.sizes):
            raise ValueError("sizes must be positive and ascending")
        for m in self.models:
            if m not in MODEL_KINDS:
                raise ValueError(f"unknown model {m!r}; choose from {MODEL_KINDS}")
        if any(not 0 <= f <= 1 for f in self.fractions):
            raise ValueError("fractions must lie in [0, 1]")
        if self.arch.input_dim != self.gen.dim:
            object.__setattr__(self, "arch", replace(self.arch, input_dim=self.gen.dim))
        if self.arch.num_classes != self.gen.num_classes:
            object.__setattr__(self, "arch", replace(self.arch, num_classes=self.gen.num_classes))


class Pool(NamedTuple):
    train: TripletDataset
    val: TripletDataset
    test: TripletDataset


def prepare_pool(config: ExperimentConfig) -> Pool:
    """Generate the full-PI pool and split it into train/val/test."""
    ds = generate(config.gen, config.pool_size, 1.0, config.data_seed)
    return Pool(*split(ds, config.gen.split, config.data_seed))


class Cell(NamedTuple):
    model: str
    n: int
    fraction: float
    seed: int
    diagnostics: bool = False


def nested_subset(train_pool: TripletDataset, n: int, seed: int) -> TripletDataset:
    """First ``n`` records of a seed-specific shuffle, so sizes are nested."""
    if n > len(train_pool):
        raise ValueError(f"n={n} exceeds the training pool ({len(train_pool)})")
    order = RngState(seed).child(20).permutation(len(train_pool))
    return train_pool.subset(order[:n])


def run_cell(cell: Cell, config: ExperimentConfig, pool: Pool) -> dict:
    sub = nested_subset(pool.train, cell.n, cell.seed)
    if cell.fraction < 1.0:
        sub = sub.with_fraction(cell.fraction, cell.seed)
    model = build_model(cell.model, config.arch, seed=cell.seed)
    record = train(model, sub, pool.val, replace(config.train, seed=cell.seed), pool.test)
    out = {
        "model": cell.model,
        "n": cell.n,
        "fraction": cell.fraction,
        "seed": cell.seed,
        "top1": record.final["test_top1"],
        "train_top1": record.final["train_top1"],
        "status": record.status,
    }
    if cell.diagnostics:
        out["diagnostics"] = variance_diagnostics(model, pool.val)
    return out


_WORKER: dict = {}


def _init_worker(config: ExperimentConfig, pool: Pool) -> None:
    _WORKER["config"] = config
    _WORKER["pool"] = pool


def _worker_cell(cell: Cell) -> dict:
    return run_cell(cell, _WORKER["config"], _WORKER["pool"])


def _key(cell: Cell) -> tuple:
    return (cell.model, cell.n, cell.fraction, cell.seed)


def run_cells(cells: Sequence[Cell], config: ExperimentConfig, pool: Pool | None = None, jobs: int = 1,
              cache: dict | None = None) -> list[dict]:
    """Run ``cells`` in order. ``cache`` maps (model, n, fraction, seed) to
    finished rows; hits are reused and new rows are added to it. Only use a
    cache with one ``config`` and ``pool``."""
    cache = {} if cache is None else cache
    todo = [c for c in cells if _key(c) not in cache or (c.diagnostics and "diagnostics" not in cache[_key(c)])]
    pool = pool if pool is not None or not todo else prepare_pool(config)
    if jobs <= 1 or len(todo) <= 1:
        done = [run_cell(c, config, pool) for c in todo]
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(config, pool)) as ex:
            done = list(ex.map(_worker_cell, todo))
    for c, row in zip(todo, done):
        cache[_key(c)] = row
    out = []
    for c in cells:
        row = dict(cache[_key(c)])
        if not c.diagnostics:
            row.pop("diagnostics", None)
        out.append(row)
    return out


def sweep_n(config: ExperimentConfig, pool: Pool | None = None, jobs: int = 1, cache: dict | None = None) -> list[dict]:
    """Train every (size, seed, model) cell on nested prefixes with full PI."""
    cells = [
        Cell(m, n, 1.0, s, diagnostics=(m == "lupi" and n == config.diagnostics_n))
        for n in config.sizes
        for s in config.seeds
        for m in config.models
    ]
    return run_cells(cells, config, pool, jobs, cache)


def sweep_xstar_fraction(config: ExperimentConfig, pool: Pool | None = None, jobs: int = 1,
                         baseline: str | None = "noxstar", cache: dict | None = None) -> list[dict]:
    """One LUPI run per (fraction, seed) at ``fraction_n`` samples, plus
    optional baseline rows (fraction recorded as 0, trained with full PI
    available, which a baseline ignores)."""
    cells = [Cell("lupi", config.fraction_n, float(f), s) for f in config.fractions for s in config.seeds]
    if baseline:
        cells += [Cell(baseline, config.fraction_n, 1.0, s) for s in config.seeds]
    rows = run_cells(cells, config, pool, jobs, cache)
    for row in rows:
        if row["model"] != "lupi":
            row["fraction"] = 0.0
    return rows


# ---------------------------------------------------------------------------
# diagnostics


def variance_diagnostics(model: Classifier, split_: TripletDataset) -> list[dict]:
    """Mean Sigma per dropout unit for correctly and incorrectly classified
    records, units sorted by overall mean Sigma (descending).

    Sites are concatenated into one unit axis. Rows with ``unit_index = -1``
    hold each group's grand mean over units. An empty group yields NaN means
    with count 0.
    """
    if not model.var_heads:
        raise ValueError(f"model kind {model.kind.name!r} has no variance heads")
    rows = np.flatnonzero(split_.present)
    if rows.size == 0:
        raise ValueError("split has no records with privileged input")
    x, xs, y = split_.x[rows], split_.xstar[rows], split_.y[rows]
    pred = np.argmax(predict_logits(model, x), axis=1)
    correct = pred == y
    sig = np.concatenate([s.data for s in model.sigmas(xs)], axis=1)
    order = np.argsort(-sig.mean(axis=0), kind="stable")
    out = []
    for group, mask in zip(GROUPS, (correct, ~correct)):
        count = int(mask.sum())
        means = sig[mask].mean(axis=0) if count else np.full(sig.shape[1], np.nan)
        grand = float(means.mean()) if count else math.nan
        out.append({"unit_index": -1, "group": group, "mean_sigma": grand, "count": count})
        for u in order:
            out.append({"unit_index": int(u), "group": group, "mean_sigma": float(means[u]), "count": count})
    return out


def grand_means(diag_rows: Iterable[dict]) -> dict:
    return {r["group"]: float(r["mean_sigma"]) for r in diag_rows if int(r["unit_index"]) == -1}


# ---------------------------------------------------------------------------
# post-processing


def isotonic_deviation(fractions: Sequence[float], values: Sequence[float]) -> dict:
    """Distance of mean accuracy per fraction from its best nondecreasing fit.

    Returns ``{"rms": ..., "max": ..., "fit": [...]}``; zero deviation means
    the trend is monotone.
    """
    from scipy.optimize import isotonic_regression

    fr = np.asarray(fractions, dtype=float)
    vals = np.asarray(values, dtype=float)
    levels = np.unique(fr)
    means = np.array([vals[fr == f].mean() for f in levels])
    counts = np.array([np.count_nonzero(fr == f) for f in levels], dtype=float)
    fit = isotonic_regression(means, weights=counts, increasing=True).x
    dev = means - fit
    return {"fractions": levels.tolist(), "means": means.tolist(), "fit": fit.tolist(),
            "rms": float(np.sqrt(np.average(dev**2, weights=counts))), "max": float(np.abs(dev).max())}


def paired_gaps(rows: Sequence[dict], model: str, baseline: str, n: int, fraction: float = 1.0,
                baseline_fraction: float | None = None) -> dict[int, float]:
    """Per-seed top1(model) - top1(baseline) at one size."""
    bf = fraction if baseline_fraction is None else baseline_fraction

    def pick(name, f):
        return {int(r["seed"]): float(r["top1"]) for r in rows
                if r["model"] == name and int(r["n"]) == n and math.isclose(float(r["fraction"]), f)}

    a, b = pick(model, fraction), pick(baseline, bf)
    return {s: a[s] - b[s] for s in sorted(a.keys() & b.keys())}


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, header: Sequence[str], rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in header])


def write_sweep(out_dir, rows: Sequence[dict], stem: str) -> list[Path]:
    """``<stem>.csv`` (sweep schema) and ``<stem>_gaps.csv`` (train/test top1)."""
    out_dir = Path(out_dir)
    paths = [out_dir / f"{stem}.csv", out_dir / f"{stem}_gaps.csv"]
    write_csv(paths[0], SWEEP_HEADER, rows)
    write_csv(paths[1], GAPS_HEADER, rows)
    diag = [r for r in rows if "diagnostics" in r]
    if diag:
        p = out_dir / f"{stem}_diagnostics.csv"
        write_csv(p, ("seed", *DIAG_HEADER), [{"seed": r["seed"], **d} for r in diag for d in r["diagnostics"]])
        paths.append(p)
    return paths


def config_dict(config: ExperimentConfig) -> dict:
    return asdict(config)

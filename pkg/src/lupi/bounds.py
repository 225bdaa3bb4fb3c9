"""Generalization-bound calculators and numerical checks of their ingredients.

* ``prop1_bound`` -- covering-number bound, O(sqrt(1/n)).
* ``prop2_bound`` -- variance-controlled bound, O(1/n).
* ``enumerate_paths`` -- writes a ReLU/max-pool network output as a sum over
  input-to-output weight paths gated by binary activation patterns.
* ``bernstein_check`` -- Monte-Carlo violation rate of the matrix Bernstein
  tail bound on random zero-mean ensembles.
* ``covering_number_grid`` and ``rate_fit`` -- helpers for feeding and
  diagnosing the bounds.

All logarithms are natural.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import kernels
from .tensor import RngState

MAX_PATHS = 10**6
MAX_COVER = 2**63


# ---------------------------------------------------------------------------
# generalization bounds


@dataclass(frozen=True)
class Prop1Inputs:
    lambda_l: float
    eps: float
    L: float
    K: float
    delta: float
    n: int

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("n must be positive")
        if min(self.lambda_l, self.eps, self.L, self.K) < 0:
            raise ValueError("lambda_l, eps, L and K must be nonnegative")
        if not 0 < self.delta <= 1:
            raise ValueError(f"delta must be in (0, 1], got {self.delta}")


@dataclass(frozen=True)
class Prop2Inputs:
    C: float
    xi: float
    M_w: float
    M_z: float
    P: float
    delta: float
    n: int
    eps_y: float = 0.0

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("n must be positive")
        if min(self.C, self.xi, self.M_w, self.M_z, self.eps_y) < 0 or self.P < 1:
            raise ValueError("C, xi, M_w, M_z, eps_y must be nonnegative and P >= 1")
        if not 0 < self.delta <= 1:
            raise ValueError(f"delta must be in (0, 1], got {self.delta}")
        if self.xi > self.delta:
            raise ValueError(f"side condition xi <= delta violated (xi={self.xi}, delta={self.delta})")


def prop1_bound(inp: Prop1Inputs) -> float:
    """``lambda_l * eps + L * sqrt((2 K log 2 + 2 log(1/delta)) / n)``."""
    root = math.sqrt((2.0 * inp.K * math.log(2.0) + 2.0 * math.log(1.0 / inp.delta)) / inp.n)
    return inp.lambda_l * inp.eps + inp.L * root


def prop2_bound(inp: Prop2Inputs) -> float:
    """``2C((xi+1) log(1/delta) + M_w (3 xi + M_z) log(P/delta)) / (3n) + (2C+1) eps_y``."""
    inner = (inp.xi + 1.0) * math.log(1.0 / inp.delta) + inp.M_w * (3.0 * inp.xi + inp.M_z) * math.log(inp.P / inp.delta)
    return 2.0 * inp.C * inner / (3.0 * inp.n) + (2.0 * inp.C + 1.0) * inp.eps_y


# ---------------------------------------------------------------------------
# path decomposition


@dataclass(frozen=True)
class MaxPool:
    """Non-overlapping 1-d max-pool over consecutive groups of ``k`` units."""

    k: int


RELU = "relu"


class PathDecomposition(NamedTuple):
    P: int
    M_w: float
    path_sum: np.ndarray
    forward: np.ndarray
    gates: np.ndarray  # uint8 per path
    weights: np.ndarray  # product of weights per path
    source: np.ndarray  # input index per path
    target: np.ndarray  # output index per path


def _as_layer(item):
    if isinstance(item, str):
        if item != RELU:
            raise ValueError(f"unknown layer {item!r}")
        return RELU
    if isinstance(item, MaxPool):
        return item
    if isinstance(item, tuple) and item and item[0] == "maxpool":
        return MaxPool(int(item[1]))
    W = np.asarray(item, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError("affine layers are given as [out x in] weight matrices (no bias)")
    return W


def probe_forward(layers: Sequence, x) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    for layer in map(_as_layer, layers):
        if isinstance(layer, np.ndarray):
            h = layer @ h
        elif layer is RELU:
            h = np.where(h > 0, h, 0.0)
        else:
            h = np.array([h[i : i + layer.k].max() for i in range(0, h.size, layer.k)])
    return h


def _stages(layers: Sequence, x: np.ndarray):
    """Per-stage CSR (indptr, dst, weight, gate) plus the network output."""
    h = x
    stages = []
    for layer in map(_as_layer, layers):
        width = h.size
        if isinstance(layer, np.ndarray):
            out, n_in = layer.shape
            if n_in != width:
                raise ValueError(f"affine layer expects {n_in} inputs, got {width}")
            indptr = np.arange(width + 1, dtype=np.int64) * out
            dst = np.tile(np.arange(out, dtype=np.int64), width)
            weight = layer.T.reshape(-1).copy()
            gate = np.ones(width * out, dtype=np.uint8)
            h = layer @ h
        elif layer is RELU:
            indptr = np.arange(width + 1, dtype=np.int64)
            dst = np.arange(width, dtype=np.int64)
            weight = np.ones(width)
            gate = (h > 0).astype(np.uint8)
            h = np.where(h > 0, h, 0.0)
        else:
            k = layer.k
            groups = [np.arange(i, min(i + k, width)) for i in range(0, width, k)]
            winners = np.array([g[np.argmax(h[g])] for g in groups])
            indptr = np.arange(width + 1, dtype=np.int64)
            dst = np.arange(width, dtype=np.int64) // k
            weight = np.ones(width)
            gate = np.zeros(width, dtype=np.uint8)
            gate[winners] = 1
            h = h[winners]
        stages.append((indptr, dst, weight, gate))
    return stages, h


def count_paths(stages, n_inputs: int) -> int:
    counts = None
    for indptr, dst, _, _ in reversed(stages):
        width = indptr.size - 1
        if counts is None:
            counts = np.ones(int(dst.max()) + 1 if dst.size else 0, dtype=object)
        per_edge = counts[dst] if dst.size else np.zeros(0, dtype=object)
        counts = np.array([sum(per_edge[indptr[u] : indptr[u + 1]]) for u in range(width)], dtype=object)
    return int(sum(counts)) if counts is not None else n_inputs


def enumerate_paths(layers: Sequence, x, max_paths: int = MAX_PATHS) -> PathDecomposition:
    """Enumerate all input-to-output paths of a bias-free ReLU/max-pool network.

    ``layers`` holds [out x in] weight arrays, ``"relu"`` and ``MaxPool(k)``.
    A path's gate is 1 iff every ReLU on it is active (pre-activation > 0)
    and every max-pool on it selects it; ``path_sum`` is
    ``sum_p x[src_p] * gate_p * w_p`` per output and equals the forward pass.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    stages, out = _stages(layers, x)
    P = count_paths(stages, x.size)
    if P > max_paths:
        raise ValueError(f"network has {P} paths (limit {max_paths}); use a smaller probe network")
    if stages:
        indptr = np.concatenate([s[0] for s in stages])
        offsets = np.cumsum([0] + [s[0].size for s in stages]).astype(np.int64)
        edge_base = np.cumsum([0] + [s[1].size for s in stages[:-1]])
        # globalise edge indices inside each stage's indptr
        indptr = np.concatenate([s[0] + base for s, base in zip(stages, edge_base)]).astype(np.int64)
        dst = np.concatenate([s[1] for s in stages]).astype(np.int64)
        weight = np.concatenate([s[2] for s in stages]).astype(np.float64)
        gate = np.concatenate([s[3] for s in stages]).astype(np.uint8)
    else:
        indptr = np.zeros(0, dtype=np.int64)
        offsets = np.zeros(1, dtype=np.int64)
        dst = np.zeros(0, dtype=np.int64)
        weight = np.zeros(0)
        gate = np.zeros(0, dtype=np.uint8)
    src, end, w, g = kernels.enumerate_paths(x.size, P, indptr, offsets, dst, weight, gate)
    contrib = x[src] * g * w
    path_sum = np.bincount(end, weights=contrib, minlength=out.size)
    M_w = float(np.max(np.abs(w))) if w.size else 0.0
    return PathDecomposition(P, M_w, path_sum, out, g, w, src, end)


# ---------------------------------------------------------------------------
# matrix Bernstein


ENSEMBLES = ("rademacher_scalar", "diagonal_sign", "matrix_rademacher")


@dataclass(frozen=True)
class BernsteinConfig:
    ensemble: str = "rademacher_scalar"
    d: int = 1
    num_matrices: int = 16
    R: float = 1.0
    delta: float = 0.05
    trials: int = 10_000

    def __post_init__(self):
        if self.ensemble not in ENSEMBLES:
            raise ValueError(f"unknown ensemble {self.ensemble!r}; choose from {ENSEMBLES}")
        if self.d < 1 or self.num_matrices < 1 or self.trials < 1 or not self.R > 0:
            raise ValueError("d, num_matrices, trials and R must be positive")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        if self.ensemble == "rademacher_scalar" and self.d != 1:
            raise ValueError("rademacher_scalar ensemble is 1x1 (d=1)")


class BernsteinResult(NamedTuple):
    empirical_violation_rate: float
    bound_value: float
    gamma: float
    R: float
    tolerance: float
    derived_bound: float
    in_regime: bool  # bound_value <= gamma


def _series_matrices(config: BernsteinConfig, rng: RngState) -> np.ndarray:
    """Fixed symmetric coefficients A_i with spectral norm exactly R."""
    A = rng.normal((config.num_matrices, config.d, config.d))
    A = 0.5 * (A + np.transpose(A, (0, 2, 1)))
    norms = np.abs(np.linalg.eigvalsh(A)).max(axis=1)
    return A * (config.R / norms)[:, None, None]


def bernstein_check(config: BernsteinConfig, rng: RngState, chunk: int = 2000) -> BernsteinResult:
    """Violation rate of ``lambda_max(sum M_i) <= ((3 gamma + R) / 6) log(d / delta)``.

    Ensembles (all zero-mean, ``lambda_max(M_i) <= R`` by construction):

    ``rademacher_scalar``  M_i = +-R
    ``diagonal_sign``      M_i = R * diag(+-1, ..., +-1), independent signs
    ``matrix_rademacher``  M_i = s_i A_i, fixed symmetric A_i with ||A_i|| = R

    ``derived_bound`` is the value obtained by solving the Tropp tail bound in
    the t <= gamma regime directly, 2 (gamma + R/3) log(d / delta).
    """
    d, N, R = config.d, config.num_matrices, config.R
    if config.ensemble == "matrix_rademacher":
        A = _series_matrices(config, rng.child(0))
        if np.linalg.eigvalsh(A).max() > R * (1 + 1e-12):
            raise ValueError("ensemble construction violates lambda_max(M_i) <= R")
        gamma = math.sqrt(float(np.linalg.eigvalsh(np.einsum("nij,njk->ik", A, A)).max()))
    else:
        gamma = math.sqrt(N) * R  # E[M_i^2] = R^2 I

    bound = (3.0 * gamma + R) / 6.0 * math.log(d / config.delta)
    derived = 2.0 * (gamma + R / 3.0) * math.log(d / config.delta)

    violations = 0
    draw = rng.child(1)
    done = 0
    while done < config.trials:
        t = min(chunk, config.trials - done)
        if config.ensemble == "matrix_rademacher":
            signs = draw.integers(0, 2, (t, N)) * 2.0 - 1.0
            sums = np.einsum("tn,nij->tij", signs, A)
            lam = np.linalg.eigvalsh(sums)[:, -1]
        else:
            signs = draw.integers(0, 2, (t, N, d)) * 2.0 - 1.0
            lam = (R * signs.sum(axis=1)).max(axis=1)
        violations += int(np.count_nonzero(lam > bound))
        done += t
    rate = violations / config.trials
    tol = config.delta + 3.0 * math.sqrt(config.delta / config.trials)
    return BernsteinResult(rate, bound, gamma, R, tol, derived, bound <= gamma)


SHIPPED_ENSEMBLES = (
    BernsteinConfig("rademacher_scalar", d=1, num_matrices=16, R=1.0, delta=0.05, trials=10_000),
    BernsteinConfig("diagonal_sign", d=4, num_matrices=16, R=1.0, delta=0.05, trials=10_000),
)


# ---------------------------------------------------------------------------
# covering numbers and rate diagnostics


def covering_number_grid(dim: int, diameter: float, eps: float) -> int:
    """Grid upper bound ``ceil(diameter / (2 eps / sqrt(dim)))^dim`` on the
    l2 covering number of a hypercube."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    if dim < 1 or diameter < 0:
        raise ValueError("dim must be >= 1 and diameter >= 0")
    per_axis = max(1, math.ceil(diameter / (2.0 * eps / math.sqrt(dim))))
    if dim * math.log2(per_axis) >= 63:
        raise OverflowError(
            f"covering number {per_axis}^{dim} exceeds 2^63; use a larger eps or a lower dimension"
        )
    K = per_axis**dim
    if K >= MAX_COVER:
        raise OverflowError(f"covering number {per_axis}^{dim} exceeds 2^63; use a larger eps or a lower dimension")
    return K


class RateFit(NamedTuple):
    model: str
    slope: float
    stderr: float
    intercept: float
    points: int


def rate_fit(rows: Iterable[dict] | str | Path, model: str) -> RateFit:
    """OLS slope of log(train_top1 - test_top1) against log(n) for one model.

    ``rows`` is a CSV path or an iterable of dicts with keys ``model``, ``n``,
    ``seed``, ``train_top1`` and ``top1``. Gaps are clamped at 1e-4.
    """
    if isinstance(rows, (str, Path)):
        with open(rows, newline="") as fh:
            rows = list(csv.DictReader(fh))
    pts = [r for r in rows if r["model"] == model and r.get("status", "ok") == "ok"]
    sizes = {int(float(r["n"])) for r in pts}
    seeds = {r["seed"] for r in pts}
    if len(sizes) < 4 or len(seeds) < 3:
        raise ValueError(f"rate_fit needs >= 4 sizes and >= 3 seeds for {model!r} (got {len(sizes)}, {len(seeds)})")
    n = np.array([float(r["n"]) for r in pts])
    gap = np.maximum(np.array([float(r["train_top1"]) - float(r["top1"]) for r in pts]), 1e-4)
    if np.ptp(gap) == 0:
        raise ValueError("generalization gaps are constant; slope is undefined")
    from scipy.stats import linregress

    fit = linregress(np.log(n), np.log(gap))
    return RateFit(model, float(fit.slope), float(fit.stderr), float(fit.intercept), len(pts))


def bounds_csv_row(op: str, inputs: dict, value) -> tuple[list[str], list]:
    header = ["op", *inputs.keys(), "value"]
    return header, [op, *inputs.values(), value]


def inputs_dict(obj) -> dict:
    return asdict(obj)

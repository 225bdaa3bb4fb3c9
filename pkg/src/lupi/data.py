"""Synthetic cluttered-prototype triplets (x, x*, y) and IDX file ingestion.

Each class owns a prototype: a fixed set of grid cells with intensities in
[0.5, 1]. A sample places its class prototype at a small random offset,
overlays fragments of *other* classes' prototypes as clutter, adds pixel
noise and clips. The privileged view keeps only the prototype support
(everything else blacked out), so it carries the label signal without the
clutter.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .serialization import decode_array, encode_array, read_json, write_json
from .tensor import RngState

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DATASET_VERSION = 1


class IdxError(ValueError):
    pass


class WrongMagicError(IdxError):
    pass


class TruncatedPayloadError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenConfig:
    num_classes: int = 10
    grid: int = 16
    support: int = 24
    value_low: float = 0.5
    value_high: float = 1.0
    fragments: int = 3
    fragment_size: int = 8
    noise_std: float = 0.1
    jitter: int = 1
    clip_max: float = 1.5
    split: tuple[float, float, float] = (0.6, 0.1, 0.3)

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(f) for f in self.split))
        if self.support > self.grid * self.grid:
            raise ValueError("prototype support does not fit the grid")
        if self.fragment_size > self.support:
            raise ValueError("fragment_size cannot exceed the prototype support")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.num_classes < 1 or self.jitter < 0 or self.fragments < 0:
            raise ValueError("num_classes must be >= 1; jitter and fragments >= 0")
        if self.fragments > 0 and self.num_classes < 2:
            raise ValueError("clutter fragments need at least two classes")

    @property
    def dim(self) -> int:
        return self.grid * self.grid


@dataclass
class TripletDataset:
    x: np.ndarray  # [n, d]
    xstar: np.ndarray  # [n, d]; zero rows where absent
    present: np.ndarray  # [n] bool
    y: np.ndarray  # [n] int
    masks: np.ndarray  # [n, d] 0/1
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.meta.get("num_classes", int(self.y.max()) + 1 if len(self) else 0))

    def subset(self, idx) -> "TripletDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return TripletDataset(self.x[idx], self.xstar[idx], self.present[idx], self.y[idx], self.masks[idx], dict(self.meta))

    def with_fraction(self, fraction: float, seed: int) -> "TripletDataset":
        """Same records, with privileged input kept on ``floor(fraction * n)`` of them."""
        present = presence_flags(len(self), fraction, seed)
        xstar = np.where(present[:, None], self.x * self.masks, 0.0)
        meta = dict(self.meta, xstar_fraction=fraction)
        return TripletDataset(self.x, xstar, present, self.y, self.masks, meta)


# ---------------------------------------------------------------------------
# generation


def make_prototypes(config: GenConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Class prototypes as (cells [C, support] flat indices, values [C, support]).

    Cells are drawn from the interior that stays on-grid under any jitter
    when possible. Derived only from ``seed``, never from ``n``.
    """
    rng = RngState(seed).child(1)
    g, j = config.grid, config.jitter
    lo, hi = (j, g - j) if g - 2 * j > 0 and (g - 2 * j) ** 2 >= config.support else (0, g)
    rr, cc = np.meshgrid(np.arange(lo, hi), np.arange(lo, hi), indexing="ij")
    interior = (rr * g + cc).reshape(-1)
    cells = np.empty((config.num_classes, config.support), dtype=np.int64)
    values = np.empty((config.num_classes, config.support))
    for c in range(config.num_classes):
        cells[c] = np.sort(rng.choice(interior, size=config.support, replace=False))
        values[c] = rng.uniform(config.value_low, config.value_high, config.support)
    return cells, values


def _place(cells: np.ndarray, rng: RngState, span: int, g: int, what: str) -> np.ndarray:
    """Shift ``cells`` by a uniform offset in [-span, span]^2 that keeps them on the grid."""
    r, c = cells // g, cells % g
    lo_r, hi_r = max(-span, -int(r.min())), min(span, g - 1 - int(r.max()))
    lo_c, hi_c = max(-span, -int(c.min())), min(span, g - 1 - int(c.max()))
    if lo_r > hi_r or lo_c > hi_c:
        raise PlacementError(f"no on-grid placement for {what} on a {g}x{g} grid within offset {span}")
    dr = int(rng.integers(lo_r, hi_r + 1))
    dc = int(rng.integers(lo_c, hi_c + 1))
    return (r + dr) * g + (c + dc)


def presence_flags(n: int, fraction: float, seed: int) -> np.ndarray:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"xstar_fraction must be in [0, 1], got {fraction}")
    order = RngState(seed).child(3).permutation(n)
    flags = np.zeros(n, dtype=bool)
    flags[order[: int(np.floor(fraction * n))]] = True
    return flags


def generate(config: GenConfig, n: int, xstar_fraction: float, seed: int) -> TripletDataset:
    if n < config.num_classes:
        raise ValueError(f"n={n} must be >= num_classes={config.num_classes}")
    if not 0.0 <= xstar_fraction <= 1.0:
        raise ValueError(f"xstar_fraction must be in [0, 1], got {xstar_fraction}")
    g, d, C = config.grid, config.dim, config.num_classes
    cells, values = make_prototypes(config, seed)
    rng = RngState(seed).child(2)

    x = np.zeros((n, d))
    masks = np.zeros((n, d))
    y = rng.integers(0, C, n)
    frag_span = g  # fragments may land anywhere on the grid
    for i in range(n):
        c = int(y[i])
        placed = _place(cells[c], rng, config.jitter, g, f"class {c} prototype")
        img = np.zeros(d)
        img[placed] = values[c]
        masks[i, placed] = 1.0
        for _ in range(config.fragments):
            other = int(rng.integers(0, C - 1))
            other += other >= c
            pick = rng.choice(config.support, size=config.fragment_size, replace=False)
            frag = _place(cells[other][pick], rng, frag_span, g, "clutter fragment")
            np.add.at(img, frag, values[other][pick])
        if config.noise_std > 0:
            img = img + rng.normal(d) * config.noise_std
        x[i] = np.clip(img, 0.0, config.clip_max)

    present = presence_flags(n, xstar_fraction, seed)
    xstar = np.where(present[:, None], x * masks, 0.0)
    meta = {
        "num_classes": C,
        "grid": g,
        "seed": int(seed),
        "xstar_fraction": float(xstar_fraction),
        "config": asdict(config),
        "prototype_cells": cells.tolist(),
        "prototype_values": values.tolist(),
    }
    return TripletDataset(x, xstar, present, y.astype(np.int64), masks, meta)


# ---------------------------------------------------------------------------
# splitting


def _allocate(count: int, fractions: Sequence[float]) -> list[int]:
    raw = [count * f for f in fractions]
    base = [int(np.floor(r + 1e-9)) for r in raw]
    rem = count - sum(base)
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - base[k]), k))
    for k in order[:rem]:
        base[k] += 1
    return base


def split(dataset: TripletDataset, fractions: Sequence[float], seed: int, stratify: bool = True):
    """Seeded, optionally stratified, partition into len(fractions) parts.

    A part with a positive fraction that ends up empty is an error; a zero
    fraction yields an empty part.
    """
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be nonnegative and sum to 1, got {fractions}")
    rng = RngState(seed).child(4)
    n = len(dataset)
    parts: list[list[int]] = [[] for _ in fractions]
    groups = [np.flatnonzero(dataset.y == c) for c in np.unique(dataset.y)] if stratify else [np.arange(n)]
    for members in groups:
        members = members[rng.permutation(members.size)]
        start = 0
        for k, size in enumerate(_allocate(members.size, fractions)):
            parts[k].extend(members[start : start + size].tolist())
            start += size
    out = []
    for k, idx in enumerate(parts):
        if fractions[k] > 0 and not idx:
            raise ValueError(f"split {k} (fraction {fractions[k]}) would hold no samples")
        idx = np.asarray(idx, dtype=np.intp)
        out.append(dataset.subset(idx[rng.permutation(idx.size)]))
    return tuple(out)


# ---------------------------------------------------------------------------
# IDX


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, kind: str) -> tuple[tuple[int, ...], bytes]:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedPayloadError(f"{path}: file shorter than the magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise WrongMagicError(f"{path}: wrong magic 0x{found:08x} for {kind} file (expected 0x{magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedPayloadError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims, dtype=np.int64))
    payload = raw[header:]
    if len(payload) < need:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, dimensions {dims} need {need}")
    return dims, payload[:need]


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be [n, rows, cols]")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", IMAGE_MAGIC))
        fh.write(struct.pack(">3I", *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", LABEL_MAGIC))
        fh.write(struct.pack(">I", labels.size))
        fh.write(labels.tobytes())


def load_idx(images_path, labels_path) -> TripletDataset:
    dims, pixels = _read_idx(images_path, IMAGE_MAGIC, "image")
    (n_labels,), labels = _read_idx(labels_path, LABEL_MAGIC, "label")
    if dims[0] != n_labels:
        raise CountMismatchError(f"{dims[0]} images but {n_labels} labels")
    n, rows, cols = dims
    x = np.frombuffer(pixels, dtype=np.uint8).reshape(n, rows * cols).astype(np.float64) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    meta = {
        "num_classes": int(y.max()) + 1 if n else 0,
        "grid": int(rows),
        "source": "idx",
        "xstar_fraction": 0.0,
    }
    return TripletDataset(x, np.zeros_like(x), np.zeros(n, dtype=bool), y, np.zeros_like(x), meta)


# ---------------------------------------------------------------------------
# persistence


def save_dataset(path, ds: TripletDataset) -> None:
    write_json(
        path,
        {
            "format_version": DATASET_VERSION,
            "arrays": {
                "x": encode_array(ds.x),
                "xstar": encode_array(ds.xstar),
                "present": encode_array(ds.present.astype(np.float64)),
                "y": encode_array(ds.y.astype(np.float64)),
                "masks": encode_array(ds.masks),
            },
            "meta": ds.meta,
        },
    )


def load_dataset(path) -> TripletDataset:
    doc = read_json(path)
    if doc.get("format_version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset format_version {doc.get('format_version')!r}")
    a = {k: decode_array(v) for k, v in doc["arrays"].items()}
    return TripletDataset(a["x"], a["xstar"], a["present"] > 0.5, a["y"].astype(np.int64), a["masks"], doc["meta"])


def config_replace(config: GenConfig, **changes) -> GenConfig:
    return replace(config, **changes)

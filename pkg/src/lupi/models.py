"""The privileged-information classifier and its baselines.

All four model kinds share the same x -> logits path::

    x -> [affine, relu] x2 (trunk) -> site 0 -> affine, relu -> site 1 -> affine -> logits

and differ only in what happens at the two dropout sites during training:

``lupi``       heteroscedastic dropout, variance predicted from trunk(x*)
``noxstar``    nothing (identity)
``gdropout``   fixed-variance Gaussian dropout, sigma^2 = (1 - p) / p
``multitask``  identity at the sites, plus an auxiliary head regressing trunk(x*)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .layers import (
    AffineLayer,
    HeteroDropoutConfig,
    cross_entropy,
    gaussian_dropout_sigma,
    hetero_dropout,
    ib_penalty,
    variance_head_forward,
)
from .serialization import decode_array, encode_array, read_json, write_json
from .tensor import RngState, ShapeError, Tensor, as_tensor, detach, relu, scatter_rows, square, take_rows, tmean, tsum

MODEL_KINDS = ("lupi", "noxstar", "gdropout", "multitask")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    input_dim: int = 256
    trunk: tuple[int, ...] = (128, 128)
    head_hidden: int = 64
    num_classes: int = 10
    var_hidden: int = 64

    def __post_init__(self):
        object.__setattr__(self, "trunk", tuple(int(t) for t in self.trunk))
        if len(self.trunk) < 1 or min(self.trunk) < 1 or self.input_dim < 1:
            raise ValueError("architecture widths must be positive")

    @property
    def site_widths(self) -> tuple[int, int]:
        return (self.trunk[-1], self.head_hidden)

    def fingerprint(self, kind: str) -> str:
        blob = json.dumps({"kind": kind, **asdict(self)}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class BaselineKind:
    name: str
    drop_prob: float = 0.5
    lambda_mt: float = 0.1

    def __post_init__(self):
        if self.name not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.name!r}; choose from {MODEL_KINDS}")
        if self.name == "gdropout" and not 0.0 < self.drop_prob < 1.0:
            raise ValueError(f"drop_prob must be in (0, 1), got {self.drop_prob}")
        if self.name == "multitask" and not self.lambda_mt > 0:
            raise ValueError(f"lambda_mt must be > 0, got {self.lambda_mt}")


class LossParts(NamedTuple):
    total: Tensor
    ce: Tensor
    penalty: Tensor


@dataclass
class Classifier:
    arch: ArchConfig
    kind: BaselineKind
    trunk: list[AffineLayer]
    head: list[AffineLayer]
    var_heads: list[list[AffineLayer]] = field(default_factory=list)
    aux: list[AffineLayer] = field(default_factory=list)
    dropout: HeteroDropoutConfig = field(default_factory=HeteroDropoutConfig)
    seed: int = 0

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for group, layers in (("trunk", self.trunk), ("head", self.head), ("aux", self.aux)):
            for i, layer in enumerate(layers):
                out[f"{group}.{i}.W"] = layer.W
                out[f"{group}.{i}.b"] = layer.b
        for s, vh in enumerate(self.var_heads):
            for i, layer in enumerate(vh):
                out[f"var.{s}.{i}.W"] = layer.W
                out[f"var.{s}.{i}.b"] = layer.b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def x_path_parameters(self) -> list[Tensor]:
        return [p for layer in self.trunk + self.head for p in layer.parameters()]

    def privileged_parameters(self) -> list[Tensor]:
        return [p for vh in self.var_heads for layer in vh for p in layer.parameters()] + [
            p for layer in self.aux for p in layer.parameters()
        ]

    def decay_mask(self) -> dict[str, bool]:
        """Which parameters receive weight decay: weights only, never biases,
        and never the output layer of a variance head."""
        mask = {}
        for name in self.named_parameters():
            parts = name.split(".")
            is_weight = parts[-1] == "W"
            var_output = parts[0] == "var" and int(parts[2]) == len(self.var_heads[int(parts[1])]) - 1
            mask[name] = is_weight and not var_output
        return mask

    # -- forward passes -----------------------------------------------------

    def embed(self, x) -> Tensor:
        h = as_tensor(x)
        if h.shape[-1] != self.arch.input_dim:
            raise ShapeError("embed", h.shape, (self.arch.input_dim,), "input width")
        for layer in self.trunk:
            h = relu(layer(h))
        return h

    def _head(self, h: Tensor, site) -> Tensor:
        h = site(0, h)
        h = relu(self.head[0](h))
        h = site(1, h)
        return self.head[1](h)

    def forward_eval(self, x) -> Tensor:
        """Marginalized prediction: the mean path only, no noise, no privileged input."""
        return self._head(self.embed(x), lambda i, h: h)

    def sigmas(self, xstar) -> list[Tensor]:
        if not self.var_heads:
            return []
        e = self.embed(xstar)
        return [variance_head_forward(e, vh, self.dropout) for vh in self.var_heads]

    def forward_train(self, x, xstar=None, rng: RngState | None = None, present=None, eps=None):
        """Stochastic training pass.

        ``present`` flags which rows carry privileged input (default: all rows
        when ``xstar`` is given). Rows without it use a unit multiplier.
        ``eps`` freezes the site noise (one array per site). Returns
        ``(logits, sigmas)`` where ``sigmas`` holds one [n_present x width]
        tensor per site, empty when no row has privileged input.
        """
        x = as_tensor(x)
        n = x.shape[0]
        name = self.kind.name
        rows = _present_rows(n, xstar, present)
        if xstar is not None and as_tensor(xstar).shape != x.shape:
            raise ShapeError("forward_train", x.shape, as_tensor(xstar).shape, "x and x* must match")

        if name == "gdropout":
            var = gaussian_dropout_sigma(self.kind.drop_prob) ** 2

            def site(i, h):
                e = None if eps is None else eps[i]
                return hetero_dropout(h, Tensor(np.full(h.shape, var)), rng, "train", eps=e)

            return self._head(self.embed(x), site), []

        if name != "lupi" or rows.size == 0:
            return self.forward_eval(x), []

        xs = take_rows(as_tensor(xstar), rows)
        sig_present = self.sigmas(xs)
        full = rows.size == n and np.array_equal(rows, np.arange(n))
        sig_full = sig_present if full else [scatter_rows(s, rows, n) for s in sig_present]

        def site(i, h):
            e = None if eps is None else eps[i]
            return hetero_dropout(h, sig_full[i], rng, "train", eps=e)

        return self._head(self.embed(x), site), sig_present

    def loss(self, x, y, xstar=None, beta: float = 1.0, rng: RngState | None = None, present=None, eps=None,
             samples: int = 1) -> LossParts:
        """Cross-entropy plus the per-site variance penalty (or the auxiliary
        regression loss for the multitask baseline).

        With ``samples > 1`` the cross-entropy is averaged over that many
        independent noise draws.
        """
        logits, sigmas = self.forward_train(x, xstar, rng, present, eps)
        ce = cross_entropy(logits, y)
        noisy = self.kind.name == "gdropout" or bool(sigmas)
        if samples > 1 and eps is None and noisy:
            for _ in range(1, samples):
                ce = ce + cross_entropy(self.forward_train(x, xstar, rng, present)[0], y)
            ce = ce * (1.0 / samples)
        if self.kind.name == "multitask":
            penalty = self._aux_loss(x, xstar, present)
        elif sigmas:
            penalty = ib_penalty(sigmas[0], beta)
            for s in sigmas[1:]:
                penalty = penalty + ib_penalty(s, beta)
        else:
            penalty = Tensor(0.0)
        return LossParts(ce + penalty, ce, penalty)

    def _aux_loss(self, x, xstar, present) -> Tensor:
        x = as_tensor(x)
        rows = _present_rows(x.shape[0], xstar, present)
        if rows.size == 0:
            return Tensor(0.0)
        pred = self.aux[0](self.embed(take_rows(x, rows)))
        target = detach(self.embed(take_rows(as_tensor(xstar), rows)))
        return tmean(tsum(square(pred - target), axis=1)) * self.kind.lambda_mt

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        write_json(path, checkpoint_document(self))

    @classmethod
    def load(cls, path) -> "Classifier":
        return from_checkpoint(read_json(path))


def _present_rows(n: int, xstar, present) -> np.ndarray:
    if xstar is None:
        return np.zeros(0, dtype=np.intp)
    if present is None:
        return np.arange(n)
    present = np.asarray(present, dtype=bool)
    if present.shape != (n,):
        raise ShapeError("present", (n,), present.shape, "one flag per row")
    return np.flatnonzero(present)


def build_model(kind: BaselineKind | str, arch: ArchConfig | None = None, seed: int = 0,
                dropout: HeteroDropoutConfig | None = None) -> Classifier:
    """Initialise a model. Every group draws from its own keyed substream, so
    the x-path weights are identical across kinds for the same seed."""
    if isinstance(kind, str):
        kind = BaselineKind(kind)
    arch = arch or ArchConfig()
    dropout = dropout or HeteroDropoutConfig()
    root = RngState(seed).child(0)

    widths = (arch.input_dim,) + arch.trunk
    trunk_rng = root.child(1)
    trunk = [AffineLayer.init(widths[i], widths[i + 1], trunk_rng) for i in range(len(arch.trunk))]
    head_rng = root.child(2)
    head = [
        AffineLayer.init(arch.trunk[-1], arch.head_hidden, head_rng),
        AffineLayer.init(arch.head_hidden, arch.num_classes, head_rng),
    ]
    var_heads: list[list[AffineLayer]] = []
    aux: list[AffineLayer] = []
    if kind.name == "lupi":
        for s, width in enumerate(arch.site_widths):
            r = root.child(3, s)
            var_heads.append([
                AffineLayer.init(arch.trunk[-1], arch.var_hidden, r),
                AffineLayer.init(arch.var_hidden, width, r),
            ])
    elif kind.name == "multitask":
        aux.append(AffineLayer.init(arch.trunk[-1], arch.trunk[-1], root.child(4)))
    return Classifier(arch, kind, trunk, head, var_heads, aux, dropout, seed)


def build_baseline(kind: BaselineKind | str, arch: ArchConfig | None = None, seed: int = 0) -> Classifier:
    return build_model(kind, arch, seed)


def checkpoint_document(model: Classifier) -> dict:
    return {
        "header": {
            "format_version": CHECKPOINT_VERSION,
            "arch_fingerprint": model.arch.fingerprint(model.kind.name),
            "rng_seed": model.seed,
            "arch": asdict(model.arch),
            "kind": asdict(model.kind),
            "dropout": asdict(model.dropout),
        },
        "parameters": {name: encode_array(p.data) for name, p in model.named_parameters().items()},
    }


def from_checkpoint(doc: dict) -> Classifier:
    header = doc["header"]
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {header.get('format_version')!r}")
    arch = ArchConfig(**header["arch"])
    kind = BaselineKind(**header["kind"])
    if arch.fingerprint(kind.name) != header["arch_fingerprint"]:
        raise ValueError("checkpoint arch fingerprint does not match its architecture block")
    model = build_model(kind, arch, int(header["rng_seed"]), HeteroDropoutConfig(**header["dropout"]))
    params = model.named_parameters()
    if set(params) != set(doc["parameters"]):
        raise ValueError("checkpoint parameter names do not match the architecture")
    for name, p in params.items():
        arr = decode_array(doc["parameters"][name])
        if arr.shape != p.shape:
            raise ValueError(f"parameter {name}: shape {arr.shape} != expected {p.shape}")
        p.data[...] = arr
    return model


# functional aliases
LupiClassifier = Classifier


def forward_train(model: Classifier, x, xstar=None, rng=None, present=None, eps=None):
    return model.forward_train(x, xstar, rng, present, eps)


def forward_eval(model: Classifier, x) -> Tensor:
    return model.forward_eval(x)

"""Compression-ratio and FLOPs accounting, factorization, fine-tuning, reports."""

import csv
import json
from dataclasses import asdict, dataclass, field

from . import nn
from .exceptions import InvalidInputError
from .linalg import svd_full, truncate

BIT_WIDTHS = (32, 16, 8, 4)


@dataclass(frozen=True)
class LayerShape:
    """Structure of one compressible layer.

    For conv layers ``n = C_in * k_h * k_w`` and ``spatial_count`` is the
    number of output positions the linear map is applied at.
    """

    kind: str
    m: int
    n: int
    spatial_count: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if self.kind not in ("dense", "conv"):
            raise InvalidInputError(f"unknown layer kind {self.kind!r}")
        if min(self.m, self.n, self.spatial_count) < 1:
            raise InvalidInputError("m, n and spatial_count must be >= 1")

    @property
    def full_rank(self):
        return min(self.m, self.n)


def shapes_of(model):
    """Dense LayerShapes for every layer of ``model`` (factorized layers report m, n)."""
    return [LayerShape("dense", layer.m, layer.n) for layer in model.layers]


def full_ranks(shapes):
    return tuple(s.full_rank for s in shapes)


def check_ranks(shapes, r):
    r = tuple(int(v) for v in r)
    if len(r) != len(shapes):
        raise InvalidInputError(f"rank vector has {len(r)} entries for {len(shapes)} layers")
    for rl, s in zip(r, shapes):
        if not 1 <= rl <= s.full_rank:
            raise InvalidInputError(f"rank {rl} outside [1, {s.full_rank}] for {s.m}x{s.n}")
    return r


def keeps_dense(shape, r):
    """Indicator: factorizing at rank ``r`` would not save parameters."""
    return shape.m * shape.n <= r * (shape.m + shape.n)


def compressed_params(shapes, r):
    return sum(
        s.m * s.n if keeps_dense(s, rl) else rl * (s.m + s.n) for s, rl in zip(shapes, r)
    )


def compression_ratio(shapes, r):
    """Fraction of weight parameters removed at rank vector ``r`` (biases excluded)."""
    r = check_ranks(shapes, r)
    total = sum(s.m * s.n for s in shapes)
    return 1.0 - compressed_params(shapes, r) / total


def _fc(m, n, bias, convention):
    if bias:
        return m * n
    return m * n if convention == "fused" else m * (n - 1)


def flops_fc(shape, convention="exact"):
    if shape.kind != "dense":
        raise InvalidInputError("flops_fc needs a dense layer")
    return _fc(shape.m, shape.n, shape.has_bias, convention)


def flops_conv(shape, convention="exact"):
    # bias term counted once per output map, as the fc/conv formula is written
    if shape.kind != "conv":
        raise InvalidInputError("flops_conv needs a conv layer")
    weight = _fc(shape.m, shape.n, False, convention) * shape.spatial_count
    return weight + (shape.m if shape.has_bias else 0)


def _layer_flops(shape, convention):
    return flops_fc(shape, convention) if shape.kind == "dense" else flops_conv(shape, convention)


def model_flops(shapes, r=None, convention="exact"):
    """Forward FLOPs; with ``r``, factorized layers count as two cascaded stages.

    The first stage (rank x n) carries no bias, the second (m x rank) keeps
    the original bias. Nonlinearities, batch-norm and copies cost nothing.
    """
    if convention not in ("exact", "fused"):
        raise InvalidInputError(f"unknown FLOPs convention {convention!r}")
    if r is not None:
        r = check_ranks(shapes, r)
    total = 0
    for k, s in enumerate(shapes):
        if r is None or keeps_dense(s, r[k]):
            total += _layer_flops(s, convention)
            continue
        first = LayerShape(s.kind, r[k], s.n, s.spatial_count, has_bias=False)
        if s.kind == "dense":
            second = LayerShape("dense", s.m, r[k], 1, s.has_bias)
        else:
            second = LayerShape("conv", s.m, r[k], s.spatial_count, s.has_bias)
        total += _layer_flops(first, convention) + _layer_flops(second, convention)
    return total


def factorize_model(model, r):
    """Replace each dense layer by its rank-``r_l`` SVD cascade where that saves parameters."""
    shapes = shapes_of(model)
    r = check_ranks(shapes, r)
    layers = []
    for layer, s, rl in zip(model.layers, shapes, r):
        if not isinstance(layer, nn.DenseLayer):
            raise InvalidInputError("factorize_model expects an all-dense model")
        if keeps_dense(s, rl):
            layers.append(nn.DenseLayer(layer.w.copy(), layer.bias.copy(), layer.activation))
            continue
        u, sig, v = truncate(svd_full(layer.w), rl)
        layers.append(
            nn.FactorizedLayer(
                a=sig[:, None] * v.T, b=u.copy(), bias=layer.bias.copy(),
                activation=layer.activation,
            )
        )
    return nn.Model(layers, model.classes)


def finetune(model, dataset, config):
    """Train factors of a (possibly factorized) model directly; structure is kept."""
    return nn.train(model, dataset, config)


@dataclass
class CompressionReport:
    c_d: float
    tau: float
    ranks: list
    params_before: int
    params_after: int
    ratio: float
    flops_before: int
    flops_after: int
    flops_after_fused: int
    accuracy_before: float
    accuracy_after: float
    bias_params: int = 0
    memory_mb: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_json(self):
        d = asdict(self)
        d["memory_mb"] = {str(k): v for k, v in self.memory_mb.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["memory_mb"] = {int(k): v for k, v in d["memory_mb"].items()}
        return cls(**d)

    csv_header = (
        "c_d", "tau", "ratio", "params_before", "params_after", "mflops_before",
        "mflops_after_exact", "mflops_after_fused", "acc_before", "acc_after",
        "mem32", "mem16", "mem8", "mem4",
    )

    def csv_row(self):
        return [
            self.c_d, self.tau, f"{self.ratio:.6f}", self.params_before, self.params_after,
            f"{self.flops_before / 1e6:.6f}", f"{self.flops_after / 1e6:.6f}",
            f"{self.flops_after_fused / 1e6:.6f}", f"{self.accuracy_before:.6f}",
            f"{self.accuracy_after:.6f}",
        ] + [f"{self.memory_mb[b]:.6f}" for b in BIT_WIDTHS]

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.csv_header)
            w.writerow(self.csv_row())


def weight_memory_mb(n_params, bits):
    """Weight storage in megabytes (1e6 bytes)."""
    return n_params * bits / 8 / 1e6


def build_report(base_model, r, accuracy_before, accuracy_after, c_d=float("nan"), tau=float("nan"),
                 extra=None):
    shapes = shapes_of(base_model)
    r = check_ranks(shapes, r)
    before = sum(s.m * s.n for s in shapes)
    after = compressed_params(shapes, r)
    return CompressionReport(
        c_d=c_d,
        tau=tau,
        ranks=list(r),
        params_before=before,
        params_after=after,
        ratio=compression_ratio(shapes, r),
        flops_before=model_flops(shapes),
        flops_after=model_flops(shapes, r, "exact"),
        flops_after_fused=model_flops(shapes, r, "fused"),
        accuracy_before=accuracy_before,
        accuracy_after=accuracy_after,
        bias_params=base_model.n_bias_params(),
        memory_mb={b: weight_memory_mb(after, b) for b in BIT_WIDTHS},
        extra=dict(extra or {}),
    )


def effective_ranks(model):
    """Rank vector implied by a (mixed) model: factor width, or full rank if dense."""
    return tuple(
        layer.rank if isinstance(layer, nn.FactorizedLayer) else min(layer.m, layer.n)
        for layer in model.layers
    )


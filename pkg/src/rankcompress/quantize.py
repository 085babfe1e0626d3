"""Post-training symmetric per-tensor integer quantization and memory accounting."""

import csv
from dataclasses import dataclass

import numpy as np

from . import nn
from .exceptions import InvalidInputError

SUPPORTED_BITS = (4, 8, 16, 32)
SCHEME = "symmetric per-tensor integer, round half away from zero; biases kept at 32 bits"


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray  # None for 32-bit passthrough
    scale: float
    bits: int
    values: np.ndarray = None  # passthrough payload when bits == 32

    def dequantize(self):
        if self.bits == 32:
            return self.values.copy()
        return self.codes * self.scale


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_tensor(w, bits):
    """Quantize ``w`` with scale ``max|w| / (2**(bits-1) - 1)``; 32 bits is identity."""
    if bits not in SUPPORTED_BITS:
        raise InvalidInputError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    w = np.asarray(w, dtype=np.float64)
    if bits == 32:
        return QuantizedTensor(None, 1.0, 32, w.copy())
    qmax = 2 ** (bits - 1) - 1
    peak = float(np.abs(w).max(initial=0.0))
    if peak == 0:
        return QuantizedTensor(np.zeros(w.shape, dtype=np.int64), 1.0, bits)
    scale = peak / qmax
    codes = np.clip(_round_half_away(w / scale), -qmax, qmax).astype(np.int64)
    return QuantizedTensor(codes, scale, bits)


def dequantize(q):
    return q.dequantize()


def memory_bytes(n_weight_params, n_bias_params, bits):
    """Weights at ``bits``, biases at 32 bits; per-tensor scales not counted."""
    return (n_weight_params * bits + n_bias_params * 32) / 8


@dataclass
class MemoryReport:
    bits: int
    weight_params: int
    bias_params: int
    bytes: float

    @property
    def mb(self):
        return self.bytes / 1e6


def quantize_model(model, bits):
    """Copy of ``model`` with every weight/factor quantized then dequantized."""
    out = model.copy()
    for i, name, p in out.parameters():
        if name == "bias":
            continue
        p[...] = quantize_tensor(p, bits).dequantize()
    report = MemoryReport(
        bits, model.n_weight_params(), model.n_bias_params(),
        memory_bytes(model.n_weight_params(), model.n_bias_params(), bits),
    )
    return out, report


def quantization_table(models, dataset, bits_list=(32, 16, 8, 4), split="test"):
    """Rows ``(label, {bits: (accuracy, memory_mb)})`` for labelled models."""
    rows = []
    for label, model in models:
        cells = {}
        for b in bits_list:
            q, rep = quantize_model(model, b)
            cells[b] = (nn.evaluate_accuracy(q, dataset, split), rep.mb)
        rows.append((label, cells))
    return rows


def write_table_csv(path, rows, bits_list=(32, 16, 8, 4)):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        head = ["setting"]
        for b in bits_list:
            head += [f"acc_{b}bit", f"memory_mb_{b}bit"]
        w.writerow(head)
        for label, cells in rows:
            row = [label]
            for b in bits_list:
                acc, mb = cells[b]
                row += [f"{acc:.6f}", f"{mb:.6f}"]
            w.writerow(row)

"""A small dense-network engine: forward/backward, Nesterov SGD, cosine annealing."""

import copy
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError, TrainingError

ACTIVATIONS = ("relu", "none")


@dataclass
class DenseLayer:
    w: np.ndarray  # (m, n): out x in
    bias: np.ndarray
    activation: str = "relu"

    param_names = ("w", "bias")

    @property
    def m(self):
        return self.w.shape[0]

    @property
    def n(self):
        return self.w.shape[1]

    def weight(self):
        return self.w

    def linear(self, x):
        return x @ self.w.T + self.bias


@dataclass
class FactorizedLayer:
    """Cascade ``x -> b @ (a @ x) + bias`` with ``a = S V^T`` and ``b = U``."""

    a: np.ndarray  # (r, n)
    b: np.ndarray  # (m, r)
    bias: np.ndarray
    activation: str = "relu"

    param_names = ("a", "b", "bias")

    @property
    def m(self):
        return self.b.shape[0]

    @property
    def n(self):
        return self.a.shape[1]

    @property
    def rank(self):
        return self.a.shape[0]

    def weight(self):
        return self.b @ self.a

    def linear(self, x):
        return (x @ self.a.T) @ self.b.T + self.bias


@dataclass
class Model:
    layers: list
    classes: int

    def __post_init__(self):
        if not self.layers:
            raise InvalidInputError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.m != nxt.n:
                raise InvalidInputError(f"layer widths do not chain: {prev.m} -> {nxt.n}")
        if self.layers[-1].m != self.classes:
            raise InvalidInputError("final layer width must equal the class count")
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise InvalidInputError(f"unknown activation {layer.activation!r}")

    @property
    def n_features(self):
        return self.layers[0].n

    def copy(self):
        return copy.deepcopy(self)

    def parameters(self):
        """Yield ``(layer_index, name, array)`` in canonical order."""
        for i, layer in enumerate(self.layers):
            for name in layer.param_names:
                yield i, name, getattr(layer, name)

    def n_weight_params(self):
        return sum(a.size for _, name, a in self.parameters() if name != "bias")

    def n_bias_params(self):
        return sum(layer.bias.size for layer in self.layers)


def init_mlp(sizes, seed=0):
    """He-uniform MLP; ``sizes = [d, h1, ..., classes]``, ReLU between layers."""
    if len(sizes) < 2:
        raise InvalidInputError("sizes needs an input and an output width")
    rng = np.random.default_rng(seed)
    layers = []
    for k, (n, m) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = math.sqrt(6.0 / n)
        w = rng.uniform(-limit, limit, size=(m, n))
        act = "relu" if k < len(sizes) - 2 else "none"
        layers.append(DenseLayer(w, np.zeros(m), act))
    return Model(layers, sizes[-1])


def _act(z, activation):
    return np.maximum(z, 0.0) if activation == "relu" else z


def forward(model, x):
    """Logits for a batch ``x`` of shape (N, d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise InvalidInputError(
            f"expected input of width {model.n_features}, got shape {x.shape}"
        )
    h = x
    for layer in model.layers:
        h = _act(layer.linear(h), layer.activation)
    return h


def predict(model, x, batch=4096):
    out = [forward(model, x[i: i + batch]).argmax(axis=1) for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def softmax_xent(logits, y):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    loss = float(np.mean(logsum - z[np.arange(n), y]))
    p = np.exp(z - logsum[:, None])
    p[np.arange(n), y] -= 1.0
    return loss, p / n


def loss_and_grad(model, x, y):
    """Mean cross-entropy and per-layer gradient dicts keyed by parameter name."""
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= model.classes):
        raise InvalidInputError("labels outside [0, classes)")
    acts = [np.asarray(x, dtype=np.float64)]
    pre = []
    for layer in model.layers:
        z = layer.linear(acts[-1])
        pre.append(z)
        acts.append(_act(z, layer.activation))
    loss, g = softmax_xent(acts[-1], y)
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.activation == "relu":
            g = g * (pre[i] > 0)
        h = acts[i]
        d = {"bias": g.sum(axis=0)}
        if isinstance(layer, DenseLayer):
            d["w"] = g.T @ h
            if i:
                g = g @ layer.w
        else:
            t = h @ layer.a.T
            d["b"] = g.T @ t
            gt = g @ layer.b
            d["a"] = gt.T @ h
            if i:
                g = gt @ layer.a
        grads[i] = d
    return loss, grads


def cosine_lr(eta0, t, total):
    """Cosine-annealed learning rate at step ``t`` of ``total``."""
    return eta0 * (1.0 + math.cos(math.pi * t / total)) / 2.0


@dataclass
class TrainConfig:
    eta0: float = 0.1
    momentum: float = 0.9
    batch: int = 128
    epochs: int = 30
    seed: int = 0
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if self.eta0 <= 0 or self.batch < 1 or self.epochs < 0:
            raise InvalidInputError("need eta0 > 0, batch >= 1, epochs >= 0")
        if not 0 <= self.momentum < 1:
            raise InvalidInputError("momentum must lie in [0, 1)")
        if self.lr_schedule not in ("cosine", "constant"):
            raise InvalidInputError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr(self, epoch):
        if self.lr_schedule == "constant":
            return self.eta0
        return cosine_lr(self.eta0, epoch, max(self.epochs, 1))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    lam: float
    train_loss: float
    val_acc: float
    msr: list = field(default_factory=list)


def train(model, dataset, config, penalty=None):
    """Train a copy of ``model`` on the dataset's train split.

    ``penalty`` is an optional regularizer exposing ``add_gradients(model,
    grads, iteration, epoch)``, ``strength(epoch)`` and ``values(model)``;
    it may also define ``end_epoch(model, epoch)``.
    Returns ``(trained_model, [EpochRecord, ...])``.
    """
    model = model.copy()
    x_tr, y_tr = dataset.subset("train")
    if len(x_tr) == 0:
        raise InvalidInputError("empty train split")
    has_val = len(dataset.splits.get("val", ())) > 0
    rng = np.random.default_rng(config.seed)
    velocity = {(i, name): np.zeros_like(p) for i, name, p in model.parameters()}
    log = []
    iteration = 0
    for epoch in range(config.epochs):
        lr = config.lr(epoch)
        order = rng.permutation(len(x_tr))
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch)):
            idx = order[start: start + config.batch]
            loss, grads = loss_and_grad(model, x_tr[idx], y_tr[idx])
            if not math.isfinite(loss):
                raise TrainingError(epoch, b, loss)
            if penalty is not None:
                penalty.add_gradients(model, grads, iteration, epoch)
            mu = config.momentum
            for i, name, p in model.parameters():
                g = grads[i][name]
                v = velocity[i, name]
                v *= mu
                v -= lr * g
                # lookahead form: p += mu * v_new - lr * g
                p += mu * v - lr * g
            total += loss * len(idx)
            seen += len(idx)
            iteration += 1
        if penalty is not None and hasattr(penalty, "end_epoch"):
            penalty.end_epoch(model, epoch)
        val_acc = evaluate_accuracy(model, dataset, "val") if has_val else float("nan")
        log.append(
            EpochRecord(
                epoch=epoch,
                lr=lr,
                lam=penalty.strength(epoch) if penalty is not None else 0.0,
                train_loss=total / seen,
                val_acc=val_acc,
                msr=penalty.values(model) if penalty is not None else [],
            )
        )
    return model, log


def accuracy(model, x, y):
    if len(y) == 0:
        raise InvalidInputError("cannot score an empty set")
    return float(np.mean(predict(model, x) == y))


def evaluate_accuracy(model, dataset, split="test"):
    """Fraction of argmax-correct predictions on a named split."""
    x, y = dataset.subset(split)
    if len(y) == 0:
        raise InvalidInputError(f"split {split!r} is empty")
    return accuracy(model, x, y)


def write_log_csv(path, log):
    with_msr = any(rec.msr for rec in log)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        head = ["epoch", "lr", "lambda", "train_loss", "val_acc"]
        w.writerow(head + (["msr"] if with_msr else []))
        for rec in log:
            row = [rec.epoch, f"{rec.lr:.8g}", f"{rec.lam:.8g}", f"{rec.train_loss:.8g}",
                   f"{rec.val_acc:.6f}"]
            if with_msr:
                row.append(";".join(f"{v:.6g}" for v in rec.msr))
            w.writerow(row)

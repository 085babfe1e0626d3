"""Dataset loading (MNIST IDX, synthetic blobs) and stratified splitting."""

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import FormatError, InvalidInputError, SplitError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class Dataset:
    """Features in [0, 1], integer labels, and optional named index splits."""

    features: np.ndarray
    labels: np.ndarray
    classes: int
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise InvalidInputError("labels must be a vector matching the feature rows")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise InvalidInputError("labels outside [0, classes)")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def subset(self, split):
        """``(X, y)`` for a named split."""
        if split not in self.splits:
            raise InvalidInputError(f"dataset has no split named {split!r}")
        idx = self.splits[split]
        return self.features[idx], self.labels[idx]

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i4").tobytes())
        return h.hexdigest()[:16]


def _open(path):
    path = os.fspath(path)
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, magic, dims):
    try:
        with _open(path) as f:
            raw = f.read()
    except OSError as exc:
        raise FormatError(f"cannot read IDX file ({exc})", path) from exc
    header = 4 * (1 + dims)
    if len(raw) < header:
        raise FormatError("truncated IDX header", path)
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"bad IDX magic 0x{got:08x}, expected 0x{magic:08x}", path)
    shape = struct.unpack(">" + "I" * dims, raw[4:header])
    size = int(np.prod(shape))
    if len(raw) - header != size:
        raise FormatError(
            f"payload has {len(raw) - header} bytes, header declares {size}", path
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(shape)


def read_idx_images(path):
    return _read_idx(path, IDX_IMAGES_MAGIC, 3)


def read_idx_labels(path):
    return _read_idx(path, IDX_LABELS_MAGIC, 1)


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def load_mnist_idx(images_path, labels_path):
    """Read an IDX image/label pair into an unsplit 10-class Dataset."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", labels_path
        )
    if labels.size and labels.max() >= 10:
        raise FormatError("label value outside [0, 10)", labels_path)
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), 10)


def _find(directory, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = os.path.join(directory, name)
        if os.path.exists(p):
            return p
    raise FormatError(f"missing {stem}[.gz]", directory)


def load_mnist(directory, val_size=5000, seed=0):
    """Official MNIST from a directory: stratified train/val, official test."""
    train = load_mnist_idx(
        _find(directory, "train-images-idx3-ubyte"), _find(directory, "train-labels-idx1-ubyte")
    )
    test = load_mnist_idx(
        _find(directory, "t10k-images-idx3-ubyte"), _find(directory, "t10k-labels-idx1-ubyte")
    )
    n_train = len(train)
    frac = val_size / n_train
    tr, va = _stratified_indices(train.labels, (1.0 - frac, frac), seed)
    features = np.concatenate([train.features, test.features])
    labels = np.concatenate([train.labels, test.labels])
    splits = {
        "train": tr,
        "val": va,
        "test": np.arange(n_train, n_train + len(test)),
    }
    return Dataset(features, labels, 10, splits)


def synth_blobs(classes, per_class, d, seed, separation=6.0):
    """Gaussian clusters (unit variance) whose closest means are ``separation`` apart.

    Features are min-max scaled into [0, 1] with one global affine map, so
    geometry (and separability) is preserved.
    """
    if classes < 2 or d < 2 or per_class < 1:
        raise InvalidInputError("need classes >= 2, d >= 2, per_class >= 1")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((classes, d))
    gaps = np.linalg.norm(means[:, None] - means[None], axis=-1)
    gaps[np.diag_indices(classes)] = np.inf
    means *= separation / gaps.min()
    labels = np.repeat(np.arange(classes), per_class)
    x = means[labels] + rng.standard_normal((labels.size, d))
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo)
    return Dataset(x, labels.astype(np.int64), classes)


def _allocate(class_sizes, fractions):
    """Per-class split counts: floor/ceil of each class's share, global totals rounded."""
    n_cls, k = len(class_sizes), len(fractions)
    exact = np.outer(class_sizes, fractions)
    counts = np.floor(exact).astype(int)
    rem = exact - counts
    need_cls = class_sizes - counts.sum(axis=1)
    target = np.floor(fractions * class_sizes.sum() + 0.5).astype(int)
    target[-1] = class_sizes.sum() - target[:-1].sum()
    need_split = target - counts.sum(axis=0)
    # hand out the leftover units by largest remainder, respecting both margins
    for flat in np.argsort(-rem, axis=None, kind="stable"):
        c, j = divmod(int(flat), k)
        if need_cls[c] > 0 and need_split[j] > 0 and rem[c, j] > 0:
            counts[c, j] += 1
            need_cls[c] -= 1
            need_split[j] -= 1
    for c in range(n_cls):
        while need_cls[c] > 0:
            j = int(np.argmax(rem[c] - (counts[c] > exact[c])))
            counts[c, j] += 1
            need_cls[c] -= 1
    for c in range(n_cls):
        for j in range(k):
            while counts[c, j] == 0:
                donor = int(np.argmax(counts[c]))
                counts[c, donor] -= 1
                counts[c, j] += 1
    return counts


def _stratified_indices(labels, fractions, seed):
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions <= 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise InvalidInputError("fractions must be positive and sum to 1")
    k = fractions.size
    classes = np.unique(labels)
    members = [np.flatnonzero(labels == c) for c in classes]
    for c, idx in zip(classes, members):
        if idx.size < k:
            raise SplitError(f"class {c} has {idx.size} examples, fewer than {k} splits")
    counts = _allocate(np.array([idx.size for idx in members]), fractions)
    rng = np.random.default_rng(seed)
    parts = [[] for _ in range(k)]
    for idx, row in zip(members, counts):
        idx = rng.permutation(idx)
        bounds = np.concatenate([[0], np.cumsum(row)])
        for j in range(k):
            parts[j].append(idx[bounds[j]: bounds[j + 1]])
    return [np.sort(np.concatenate(p)) for p in parts]


def split(ds, fractions=(0.6, 0.2, 0.2), seed=0, names=SPLIT_NAMES):
    """Stratified split into named index sets; deterministic per seed."""
    if len(names) != len(fractions):
        raise InvalidInputError("one name per fraction required")
    parts = _stratified_indices(ds.labels, fractions, seed)
    return replace(ds, splits=dict(zip(names, parts)))

import gzip
import os
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rankcompress import dataio
from rankcompress.exceptions import FormatError, InvalidInputError, SplitError


@pytest.fixture
def fixture_files(tmp_path):
    pix = (np.arange(10 * 28 * 28) * 7 % 256).astype(np.uint8).reshape(10, 28, 28)
    labels = np.arange(10, dtype=np.uint8)
    img, lab = tmp_path / "img", tmp_path / "lab"
    dataio.write_idx_images(img, pix)
    dataio.write_idx_labels(lab, labels)
    return img, lab, pix, labels


def test_fixture_pixels(fixture_files):
    img, lab, pix, labels = fixture_files
    ds = dataio.load_mnist_idx(img, lab)
    assert ds.features.shape == (10, 784)
    np.testing.assert_array_equal(ds.features[0], pix[0].ravel() / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)


def test_header_bytes(fixture_files):
    img, *_ = fixture_files
    raw = open(img, "rb").read()
    assert struct.unpack(">IIII", raw[:16]) == (0x803, 10, 28, 28)


def test_roundtrip_bytes(fixture_files, tmp_path):
    img, lab, pix, _ = fixture_files
    ds = dataio.load_mnist_idx(img, lab)
    out = tmp_path / "again"
    dataio.write_idx_images(out, np.rint(ds.features * 255).reshape(10, 28, 28))
    assert open(out, "rb").read() == open(img, "rb").read()


def test_gzip(fixture_files, tmp_path):
    img, lab, *_ = fixture_files
    gz = tmp_path / "img.gz"
    with gzip.open(gz, "wb") as f:
        f.write(open(img, "rb").read())
    np.testing.assert_array_equal(dataio.load_mnist_idx(gz, lab).features,
                                  dataio.load_mnist_idx(img, lab).features)


def test_bad_magic(fixture_files):
    img, lab, *_ = fixture_files
    raw = bytearray(open(img, "rb").read())
    raw[3] = 0x01
    open(img, "wb").write(raw)
    with pytest.raises(FormatError, match=os.path.basename(img)):
        dataio.load_mnist_idx(img, lab)


def test_truncated(fixture_files):
    img, lab, *_ = fixture_files
    raw = open(img, "rb").read()
    open(img, "wb").write(raw[:-5])
    with pytest.raises(FormatError):
        dataio.read_idx_images(img)


def test_count_mismatch(fixture_files, tmp_path):
    img, _, _, labels = fixture_files
    lab = tmp_path / "lab9"
    dataio.write_idx_labels(lab, labels[:9])
    with pytest.raises(FormatError, match="lab9"):
        dataio.load_mnist_idx(img, lab)


def test_missing_file(tmp_path):
    with pytest.raises(FormatError):
        dataio.read_idx_labels(tmp_path / "nope")


def test_official_mnist(mnist):
    assert mnist.features.shape == (70000, 784)
    sizes = {k: len(v) for k, v in mnist.splits.items()}
    assert sizes == {"train": 55000, "val": 5000, "test": 10000}
    x, _ = mnist.subset("train")
    assert x.min() >= 0 and x.max() <= 1


def test_synth_basic():
    ds = dataio.synth_blobs(3, 100, 8, 7)
    assert len(ds) == 300
    assert np.bincount(ds.labels).tolist() == [100, 100, 100]
    again = dataio.synth_blobs(3, 100, 8, 7)
    assert ds.features.tobytes() == again.features.tobytes()
    assert ds.features.min() == 0 and ds.features.max() == 1


def test_synth_centroid_oracle():
    ds = dataio.synth_blobs(3, 100, 8, 7)
    cents = np.stack([ds.features[ds.labels == c].mean(0) for c in range(3)])
    pred = np.argmin(((ds.features[:, None] - cents[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == ds.labels) >= 0.99


def test_synth_preconditions():
    with pytest.raises(InvalidInputError):
        dataio.synth_blobs(1, 10, 8, 0)
    with pytest.raises(InvalidInputError):
        dataio.synth_blobs(3, 10, 1, 0)


def test_split_sizes():
    ds = dataio.split(dataio.synth_blobs(3, 100, 8, 7), (0.6, 0.2, 0.2), seed=1)
    assert [len(ds.splits[k]) for k in ("train", "val", "test")] == [180, 60, 60]
    again = dataio.split(dataio.synth_blobs(3, 100, 8, 7), (0.6, 0.2, 0.2), seed=1)
    for k in ds.splits:
        np.testing.assert_array_equal(ds.splits[k], again.splits[k])


def test_split_errors():
    ds = dataio.Dataset(np.zeros((4, 2)), np.array([0, 0, 0, 1]), 2)
    with pytest.raises(SplitError):
        dataio.split(ds, (0.5, 0.3, 0.2))
    with pytest.raises(InvalidInputError):
        dataio.split(ds, (0.5, 0.6))


@given(
    st.lists(st.integers(20, 60), min_size=2, max_size=6),
    st.sampled_from([(0.6, 0.2, 0.2), (0.8, 0.1, 0.1), (0.5, 0.5), (0.7, 0.3)]),
    st.integers(0, 1000),
)
def test_split_properties(class_sizes, fractions, seed):
    labels = np.repeat(np.arange(len(class_sizes)), class_sizes)
    ds = dataio.Dataset(np.zeros((labels.size, 2)), labels, len(class_sizes))
    names = ("train", "val", "test")[: len(fractions)]
    out = dataio.split(ds, fractions, seed, names)
    allidx = np.concatenate([out.splits[k] for k in names])
    assert np.unique(allidx).size == allidx.size == labels.size
    for frac, k in zip(fractions, names):
        part = labels[out.splits[k]]
        counts = np.bincount(part, minlength=len(class_sizes))
        assert np.all(counts >= 1)
        # per-class share within one sample of the global proportion
        assert np.all(np.abs(counts - frac * np.array(class_sizes)) <= 1 + 1e-9)

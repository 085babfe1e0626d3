import os

# BLAS pools stay single-threaded so reruns are bit-identical
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from hypothesis import settings  # noqa: E402

from rankcompress import dataio, nn  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

MNIST_DIR = os.environ.get("RANKCOMPRESS_MNIST", "/root/data/mnist")


def _have_mnist():
    return os.path.exists(os.path.join(MNIST_DIR, "train-images-idx3-ubyte")) or \
        os.path.exists(os.path.join(MNIST_DIR, "train-images-idx3-ubyte.gz"))


@pytest.fixture(scope="session")
def mnist_dir():
    if not _have_mnist():
        pytest.skip(f"MNIST not found in {MNIST_DIR} (set RANKCOMPRESS_MNIST)")
    return MNIST_DIR


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    return dataio.load_mnist(mnist_dir)


def make_toy(seed):
    """Trained 16-8-16-8 MLP on 8 blobs; every layer has full rank 8."""
    ds = dataio.split(dataio.synth_blobs(8, 60, 16, seed, separation=4.0), seed=seed)
    model = nn.init_mlp([16, 8, 16, 8], seed)
    model, _ = nn.train(model, ds, nn.TrainConfig(eta0=0.05, epochs=40, batch=16, seed=seed))
    return model, ds


@pytest.fixture(scope="session")
def toy():
    return make_toy(0)


@pytest.fixture(scope="session")
def blobs():
    return dataio.split(dataio.synth_blobs(3, 100, 8, 7), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_models():
    return [make_toy(seed) for seed in range(5)]


GATE_LINES = {}


@pytest.fixture(scope="session")
def gate():
    """Record one PASS/FAIL line per acceptance criterion; returns the verdict."""
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        GATE_LINES[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance gate")
        for number in sorted(GATE_LINES):
            terminalreporter.write_line(GATE_LINES[number])

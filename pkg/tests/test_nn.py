import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rankcompress import compress, nn
from rankcompress.exceptions import InvalidInputError, TrainingError
from rankcompress.linalg import svd_full


def _fd_check(model, x, y, h=1e-5, rtol=1e-4):
    _, grads = nn.loss_and_grad(model, x, y)
    for i, name, p in model.parameters():
        g = grads[i][name]
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp, _ = nn.loss_and_grad(model, x, y)
            p[idx] = old - h
            lm, _ = nn.loss_and_grad(model, x, y)
            p[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        err = np.linalg.norm(num - g) / max(np.linalg.norm(num), 1e-12)
        assert err < rtol, (i, name, err)


def _safe_batch(model, n, seed):
    """Random inputs whose ReLU pre-activations all sit at least 1e-3 from the kink."""
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        x = rng.random((n, model.layers[0].n))
        h, ok = x, True
        for layer in model.layers:
            z = layer.linear(h)
            if layer.activation == "relu":
                ok &= bool(np.all(np.abs(z) >= 1e-3))
                z = np.maximum(z, 0)
            h = z
        if ok:
            return x
    raise AssertionError("no kink-free batch found")


def _with_bias(model, seed):
    rng = np.random.default_rng(seed)
    for _, name, p in model.parameters():
        if name == "bias":
            p[...] = rng.uniform(0.1, 0.5, p.shape)
    return model


def test_identity_layer():
    m = nn.Model([nn.DenseLayer(np.eye(4), np.zeros(4), "none")], 4)
    x = np.arange(8.0).reshape(2, 4)
    np.testing.assert_array_equal(nn.forward(m, x), x)


def test_zero_model():
    m = nn.init_mlp([5, 4, 3], 0)
    for _, _, p in m.parameters():
        p[...] = 0
    assert not nn.forward(m, np.ones((2, 5))).any()


def test_forward_shape_error():
    m = nn.init_mlp([5, 3], 0)
    with pytest.raises(InvalidInputError):
        nn.forward(m, np.ones((2, 4)))


def test_factorized_equals_dense(rng):
    m = nn.init_mlp([16, 12, 3], 1)
    x = rng.random((7, 16))
    # exact full-rank cascade: a = S V^T, b = U
    f = svd_full(m.layers[0].w)
    layer = nn.FactorizedLayer(f.sigma[:, None] * f.v.T, f.u, m.layers[0].bias, "relu")
    fact = nn.Model([layer, m.layers[1]], 3)
    np.testing.assert_allclose(nn.forward(fact, x), nn.forward(m, x), atol=1e-6)


def test_uniform_logits_loss():
    loss, _ = nn.softmax_xent(np.zeros((4, 10)), np.array([0, 3, 5, 9]))
    assert math.isclose(loss, math.log(10), rel_tol=1e-12)


def test_gradient_check_dense(rng):
    m = _with_bias(nn.init_mlp([5, 4, 3], 3), 0)
    x = _safe_batch(m, 6, 0)
    y = rng.integers(0, 3, 6)
    _fd_check(m, x, y)


def test_gradient_check_cascade(rng):
    base = nn.init_mlp([6, 5, 4, 3], 4)
    m = _with_bias(compress.factorize_model(base, [2, 1, 3]), 1)
    assert any(isinstance(layer, nn.FactorizedLayer) for layer in m.layers)
    x = _safe_batch(m, 5, 1)
    y = rng.integers(0, 3, 5)
    _fd_check(m, x, y)


def test_duplicate_rows_same_loss(rng):
    m = nn.init_mlp([4, 3], 0)
    x = rng.random((3, 4))
    y = np.array([0, 1, 2])
    a, _ = nn.loss_and_grad(m, x, y)
    b, _ = nn.loss_and_grad(m, np.concatenate([x, x]), np.concatenate([y, y]))
    assert math.isclose(a, b, rel_tol=1e-12)


@pytest.mark.parametrize("t,want", [(0, 0.1), (100, 0.0), (50, 0.05)])
def test_cosine(t, want):
    assert math.isclose(nn.cosine_lr(0.1, t, 100), want, abs_tol=1e-15)


def test_train_separable(blobs):
    m = nn.init_mlp([8, 16, 3], 0)
    m, log = nn.train(m, blobs, nn.TrainConfig(eta0=0.1, epochs=20, batch=16))
    assert nn.evaluate_accuracy(m, blobs, "train") >= 0.99
    assert [r.epoch for r in log] == list(range(20))


def test_zero_epochs(blobs):
    m = nn.init_mlp([8, 16, 3], 0)
    out, log = nn.train(m, blobs, nn.TrainConfig(epochs=0))
    assert log == []
    for (_, _, a), (_, _, b) in zip(m.parameters(), out.parameters()):
        assert a.tobytes() == b.tobytes()


def test_train_deterministic(blobs):
    cfg = nn.TrainConfig(eta0=0.1, epochs=3, batch=16, seed=5)
    a, _ = nn.train(nn.init_mlp([8, 16, 3], 0), blobs, cfg)
    b, _ = nn.train(nn.init_mlp([8, 16, 3], 0), blobs, cfg)
    for (_, _, p), (_, _, q) in zip(a.parameters(), b.parameters()):
        assert p.tobytes() == q.tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence(blobs):
    m = nn.init_mlp([8, 16, 3], 0)
    m.layers[0].w[0, 0] = np.inf
    with pytest.raises(TrainingError, match="epoch 0"):
        nn.train(m, blobs, nn.TrainConfig(epochs=1))


def test_momentum_zero_is_sgd(blobs):
    m = nn.init_mlp([8, 6, 3], 2)
    cfg = nn.TrainConfig(eta0=0.05, momentum=0.0, epochs=1, batch=400, lr_schedule="constant",
                         seed=3)
    got, _ = nn.train(m, blobs, cfg)
    x, y = blobs.subset("train")
    order = np.random.default_rng(3).permutation(len(y))
    x, y = x[order], y[order]
    _, grads = nn.loss_and_grad(m, x, y)
    for i, name, p in m.parameters():
        want = p - 0.05 * grads[i][name]
        np.testing.assert_array_equal(dict(((j, k), q) for j, k, q in got.parameters())[i, name],
                                      want)


def test_accuracy_constant_class():
    x = np.eye(10)
    y = np.arange(10)
    m = nn.Model([nn.DenseLayer(np.zeros((10, 10)), np.zeros(10), "none")], 10)
    # all logits tie, argmax picks class 0
    assert nn.accuracy(m, x, y) == 0.1


def test_accuracy_perfect_lookup():
    x = np.eye(10)
    m = nn.Model([nn.DenseLayer(np.eye(10), np.zeros(10), "none")], 10)
    assert nn.accuracy(m, x, np.arange(10)) == 1.0


def test_accuracy_loop_oracle(blobs):
    m = nn.init_mlp([8, 5, 3], 9)
    x, y = blobs.subset("test")
    hits = 0
    for xi, yi in zip(x, y):
        h = xi
        for layer in m.layers:
            h = layer.w @ h + layer.bias
            if layer.activation == "relu":
                h = np.maximum(h, 0)
        hits += int(np.argmax(h) == yi)
    assert nn.evaluate_accuracy(m, blobs, "test") == hits / len(y)


def test_empty_split(blobs):
    from dataclasses import replace
    ds = replace(blobs, splits={**blobs.splits, "test": np.array([], dtype=int)})
    with pytest.raises(InvalidInputError):
        nn.evaluate_accuracy(nn.init_mlp([8, 3], 0), ds, "test")


def test_log_csv(tmp_path, blobs):
    _, log = nn.train(nn.init_mlp([8, 3], 0), blobs, nn.TrainConfig(epochs=2))
    nn.write_log_csv(tmp_path / "log.csv", log)
    lines = open(tmp_path / "log.csv").read().splitlines()
    assert lines[0] == "epoch,lr,lambda,train_loss,val_acc" and len(lines) == 3


@given(st.integers(0, 10_000))
def test_full_rank_factorization_same_accuracy(seed):
    m = nn.init_mlp([6, 5, 4], seed)
    x = np.random.default_rng(seed).random((20, 6))
    y = np.random.default_rng(seed + 1).integers(0, 4, 20)
    full = compress.factorize_model(m, compress.full_ranks(compress.shapes_of(m)))
    assert nn.accuracy(full, x, y) == nn.accuracy(m, x, y)

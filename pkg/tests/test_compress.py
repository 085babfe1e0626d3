import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rankcompress import compress, nn
from rankcompress.compress import LayerShape
from rankcompress.exceptions import InvalidInputError
from rankcompress.linalg import svd_full


def D(m, n, bias=True):
    return LayerShape("dense", m, n, has_bias=bias)


def test_ratio_examples():
    assert compress.compression_ratio([D(100, 100)], [10]) == pytest.approx(0.8, abs=1e-12)
    assert compress.compression_ratio([D(10, 10)], [6]) == 0.0
    two = compress.compression_ratio([D(100, 100), D(10, 10)], [10, 6])
    assert two == pytest.approx(1 - 2100 / 10100, abs=1e-12)
    assert round(two, 5) == 0.79208


def test_ratio_bad_rank():
    with pytest.raises(InvalidInputError):
        compress.compression_ratio([D(4, 3)], [4])
    with pytest.raises(InvalidInputError):
        compress.compression_ratio([D(4, 3)], [1, 1])


def test_flops_examples():
    assert compress.flops_fc(D(10, 20)) == 200
    assert compress.flops_fc(D(10, 20, bias=False)) == 190
    assert compress.flops_fc(D(10, 20, bias=False), "fused") == 200
    conv = LayerShape("conv", 16, 27, 100)
    assert compress.flops_conv(conv) == 41616
    assert compress.flops_conv(LayerShape("conv", 16, 27, 1)) == 16 * 27
    assert compress.flops_conv(LayerShape("conv", 16, 27, 100, has_bias=False)) == 16 * 26 * 100


def test_model_flops_examples():
    s = [D(100, 100)]
    assert compress.model_flops(s) == 10000
    assert compress.model_flops(s, [10]) == 10 * 99 + 100 * 10 == 1990
    assert compress.model_flops(s, [10], "fused") == 2000
    assert compress.model_flops(s, [100]) == 10000


def test_flops_wrong_kind():
    with pytest.raises(InvalidInputError):
        compress.flops_fc(LayerShape("conv", 2, 2, 3))
    with pytest.raises(InvalidInputError):
        compress.flops_conv(D(2, 2))
    with pytest.raises(InvalidInputError):
        compress.model_flops([D(2, 2)], convention="other")


def test_factorize_full_rank_identity(rng):
    m = nn.init_mlp([12, 9, 5], 0)
    f = compress.factorize_model(m, compress.full_ranks(compress.shapes_of(m)))
    x = rng.random((6, 12))
    np.testing.assert_allclose(nn.forward(f, x), nn.forward(m, x), atol=1e-6)


def test_factorize_rank_one(rng):
    w = rng.standard_normal((5, 7))
    m = nn.Model([nn.DenseLayer(w, rng.standard_normal(5), "none")], 5)
    f = compress.factorize_model(m, [1])
    assert isinstance(f.layers[0], nn.FactorizedLayer) and f.layers[0].rank == 1
    s = svd_full(w)
    w1 = s.sigma[0] * np.outer(s.u[:, 0], s.v[:, 0])
    x = rng.random((4, 7))
    np.testing.assert_allclose(nn.forward(f, x), x @ w1.T + m.layers[0].bias, atol=1e-6)


def test_factorize_indicator_keeps_dense():
    m = nn.Model([nn.DenseLayer(np.eye(10), np.zeros(10), "none")], 10)
    f = compress.factorize_model(m, [6])
    assert isinstance(f.layers[0], nn.DenseLayer)
    np.testing.assert_array_equal(f.layers[0].w, np.eye(10))


def test_factorize_needs_dense(rng):
    m = compress.factorize_model(nn.init_mlp([12, 9, 5], 0), [2, 2])
    with pytest.raises(InvalidInputError):
        compress.factorize_model(m, [2, 2])


def test_finetune_zero_epochs_and_structure(blobs):
    m = compress.factorize_model(nn.init_mlp([8, 16, 3], 0), [2, 3])
    same, _ = compress.finetune(m, blobs, nn.TrainConfig(epochs=0))
    for (_, _, a), (_, _, b) in zip(m.parameters(), same.parameters()):
        assert a.tobytes() == b.tobytes()
    tuned, _ = compress.finetune(m, blobs, nn.TrainConfig(epochs=2, eta0=0.05))
    assert [type(x) for x in tuned.layers] == [type(x) for x in m.layers]
    assert compress.effective_ranks(tuned) == (2, 3)


def test_report_roundtrip_and_csv(tmp_path):
    m = nn.init_mlp([20, 10, 4], 0)
    rep = compress.build_report(m, [3, 4], 0.9, 0.85, 0.5, 0.02)
    assert rep.params_before == 240 and rep.params_after == 3 * 30 + 40
    assert rep.ratio == pytest.approx(1 - 130 / 240, abs=1e-12)
    assert rep.memory_mb[32] == 130 * 4 / 1e6
    for b in (16, 8, 4):
        assert rep.memory_mb[b] == rep.memory_mb[2 * b] / 2
    assert compress.CompressionReport.from_json(rep.to_json()) == rep
    rep.write_csv(tmp_path / "r.csv")
    head, row = open(tmp_path / "r.csv").read().splitlines()
    assert head.split(",") == list(compress.CompressionReport.csv_header)
    assert len(row.split(",")) == len(head.split(","))
    assert json.loads(rep.to_json())["flops_after_fused"] >= rep.flops_after


shape_lists = st.lists(
    st.tuples(st.integers(1, 60), st.integers(1, 60)), min_size=1, max_size=4
).map(lambda xs: [D(m, n) for m, n in xs])


@given(shape_lists, st.data())
def test_ratio_properties(shapes, data):
    full = compress.full_ranks(shapes)
    assert compress.compression_ratio(shapes, full) == 0.0
    r = [data.draw(st.integers(1, s.full_rank)) for s in shapes]
    c = compress.compression_ratio(shapes, r)
    assert 0.0 <= c < 1.0
    # lowering any one rank never decreases the ratio
    for i in range(len(r)):
        if r[i] > 1:
            lower = r[:i] + [r[i] - 1] + r[i + 1:]
            assert compress.compression_ratio(shapes, lower) >= c


@given(shape_lists, st.data())
def test_flops_dominated(shapes, data):
    r = [data.draw(st.integers(1, s.full_rank)) for s in shapes]
    for conv in ("exact", "fused"):
        assert compress.model_flops(shapes, r, conv) <= compress.model_flops(shapes, None, conv)

import itertools
import warnings

import numpy as np
import pytest

from lowrank.decompose import decompose_layer
from lowrank.errors import ShapeError
from lowrank.ir import DATASET_INPUTS, DATASET_LABELS, LayerDesc, ModelDesc, \
    WeightStore
from lowrank.similarity import (capture_feature_maps, cosine,
                                forward_factorized, forward_layer,
                                forward_model, layer_similarity,
                                sample_dataset)

from conftest import small_conv_net

rng = np.random.default_rng(21)


def pad_extents(x, k, s, padding):
    """Padding before/after one axis, matching ceil-mode same padding."""
    if padding == "valid":
        return 0, 0
    out = -(-x // s)
    total = max((out - 1) * s + k - x, 0)
    return total // 2, total - total // 2


def naive_conv2d(x, w, stride, padding, groups=1):
    """Direct six-deep loop convolution; the reference semantics."""
    b, hh, ww, cin = x.shape
    k1, k2, cg, f = w.shape
    p1 = pad_extents(hh, k1, stride[0], padding)
    p2 = pad_extents(ww, k2, stride[1], padding)
    xp = np.pad(x, ((0, 0), p1, p2, (0, 0)))
    oh = (xp.shape[1] - k1) // stride[0] + 1
    ow = (xp.shape[2] - k2) // stride[1] + 1
    out = np.zeros((b, oh, ow, f), dtype=np.float64)
    fpg = f // groups
    for bi in range(b):
        for i in range(oh):
            for j in range(ow):
                for fi in range(f):
                    g = fi // fpg
                    patch = xp[bi, i * stride[0]: i * stride[0] + k1,
                               j * stride[1]: j * stride[1] + k2,
                               g * cg: (g + 1) * cg]
                    out[bi, i, j, fi] = np.sum(patch * w[:, :, :, fi])
    return out


def naive_pool2d(x, k, s, mode):
    b, hh, ww, c = x.shape
    oh = (hh - k[0]) // s[0] + 1
    ow = (ww - k[1]) // s[1] + 1
    out = np.zeros((b, oh, ow, c))
    for bi, i, j, ci in itertools.product(range(b), range(oh), range(ow),
                                          range(c)):
        patch = x[bi, i * s[0]: i * s[0] + k[0],
                  j * s[1]: j * s[1] + k[1], ci]
        out[bi, i, j, ci] = patch.max() if mode == "max" else patch.mean()
    return out


class TestConvOracle:
    @pytest.mark.parametrize("stride", [(1, 1), (2, 2), (2, 1)])
    @pytest.mark.parametrize("padding", ["same", "valid"])
    def test_against_loop_nest(self, stride, padding):
        layer = LayerDesc(name="c", kind="conv2d", kernel=(3, 2),
                          in_channels=3, out_channels=4, stride=stride,
                          padding=padding)
        w = rng.standard_normal((3, 2, 3, 4)).astype(np.float32)
        x = rng.standard_normal((2, 7, 6, 3)).astype(np.float32)
        got = forward_layer(layer, WeightStore({"c": w}), [x])
        want = naive_conv2d(x, w, stride, padding)
        assert got.shape == want.shape
        assert np.allclose(got, want, atol=1e-4)

    def test_grouped(self):
        layer = LayerDesc(name="c", kind="conv2d", kernel=(3, 3),
                          in_channels=4, out_channels=6, groups=2)
        w = rng.standard_normal((3, 3, 2, 6)).astype(np.float32)
        x = rng.standard_normal((2, 5, 5, 4)).astype(np.float32)
        got = forward_layer(layer, WeightStore({"c": w}), [x])
        want = naive_conv2d(x, w, (1, 1), "same", groups=2)
        assert np.allclose(got, want, atol=1e-4)

    def test_depthwise_equals_grouped_diag(self):
        layer = LayerDesc(name="d", kind="depthwise_conv", kernel=(3, 3),
                          in_channels=3)
        w = rng.standard_normal((3, 3, 3)).astype(np.float32)
        x = rng.standard_normal((1, 6, 6, 3)).astype(np.float32)
        got = forward_layer(layer, WeightStore({"d": w}), [x])
        dense = np.zeros((3, 3, 3, 3), dtype=np.float32)
        for c in range(3):
            dense[:, :, c, c] = w[:, :, c]
        full = LayerDesc(name="c", kind="conv2d", kernel=(3, 3),
                         in_channels=3, out_channels=3)
        want = forward_layer(full, WeightStore({"c": dense}), [x])
        assert np.allclose(got, want, atol=1e-5)

    def test_hand_example(self):
        # 3x3 input, 2x2 kernel of ones, valid: plain window sums
        layer = LayerDesc(name="c", kind="conv2d", kernel=(2, 2),
                          in_channels=1, out_channels=1, padding="valid")
        x = np.arange(1.0, 10.0, dtype=np.float32).reshape(1, 3, 3, 1)
        w = np.ones((2, 2, 1, 1), dtype=np.float32)
        got = forward_layer(layer, WeightStore({"c": w}), [x])
        assert np.allclose(got[0, :, :, 0], [[12, 16], [24, 28]])

    def test_conv1d_and_conv3d(self):
        l1 = LayerDesc(name="c", kind="conv1d", kernel=(3,), in_channels=2,
                       out_channels=3, padding="valid")
        w1 = rng.standard_normal((3, 2, 3)).astype(np.float32)
        x1 = rng.standard_normal((2, 8, 2)).astype(np.float32)
        got = forward_layer(l1, WeightStore({"c": w1}), [x1])
        want = np.stack(
            [sum(x1[:, i + t, :] @ w1[t] for t in range(3))
             for i in range(6)], axis=1)
        assert np.allclose(got, want, atol=1e-4)

        l3 = LayerDesc(name="c", kind="conv3d", kernel=(2, 2, 2),
                       in_channels=2, out_channels=2, padding="valid")
        w3 = rng.standard_normal((2, 2, 2, 2, 2)).astype(np.float32)
        x3 = rng.standard_normal((1, 3, 3, 3, 2)).astype(np.float32)
        got = forward_layer(l3, WeightStore({"c": w3}), [x3])
        want = np.einsum("bijkc,ijkcf->bf", x3[:, :2, :2, :2], w3)
        assert np.allclose(got[0, 0, 0, 0], want[0], atol=1e-4)


class TestPoolOracle:
    @pytest.mark.parametrize("mode", ["max", "avg"])
    @pytest.mark.parametrize("kernel,stride", [((2, 2), (2, 2)),
                                               ((3, 3), (1, 1))])
    def test_valid_pool(self, mode, kernel, stride):
        layer = LayerDesc(name="p", kind="pool", mode=mode, kernel=kernel,
                          stride=stride, padding="valid")
        x = rng.standard_normal((2, 6, 6, 3)).astype(np.float32)
        got = forward_layer(layer, WeightStore({}), [x])
        want = naive_pool2d(x, kernel, stride, mode)
        assert np.allclose(got, want, atol=1e-5)

    def test_avg_same_padding_ignores_pad(self):
        layer = LayerDesc(name="p", kind="pool", mode="avg", kernel=(2, 2),
                          stride=(2, 2), padding="same")
        x = np.ones((1, 3, 3, 1), dtype=np.float32)
        got = forward_layer(layer, WeightStore({}), [x])
        # averages must stay 1 even where the window hangs off the edge
        assert np.allclose(got, 1.0, atol=1e-6)


class TestOtherKinds:
    def test_fc_batchnorm_reshape(self):
        fc = LayerDesc(name="f", kind="fc", in_channels=4, out_channels=2)
        w = rng.standard_normal((4, 2)).astype(np.float32)
        x = rng.standard_normal((3, 4)).astype(np.float32)
        assert np.allclose(forward_layer(fc, WeightStore({"f": w}), [x]),
                           x @ w, atol=1e-6)

        bn = LayerDesc(name="b", kind="batchnorm")
        stats = WeightStore({
            "b/scale": np.full(2, 2.0, np.float32),
            "b/shift": np.full(2, 1.0, np.float32),
            "b/mean": np.full(2, 0.5, np.float32),
            "b/var": np.full(2, 4.0, np.float32)})
        y = forward_layer(bn, stats, [np.full((1, 2), 2.5, np.float32)])
        assert np.allclose(y, 2.0 * (2.5 - 0.5) / np.sqrt(4.0 + 1e-5) + 1.0,
                           atol=1e-5)

        rs = LayerDesc(name="r", kind="reshape", shape=(2, 2))
        out = forward_layer(rs, WeightStore({}), [x])
        assert out.shape == (3, 2, 2)

    def test_activations(self):
        x = np.array([[-1.0, 0.0, 2.0]], dtype=np.float32)
        relu = LayerDesc(name="a", kind="activation", fn="relu")
        assert np.allclose(forward_layer(relu, WeightStore({}), [x]),
                           [[0, 0, 2]])
        soft = LayerDesc(name="s", kind="activation", fn="softmax")
        y = forward_layer(soft, WeightStore({}), [x])
        assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-6)
        big = np.array([[1000.0, 1000.0]], dtype=np.float32)
        assert np.all(np.isfinite(forward_layer(soft, WeightStore({}), [big])))

    def test_add_concat(self):
        a = rng.standard_normal((2, 3)).astype(np.float32)
        b = rng.standard_normal((2, 3)).astype(np.float32)
        add = LayerDesc(name="+", kind="add")
        assert np.allclose(forward_layer(add, WeightStore({}), [a, b]), a + b)
        cat = LayerDesc(name="|", kind="concat")
        got = forward_layer(cat, WeightStore({}), [a, b])
        assert got.shape == (2, 6)

    def test_shape_mismatch_raises(self):
        fc = LayerDesc(name="f", kind="fc", in_channels=4, out_channels=2)
        w = rng.standard_normal((4, 2)).astype(np.float32)
        with pytest.raises(ShapeError):
            forward_layer(fc, WeightStore({"f": w}),
                          [np.zeros((3, 5), np.float32)])


class TestCosine:
    def test_identities(self):
        v = rng.standard_normal(64)
        assert cosine(v, v) == pytest.approx(1.0, abs=1e-6)
        assert cosine(v, -v) == pytest.approx(-1.0, abs=1e-6)
        a = np.array([1.0, 0.0]); b = np.array([0.0, 1.0])
        assert cosine(a, b) == pytest.approx(0.0, abs=1e-6)

    def test_scale_invariance(self):
        v = rng.standard_normal(32)
        u = rng.standard_normal(32)
        base = cosine(v, u)
        for s in (1e-3, 7.0, 1e4):
            assert cosine(s * v, u) == pytest.approx(base, abs=1e-6)

    def test_zero_vector_warns_and_returns_zero(self):
        v = rng.standard_normal(8)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            got = cosine(np.zeros(8), v)
        assert got == 0.0
        assert any("zero" in str(w.message).lower() for w in caught)


class TestCapture:
    def test_reference_includes_post_ops(self, toy_net):
        model, weights = toy_net
        x = rng.standard_normal((5, 8, 8, 3)).astype(np.float32)
        cap = capture_feature_maps(model, weights, x)
        _, acts = forward_model(model, weights, x, keep_all=True)
        # conv reference passes through its attached relu
        assert np.array_equal(cap.references["c1"], acts["a1"])
        assert np.array_equal(cap.references["f1"], acts["f1"])
        # the input feeding c2 is the pool output, not the raw conv
        assert np.array_equal(cap.inputs["c2"], acts["p1"])
        assert np.array_equal(cap.inputs["c1"], x)

    def test_full_rank_similarity_is_one(self, toy_net):
        model, weights = toy_net
        x = rng.standard_normal((4, 8, 8, 3)).astype(np.float32)
        cap = capture_feature_maps(model, weights, x)
        fact = decompose_layer(model.layer("c2"), np.asarray(weights["c2"]),
                               "tucker2", (8, 12))
        assert layer_similarity(fact, cap) == pytest.approx(1.0, abs=1e-5)

    def test_rank_one_similarity_below_one(self, toy_net):
        model, weights = toy_net
        x = rng.standard_normal((4, 8, 8, 3)).astype(np.float32)
        cap = capture_feature_maps(model, weights, x)
        fact = decompose_layer(model.layer("c2"), np.asarray(weights["c2"]),
                               "tucker2", (1, 1))
        assert layer_similarity(fact, cap) < 0.999


class TestForwardFactorized:
    def test_matches_dense_reconstruction(self):
        layer = LayerDesc(name="c", kind="conv2d", kernel=(3, 3),
                          in_channels=6, out_channels=8, stride=(2, 2))
        w = rng.standard_normal((3, 3, 6, 8)).astype(np.float64)
        x = rng.standard_normal((2, 9, 9, 6)).astype(np.float32)
        for method, ranks in (("tucker2", (4, 5)), ("cp", (10,)),
                              ("tt", (4, 9, 6))):
            fact = decompose_layer(layer, w, method, ranks, seed=0)
            dense = forward_layer(
                layer,
                WeightStore({"c": fact.reconstruct().astype(np.float32)}),
                [x])
            got = forward_factorized(fact, [x])
            scale = max(float(np.abs(dense).max()), 1e-12)
            assert float(np.abs(got - dense).max()) / scale <= 1e-4, method


class TestSampleDataset:
    def test_seeded_and_sorted(self):
        data = WeightStore({
            DATASET_INPUTS: np.arange(40, dtype=np.float32).reshape(10, 4),
            DATASET_LABELS: np.arange(10, dtype=np.float32)})
        xa, la = sample_dataset(data, 4, seed=1)
        xb, lb = sample_dataset(data, 4, seed=1)
        assert np.array_equal(xa, xb) and np.array_equal(la, lb)
        # row order preserved relative to the source
        idx = (xa[:, 0] / 4).astype(int)
        assert np.all(np.diff(idx) > 0)

    def test_count_clamped(self):
        data = WeightStore({DATASET_INPUTS: np.zeros((3, 2), np.float32)})
        x, labels = sample_dataset(data, 100, seed=0)
        assert len(x) == 3 and labels is None

import numpy as np
import pytest

from lowrank.errors import FormatError, GraphError, ShapeError
from lowrank.ir import (LayerDesc, ModelDesc, WeightStore, check_weights,
                        conv_out_length)

from conftest import small_conv_net

rng = np.random.default_rng(3)


class TestConvOutLength:
    def test_same_padding_ceil(self):
        assert conv_out_length(16, 3, 1, "same") == 16
        assert conv_out_length(16, 3, 2, "same") == 8
        assert conv_out_length(15, 3, 2, "same") == 8
        assert conv_out_length(5, 2, 2, "same") == 3

    def test_valid_padding_floor(self):
        assert conv_out_length(16, 3, 1, "valid") == 14
        assert conv_out_length(16, 3, 2, "valid") == 7
        assert conv_out_length(5, 5, 1, "valid") == 1

    def test_hand_checked_grid(self):
        # (x, k, s) -> output positions counted by sliding a window by hand
        cases = {(7, 3, 1): (7, 5), (7, 3, 3): (3, 2), (9, 2, 2): (5, 4)}
        for (x, k, s), (same, valid) in cases.items():
            assert conv_out_length(x, k, s, "same") == same
            assert conv_out_length(x, k, s, "valid") == valid


class TestLayerDesc:
    def test_conv_defaults(self):
        layer = LayerDesc(name="c", kind="conv2d", kernel=(3, 3),
                          in_channels=4, out_channels=8)
        assert layer.stride == (1, 1)
        assert layer.padding == "same"
        assert layer.groups == 1
        assert layer.weight_shape() == (3, 3, 4, 8)

    def test_conv_kernel_rank_checked(self):
        with pytest.raises(ShapeError):
            LayerDesc(name="c", kind="conv2d", kernel=(3,),
                      in_channels=4, out_channels=8)

    def test_depthwise_preserves_channels(self):
        layer = LayerDesc(name="d", kind="depthwise_conv", kernel=(3, 3),
                          in_channels=6)
        assert layer.out_channels == 6
        assert layer.weight_shape() == (3, 3, 6)
        with pytest.raises(ShapeError):
            LayerDesc(name="d", kind="depthwise_conv", kernel=(3, 3),
                      in_channels=6, out_channels=7)

    def test_group_divisibility(self):
        with pytest.raises(ShapeError):
            LayerDesc(name="c", kind="conv2d", kernel=(3, 3), in_channels=4,
                      out_channels=8, groups=3)

    def test_unknown_kind(self):
        with pytest.raises(ShapeError):
            LayerDesc(name="x", kind="transformer")

    def test_out_shape_conv(self):
        layer = LayerDesc(name="c", kind="conv2d", kernel=(3, 3), stride=(2, 2),
                          in_channels=4, out_channels=8, padding="same")
        assert layer.out_shape([(13, 16, 4)]) == (7, 8, 8)

    def test_out_shape_fc_needs_match(self):
        layer = LayerDesc(name="f", kind="fc", in_channels=10, out_channels=3)
        assert layer.out_shape([(10,)]) == (3,)
        with pytest.raises(ShapeError):
            layer.out_shape([(9,)])

    def test_roundtrip_dict(self):
        layer = LayerDesc(name="c", kind="conv2d", kernel=(5, 5), stride=(2, 2),
                          in_channels=3, out_channels=16, padding="valid",
                          post_ops=("a",))
        again = LayerDesc.from_dict(layer.to_dict())
        assert again == layer

    def test_from_dict_rejects_unknown_field(self):
        with pytest.raises(FormatError):
            LayerDesc.from_dict({"name": "c", "kind": "fc", "in_channels": 2,
                                 "out_channels": 2, "wat": 1})


class TestModelDesc:
    def test_validate_and_shapes(self):
        model, _ = small_conv_net()
        model.validate()
        shapes = model.infer_shapes((8, 8, 3))
        assert shapes["c1"] == (8, 8, 8)
        assert shapes["p1"] == (4, 4, 8)
        assert shapes["fl"] == (192,)
        assert shapes["f1"] == (10,)

    def test_duplicate_names_rejected(self):
        layer = LayerDesc(name="f", kind="fc", in_channels=2, out_channels=2)
        with pytest.raises(GraphError):
            ModelDesc(layers=[layer, layer], edges=[], input="f",
                      output="f").validate()

    def test_edge_order_must_follow_layer_order(self):
        a = LayerDesc(name="a", kind="fc", in_channels=2, out_channels=2)
        b = LayerDesc(name="b", kind="fc", in_channels=2, out_channels=2)
        with pytest.raises(GraphError):
            ModelDesc(layers=[a, b], edges=[("b", "a")], input="b",
                      output="a").validate()

    def test_unreachable_layer_rejected(self):
        a = LayerDesc(name="a", kind="fc", in_channels=2, out_channels=2)
        b = LayerDesc(name="b", kind="fc", in_channels=2, out_channels=2)
        with pytest.raises(GraphError):
            ModelDesc(layers=[a, b], edges=[], input="a",
                      output="a").validate()

    def test_json_roundtrip_bit_exact(self, tmp_path):
        model, _ = small_conv_net()
        path = tmp_path / "m.json"
        model.save(path)
        again = ModelDesc.load(path)
        assert again == model
        assert again.to_json() == model.to_json()

    def test_branching_shapes(self):
        layers = [
            LayerDesc(name="c", kind="conv2d", kernel=(1, 1), in_channels=3,
                      out_channels=4),
            LayerDesc(name="l", kind="conv2d", kernel=(3, 3), in_channels=4,
                      out_channels=4),
            LayerDesc(name="s", kind="add"),
        ]
        model = ModelDesc(layers=layers,
                          edges=[("c", "l"), ("c", "s"), ("l", "s")],
                          input="c", output="s")
        model.validate()
        assert model.infer_shapes((6, 6, 3))["s"] == (6, 6, 4)


class TestWeightStore:
    def test_arrays_float32_readonly(self):
        store = WeightStore({"w": np.ones((2, 2), dtype=np.float64)})
        assert store["w"].dtype == np.float32
        with pytest.raises(ValueError):
            store["w"][0, 0] = 5

    def test_bytes_roundtrip_bit_exact(self):
        arrays = {"a": rng.standard_normal((3, 4)).astype(np.float32),
                  "zz/b": rng.standard_normal((2, 2, 2)).astype(np.float32)}
        store = WeightStore(arrays)
        again = WeightStore.from_bytes(store.to_bytes())
        assert set(again.names()) == set(arrays)
        for name, arr in arrays.items():
            assert np.array_equal(again[name], arr)
        assert again.to_bytes() == store.to_bytes()

    def test_file_roundtrip(self, tmp_path):
        store = WeightStore({"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
        path = tmp_path / "w.lrfw"
        store.save(path)
        assert np.array_equal(WeightStore.load(path)["w"], store["w"])

    def test_replace_and_drop(self):
        store = WeightStore({"a": np.zeros(2, np.float32),
                             "b": np.ones(2, np.float32)})
        out = store.replace({"c": np.full(2, 2.0, np.float32)}, drop=["a"])
        assert set(out.names()) == {"b", "c"}

    def test_rejects_corrupt_magic(self):
        blob = bytearray(WeightStore({"w": np.zeros(1, np.float32)}).to_bytes())
        blob[:4] = b"XXXX"
        with pytest.raises(FormatError):
            WeightStore.from_bytes(bytes(blob))

    def test_check_weights_flags_shape_mismatch(self):
        model, weights = small_conv_net()
        check_weights(model, weights)
        bad = weights.replace({"c1": np.zeros((3, 3, 3, 9), np.float32)})
        with pytest.raises(ShapeError):
            check_weights(model, bad)
        with pytest.raises(FormatError):
            check_weights(model, weights.replace({}, drop=["f1"]))

"""Model description and weight archive: save, load, verify, byte-stable.

The model graph serializes to JSON and the weights to a flat binary archive
of named float32 arrays. Round trips are exact, shape checking catches
mismatched weights, and both formats are byte-stable so identical inputs
always produce identical files.
"""

import tempfile
from pathlib import Path

import numpy as np

from lowrank import (LayerDesc, ModelDesc, ShapeError, WeightStore,
                     check_weights, forward_model)

rng = np.random.default_rng(2)
model = ModelDesc(
    layers=[
        LayerDesc(name="c1", kind="conv2d", kernel=(3, 3), in_channels=3,
                  out_channels=4, padding="same", post_ops=("a1",)),
        LayerDesc(name="a1", kind="activation", fn="relu"),
        LayerDesc(name="fl", kind="flatten"),
        LayerDesc(name="f1", kind="fc", in_channels=5 * 5 * 4,
                  out_channels=6),
    ],
    edges=[("c1", "a1"), ("a1", "fl"), ("fl", "f1")],
    input="c1", output="f1", metadata={"input_shape": [5, 5, 3]})
weights = WeightStore({
    "c1": rng.standard_normal((3, 3, 3, 4)),
    "f1": rng.standard_normal((5 * 5 * 4, 6)),
})

with tempfile.TemporaryDirectory() as tmp:
    mpath, wpath = Path(tmp, "model.json"), Path(tmp, "weights.lrfw")
    model.save(mpath)
    weights.save(wpath)
    print(f"model.json: {mpath.stat().st_size} bytes, "
          f"weights.lrfw: {wpath.stat().st_size} bytes")

    model2 = ModelDesc.load(mpath)
    weights2 = WeightStore.load(wpath)
    check_weights(model2, weights2)

    x = rng.standard_normal((4, 5, 5, 3)).astype(np.float32)
    same = np.array_equal(forward_model(model, weights, x),
                          forward_model(model2, weights2, x))
    print(f"round trip exact: {same}")

    # identical content -> identical bytes, regardless of insert order
    reordered = WeightStore({"f1": weights["f1"], "c1": weights["c1"]})
    print(f"archive byte-stable: {weights.to_bytes() == reordered.to_bytes()}")

    try:
        check_weights(model2, weights2.replace(
            {"c1": rng.standard_normal((3, 3, 3, 7))}))
    except ShapeError as err:
        print(f"shape check catches bad weights: {err}")

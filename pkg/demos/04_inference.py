"""Mini inference engine: a factorized chain computes the same function.

Builds a small conv net, runs a batch through it, then splices a Tucker-2
chain in place of the first conv layer. At full rank the outputs match the
dense model to float precision; at reduced rank they drift in a controlled
way that the rank budget dictates.
"""

import numpy as np

from lowrank import (LayerDesc, ModelDesc, WeightStore, decompose_layer,
                     forward_model, install_solutions)


def build_net(rng):
    layers = [
        LayerDesc(name="c1", kind="conv2d", kernel=(3, 3), in_channels=3,
                  out_channels=8, padding="same", post_ops=("a1",)),
        LayerDesc(name="a1", kind="activation", fn="relu"),
        LayerDesc(name="p1", kind="pool", mode="avg", kernel=(2, 2)),
        LayerDesc(name="fl", kind="flatten"),
        LayerDesc(name="f1", kind="fc", in_channels=4 * 4 * 8,
                  out_channels=5),
    ]
    edges = [("c1", "a1"), ("a1", "p1"), ("p1", "fl"), ("fl", "f1")]
    model = ModelDesc(layers=layers, edges=edges, input="c1", output="f1",
                      metadata={"input_shape": [8, 8, 3]})
    weights = WeightStore({
        "c1": rng.standard_normal((3, 3, 3, 8)) * 0.3,
        "f1": rng.standard_normal((4 * 4 * 8, 5)) * 0.1,
    })
    return model, weights


rng = np.random.default_rng(4)
model, weights = build_net(rng)
x = rng.standard_normal((16, 8, 8, 3))
y_dense = forward_model(model, weights, x)
print(f"dense output: shape {y_dense.shape}")

c1 = model.layers[0]
for ranks in [(3, 8), (2, 4), (1, 1)]:
    fact = decompose_layer(c1, weights["c1"], "tucker2", ranks)
    m2, w2 = install_solutions(model, weights, {"c1": fact})
    y = forward_model(m2, w2, x)
    drift = np.max(np.abs(y - y_dense)) / np.max(np.abs(y_dense))
    chain = " -> ".join(l.name for l in fact.sub_layers)
    print(f"tucker2 ranks {ranks}: chain {chain}, max drift {drift:.2e}")

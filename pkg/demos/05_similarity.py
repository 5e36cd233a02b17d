"""Feature-map cosine similarity as a cheap stand-in for accuracy.

Captures the reference feature map of one conv layer on a sample batch, then
scores factorized candidates by the cosine between the reference map and the
map the candidate chain produces from the same captured input. Higher rank
keeps the map closer to the original; the score falls smoothly as the rank
budget shrinks, which is what lets a search loop rank candidates without
running full evaluations.
"""

import numpy as np

from lowrank import (LayerDesc, ModelDesc, WeightStore, capture_feature_maps,
                     decompose_layer, layer_similarity)

rng = np.random.default_rng(9)
layers = [
    LayerDesc(name="c1", kind="conv2d", kernel=(3, 3), in_channels=3,
              out_channels=8, padding="same", post_ops=("a1",)),
    LayerDesc(name="a1", kind="activation", fn="relu"),
    LayerDesc(name="c2", kind="conv2d", kernel=(3, 3), in_channels=8,
              out_channels=12, padding="same"),
]
model = ModelDesc(layers=layers, edges=[("c1", "a1"), ("a1", "c2")],
                  input="c1", output="c2",
                  metadata={"input_shape": [6, 6, 3]})
weights = WeightStore({
    "c1": rng.standard_normal((3, 3, 3, 8)) * 0.4,
    "c2": rng.standard_normal((3, 3, 8, 12)) * 0.3,
})

samples = rng.standard_normal((8, 6, 6, 3))
capture = capture_feature_maps(model, weights, samples)

print("tucker2 candidates for c2, scored without any forward of the full net:")
for ranks in [(8, 12), (6, 9), (4, 6), (2, 3), (1, 1)]:
    fact = decompose_layer(layers[2], weights["c2"], "tucker2", ranks)
    sim = layer_similarity(fact, capture)
    params = sum(v.size for v in fact.weights.values())
    print(f"  ranks {str(ranks):>8}: similarity {sim:.6f}  params {params}")

print("\nsimilarity is 1.0 at full rank and decays as compression bites;")
print("a search loop freezes layers whose score stays above a threshold.")

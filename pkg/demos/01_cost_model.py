"""Analytical cost model: closed-form costs agree with the constructed chains.

Every factorization method has a closed-form cost (params, flops, feature-map
memory) and a concrete chain of sub-layers. This script evaluates both on a
conv layer and an fc layer and shows they are the same integers.
"""

import numpy as np

from lowrank import (CONV_METHODS, FC_METHODS, LayerDesc, cost_chain,
                     cost_factorized, cost_original, decompose_layer,
                     default_input_shape, rank_bounds, t3f_plans)

conv = LayerDesc(name="c", kind="conv2d", kernel=(3, 3), in_channels=16,
                 out_channels=24, padding="same")
fc = LayerDesc(name="f", kind="fc", in_channels=36, out_channels=20)

rng = np.random.default_rng(0)
weights = {
    "c": rng.standard_normal((3, 3, 16, 24)),
    "f": rng.standard_normal((36, 20)),
}


def mid_ranks(layer, method, plan=None):
    # a representative point: midpoint of each rank interval
    return tuple((lo + hi) // 2 for lo, hi in rank_bounds(layer, method, plan))


print(f"{'layer':>5} {'method':>7} {'ranks':>14} {'formula':>24} {'chain':>24}")
for layer in (conv, fc):
    methods = CONV_METHODS if layer.kind.startswith("conv") else FC_METHODS
    shape = default_input_shape(layer)
    base = cost_original(layer, shape)
    for method in methods:
        plan = t3f_plans(layer)[0] if method == "t3f" else None
        ranks = mid_ranks(layer, method, plan)
        formula = cost_factorized(layer, method, ranks, shape, plan=plan)
        fact = decompose_layer(layer, weights[layer.name], method, ranks,
                               plan=plan)
        chain = cost_chain(fact.sub_layers, shape)
        assert (formula.params, formula.flops, formula.fm) == \
               (chain.params, chain.flops, chain.fm)
        f_txt = f"p={formula.params} f={formula.flops} fm={formula.fm}"
        c_txt = f"p={chain.params} f={chain.flops} fm={chain.fm}"
        print(f"{layer.name:>5} {method:>7} {str(ranks):>14} {f_txt:>24} "
              f"{c_txt:>24}")
    print(f"{layer.name:>5} {'dense':>7} {'':>14} "
          f"{'p=%d f=%d fm=%d' % (base.params, base.flops, base.fm):>24}")

print("\nformula == chain for every method; costs are exact integers.")

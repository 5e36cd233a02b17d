"""Analytical cost model: parameters, FLOPs, and feature-map elements.

Costs follow the usual conventions for compression work: a multiply
plus its accumulate counts as 2 FLOPs, biases are ignored, and the
feature-map (fm) column counts the elements a layer materializes, so
reshape and flatten views contribute nothing.  All three quantities
are exact integers, which lets enumeration and census code compare
configurations without floating-point noise.

``cost_factorized`` gives closed-form costs for each factorization
method; they agree exactly, integer for integer, with summing
``cost_original`` over the factorized sub-layer chain that
``decompose.chain_descs`` constructs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import RankError, ShapeError
from .ir import CONV_KINDS, LayerDesc, ModelDesc, conv_out_length

CONV_METHODS = ("tucker2", "cp", "tt")
FC_METHODS = ("svd", "qr", "t3f")
METHODS = CONV_METHODS + FC_METHODS

OBJECTIVES = ("params", "flops", "overall_mem")


@dataclass(frozen=True)
class CostReport:
    """Exact integer cost triple for a layer or a group of layers."""

    params: int
    flops: int
    fm: int

    @property
    def overall_mem(self) -> int:
        return self.params + self.fm

    def get(self, objective: str) -> int:
        if objective == "params":
            return self.params
        if objective == "flops":
            return self.flops
        if objective == "overall_mem":
            return self.overall_mem
        raise RankError(f"unknown objective {objective!r}")

    def __add__(self, other: "CostReport") -> "CostReport":
        return CostReport(self.params + other.params, self.flops + other.flops,
                          self.fm + other.fm)

    def to_dict(self) -> dict:
        return {"params": self.params, "flops": self.flops, "fm": self.fm,
                "overall_mem": self.overall_mem}


ZERO_COST = CostReport(0, 0, 0)


def compression_ratio(original: int, factorized: int) -> float:
    """Fractional reduction, 1 - factorized/original.  Negative when
    the factorized form is larger."""
    if original <= 0:
        raise RankError("original cost must be positive")
    return 1.0 - factorized / original


def default_input_shape(layer: LayerDesc) -> tuple:
    """Smallest per-sample input producing one output position.

    Used when no real input is given: costs then count one output
    position per spatial axis, which keeps ratios and validity
    comparisons exact for stride-divisible inputs of any size.
    """
    if layer.kind == "fc":
        return (layer.in_channels,)
    if layer.kind in CONV_KINDS or layer.kind == "depthwise_conv":
        if layer.padding == "valid":
            spatial = tuple(layer.kernel)
        else:
            spatial = tuple(layer.stride)
        return spatial + (layer.in_channels,)
    raise ShapeError(f"{layer.name}: no default input for kind {layer.kind!r}")


def cost_original(layer: LayerDesc, input_shape: tuple,
                  out_shape: tuple = None) -> CostReport:
    """Exact cost of running one sample through ``layer`` as-is.

    ``out_shape`` may be supplied for layers with several inputs,
    where it cannot be inferred from ``input_shape`` alone.
    """
    k = layer.kind
    out = out_shape if out_shape is not None else layer.out_shape([tuple(input_shape)])
    out_elems = int(math.prod(out))

    if k in CONV_KINDS:
        window = math.prod(layer.kernel) * (layer.in_channels // layer.groups)
        params = window * layer.out_channels
        return CostReport(params, 2 * out_elems * window, out_elems)
    if k == "depthwise_conv":
        window = math.prod(layer.kernel)
        return CostReport(window * layer.in_channels, 2 * out_elems * window,
                          out_elems)
    if k == "fc":
        params = layer.in_channels * layer.out_channels
        return CostReport(params, 2 * params, out_elems)
    if k == "tt_core":
        params = layer.rank_in * layer.m * layer.n * layer.rank_out
        return CostReport(params, 2 * layer.rank_in * layer.m * out_elems,
                          out_elems)
    if k == "batchnorm":
        channels = input_shape[-1]
        return CostReport(4 * channels, 2 * out_elems, out_elems)
    if k == "activation":
        return CostReport(0, out_elems, out_elems)
    if k == "pool":
        return CostReport(0, out_elems * math.prod(layer.kernel), out_elems)
    if k in ("add", "concat"):
        return CostReport(0, out_elems if k == "add" else 0, out_elems)
    if k in ("reshape", "flatten"):
        return ZERO_COST
    raise ShapeError(f"{layer.name}: no cost rule for kind {k!r}")


def cost_chain(layers: list, input_shape: tuple) -> CostReport:
    """Sum of per-sublayer costs along a linear chain of layers."""
    total = ZERO_COST
    shape = tuple(input_shape)
    for layer in layers:
        total = total + cost_original(layer, shape)
        shape = layer.out_shape([shape])
    return total


# -- closed forms per method -----------------------------------------------


def _conv_geometry(layer: LayerDesc, input_shape: tuple):
    """Per-axis input and output extents for a conv layer."""
    if input_shape is None:
        input_shape = default_input_shape(layer)
    spatial_in = tuple(input_shape[:-1])
    if input_shape[-1] != layer.in_channels or len(spatial_in) != len(layer.kernel):
        raise ShapeError(f"{layer.name}: input {input_shape} does not match layer")
    spatial_out = tuple(
        conv_out_length(spatial_in[i], layer.kernel[i], layer.stride[i],
                        layer.padding)
        for i in range(len(spatial_in)))
    return spatial_in, spatial_out


def _stagewise_conv_cost(channel_pairs, kernels, positions):
    """Cost of a chain of dense conv stages.

    ``channel_pairs`` is a list of (c_in, c_out), ``kernels`` the window
    size of each stage, ``positions`` the output-position count of each
    stage.  Depthwise stages pass c_in = 1 with c_out = channel count.
    """
    params = flops = fm = 0
    for (cin, cout), window, pos in zip(channel_pairs, kernels, positions):
        params += window * cin * cout
        flops += 2 * pos * cout * window * cin
        fm += pos * cout
    return CostReport(params, flops, fm)


def cost_tucker2(layer: LayerDesc, ranks: tuple, input_shape: tuple = None) -> CostReport:
    """Pointwise reduce, spatial core conv, pointwise expand."""
    (r1, r2) = ranks
    spatial_in, spatial_out = _conv_geometry(layer, input_shape)
    c, f = layer.in_channels, layer.out_channels
    pos_in, pos_out = math.prod(spatial_in), math.prod(spatial_out)
    return _stagewise_conv_cost(
        [(c, r1), (r1, r2), (r2, f)],
        [1, math.prod(layer.kernel), 1],
        [pos_in, pos_out, pos_out])


def cost_cp(layer: LayerDesc, ranks: tuple, input_shape: tuple = None) -> CostReport:
    """Pointwise reduce, one depthwise stage per spatial axis, expand."""
    (r,) = ranks
    spatial_in, spatial_out = _conv_geometry(layer, input_shape)
    c, f = layer.in_channels, layer.out_channels
    dim = len(layer.kernel)
    # Spatial extents shrink axis by axis as the depthwise stages apply.
    extents = list(spatial_in)
    positions, kernels, channels = [math.prod(extents)], [1], [(c, r)]
    for axis in range(dim):
        extents[axis] = spatial_out[axis]
        positions.append(math.prod(extents))
        kernels.append(layer.kernel[axis])
        channels.append((1, r))
    positions.append(math.prod(spatial_out))
    kernels.append(1)
    channels.append((r, f))
    return _stagewise_conv_cost(channels, kernels, positions)


def cost_tt_conv(layer: LayerDesc, ranks: tuple, input_shape: tuple = None) -> CostReport:
    """Pointwise reduce, one dense single-axis stage per spatial axis,
    pointwise expand; ranks has one entry per internal link."""
    dim = len(layer.kernel)
    if len(ranks) != dim + 1:
        raise RankError(f"tt on a {dim}-d conv needs {dim + 1} ranks")
    spatial_in, spatial_out = _conv_geometry(layer, input_shape)
    c, f = layer.in_channels, layer.out_channels
    extents = list(spatial_in)
    positions, kernels, channels = [math.prod(extents)], [1], [(c, ranks[0])]
    for axis in range(dim):
        extents[axis] = spatial_out[axis]
        positions.append(math.prod(extents))
        kernels.append(layer.kernel[axis])
        channels.append((ranks[axis], ranks[axis + 1]))
    positions.append(math.prod(spatial_out))
    kernels.append(1)
    channels.append((ranks[dim], f))
    return _stagewise_conv_cost(channels, kernels, positions)


def cost_svd(layer: LayerDesc, ranks: tuple, input_shape: tuple = None) -> CostReport:
    (r,) = ranks
    m, n = layer.in_channels, layer.out_channels
    return CostReport((m + n) * r, 2 * (m + n) * r, r + n)


cost_qr = cost_svd  # identical factor shapes, different construction


def cost_t3f(layer: LayerDesc, ranks: tuple, input_shape: tuple = None,
             plan: tuple = None) -> CostReport:
    """TT-matrix chain over a factorization plan.

    ``plan`` is ``(ms, ns)`` with ``prod(ms) == M`` and ``prod(ns) ==
    N``; ``ranks`` are the d-1 internal link ranks (the outer two are
    fixed to 1).
    """
    if plan is None:
        raise RankError("t3f cost requires a factorization plan")
    ms, ns = plan
    if math.prod(ms) != layer.in_channels or math.prod(ns) != layer.out_channels:
        raise RankError(f"plan {plan} does not factor layer {layer.name}")
    d = len(ms)
    if len(ns) != d or len(ranks) != d - 1:
        raise RankError("plan arity and rank count do not agree")
    full = (1,) + tuple(ranks) + (1,)
    params = flops = fm = 0
    for t in range(1, d + 1):
        m_rest = math.prod(ms[t:])
        n_done = math.prod(ns[:t])
        z_elems = m_rest * n_done * full[t]
        params += full[t - 1] * ms[t - 1] * ns[t - 1] * full[t]
        flops += 2 * full[t - 1] * ms[t - 1] * z_elems
        fm += z_elems
    return CostReport(params, flops, fm)


_COST_FUNCS = {
    "tucker2": cost_tucker2,
    "cp": cost_cp,
    "tt": cost_tt_conv,
    "svd": cost_svd,
    "qr": cost_qr,
}


def _expected_rank_count(layer: LayerDesc, method: str, plan) -> int:
    if method == "tucker2":
        return 2
    if method in ("cp", "svd", "qr"):
        return 1
    if method == "tt":
        return len(layer.kernel) + 1
    if method == "t3f":
        if plan is None:
            raise RankError("t3f costs need a reshape plan")
        return len(plan[0]) - 1
    raise RankError(f"unknown method {method!r}")


def cost_factorized(layer: LayerDesc, method: str, ranks: tuple,
                    input_shape: tuple = None, plan: tuple = None) -> CostReport:
    """Closed-form cost of ``layer`` factorized by ``method`` at ``ranks``."""
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != _expected_rank_count(layer, method, plan):
        raise RankError(f"{method} expects "
                        f"{_expected_rank_count(layer, method, plan)} ranks, "
                        f"got {len(ranks)}")
    if any(r < 1 for r in ranks):
        raise RankError(f"ranks must be positive, got {ranks}")
    if method == "t3f":
        return cost_t3f(layer, ranks, input_shape, plan)
    try:
        func = _COST_FUNCS[method]
    except KeyError:
        raise RankError(f"unknown method {method!r}") from None
    return func(layer, ranks, input_shape)


def method_kind(method: str) -> str:
    """Which layer family a method applies to: 'conv' or 'fc'."""
    if method in CONV_METHODS:
        return "conv"
    if method in FC_METHODS:
        return "fc"
    raise RankError(f"unknown method {method!r}")


# -- whole-model accounting -------------------------------------------------


def model_breakdown(model: ModelDesc, input_shape: tuple) -> dict:
    """Aggregate costs by layer family.

    Returns conv, fc, other, and total CostReports plus a per-layer
    map, using one sample of the given input shape.
    """
    shapes = model.infer_shapes(input_shape)
    per_layer = {}
    buckets = {"conv": ZERO_COST, "fc": ZERO_COST, "other": ZERO_COST}
    for layer in model.layers:
        if layer.name == model.input:
            shape_in = tuple(input_shape)
        else:
            preds = model.predecessors(layer.name)
            shape_in = shapes[preds[0]]
        cost = cost_original(layer, shape_in, out_shape=shapes[layer.name])
        per_layer[layer.name] = cost
        if layer.kind in CONV_KINDS or layer.kind == "depthwise_conv":
            buckets["conv"] = buckets["conv"] + cost
        elif layer.kind in ("fc", "tt_core"):
            buckets["fc"] = buckets["fc"] + cost
        else:
            buckets["other"] = buckets["other"] + cost
    total = buckets["conv"] + buckets["fc"] + buckets["other"]
    return {"conv": buckets["conv"], "fc": buckets["fc"],
            "other": buckets["other"], "total": total, "layers": per_layer}

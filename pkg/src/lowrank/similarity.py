"""Minimal forward execution and feature-map cosine scoring.

Runs original and factorized layers on sample batches so the search
loop can measure how much a candidate factorization perturbs each
layer's output.  Correctness, not speed, is the contract: every kind
has a straightforward vectorized implementation that the test suite
checks against naive loop nests.

Similarity of a factorized layer is the batch mean of the cosine
between its flattened output and the original layer's output, both
taken after the layer's post-ops (activation, pooling, normalization)
so the comparison happens at the boundary the rest of the network
actually sees.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .ir import (CONV_KINDS, DATASET_INPUTS, DATASET_LABELS, LayerDesc,
                 ModelDesc, WeightStore)


def _pad_amounts(size: int, k: int, stride: int) -> tuple:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _pad_input(x: np.ndarray, kernel, stride, padding, fill=0.0):
    if padding == "valid":
        return x
    dim = len(kernel)
    pads = [(0, 0)]
    for i in range(dim):
        pads.append(_pad_amounts(x.shape[1 + i], kernel[i], stride[i]))
    pads.append((0, 0))
    if all(p == (0, 0) for p in pads):
        return x
    return np.pad(x, pads, constant_values=fill)


def _windows(x: np.ndarray, kernel, stride):
    """Sliding windows over the spatial axes, stride applied.

    Input (B, X1..Xd, C) gives (B, X1'..Xd', C, K1..Kd).
    """
    dim = len(kernel)
    axes = tuple(range(1, 1 + dim))
    for i in range(dim):
        if x.shape[1 + i] < kernel[i]:
            raise ShapeError(f"window {kernel[i]} larger than input "
                             f"extent {x.shape[1 + i]}")
    view = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=axes)
    slicer = (slice(None),) + tuple(slice(None, None, s) for s in stride)
    return view[slicer]


def _conv_nd(x, w, kernel, stride, padding, groups=1):
    dim = len(kernel)
    x = _pad_input(x, kernel, stride, padding)
    win = _windows(x, kernel, stride)  # (B, sp.., C, K..)
    c_axis = 1 + dim
    k_axes = list(range(c_axis + 1, c_axis + 1 + dim))
    if groups == 1:
        return np.tensordot(win, w, axes=([c_axis] + k_axes,
                                          [dim] + list(range(dim))))
    c_per = x.shape[-1] // groups
    f_per = w.shape[-1] // groups
    head = (slice(None),) * c_axis
    outs = []
    for g in range(groups):
        wg = win[head + (slice(g * c_per, (g + 1) * c_per),)]
        kg = w[..., g * f_per:(g + 1) * f_per]
        outs.append(np.tensordot(wg, kg, axes=([c_axis] + k_axes,
                                               [dim] + list(range(dim)))))
    return np.concatenate(outs, axis=-1)


def _depthwise_nd(x, w, kernel, stride, padding):
    dim = len(kernel)
    x = _pad_input(x, kernel, stride, padding)
    win = _windows(x, kernel, stride)          # (B, sp.., C, K..)
    w_t = np.moveaxis(w, -1, 0)                # (C, K..)
    prod = win * w_t                           # broadcast over batch/space
    return prod.sum(axis=tuple(range(win.ndim - dim, win.ndim)))


def _pool_nd(x, layer: LayerDesc):
    kernel, stride, padding = layer.kernel, layer.stride, layer.padding
    dim = len(kernel)
    k_axes = tuple(range(1 + dim + 1, 1 + dim + 1 + dim))
    if layer.mode == "max":
        fill = -np.inf
        x = _pad_input(x, kernel, stride, padding, fill=fill)
        return _windows(x, kernel, stride).max(axis=k_axes)
    # Average over the window, excluding any padding.
    x_pad = _pad_input(x, kernel, stride, padding, fill=0.0)
    total = _windows(x_pad, kernel, stride).sum(axis=k_axes)
    ones = np.ones(x.shape[1:-1] + (1,), dtype=x.dtype)[None]
    counts = _windows(_pad_input(ones, kernel, stride, padding, fill=0.0),
                      kernel, stride).sum(axis=k_axes)
    return total / counts


def _activation(x, fn):
    if fn == "relu":
        return np.maximum(x, 0)
    if fn == "tanh":
        return np.tanh(x)
    if fn == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if fn == "softmax":
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    raise ShapeError(f"unknown activation {fn!r}")


def forward_layer(layer: LayerDesc, weights, inputs):
    """Run one layer on a batch.

    ``inputs`` is a single (batch, ...) array, or a list of them for
    layers with several predecessors.  ``weights`` is any mapping from
    record name to array (a WeightStore works).
    """
    multi = layer.kind in ("add", "concat")
    if multi:
        xs = inputs if isinstance(inputs, (list, tuple)) else [inputs]
    else:
        x = inputs[0] if isinstance(inputs, (list, tuple)) else inputs

    k = layer.kind
    if k in CONV_KINDS:
        if x.ndim != len(layer.kernel) + 2 or x.shape[-1] != layer.in_channels:
            raise ShapeError(f"{layer.name}: input {x.shape} does not match")
        return _conv_nd(x, np.asarray(weights[layer.name]), layer.kernel,
                        layer.stride, layer.padding, layer.groups)
    if k == "depthwise_conv":
        if x.ndim != len(layer.kernel) + 2 or x.shape[-1] != layer.in_channels:
            raise ShapeError(f"{layer.name}: input {x.shape} does not match")
        return _depthwise_nd(x, np.asarray(weights[layer.name]), layer.kernel,
                             layer.stride, layer.padding)
    if k == "fc":
        if x.ndim != 2 or x.shape[1] != layer.in_channels:
            raise ShapeError(f"{layer.name}: input {x.shape} does not match")
        return x @ np.asarray(weights[layer.name])
    if k == "activation":
        return _activation(x, layer.fn)
    if k == "pool":
        return _pool_nd(x, layer)
    if k == "batchnorm":
        scale = np.asarray(weights[f"{layer.name}/scale"])
        shift = np.asarray(weights[f"{layer.name}/shift"])
        mean = np.asarray(weights[f"{layer.name}/mean"])
        var = np.asarray(weights[f"{layer.name}/var"])
        return scale * (x - mean) / np.sqrt(var + layer.eps) + shift
    if k == "reshape":
        return x.reshape((x.shape[0],) + tuple(layer.shape))
    if k == "flatten":
        return x.reshape(x.shape[0], -1)
    if k == "tt_core":
        w = np.asarray(weights[layer.name])
        batch, q, r_in = x.shape
        if r_in != layer.rank_in or q % layer.m:
            raise ShapeError(f"{layer.name}: input {x.shape} does not match core")
        xv = x.reshape(batch, layer.m, q // layer.m, r_in)
        out = np.einsum("bmqr,rmns->bqns", xv, w)
        return out.reshape(batch, q // layer.m * layer.n, layer.rank_out)
    if k == "add":
        out = xs[0]
        for extra in xs[1:]:
            out = out + extra
        return out
    if k == "concat":
        return np.concatenate(xs, axis=-1)
    raise ShapeError(f"{layer.name}: unsupported kind {k!r}")


def forward_model(model: ModelDesc, weights, x: np.ndarray,
                  keep_all: bool = False):
    """Run the whole model; optionally return every layer's output."""
    outputs = {}
    for layer in model.layers:
        if layer.name == model.input:
            ins = [x]
        else:
            ins = [outputs[p] for p in model.predecessors(layer.name)]
        outputs[layer.name] = forward_layer(layer, weights, ins)
    if keep_all:
        return outputs[model.output], outputs
    return outputs[model.output]


def forward_factorized(fact, inputs):
    """Chain a factorized layer's sub-layers over a batch."""
    x = inputs
    for sub in fact.sub_layers:
        x = forward_layer(sub, fact.weights, x)
    return x


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two flattened vectors.

    A zero-norm side scores 0 (with a warning): a dead output is
    treated as maximally dissimilar rather than undefined, so it can
    never satisfy a freeze threshold by accident.
    """
    av = np.asarray(a, dtype=np.float64).ravel()
    bv = np.asarray(b, dtype=np.float64).ravel()
    if av.shape != bv.shape:
        raise ShapeError(f"cosine on unequal lengths {av.size} != {bv.size}")
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine of a zero vector scored as 0", RuntimeWarning,
                      stacklevel=2)
        return 0.0
    return float(av @ bv / (na * nb))


@dataclass
class FeatureMapCapture:
    """Per-layer reference activations from one pass of the original model.

    For every target layer: the batch that entered it and the batch
    that left its post-op chain.  Keeps the model and weights around
    so factorized candidates can replay the same post-ops.
    """

    model: ModelDesc
    weights: WeightStore
    inputs: dict = field(default_factory=dict)
    references: dict = field(default_factory=dict)

    def reference_point(self, layer: LayerDesc) -> str:
        return layer.post_ops[-1] if layer.post_ops else layer.name


def capture_feature_maps(model: ModelDesc, weights: WeightStore,
                         samples: np.ndarray, targets=None) -> FeatureMapCapture:
    """Record each target layer's input and post-op output batches."""
    if targets is None:
        targets = [l.name for l in model.layers
                   if l.kind in CONV_KINDS + ("fc",)]
    capture = FeatureMapCapture(model, weights)
    _, outputs = forward_model(model, weights, samples, keep_all=True)
    for name in targets:
        layer = model.layer(name)
        if name == model.input:
            capture.inputs[name] = samples
        else:
            preds = model.predecessors(name)
            capture.inputs[name] = outputs[preds[0]]
        capture.references[name] = outputs[capture.reference_point(layer)]
    return capture


def layer_similarity(fact, capture: FeatureMapCapture) -> float:
    """Batch-mean cosine between a factorized layer and its reference.

    The factorized output is passed through the same post-ops as the
    original before comparison.
    """
    name = fact.source
    if name not in capture.inputs:
        raise ShapeError(f"capture has no entry for layer {name!r}")
    layer = capture.model.layer(name)
    out = forward_factorized(fact, capture.inputs[name])
    for op_name in layer.post_ops:
        op = capture.model.layer(op_name)
        out = forward_layer(op, capture.weights, out)
    ref = capture.references[name]
    if out.shape != ref.shape:
        raise ShapeError(f"{name}: factorized output {out.shape} does not "
                         f"match reference {ref.shape}")
    sims = [cosine(out[i], ref[i]) for i in range(out.shape[0])]
    return float(np.mean(sims))


def sample_dataset(dataset: WeightStore, count: int, seed: int):
    """Seeded subset of the container's inputs (and labels when present)."""
    inputs = dataset[DATASET_INPUTS]
    total = inputs.shape[0]
    take = min(count, total)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(total, size=take, replace=False))
    labels = dataset[DATASET_LABELS][idx] if DATASET_LABELS in dataset else None
    return inputs[idx], labels

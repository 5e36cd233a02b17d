"""The six low-rank factorizations and their layer-chain realizations.

Convolutions factor three ways: a Tucker decomposition restricted to
the channel modes (pointwise reduce, dense spatial core, pointwise
expand), a CP decomposition (pointwise reduce, one depthwise stage per
spatial axis, pointwise expand), and a tensor-train decomposition
(pointwise reduce, one dense single-axis stage per spatial axis,
pointwise expand).  Dense layers factor by truncated SVD, by
column-pivoted truncated QR, or as a TT-matrix over a factorization
plan of the two matrix dimensions.

Each decomposer returns a :class:`FactorizedLayer` that carries the
replacement sub-layer descriptions together with their weights, can
rebuild the dense weight it approximates, and reports its exact cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import khatri_rao

from . import linalg
from .costs import CostReport, cost_chain, default_input_shape
from .errors import DecompositionError, RankError, ShapeError
from .ir import CONV_KINDS, LayerDesc

CP_MAX_ITER = 500
CP_FIT_TOL = 1e-8
CP_DIVERGENCE_PATIENCE = 5
# below this a fit drop is stall noise, not divergence; float32 inputs
# plateau with oscillations around 1e-5
CP_DROP_TOL = 1e-3
CP_STALL_PATIENCE = 10
TUCKER_MAX_ITER = 50
TUCKER_FIT_TOL = 1e-7


@dataclass
class FactorizedLayer:
    """A layer replaced by an equivalent low-rank chain."""

    source: str
    method: str
    ranks: tuple
    sub_layers: list
    weights: dict
    plan: tuple | None = None

    def cost(self, input_shape: tuple = None) -> CostReport:
        if input_shape is None:
            input_shape = self._default_input()
        return cost_chain(self.sub_layers, input_shape)

    def _default_input(self) -> tuple:
        first = self.sub_layers[0]
        if first.kind == "reshape":
            return (int(math.prod(first.shape)),)
        return default_input_shape(first)

    def reconstruct(self) -> np.ndarray:
        """Dense weight tensor this chain approximates."""
        order = [self.weights[l.name] for l in self.sub_layers
                 if l.name in self.weights]
        return _RECONSTRUCT[self.method](order, self.plan)


# -- sub-layer chain construction -------------------------------------------


def _axis_kernel(kernel: tuple, axis: int) -> tuple:
    return tuple(k if i == axis else 1 for i, k in enumerate(kernel))


def _axis_stride(stride: tuple, axis: int) -> tuple:
    return tuple(s if i == axis else 1 for i, s in enumerate(stride))


def _pointwise(name, kind, cin, cout):
    dim = CONV_KINDS.index(kind) + 1
    return LayerDesc(name=name, kind=kind, kernel=(1,) * dim,
                     in_channels=cin, out_channels=cout)


def chain_descs(layer: LayerDesc, method: str, ranks: tuple,
                plan: tuple = None) -> list:
    """Sub-layer descriptions replacing ``layer`` under ``method``.

    Pure topology: weights are attached by the decomposers.  Sub-layer
    names extend the source name so they stay unique in a model.
    """
    name = layer.name
    if method == "tucker2":
        r1, r2 = ranks
        core = LayerDesc(name=f"{name}.lrf1", kind=layer.kind,
                         kernel=layer.kernel, stride=layer.stride,
                         padding=layer.padding, in_channels=r1, out_channels=r2)
        return [_pointwise(f"{name}.lrf0", layer.kind, layer.in_channels, r1),
                core,
                _pointwise(f"{name}.lrf2", layer.kind, r2, layer.out_channels)]
    if method == "cp":
        (r,) = ranks
        subs = [_pointwise(f"{name}.lrf0", layer.kind, layer.in_channels, r)]
        for axis in range(len(layer.kernel)):
            subs.append(LayerDesc(
                name=f"{name}.lrf{axis + 1}", kind="depthwise_conv",
                kernel=_axis_kernel(layer.kernel, axis),
                stride=_axis_stride(layer.stride, axis),
                padding=layer.padding, in_channels=r))
        subs.append(_pointwise(f"{name}.lrf{len(layer.kernel) + 1}",
                               layer.kind, r, layer.out_channels))
        return subs
    if method == "tt":
        dim = len(layer.kernel)
        if len(ranks) != dim + 1:
            raise RankError(f"tt on a {dim}-d conv needs {dim + 1} ranks")
        subs = [_pointwise(f"{name}.lrf0", layer.kind, layer.in_channels, ranks[0])]
        for axis in range(dim):
            subs.append(LayerDesc(
                name=f"{name}.lrf{axis + 1}", kind=layer.kind,
                kernel=_axis_kernel(layer.kernel, axis),
                stride=_axis_stride(layer.stride, axis),
                padding=layer.padding,
                in_channels=ranks[axis], out_channels=ranks[axis + 1]))
        subs.append(_pointwise(f"{name}.lrf{dim + 1}", layer.kind,
                               ranks[dim], layer.out_channels))
        return subs
    if method in ("svd", "qr"):
        (r,) = ranks
        return [LayerDesc(name=f"{name}.lrf0", kind="fc",
                          in_channels=layer.in_channels, out_channels=r),
                LayerDesc(name=f"{name}.lrf1", kind="fc",
                          in_channels=r, out_channels=layer.out_channels)]
    if method == "t3f":
        if plan is None:
            raise RankError("t3f requires a factorization plan")
        ms, ns = plan
        d = len(ms)
        full = (1,) + tuple(ranks) + (1,)
        subs = [LayerDesc(name=f"{name}.lrf0", kind="reshape",
                          shape=(layer.in_channels, 1))]
        for t in range(d):
            subs.append(LayerDesc(name=f"{name}.lrf{t + 1}", kind="tt_core",
                                  m=ms[t], n=ns[t],
                                  rank_in=full[t], rank_out=full[t + 1]))
        subs.append(LayerDesc(name=f"{name}.lrf{d + 1}", kind="reshape",
                              shape=(layer.out_channels,)))
        return subs
    raise RankError(f"unknown method {method!r}")


# -- convolution decomposers -------------------------------------------------


def _conv_tensor_modes(layer: LayerDesc):
    dim = len(layer.kernel)
    return dim, dim + 1  # channel mode, filter mode of the (K.., C, F) tensor


def tucker2_decompose(layer: LayerDesc, weight: np.ndarray, ranks: tuple):
    """Tucker restricted to the channel and filter modes.

    Initializes factors from the truncated SVDs of the two unfoldings,
    then refines them by alternating orthogonal iteration until the
    fit stops improving.
    """
    r1, r2 = ranks
    w = np.asarray(weight, dtype=np.float64)
    c_mode, f_mode = _conv_tensor_modes(layer)
    norm_w = np.linalg.norm(w)

    a_c, _, _ = linalg.svd(linalg.unfold(w, c_mode), r1)
    a_f, _, _ = linalg.svd(linalg.unfold(w, f_mode), r2)
    last_fit = -np.inf
    core = None
    for _ in range(TUCKER_MAX_ITER):
        partial = linalg.mode_n_product(w, a_f.T, f_mode)
        a_c, _, _ = linalg.svd(linalg.unfold(partial, c_mode), r1)
        partial = linalg.mode_n_product(w, a_c.T, c_mode)
        a_f, _, _ = linalg.svd(linalg.unfold(partial, f_mode), r2)
        core = linalg.mode_n_product(partial, a_f.T, f_mode)
        # Orthonormal factors: residual^2 = |W|^2 - |core|^2.
        gap = max(norm_w**2 - np.linalg.norm(core)**2, 0.0)
        fit = 1.0 - math.sqrt(gap) / norm_w if norm_w else 1.0
        if fit - last_fit < TUCKER_FIT_TOL:
            break
        last_fit = fit

    subs = chain_descs(layer, "tucker2", ranks)
    dim = len(layer.kernel)
    ones = (1,) * dim
    weights = {
        subs[0].name: a_c.reshape(ones + (layer.in_channels, r1)),
        subs[1].name: core,
        subs[2].name: a_f.T.reshape(ones + (r2, layer.out_channels)),
    }
    return FactorizedLayer(layer.name, "tucker2", tuple(ranks), subs, weights)


class _DivergenceGuard:
    """Abort an iterative fit after sustained regression.

    Tracks the best fit seen; raises DecompositionError once the fit
    drops by more than ``drop_tol`` ``patience`` times in a row,
    carrying whatever payload produced the best fit.  Drops smaller
    than ``drop_tol`` count as a plateau, not a regression.
    """

    def __init__(self, patience: int = CP_DIVERGENCE_PATIENCE,
                 drop_tol: float = CP_DROP_TOL):
        self.patience = patience
        self.drop_tol = drop_tol
        self.best_fit = -np.inf
        self.best_payload = None
        self.prev_fit = -np.inf
        self.streak = 0

    def update(self, fit: float, payload):
        if fit > self.best_fit:
            self.best_fit = fit
            self.best_payload = payload
        if fit < self.prev_fit - self.drop_tol:
            self.streak += 1
            if self.streak >= self.patience:
                raise DecompositionError(
                    f"fit decreased {self.streak} iterations in a row",
                    best=self.best_payload)
        else:
            self.streak = 0
        self.prev_fit = fit


def _cp_init(tensor: np.ndarray, rank: int, rng: np.random.Generator):
    """Leading singular vectors per mode, random columns past them."""
    factors = []
    for mode in range(tensor.ndim):
        size = tensor.shape[mode]
        u, _, _ = linalg.svd(linalg.unfold(tensor, mode))
        keep = min(rank, u.shape[1])
        f = np.empty((size, rank))
        f[:, :keep] = u[:, :keep]
        if keep < rank:
            f[:, keep:] = rng.standard_normal((size, rank - keep))
        factors.append(f)
    return factors


def _cp_init_exact(tensor: np.ndarray, rank: int):
    """Exact CP at the maximal admissible rank prod(dims)/max(dims).

    Every mode but the largest gets indicator columns; the largest
    mode absorbs the tensor values.  Reconstruction is exact, so the
    alternating refinement converges immediately.
    """
    shape = tensor.shape
    big = int(np.argmax(shape))
    rest = [i for i in range(tensor.ndim) if i != big]
    factors = [None] * tensor.ndim
    grid = np.unravel_index(np.arange(rank), [shape[i] for i in rest])
    for pos, mode in enumerate(rest):
        f = np.zeros((shape[mode], rank))
        f[grid[pos], np.arange(rank)] = 1.0
        factors[mode] = f
    factors[big] = linalg.unfold(tensor, big)[:, :]
    # Column order of the unfolding matches the row-major rest-grid.
    return factors


def cp_decompose(layer: LayerDesc, weight: np.ndarray, ranks: tuple,
                 seed: int = 0):
    """CP decomposition of the conv tensor by alternating least squares.

    One shared rank ties together one factor per tensor mode (spatial
    axes, input channels, output channels).  Keeps the factors with the
    best fit; stops when the fit change drops below tolerance or the
    best fit stops improving; raises DecompositionError after five
    consecutive meaningful fit regressions.
    """
    (rank,) = ranks
    w = np.asarray(weight, dtype=np.float64)
    max_rank = int(np.prod(w.shape)) // max(w.shape)
    if not 1 <= rank <= max_rank:
        raise RankError(f"cp rank {rank} outside [1, {max_rank}]")
    norm_w = np.linalg.norm(w)
    rng = np.random.default_rng(seed)

    if rank == max_rank:
        factors = _cp_init_exact(w, rank)
    else:
        factors = _cp_init(w, rank, rng)

    n_modes = w.ndim
    guard = _DivergenceGuard()
    last_fit = -np.inf
    stalled = 0
    for _ in range(CP_MAX_ITER):
        inner = None
        for mode in range(n_modes):
            others = [factors[i] for i in range(n_modes) if i != mode]
            kr = others[0]
            for f in others[1:]:
                kr = khatri_rao(kr, f)
            mttkrp = linalg.unfold(w, mode) @ kr
            gram = np.ones((rank, rank))
            for i in range(n_modes):
                if i != mode:
                    gram *= factors[i].T @ factors[i]
            factors[mode] = mttkrp @ np.linalg.pinv(gram)
            if mode != n_modes - 1:
                norms = np.linalg.norm(factors[mode], axis=0)
                norms[norms == 0] = 1.0
                factors[mode] /= norms
            else:
                inner = float(np.sum(factors[mode] * mttkrp))
        gram = np.ones((rank, rank))
        for f in factors:
            gram *= f.T @ f
        res_sq = max(norm_w**2 - 2.0 * inner + float(np.sum(gram)), 0.0)
        fit = 1.0 - math.sqrt(res_sq) / norm_w if norm_w else 1.0
        prev_best = guard.best_fit
        guard.update(fit, [f.copy() for f in factors])
        stalled = 0 if guard.best_fit - prev_best >= CP_FIT_TOL else stalled + 1
        if abs(fit - last_fit) < CP_FIT_TOL or stalled >= CP_STALL_PATIENCE:
            break
        last_fit = fit
    factors = guard.best_payload

    subs = chain_descs(layer, "cp", ranks)
    dim = len(layer.kernel)
    ones = (1,) * dim
    weights = {subs[0].name:
               factors[dim].reshape(ones + (layer.in_channels, rank))}
    for axis in range(dim):
        shape = _axis_kernel(layer.kernel, axis) + (rank,)
        weights[subs[axis + 1].name] = factors[axis].reshape(shape)
    weights[subs[dim + 1].name] = \
        factors[dim + 1].T.reshape(ones + (rank, layer.out_channels))
    return FactorizedLayer(layer.name, "cp", tuple(ranks), subs, weights)


def _tt_svd(tensor: np.ndarray, ranks: tuple):
    """Sequential-SVD tensor train with prescribed internal ranks.

    A requested rank above what the running unfolding can supply is
    met by zero-padding the core, so any rank vector inside the
    per-link box bounds min(prod(left), prod(right)) is constructible
    without changing the reconstruction.
    """
    shape = tensor.shape
    full = (1,) + tuple(ranks) + (1,)
    cores = []
    rest = np.asarray(tensor, dtype=np.float64).reshape(shape[0], -1)
    for i in range(len(shape) - 1):
        mat = rest.reshape(full[i] * shape[i], -1)
        want = full[i + 1]
        if want < 1:
            raise RankError(f"tt rank {want} below 1 at link {i}")
        keep = min(want, min(mat.shape))
        u, s, v = linalg.svd(mat, keep)
        if keep < want:
            u = np.pad(u, ((0, 0), (0, want - keep)))
            s = np.pad(s, (0, want - keep))
            v = np.pad(v, ((0, 0), (0, want - keep)))
        cores.append(u.reshape(full[i], shape[i], want))
        rest = (s[:, None] * v.T)
    cores.append(rest.reshape(full[-2], shape[-1], 1))
    return cores


def tt_conv_decompose(layer: LayerDesc, weight: np.ndarray, ranks: tuple):
    """Tensor train of the conv tensor in (C, K1..Kd, F) mode order."""
    w = np.asarray(weight, dtype=np.float64)
    dim = len(layer.kernel)
    tensor = np.moveaxis(w, dim, 0)  # (C, K1..Kd, F)
    cores = _tt_svd(tensor, ranks)

    subs = chain_descs(layer, "tt", ranks)
    ones = (1,) * dim
    weights = {subs[0].name:
               cores[0].reshape(ones + (layer.in_channels, ranks[0]))}
    for axis in range(dim):
        core = cores[axis + 1]  # (r_axis, K_axis, r_axis+1)
        shape = _axis_kernel(layer.kernel, axis) + core.shape[::2]
        weights[subs[axis + 1].name] = np.moveaxis(core, 1, 0).reshape(shape)
    weights[subs[dim + 1].name] = \
        cores[dim + 1].reshape(ones + (ranks[dim], layer.out_channels))
    return FactorizedLayer(layer.name, "tt", tuple(ranks), subs, weights)


# -- dense-layer decomposers --------------------------------------------------


def svd_decompose(layer: LayerDesc, weight: np.ndarray, ranks: tuple):
    """Truncated SVD split symmetrically: A = U sqrt(S), B = sqrt(S) V'."""
    (rank,) = ranks
    w = np.asarray(weight, dtype=np.float64)
    u, s, v = linalg.svd(w, rank)
    root = np.sqrt(s)
    subs = chain_descs(layer, "svd", ranks)
    weights = {subs[0].name: u * root, subs[1].name: root[:, None] * v.T}
    return FactorizedLayer(layer.name, "svd", tuple(ranks), subs, weights)


def qr_decompose(layer: LayerDesc, weight: np.ndarray, ranks: tuple):
    """Column-pivoted QR keeping the leading pivots."""
    (rank,) = ranks
    w = np.asarray(weight, dtype=np.float64)
    q, r = linalg.qr_pivoted(w, rank)
    subs = chain_descs(layer, "qr", ranks)
    weights = {subs[0].name: q, subs[1].name: r}
    return FactorizedLayer(layer.name, "qr", tuple(ranks), subs, weights)


def t3f_decompose(layer: LayerDesc, weight: np.ndarray, ranks: tuple,
                  plan: tuple):
    """TT-matrix factorization of a dense weight over a shape plan.

    The (M, N) weight reshapes to (m1..md, n1..nd), interleaves to
    (m1 n1, .., md nd), and tensor-trains over those paired modes; the
    cores then reshape to (r_in, m_t, n_t, r_out).
    """
    ms, ns = plan
    d = len(ms)
    if len(ranks) != d - 1:
        raise RankError(f"t3f with {d} cores needs {d - 1} internal ranks")
    w = np.asarray(weight, dtype=np.float64)
    if w.shape != (math.prod(ms), math.prod(ns)):
        raise ShapeError(f"plan {plan} does not factor weight {w.shape}")
    tensor = w.reshape(tuple(ms) + tuple(ns))
    perm = [axis for t in range(d) for axis in (t, d + t)]
    tensor = tensor.transpose(perm).reshape([ms[t] * ns[t] for t in range(d)])
    cores = _tt_svd(tensor, ranks)

    subs = chain_descs(layer, "t3f", ranks, plan)
    weights = {}
    full = (1,) + tuple(ranks) + (1,)
    for t in range(d):
        weights[subs[t + 1].name] = \
            cores[t].reshape(full[t], ms[t], ns[t], full[t + 1])
    return FactorizedLayer(layer.name, "t3f", tuple(ranks), subs, weights,
                           plan=(tuple(ms), tuple(ns)))


# -- reconstruction -----------------------------------------------------------


def _recon_tucker2(arrays, plan):
    a_c, core, a_f = arrays
    dim = core.ndim - 2
    a_c = a_c.reshape(a_c.shape[-2:])          # (C, r1)
    a_f = a_f.reshape(a_f.shape[-2:])          # (r2, F)
    out = linalg.mode_n_product(core, a_c, dim)
    return linalg.mode_n_product(out, a_f.T, dim + 1)


def _recon_cp(arrays, plan):
    a_c = arrays[0].reshape(arrays[0].shape[-2:])   # (C, r)
    a_f = arrays[-1].reshape(arrays[-1].shape[-2:]) # (r, F)
    spatial = [a.reshape(-1, a.shape[-1]) for a in arrays[1:-1]]
    factors = spatial + [a_c, a_f.T]
    out = factors[0]
    for f in factors[1:]:
        out = khatri_rao(out, f)
    shape = tuple(f.shape[0] for f in factors)
    rank = factors[0].shape[1]
    return out.reshape(shape + (rank,)).sum(axis=-1)


def _recon_tt_conv(arrays, plan):
    first = arrays[0].reshape(arrays[0].shape[-2:])   # (C, r1)
    last = arrays[-1].reshape(arrays[-1].shape[-2:])  # (rd, F)
    out = first
    for a in arrays[1:-1]:
        core = np.moveaxis(a.reshape(-1, a.shape[-2], a.shape[-1]), 0, 1)
        out = np.tensordot(out, core, axes=([out.ndim - 1], [0]))
    out = np.tensordot(out, last, axes=([out.ndim - 1], [0]))
    return np.moveaxis(out, 0, out.ndim - 2)  # (C, K.., F) -> (K.., C, F)


def _recon_matrix(arrays, plan):
    a, b = arrays
    return a @ b


def _recon_t3f(arrays, plan):
    ms, ns = plan
    d = len(ms)
    out = arrays[0].reshape(ms[0], ns[0], -1)
    for t in range(1, d):
        core = arrays[t]
        out = np.tensordot(out, core, axes=([out.ndim - 1], [0]))
    # out: (m1, n1, m2, n2, .., md, nd, 1)
    out = out.reshape(out.shape[:-1])
    perm = [2 * t for t in range(d)] + [2 * t + 1 for t in range(d)]
    out = out.transpose(perm)
    return out.reshape(math.prod(ms), math.prod(ns))


_RECONSTRUCT = {
    "tucker2": _recon_tucker2,
    "cp": _recon_cp,
    "tt": _recon_tt_conv,
    "svd": _recon_matrix,
    "qr": _recon_matrix,
    "t3f": _recon_t3f,
}


def decompose_layer(layer: LayerDesc, weight: np.ndarray, method: str,
                    ranks: tuple, plan: tuple = None, seed: int = 0):
    """Factorize one layer's weight with the named method."""
    conv = layer.kind in CONV_KINDS
    if method in ("tucker2", "cp", "tt") and not conv:
        raise RankError(f"method {method!r} applies to conv layers only")
    if method in ("svd", "qr", "t3f") and layer.kind != "fc":
        raise RankError(f"method {method!r} applies to fc layers only")
    if tuple(weight.shape) != layer.weight_shape():
        raise ShapeError(
            f"{layer.name}: weight {weight.shape} != {layer.weight_shape()}")
    if method == "tucker2":
        r1, r2 = ranks
        if not (1 <= r1 <= layer.in_channels and 1 <= r2 <= layer.out_channels):
            raise RankError(f"tucker2 ranks {ranks} outside bounds")
        return tucker2_decompose(layer, weight, ranks)
    if method == "cp":
        return cp_decompose(layer, weight, ranks, seed=seed)
    if method == "tt":
        return tt_conv_decompose(layer, weight, ranks)
    if method in ("svd", "qr"):
        (r,) = ranks
        bound = min(layer.in_channels, layer.out_channels)
        if not 1 <= r <= bound:
            raise RankError(f"{method} rank {r} outside [1, {bound}]")
        if method == "svd":
            return svd_decompose(layer, weight, ranks)
        return qr_decompose(layer, weight, ranks)
    if method == "t3f":
        if plan is None:
            raise RankError("t3f requires a factorization plan")
        return t3f_decompose(layer, weight, ranks, plan)
    raise RankError(f"unknown method {method!r}")

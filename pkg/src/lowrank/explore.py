"""Exploration-space enumeration, counting, and census queries.

The space of a method on a layer is every admissible rank assignment
(for TT-matrix factorizations, every shape plan times its rank
assignments).  Spaces run to hundreds of millions of points, so all
counting works arithmetically on rank grids: costs are affine in the
innermost rank once the other ranks are fixed, which turns validity
counting and nearest-target queries into integer range arithmetic per
grid cell.  Nothing is materialized unless a caller asks for concrete
solutions.

A census fixes a target reduction of the objective (say 60% fewer
parameters), finds the closest achievable objective value among valid
solutions, and reports the solutions achieving exactly that value.
The tie set is empty when even the closest achievable value misses the
target by more than ``tol`` of the original.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .costs import (CONV_METHODS, FC_METHODS, CostReport, cost_factorized,
                    cost_original, default_input_shape)
from .errors import RankError, ShapeError
from .ir import CONV_KINDS, LayerDesc

DEFAULT_TOL = 0.005


@dataclass(frozen=True)
class Solution:
    """One point of a method's exploration space."""

    method: str
    ranks: tuple
    cost: CostReport
    plan: tuple | None = None

    def key(self) -> tuple:
        return (self.method, self.plan or (), self.ranks)


@dataclass
class BucketReport:
    """Census result at one target reduction."""

    percent: float
    value: int | None          # achieved objective value closest to target
    count: int                 # valid solutions achieving exactly that value
    flops_reduction_min: float | None = None
    flops_reduction_max: float | None = None
    best: Solution | None = None   # bucket member minimizing the other metric

    def to_dict(self) -> dict:
        out = {"percent": self.percent, "value": self.value, "count": self.count,
               "flops_reduction_min": self.flops_reduction_min,
               "flops_reduction_max": self.flops_reduction_max}
        if self.best is not None:
            out["best"] = {"method": self.best.method,
                           "ranks": list(self.best.ranks),
                           "plan": [list(p) for p in self.best.plan]
                                   if self.best.plan else None,
                           "cost": self.best.cost.to_dict()}
        else:
            out["best"] = None
        return out


@dataclass
class SpaceCensus:
    """Counting summary of one method's space on one layer."""

    method: str
    all_count: int
    valid_count: int
    original: CostReport
    buckets: list = field(default_factory=list)
    generation_time: float = 0.0

    def to_dict(self) -> dict:
        return {"method": self.method, "all": self.all_count,
                "valid": self.valid_count,
                "original": self.original.to_dict(),
                "buckets": [b.to_dict() for b in self.buckets],
                "generation_time": self.generation_time}


# -- admissible ranks ---------------------------------------------------------


def _conv_dims(layer: LayerDesc) -> tuple:
    return tuple(layer.kernel) + (layer.in_channels, layer.out_channels)


def tt_link_bounds(dims: tuple) -> list:
    """Box bound per internal link of a tensor train over ``dims``."""
    bounds = []
    for cut in range(1, len(dims)):
        left = math.prod(dims[:cut])
        right = math.prod(dims[cut:])
        bounds.append(min(left, right))
    return bounds


def cp_max_rank(layer: LayerDesc) -> int:
    dims = _conv_dims(layer)
    return math.prod(dims) // max(dims)


def rank_bounds(layer: LayerDesc, method: str, plan: tuple = None) -> list:
    """Inclusive (1, hi) bound per rank slot of ``method`` on ``layer``."""
    if method == "tucker2":
        return [(1, layer.in_channels), (1, layer.out_channels)]
    if method == "cp":
        return [(1, cp_max_rank(layer))]
    if method == "tt":
        dims = (layer.in_channels,) + tuple(layer.kernel) + (layer.out_channels,)
        return [(1, b) for b in tt_link_bounds(dims)]
    if method in ("svd", "qr"):
        return [(1, min(layer.in_channels, layer.out_channels))]
    if method == "t3f":
        if plan is None:
            raise RankError("t3f rank bounds need a plan")
        ms, ns = plan
        dims = tuple(m * n for m, n in zip(ms, ns))
        return [(1, b) for b in tt_link_bounds(dims)]
    raise RankError(f"unknown method {method!r}")


def min_ranks(layer: LayerDesc, method: str, plan: tuple = None) -> tuple:
    return tuple(1 for _ in rank_bounds(layer, method, plan))


def _ordered_factorizations(value: int, length: int, smallest: int = 2):
    """Ordered tuples of ``length`` factors >= smallest with given product."""
    if length == 1:
        return [(value,)] if value >= smallest else []
    out = []
    for head in range(smallest, value // smallest + 1):
        if value % head == 0:
            for tail in _ordered_factorizations(value // head, length - 1,
                                                smallest):
                out.append((head,) + tail)
    return out


def t3f_plans(layer: LayerDesc, depths: tuple = (2, 3)) -> list:
    """Shape plans: paired ordered factorizations of both dimensions.

    Each plan splits the input width into d factors and the output
    width into d factors, every factor at least 2, for d in ``depths``.
    """
    plans = []
    for d in depths:
        ms_options = _ordered_factorizations(layer.in_channels, d)
        ns_options = _ordered_factorizations(layer.out_channels, d)
        for ms in ms_options:
            for ns in ns_options:
                plans.append((ms, ns))
    return plans


def method_applies(layer: LayerDesc, method: str) -> bool:
    if method in CONV_METHODS:
        return layer.kind in CONV_KINDS
    if method in FC_METHODS:
        return layer.kind == "fc"
    raise RankError(f"unknown method {method!r}")


# -- affine cost grids --------------------------------------------------------


class _AffineFamily:
    """Costs of one rank family, affine in the innermost rank.

    ``outer`` lists the bounds of every rank but the last; the six
    coefficient arrays are broadcast over the outer grid so that
    params = ap + bp * r, flops = af + bf * r, fm = am + bm * r.
    """

    def __init__(self, outer_bounds, last_bound, coeffs, plan=None):
        self.outer_bounds = outer_bounds
        self.last_bound = last_bound
        self.ap, self.bp, self.af, self.bf, self.am, self.bm = (
            np.asarray(c, dtype=np.int64) for c in coeffs)
        self.plan = plan

    def outer_ranks(self, flat_index: int) -> tuple:
        sizes = [hi for _, hi in self.outer_bounds]
        if not sizes:
            return ()
        idx = np.unravel_index(flat_index, sizes)
        return tuple(int(i) + lo for i, (lo, _) in zip(idx, self.outer_bounds))

    def count_all(self) -> int:
        total = self.last_bound
        for lo, hi in self.outer_bounds:
            total *= hi - lo + 1
        return total


def _grids(bounds):
    axes = [np.arange(lo, hi + 1, dtype=np.int64) for lo, hi in bounds]
    if not axes:
        return []
    return np.meshgrid(*axes, indexing="ij")


def _conv_positions(layer: LayerDesc, input_shape):
    """Output-position count after each stage of the per-axis chain."""
    if input_shape is None:
        input_shape = default_input_shape(layer)
    spatial_in = tuple(input_shape[:-1])
    if len(spatial_in) != len(layer.kernel) or input_shape[-1] != layer.in_channels:
        raise ShapeError(f"{layer.name}: input {input_shape} does not match layer")
    extents = list(spatial_in)
    positions = [math.prod(extents)]
    from .ir import conv_out_length
    for axis in range(len(layer.kernel)):
        extents[axis] = conv_out_length(extents[axis], layer.kernel[axis],
                                        layer.stride[axis], layer.padding)
        positions.append(math.prod(extents))
    return positions  # input positions, then after axis 0, 1, ...


def _families(layer: LayerDesc, method: str, input_shape=None):
    """Affine families covering the whole space of ``method``."""
    if not method_applies(layer, method):
        raise RankError(f"method {method!r} does not apply to {layer.kind}")
    if method == "tucker2":
        c, f = layer.in_channels, layer.out_channels
        window = math.prod(layer.kernel)
        pos = _conv_positions(layer, input_shape)
        pos_in, pos_out = pos[0], pos[-1]
        (r1,) = _grids([(1, c)])
        coeffs = (c * r1, window * r1 + f,
                  2 * pos_in * c * r1, 2 * pos_out * (window * r1 + f),
                  pos_in * r1 + pos_out * f, np.full_like(r1, pos_out))
        return [_AffineFamily([(1, c)], f, coeffs)]
    if method == "cp":
        c, f = layer.in_channels, layer.out_channels
        pos = _conv_positions(layer, input_shape)
        r_max = cp_max_rank(layer)
        bp = c + sum(layer.kernel) + f
        bf = 2 * (pos[0] * c
                  + sum(pos[i + 1] * layer.kernel[i]
                        for i in range(len(layer.kernel)))
                  + pos[-1] * f)
        bm = sum(pos[:-1]) + pos[-1]
        coeffs = (0, bp, 0, bf, pos[-1] * f, bm)
        return [_AffineFamily([], r_max, coeffs)]
    if method == "tt":
        c, f = layer.in_channels, layer.out_channels
        kernel = layer.kernel
        dim = len(kernel)
        pos = _conv_positions(layer, input_shape)
        bounds = rank_bounds(layer, "tt")
        grids = _grids(bounds[:-1])
        r = {i + 1: grids[i] for i in range(dim)}  # r1..rd on the outer grid
        ap = c * r[1]
        af = 2 * pos[0] * c * r[1]
        am = pos[0] * r[1] + pos[-1] * f
        for i in range(1, dim):
            ap = ap + kernel[i - 1] * r[i] * r[i + 1]
            af = af + 2 * pos[i] * kernel[i - 1] * r[i] * r[i + 1]
            am = am + pos[i] * r[i + 1]
        bp = kernel[dim - 1] * r[dim] + f
        bf = 2 * (pos[dim] * kernel[dim - 1] * r[dim] + pos[-1] * f)
        bm = np.full_like(r[1], pos[dim])
        return [_AffineFamily(bounds[:-1], bounds[-1][1],
                              (ap, bp, af, bf, am, bm))]
    if method in ("svd", "qr"):
        m, n = layer.in_channels, layer.out_channels
        bound = min(m, n)
        coeffs = (0, m + n, 0, 2 * (m + n), n, 1)
        return [_AffineFamily([], bound, coeffs)]
    if method == "t3f":
        families = []
        for plan in t3f_plans(layer):
            ms, ns = plan
            d = len(ms)
            bounds = rank_bounds(layer, "t3f", plan)
            if d == 2:
                m1, m2 = ms
                n1, n2 = ns
                coeffs = (0, m1 * n1 + m2 * n2,
                          0, 2 * m2 * n1 * (m1 + n2),
                          n1 * n2, m2 * n1)
                families.append(_AffineFamily([], bounds[0][1], coeffs,
                                              plan=plan))
            elif d == 3:
                m1, m2, m3 = ms
                n1, n2, n3 = ns
                (r1,) = _grids(bounds[:1])
                n_total = n1 * n2 * n3
                coeffs = (m1 * n1 * r1, m2 * n2 * r1 + m3 * n3,
                          2 * m1 * m2 * m3 * n1 * r1,
                          2 * m2 * m3 * n1 * n2 * r1 + 2 * m3 * n_total,
                          m2 * m3 * n1 * r1 + n_total,
                          np.full_like(r1, m3 * n1 * n2))
                families.append(_AffineFamily(bounds[:1], bounds[1][1], coeffs,
                                              plan=plan))
            else:
                raise RankError(f"unsupported plan depth {d}")
        return families
    raise RankError(f"unknown method {method!r}")


def _objective_coeffs(fam: _AffineFamily, objective: str):
    if objective == "params":
        return fam.ap, fam.bp
    if objective == "flops":
        return fam.af, fam.bf
    if objective == "overall_mem":
        return fam.ap + fam.am, fam.bp + fam.bm
    raise RankError(f"unknown objective {objective!r}")


def _valid_hi(fam: _AffineFamily, original: CostReport):
    """Largest innermost rank keeping params and flops strictly below
    the original, per outer cell; negative/zero means none."""
    hi_p = (original.params - 1 - fam.ap) // np.maximum(fam.bp, 1)
    hi_f = (original.flops - 1 - fam.af) // np.maximum(fam.bf, 1)
    return np.minimum(np.minimum(hi_p, hi_f), fam.last_bound)


# -- public counting API ------------------------------------------------------


def count_all(layer: LayerDesc, method: str) -> int:
    """Exploration-space size, computed in closed form."""
    if method == "tucker2":
        return layer.in_channels * layer.out_channels
    if method == "cp":
        return cp_max_rank(layer)
    if method == "tt":
        return math.prod(hi for _, hi in rank_bounds(layer, "tt"))
    if method in ("svd", "qr"):
        return min(layer.in_channels, layer.out_channels)
    if method == "t3f":
        total = 0
        for plan in t3f_plans(layer):
            total += math.prod(hi for _, hi in rank_bounds(layer, "t3f", plan))
        return total
    raise RankError(f"unknown method {method!r}")


def count_valid(layer: LayerDesc, method: str, input_shape=None) -> int:
    """Solutions with strictly fewer params and fewer flops than the
    original layer."""
    original = cost_original(layer, input_shape or default_input_shape(layer))
    total = 0
    for fam in _families(layer, method, input_shape):
        hi = _valid_hi(fam, original)
        total += int(np.maximum(hi, 0).sum())
    return total


def valid_extremes(layer: LayerDesc, method: str, input_shape=None) -> dict:
    """Min and max of each cost metric over the valid region.

    Returns ``{"params": (lo, hi), "flops": ..., "overall_mem": ...,
    "valid_count": n}``; raises RankError when nothing is valid.
    """
    original = cost_original(layer, input_shape or default_input_shape(layer))
    spans = {m: None for m in ("params", "flops", "overall_mem")}
    total = 0
    for fam in _families(layer, method, input_shape):
        hi = np.atleast_1d(_valid_hi(fam, original))
        ok = hi >= 1
        if not np.any(ok):
            continue
        total += int(hi[ok].sum())
        for metric in spans:
            a, b = _objective_coeffs(fam, metric)
            a = np.broadcast_to(np.atleast_1d(a), hi.shape)
            b = np.broadcast_to(np.atleast_1d(b), hi.shape)
            lo_val = int((a + b)[ok].min())
            hi_val = int((a + b * hi)[ok].max())
            old = spans[metric]
            spans[metric] = (lo_val, hi_val) if old is None else \
                (min(old[0], lo_val), max(old[1], hi_val))
    if total == 0:
        raise RankError(f"{method}: no valid solutions for {layer.name}")
    spans["valid_count"] = total
    return spans


def _at(arr: np.ndarray, flat: np.ndarray) -> np.ndarray:
    """Values of a (possibly 0-d) coefficient array at flat cell indices."""
    raveled = np.ravel(arr)
    if raveled.size == 1:
        return np.repeat(raveled, len(flat))
    return raveled[flat]


def _bucket_members(fam: _AffineFamily, objective: str, value: int,
                    original: CostReport):
    """(flat outer index, innermost rank) pairs achieving ``value``."""
    a, b = _objective_coeffs(fam, objective)
    hi = _valid_hi(fam, original)
    num = value - a
    b_safe = np.maximum(b, 1)
    r = num // b_safe
    ok = (num > 0) & (num % b_safe == 0) & (r >= 1) & (r <= hi)
    flat = np.flatnonzero(ok)
    return flat, _at(r, flat).astype(np.int64)


def _solution(layer, method, fam, flat_index, last_rank, input_shape):
    outer = fam.outer_ranks(int(flat_index))
    ranks = outer + (int(last_rank),)
    cost = cost_factorized(layer, method, ranks, input_shape, plan=fam.plan)
    return Solution(method, ranks, cost, plan=fam.plan)


def census(layer: LayerDesc, method: str, percents, objective: str = "params",
           tol: float = DEFAULT_TOL, input_shape=None) -> SpaceCensus:
    """Count the space and bucket it at each target reduction percent.

    For each percent g, the bucket holds every valid solution whose
    objective value equals the achievable value closest to
    (1 - g/100) * original (ties broken toward the smaller value), or
    nothing when even the closest value misses by more than
    tol * original.
    """
    t0 = time.perf_counter()
    original = cost_original(layer, input_shape or default_input_shape(layer))
    families = _families(layer, method, input_shape)
    report = SpaceCensus(method, count_all(layer, method), 0, original)
    report.valid_count = count_valid(layer, method, input_shape)

    orig_value = original.get(objective)
    for percent in percents:
        target = (1.0 - percent / 100.0) * orig_value
        best = None  # (distance, value)
        for fam in families:
            a, b = _objective_coeffs(fam, objective)
            hi = _valid_hi(fam, original)
            cell_ok = hi >= 1
            if not np.any(cell_ok):
                continue
            b_safe = np.maximum(b, 1)
            near = np.floor_divide((target - a).astype(np.float64), b_safe)
            for cand in (near, near + 1):
                r = np.clip(cand, 1, np.maximum(hi, 1))
                value = a + b * r.astype(np.int64)
                dist = np.abs(value - target)
                dist = np.where(cell_ok, dist, np.inf)
                if not np.isfinite(dist).any():
                    continue
                flat = int(np.argmin(np.where(
                    dist == dist.min(),
                    value.astype(np.float64), np.inf).ravel()))
                d = float(np.ravel(dist)[flat])
                v = int(np.ravel(value)[flat])
                if best is None or (d, v) < best:
                    best = (d, v)
        bucket = BucketReport(percent=percent, value=None, count=0)
        if best is not None and best[0] <= tol * orig_value:
            value = best[1]
            bucket.value = value
            members_best = None
            fred_lo, fred_hi = np.inf, -np.inf
            for fam in families:
                flat, ranks = _bucket_members(fam, objective, value, original)
                if not len(flat):
                    continue
                bucket.count += len(flat)
                flops = _at(fam.af, flat) + _at(fam.bf, flat) * ranks
                fred_lo = min(fred_lo, float(flops.min()))
                fred_hi = max(fred_hi, float(flops.max()))
                pick = int(np.argmin(flops))
                cand = (int(flops[pick]), fam, int(flat[pick]), int(ranks[pick]))
                if members_best is None or cand[0] < members_best[0]:
                    members_best = cand
            if members_best is not None:
                _, fam, flat_index, last = members_best
                bucket.best = _solution(layer, method, fam, flat_index, last,
                                        input_shape)
                bucket.flops_reduction_min = 1.0 - fred_hi / original.flops
                bucket.flops_reduction_max = 1.0 - fred_lo / original.flops
        report.buckets.append(bucket)
    report.generation_time = time.perf_counter() - t0
    return report


def solutions_at_ratio(layer: LayerDesc, method: str, percent: float,
                       objective: str = "params", tol: float = DEFAULT_TOL,
                       input_shape=None) -> list:
    """Materialize the census bucket at one target reduction."""
    original = cost_original(layer, input_shape or default_input_shape(layer))
    result = census(layer, method, [percent], objective, tol, input_shape)
    bucket = result.buckets[0]
    if bucket.value is None:
        return []
    out = []
    for fam in _families(layer, method, input_shape):
        flat, ranks = _bucket_members(fam, objective, bucket.value, original)
        for i in range(len(flat)):
            out.append(_solution(layer, method, fam, flat[i], ranks[i],
                                 input_shape))
    out.sort(key=lambda s: s.key())
    return out


def constrained_query(layer: LayerDesc, method: str, percent: float,
                      objective: str = "params", tol: float = DEFAULT_TOL,
                      input_shape=None) -> Solution | None:
    """Bucket member minimizing the complementary metric, if any.

    With a params objective the query minimizes flops and vice versa.
    """
    members = solutions_at_ratio(layer, method, percent, objective, tol,
                                 input_shape)
    if not members:
        return None
    other = "flops" if objective != "flops" else "params"
    return min(members, key=lambda s: (s.cost.get(other), s.key()))


def iter_solutions(layer: LayerDesc, method: str, input_shape=None,
                   valid_only: bool = False, limit: int = None):
    """Lazily yield solutions in deterministic rank order."""
    original = cost_original(layer, input_shape or default_input_shape(layer))
    yielded = 0
    for fam in _families(layer, method, input_shape):
        sizes = [hi - lo + 1 for lo, hi in fam.outer_bounds]
        cells = int(np.prod(sizes)) if sizes else 1
        hi_arr = np.ravel(_valid_hi(fam, original))
        for flat in range(cells):
            hi_valid = int(hi_arr[flat]) if hi_arr.size > 1 else int(hi_arr[0])
            top = hi_valid if valid_only else fam.last_bound
            for r in range(1, max(top, 0) + 1):
                yield _solution(layer, method, fam, flat, r, input_shape)
                yielded += 1
                if limit is not None and yielded >= limit:
                    return


def select_candidates(solutions: list, max_sol: int, seed: int = 0) -> list:
    """Deterministic shortlist of a bucket.

    Always starts with the fewest-flops member; with room adds the
    most-flops member, then the member with the most nearly equal
    ranks, then seeded random distinct extras.  Order is stable for a
    fixed seed.
    """
    if not solutions or max_sol < 1:
        return []
    pool = sorted(solutions, key=lambda s: (s.cost.flops, s.key()))
    chosen = [pool[0]]
    if max_sol >= 2 and len(pool) > len(chosen):
        most = max(pool, key=lambda s: (s.cost.flops, s.key()))
        if most not in chosen:
            chosen.append(most)
    if max_sol >= 3:
        def spread(s):
            return (max(s.ranks) - min(s.ranks), s.key())
        for cand in sorted(pool, key=spread):
            if cand not in chosen:
                chosen.append(cand)
                break
    if max_sol > len(chosen):
        remaining = [s for s in pool if s not in chosen]
        rng = np.random.default_rng(seed)
        rng.shuffle(remaining)
        chosen.extend(remaining[:max_sol - len(chosen)])
    return chosen[:max_sol]

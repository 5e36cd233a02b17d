"""Exploration-space enumeration and the per-step census.

Counts every rank assignment a method admits for a layer ("all"), the subset
that actually shrinks both params and flops ("valid"), and then buckets the
valid space at fixed reduction steps: each bucket keeps the solutions whose
objective value is the achievable value nearest the step target.
"""

from lowrank import LayerDesc, census, count_all, count_valid, valid_extremes

layer = LayerDesc(name="conv", kind="conv2d", kernel=(3, 3), in_channels=64,
                  out_channels=64, padding="same")

print(f"layer: {layer.kind} kernel={layer.kernel} "
      f"{layer.in_channels}->{layer.out_channels}\n")

print(f"{'method':>8} {'all':>10} {'valid':>10} {'param range':>22}")
for method in ("tucker2", "cp", "tt"):
    ext = valid_extremes(layer, method)
    lo, hi = ext["params"]
    print(f"{method:>8} {count_all(layer, method):>10} "
          f"{count_valid(layer, method):>10} {f'[{lo}, {hi}]':>22}")

print("\ncensus at 25 / 60 / 85 percent parameter reduction:")
for method in ("tucker2", "cp", "tt"):
    rep = census(layer, method, [25, 60, 85])
    cells = []
    for b in rep.buckets:
        if b.count == 0:
            cells.append(f"{b.percent}%: none within tolerance")
            continue
        fmin = 100 * b.flops_reduction_min
        fmax = 100 * b.flops_reduction_max
        cells.append(f"{b.percent}%: {b.count} solution(s), params={b.value}, "
                     f"flops cut {fmin:.1f}..{fmax:.1f}%, "
                     f"best ranks {b.best.ranks}")
    print(f"  {method}")
    for cell in cells:
        print(f"    {cell}")

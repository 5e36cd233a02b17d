"""Command line interface.

Subcommands cover the whole workflow: ``analyze`` summarizes a layer's
factorization options, ``enumerate`` exports the valid solution space
as CSV, ``census`` buckets it at compression ratios, ``decompose``
factorizes a single layer, ``dse`` runs the accuracy-guided rank
search, ``hybrid`` combines several searches per layer, ``score``
prints the qualitative method scorecard and ``breakdown`` reports
model-level costs.

Machine-readable output goes to ``--out`` when given, otherwise to
stdout.  Timing values are never included unless ``--timings`` is
passed, so two runs with the same seed write identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import explore, score as score_mod
from .costs import (CONV_METHODS, FC_METHODS, OBJECTIVES, compression_ratio,
                    cost_original, default_input_shape, model_breakdown)
from .decompose import decompose_layer
from .dse import (BuiltinEvaluator, DseConfig, ExternalEvaluator,
                  hybrid_combine, install_solutions, run_dse)
from .errors import ConstraintUnreachableError, LowRankError
from .ir import CONV_KINDS, LayerDesc, ModelDesc, WeightStore, check_weights

METHOD_ALIASES = {
    "tucker": "tucker2", "tucker-2": "tucker2", "tucker2": "tucker2",
    "cp": "cp", "tt": "tt", "svd": "svd", "qr": "qr", "t3f": "t3f",
    "tt-matrix": "t3f",
}

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _method(name: str) -> str:
    try:
        return METHOD_ALIASES[name.lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"unknown method {name!r}") from None


def _int_tuple(text: str) -> tuple:
    try:
        return tuple(int(p) for p in text.replace("x", ",").split(",") if p)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer list: {text!r}") \
            from None


def parse_layer_spec(dims: tuple, kind: str | None = None,
                     stride: tuple | None = None,
                     padding: str | None = None) -> LayerDesc:
    """Layer from a flat dimension list.

    Two numbers mean a dense (in, out) layer; three to five mean a
    1-3 d convolution written kernel-first, then channels and filters.
    """
    if kind is None:
        if len(dims) == 2:
            kind = "fc"
        elif 3 <= len(dims) <= 5:
            kind = CONV_KINDS[len(dims) - 3]
        else:
            raise LowRankError(f"cannot infer layer kind from {len(dims)} "
                               "dimensions")
    if kind == "fc":
        if len(dims) != 2:
            raise LowRankError("fc layers take exactly two dimensions")
        return LayerDesc(name="layer", kind="fc", in_channels=dims[0],
                         out_channels=dims[1])
    if kind not in CONV_KINDS:
        raise LowRankError(f"unsupported layer kind {kind!r}")
    spatial = CONV_KINDS.index(kind) + 1
    if len(dims) != spatial + 2:
        raise LowRankError(f"{kind} expects {spatial + 2} dimensions, "
                           f"got {len(dims)}")
    kernel = dims[:spatial]
    if stride is not None and len(stride) == 1:
        stride = stride * spatial
    return LayerDesc(name="layer", kind=kind, kernel=kernel,
                     in_channels=dims[spatial], out_channels=dims[spatial + 1],
                     stride=stride, padding=padding or "same")


def _layer_from_args(args) -> LayerDesc:
    return parse_layer_spec(args.layer, kind=args.kind, stride=args.stride,
                            padding=args.padding)


def _input_shape(args, layer: LayerDesc):
    shape = getattr(args, "input_size", None)
    if shape is None:
        return default_input_shape(layer)
    if layer.kind != "fc" and shape[-1] != layer.in_channels:
        raise LowRankError(f"input shape {shape} does not end in "
                           f"{layer.in_channels} channels")
    return shape


def _methods_for(layer: LayerDesc, requested) -> list:
    applicable = list(FC_METHODS if layer.kind == "fc" else CONV_METHODS)
    if not requested:
        return applicable
    for m in requested:
        if m not in applicable:
            raise LowRankError(f"method {m!r} does not apply to "
                               f"{layer.kind} layers")
    return list(requested)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def render_json(payload) -> str:
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"


def _emit(args, text: str, summary: str | None = None) -> None:
    if getattr(args, "out", None):
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        if summary:
            sys.stdout.write(summary)
    else:
        sys.stdout.write(text)


# -- solution space export -----------------------------------------------------

CSV_COLUMNS = ("method", "ranks", "params", "fm", "overall_mem", "flops",
               "ratio_params", "ratio_flops")


def _ranks_text(solution: explore.Solution) -> str:
    ranks = "x".join(str(r) for r in solution.ranks)
    if solution.plan:
        ms, ns = solution.plan
        plan = "m" + "x".join(map(str, ms)) + ",n" + "x".join(map(str, ns))
        return plan + ":" + ranks
    return ranks


def export_solution_space(layer: LayerDesc, methods, out, limit=None,
                          input_shape=None) -> int:
    """Write one CSV row per valid solution; returns the row count."""
    if input_shape is None:
        input_shape = default_input_shape(layer)
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    original = cost_original(layer, input_shape)
    rows = 0
    for method in methods:
        for sol in explore.iter_solutions(layer, method, input_shape,
                                          valid_only=True):
            if limit is not None and rows >= limit:
                return rows
            cost = sol.cost
            writer.writerow((
                method, _ranks_text(sol), cost.params, cost.fm,
                cost.overall_mem, cost.flops,
                f"{cost.params / original.params:.6f}",
                f"{cost.flops / original.flops:.6f}"))
            rows += 1
    return rows


# -- subcommand bodies -----------------------------------------------------------


def cmd_analyze(args) -> int:
    layer = _layer_from_args(args)
    shape = _input_shape(args, layer)
    methods = _methods_for(layer, args.method)
    original = cost_original(layer, shape)
    report = {"layer": layer.to_dict(), "input_shape": list(shape),
              "original": original.to_dict(), "methods": {}}
    for method in methods:
        spans = explore.valid_extremes(layer, method, shape)
        entry = {"all": explore.count_all(layer, method),
                 "valid": spans["valid_count"]}
        for metric in ("params", "flops", "overall_mem"):
            lo, hi = spans[metric]
            entry[metric] = {
                "min": lo, "max": hi,
                "best_reduction_percent":
                    100.0 * (1.0 - lo / original.get(metric)),
                "worst_reduction_percent":
                    100.0 * (1.0 - hi / original.get(metric))}
        report["methods"][method] = entry
    _emit(args, render_json(report), _analyze_summary(report))
    return 0


def _analyze_summary(report: dict) -> str:
    lines = [f"original params={report['original']['params']} "
             f"flops={report['original']['flops']}"]
    for method, entry in sorted(report["methods"].items()):
        lines.append(
            f"{method}: space={entry['all']} valid={entry['valid']} "
            f"best params -{entry['params']['best_reduction_percent']:.1f}%")
    return "\n".join(lines) + "\n"


def cmd_enumerate(args) -> int:
    layer = _layer_from_args(args)
    shape = _input_shape(args, layer)
    methods = _methods_for(layer, args.method)
    buf = io.StringIO()
    rows = export_solution_space(layer, methods, buf, limit=args.limit,
                                 input_shape=shape)
    _emit(args, buf.getvalue(), f"{rows} solutions\n")
    return 0


def cmd_census(args) -> int:
    layer = _layer_from_args(args)
    shape = _input_shape(args, layer)
    methods = _methods_for(layer, args.method)
    report = {}
    for method in methods:
        result = explore.census(layer, method, args.ratios,
                                objective=args.objective, tol=args.tol,
                                input_shape=shape)
        entry = result.to_dict()
        if not args.timings:
            entry.pop("generation_time", None)
        report[method] = entry
    summary = []
    for method, entry in sorted(report.items()):
        counts = ", ".join(f"{b['percent']:g}%:{b['count']}"
                           for b in entry["buckets"])
        summary.append(f"{method}: all={entry['all']} "
                       f"valid={entry['valid']} [{counts}]")
    _emit(args, render_json(report), "\n".join(summary) + "\n")
    return 0


def cmd_decompose(args) -> int:
    ranks = args.rank
    if args.model:
        model = ModelDesc.load(args.model)
        weights = WeightStore.load(args.weights)
        check_weights(model, weights)
        if not args.target:
            raise LowRankError("--target names the layer to factorize")
        layer = model.layer(args.target)
        weight = np.asarray(weights[args.target])
    else:
        layer = _layer_from_args(args)
        rng = np.random.default_rng(args.seed)
        weight = rng.standard_normal(layer.weight_shape()).astype(np.float32)
        model = weights = None
    method = args.method
    plan = None
    if method == "t3f":
        plans = explore.t3f_plans(layer)
        idx = args.plan_index if args.plan_index is not None else 0
        if not 0 <= idx < len(plans):
            raise LowRankError(f"plan index {idx} out of range "
                               f"(0..{len(plans) - 1})")
        plan = plans[idx]
    fact = decompose_layer(layer, weight, method, ranks, plan=plan,
                           seed=args.seed)
    shape = _input_shape(args, layer)
    new_cost = fact.cost(shape)
    original = cost_original(layer, shape)
    err = float(np.linalg.norm(fact.reconstruct() - weight)
                / max(np.linalg.norm(weight), 1e-30))
    report = {"layer": layer.name, "method": method,
              "ranks": list(fact.ranks),
              "plan": [list(p) for p in plan] if plan else None,
              "original": original.to_dict(),
              "factorized": new_cost.to_dict(),
              "reduction": {
                  metric: compression_ratio(original.get(metric),
                                            new_cost.get(metric))
                  for metric in ("params", "flops", "overall_mem")},
              "relative_error": err,
              "sub_layers": [d.to_dict() for d in fact.sub_layers]}
    if model is not None and args.out_model and args.out_weights:
        new_model, new_weights = install_solutions(model, weights,
                                                   {layer.name: fact})
        new_model.save(args.out_model)
        new_weights.save(args.out_weights)
    _emit(args, render_json(report),
          f"{method} ranks={list(fact.ranks)} params "
          f"{original.params}->{new_cost.params} err={err:.3e}\n")
    return 0


def _dse_config(args) -> DseConfig:
    return DseConfig(objective=args.objective,
                     accuracy_drop_limit=args.drop_limit,
                     step_size=args.step_size, max_sol=args.max_sol,
                     target_fraction=args.target_fraction,
                     sample_count=args.samples, seed=args.seed, tol=args.tol)


def _evaluator(args, dataset: WeightStore):
    if args.evaluator:
        return ExternalEvaluator(args.evaluator)
    return BuiltinEvaluator(dataset)


def _audit_report(result) -> dict:
    return {"baseline_accuracy": result.baseline_accuracy,
            "final_accuracy": result.final_accuracy,
            "success": result.success,
            "targets": list(result.targets),
            "iterations": result.audit}


def _write_dse_outputs(args, result) -> None:
    if args.out_model:
        result.model.save(args.out_model)
    if args.out_weights:
        result.weights.save(args.out_weights)
    if args.out_audit:
        with open(args.out_audit, "w", encoding="utf-8") as fh:
            fh.write(render_json(_audit_report(result)))


def cmd_dse(args) -> int:
    model = ModelDesc.load(args.model)
    weights = WeightStore.load(args.weights)
    check_weights(model, weights)
    dataset = WeightStore.load(args.dataset)
    config = _dse_config(args)
    evaluator = _evaluator(args, dataset)
    try:
        result = run_dse(model, weights, dataset, config, evaluator,
                         conv_method=args.conv_method,
                         fc_method=args.fc_method)
    except ConstraintUnreachableError as exc:
        best_model, best_weights, audit = exc.best
        if args.out_model:
            best_model.save(args.out_model)
        if args.out_weights:
            best_weights.save(args.out_weights)
        if args.out_audit:
            with open(args.out_audit, "w", encoding="utf-8") as fh:
                fh.write(render_json({"success": False,
                                      "iterations": audit}))
        raise
    _write_dse_outputs(args, result)
    summary = (f"success={result.success} baseline="
               f"{result.baseline_accuracy:.4f} final="
               f"{result.final_accuracy:.4f} iterations="
               f"{len(result.audit)}\n")
    _emit(args, render_json(_audit_report(result)), summary)
    return 0


def _parse_pairs(text: str) -> list:
    pairs = []
    for part in text.split(","):
        conv, _, fc = part.partition(":")
        conv, fc = _method(conv), _method(fc)
        if conv not in CONV_METHODS or fc not in FC_METHODS:
            raise LowRankError(f"bad method pair {part!r}")
        pairs.append((conv, fc))
    if len(pairs) < 2:
        raise LowRankError("hybrid needs at least two method pairs")
    return pairs


def cmd_hybrid(args) -> int:
    model = ModelDesc.load(args.model)
    weights = WeightStore.load(args.weights)
    check_weights(model, weights)
    dataset = WeightStore.load(args.dataset)
    config = _dse_config(args)
    evaluator = _evaluator(args, dataset)
    runs = {}
    for conv, fc in _parse_pairs(args.pairs):
        label = f"{conv}+{fc}"
        runs[label] = run_dse(model, weights, dataset, config, evaluator,
                              conv_method=conv, fc_method=fc)
    combined = hybrid_combine(runs, objective=args.objective)
    combined.final_accuracy = evaluator(combined.model, combined.weights)
    _write_dse_outputs(args, combined)
    report = {
        "objective": args.objective,
        "runs": {label: {
            "success": run.success,
            "final_accuracy": run.final_accuracy,
            "objective_total": sum(
                run.layer_costs[n].get(args.objective)
                for n in run.targets)}
            for label, run in runs.items()},
        "hybrid": {
            "accuracy": combined.final_accuracy,
            "sources": combined.audit[0]["hybrid"],
            "objective_total": sum(
                combined.layer_costs[n].get(args.objective)
                for n in combined.targets)},
    }
    _emit(args, render_json(report),
          f"hybrid total {report['hybrid']['objective_total']}\n")
    return 0


def cmd_score(args) -> int:
    layer = _layer_from_args(args)
    shape = _input_shape(args, layer)
    methods = _methods_for(layer, args.method)
    table = score_mod.method_table(layer, methods, input_shape=shape,
                                   seed=args.seed,
                                   time_decomposition=args.timings)
    summary = []
    for method in methods:
        levels = " ".join(f"{k}={v['level']}"
                          for k, v in sorted(table[method].items()))
        summary.append(f"{method}: {levels}")
    _emit(args, render_json(table), "\n".join(summary) + "\n")
    return 0


def cmd_breakdown(args) -> int:
    model = ModelDesc.load(args.model)
    if args.input_size is not None:
        shape = tuple(args.input_size)
    elif "input_shape" in model.metadata:
        shape = tuple(model.metadata["input_shape"])
    else:
        raise LowRankError("model metadata lacks input_shape; "
                           "pass --input-size")
    report = model_breakdown(model, shape)
    payload = {group: cost.to_dict()
               for group, cost in report.items() if group != "layers"}
    payload["layers"] = {name: cost.to_dict()
                         for name, cost in report["layers"].items()}
    summary = (f"total params={payload['total']['params']} "
               f"flops={payload['total']['flops']}\n")
    _emit(args, render_json(payload), summary)
    return 0


# -- parser -----------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for every randomized choice")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker thread cap (default: LRF_THREADS)")
    parser.add_argument("--limit", type=int, default=None,
                        help="cap on exported rows")
    parser.add_argument("--tol", type=float, default=explore.DEFAULT_TOL,
                        help="relative tolerance for ratio buckets")
    parser.add_argument("--out", default=None,
                        help="write machine-readable output here")
    parser.add_argument("--timings", action="store_true",
                        help="include wall-clock timings (not reproducible)")


def _add_layer_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--layer", type=_int_tuple, required=True,
                        help="dimensions, e.g. 3,3,256,512 or 400,120")
    parser.add_argument("--kind", default=None,
                        help="layer kind override (fc, conv1d, conv2d, conv3d)")
    parser.add_argument("--stride", type=_int_tuple, default=None)
    parser.add_argument("--padding", choices=("same", "valid"), default=None)
    parser.add_argument("--input-size", type=_int_tuple, default=None,
                        help="input shape, e.g. 16,16,256")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lowrank",
        description="Low-rank factorization toolkit for neural layers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="summarize factorization options")
    _add_layer_flags(p)
    p.add_argument("--method", type=_method, action="append", default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("enumerate", help="export valid solutions as CSV")
    _add_layer_flags(p)
    p.add_argument("--method", type=_method, action="append", default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_enumerate)

    p = sub.add_parser("census", help="bucket solutions at target ratios")
    _add_layer_flags(p)
    p.add_argument("--method", type=_method, action="append", default=None)
    p.add_argument("--ratios", type=_int_tuple, default=(25, 60, 85),
                   help="compression percentages, e.g. 25,60,85")
    p.add_argument("--objective", choices=OBJECTIVES, default="params")
    _add_common(p)
    p.set_defaults(fn=cmd_census)

    p = sub.add_parser("decompose", help="factorize one layer")
    p.add_argument("--model", default=None, help="model JSON path")
    p.add_argument("--weights", default=None, help="weight archive path")
    p.add_argument("--target", default=None, help="layer name in the model")
    p.add_argument("--layer", type=_int_tuple, default=None,
                   help="synthetic layer dimensions when no model is given")
    p.add_argument("--kind", default=None)
    p.add_argument("--stride", type=_int_tuple, default=None)
    p.add_argument("--padding", choices=("same", "valid"), default=None)
    p.add_argument("--input-size", type=_int_tuple, default=None)
    p.add_argument("--method", type=_method, required=True)
    p.add_argument("--rank", type=_int_tuple, required=True,
                   help="rank vector, e.g. 60 or 30,60,40")
    p.add_argument("--plan-index", type=int, default=None,
                   help="reshape plan index for tt-matrix layers")
    p.add_argument("--out-model", default=None)
    p.add_argument("--out-weights", default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_decompose)

    for name, fn in (("dse", cmd_dse), ("hybrid", cmd_hybrid)):
        p = sub.add_parser(name, help="accuracy-guided rank search"
                           if name == "dse" else
                           "combine several searches per layer")
        p.add_argument("--model", required=True)
        p.add_argument("--weights", required=True)
        p.add_argument("--dataset", required=True,
                       help="archive with inputs and labels records")
        p.add_argument("--evaluator", nargs="+", default=None,
                       help="external command: cmd model.json weights.lrfw")
        p.add_argument("--objective", choices=OBJECTIVES, default="params")
        p.add_argument("--drop-limit", type=float, default=0.015,
                       help="largest acceptable accuracy drop")
        p.add_argument("--step-size", type=float, default=5.0)
        p.add_argument("--max-sol", type=int, default=3)
        p.add_argument("--target-fraction", type=float, default=0.9)
        p.add_argument("--samples", type=int, default=1000,
                       help="feature-map sample count")
        if name == "dse":
            p.add_argument("--conv-method", type=_method, default="tucker2")
            p.add_argument("--fc-method", type=_method, default="svd")
        else:
            p.add_argument("--pairs", required=True,
                           help="conv:fc method pairs, e.g. tucker2:svd,cp:qr")
        p.add_argument("--out-model", default=None)
        p.add_argument("--out-weights", default=None)
        p.add_argument("--out-audit", default=None)
        _add_common(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("score", help="qualitative method scorecard")
    _add_layer_flags(p)
    p.add_argument("--method", type=_method, action="append", default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("breakdown", help="model-level cost report")
    p.add_argument("--model", required=True)
    p.add_argument("--input-size", type=_int_tuple, default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_breakdown)

    return parser


def _apply_threads(args) -> None:
    threads = getattr(args, "threads", None)
    if threads is None:
        env = os.environ.get("LRF_THREADS")
        threads = int(env) if env else None
    if threads is not None:
        if threads < 1:
            raise LowRankError("thread count must be positive")
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_threads(args)
        return args.fn(args)
    except (LowRankError, ValueError, KeyError, OSError) as exc:
        detail = exc.args[0] if exc.args else exc
        sys.stderr.write(f"error: {detail}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Similarity-guided per-layer rank search and hybrid combination.

The loop starts every target layer at rank one (maximum compression),
then repeatedly: evaluates the factorized model against the accuracy
bound, freezes layers whose feature maps already track the original
closely enough, and relaxes the remaining layers' target compression
step by step, re-decomposing at each layer's new target and keeping
the candidate whose feature map stays most similar.  Layers that run
out of steps revert to their original weights.  Sensitive layers thus
end up less compressed than robust ones.

A hybrid model combines several finished single-method runs by taking,
for every layer, the solution from the run that minimizes the chosen
objective on that layer.
"""

from __future__ import annotations

import math
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import explore
from .costs import cost_original
from .decompose import FactorizedLayer, decompose_layer
from .errors import (ConstraintUnreachableError, EvaluatorError, GraphError,
                     RankError)
from .ir import (CONV_KINDS, DATASET_INPUTS, DATASET_LABELS, LayerDesc,
                 ModelDesc, WeightStore)
from .similarity import capture_feature_maps, forward_model, layer_similarity, \
    sample_dataset

SEQUENTIAL_THRESHOLD = 0.92
NONSEQUENTIAL_THRESHOLD = 0.96


@dataclass
class DseConfig:
    objective: str = "params"
    accuracy_drop_limit: float = 0.015
    step_size: float = 5.0
    max_sol: int = 3
    sim_threshold_sequential: float = SEQUENTIAL_THRESHOLD
    sim_threshold_nonsequential: float = NONSEQUENTIAL_THRESHOLD
    target_fraction: float = 0.9
    sample_count: int = 1000
    seed: int = 0
    tol: float = explore.DEFAULT_TOL

    def __post_init__(self):
        if not 0 < self.step_size < 100:
            raise RankError("step_size must lie in (0, 100)")
        if not 0 < self.target_fraction <= 1:
            raise RankError("target_fraction must lie in (0, 1]")
        for thr in (self.sim_threshold_sequential,
                    self.sim_threshold_nonsequential):
            if not 0 < thr <= 1:
                raise RankError("similarity thresholds must lie in (0, 1]")


@dataclass
class LayerSearchState:
    name: str
    solution: FactorizedLayer | None
    step: float
    frozen: bool = False
    exhausted: bool = False
    similarity: float | None = None


@dataclass
class DseResult:
    model: ModelDesc
    weights: WeightStore
    audit: list
    baseline_accuracy: float
    final_accuracy: float
    success: bool
    solutions: dict
    targets: list
    original_model: ModelDesc
    original_weights: WeightStore
    layer_costs: dict = field(default_factory=dict)


# -- evaluators ---------------------------------------------------------------


def builtin_eval_accuracy(model: ModelDesc, weights: WeightStore,
                          inputs: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy of the model's argmax output over a labeled batch."""
    out = forward_model(model, weights, inputs)
    if out.ndim != 2:
        raise EvaluatorError(f"model output has shape {out.shape}, expected "
                             "(batch, classes)")
    pred = out.argmax(axis=1)
    truth = np.asarray(labels).astype(np.int64).ravel()
    if truth.shape != pred.shape:
        raise EvaluatorError("label count does not match batch size")
    if truth.max(initial=0) >= out.shape[1]:
        raise EvaluatorError("label index exceeds model output arity")
    return float((pred == truth).mean())


class BuiltinEvaluator:
    """Evaluator measuring raw forward accuracy on a labeled dataset."""

    def __init__(self, dataset: WeightStore):
        self.inputs = dataset[DATASET_INPUTS]
        self.labels = dataset[DATASET_LABELS]

    def __call__(self, model: ModelDesc, weights: WeightStore) -> float:
        return builtin_eval_accuracy(model, weights, self.inputs, self.labels)


class ExternalEvaluator:
    """Evaluator shelling out to ``cmd model.json weights.lrfw``.

    The command must print one decimal accuracy in [0, 1] on stdout;
    a nonzero exit is an evaluator failure.  This is the seam where a
    framework-based fine-tune-and-validate step plugs in.
    """

    def __init__(self, cmd):
        self.cmd = list(cmd) if isinstance(cmd, (list, tuple)) else [cmd]

    def __call__(self, model: ModelDesc, weights: WeightStore) -> float:
        with tempfile.TemporaryDirectory(prefix="lrf-eval-") as tmp:
            model_path = Path(tmp) / "model.json"
            weight_path = Path(tmp) / "weights.lrfw"
            model.save(model_path)
            weights.save(weight_path)
            proc = subprocess.run(
                self.cmd + [str(model_path), str(weight_path)],
                capture_output=True, text=True)
        if proc.returncode != 0:
            raise EvaluatorError(
                f"evaluator exited {proc.returncode}: {proc.stderr.strip()}")
        try:
            acc = float(proc.stdout.strip().splitlines()[-1])
        except (ValueError, IndexError) as exc:
            raise EvaluatorError(
                f"evaluator printed no accuracy: {proc.stdout!r}") from exc
        if not 0.0 <= acc <= 1.0:
            raise EvaluatorError(f"accuracy {acc} outside [0, 1]")
        return acc


# -- model surgery ------------------------------------------------------------


def install_solutions(model: ModelDesc, weights: WeightStore,
                      solutions: dict) -> tuple:
    """Model and weights with each named layer replaced by its chain.

    ``solutions`` maps layer name to a FactorizedLayer or None; None
    keeps the original layer.
    """
    new_layers = []
    new_edges = list(model.edges)
    updates, drop = {}, []
    entry, exit_ = model.input, model.output
    for layer in model.layers:
        fact = solutions.get(layer.name)
        if fact is None:
            new_layers.append(layer)
            continue
        subs = fact.sub_layers
        new_layers.extend(subs)
        rewired = []
        for src, dst in new_edges:
            if dst == layer.name:
                rewired.append((src, subs[0].name))
            elif src == layer.name:
                rewired.append((subs[-1].name, dst))
            else:
                rewired.append((src, dst))
        for a, b in zip(subs, subs[1:]):
            rewired.append((a.name, b.name))
        new_edges = rewired
        drop.append(layer.name)
        updates.update(fact.weights)
        if layer.name == entry:
            entry = subs[0].name
        if layer.name == exit_:
            exit_ = subs[-1].name
    new_model = ModelDesc(layers=new_layers, edges=new_edges,
                          input=entry, output=exit_,
                          metadata=dict(model.metadata))
    return new_model, weights.replace(updates, drop=drop)


# -- target selection and initialization --------------------------------------


def decomposable_layers(model: ModelDesc) -> list:
    return [l.name for l in model.layers if l.kind in CONV_KINDS + ("fc",)]


def select_target_layers(model: ModelDesc, input_shape: tuple,
                         objective: str = "params",
                         fraction: float = 0.9) -> list:
    """The ceil(fraction * L) decomposable layers largest by objective.

    Ties break toward earlier layers; the result keeps layer order.
    """
    names = decomposable_layers(model)
    if not names:
        raise GraphError("model has no decomposable layer")
    shapes = model.infer_shapes(input_shape)
    sized = []
    for idx, name in enumerate(names):
        layer = model.layer(name)
        preds = model.predecessors(name)
        shape_in = tuple(input_shape) if name == model.input else shapes[preds[0]]
        sized.append((cost_original(layer, shape_in).get(objective), idx, name))
    keep = math.ceil(fraction * len(names))
    ranked = sorted(sized, key=lambda t: (-t[0], t[1]))
    chosen = {name for _, _, name in ranked[:keep]}
    return [name for name in names if name in chosen]


def method_for_layer(layer: LayerDesc, conv_method: str, fc_method: str) -> str:
    return conv_method if layer.kind in CONV_KINDS else fc_method


def _layer_plan(layer: LayerDesc, method: str):
    if method != "t3f":
        return None
    plans = explore.t3f_plans(layer)
    if not plans:
        raise RankError(f"{layer.name}: no factorization plan for "
                        f"({layer.in_channels}, {layer.out_channels})")
    return plans[0]


def init_rank_one(model: ModelDesc, weights: WeightStore, targets: list,
                  conv_method: str, fc_method: str, seed: int = 0) -> dict:
    """Rank-one factorization of every target layer."""
    solutions = {}
    for name in targets:
        layer = model.layer(name)
        method = method_for_layer(layer, conv_method, fc_method)
        plan = _layer_plan(layer, method)
        ranks = explore.min_ranks(layer, method, plan)
        try:
            solutions[name] = decompose_layer(layer, np.asarray(weights[name]),
                                              method, ranks, plan=plan,
                                              seed=seed)
        except Exception as exc:
            raise type(exc)(f"{name}: {exc}") from exc
    return solutions


# -- the search loop -----------------------------------------------------------


def _threshold(model: ModelDesc, name: str, config: DseConfig) -> float:
    branching = (len(model.predecessors(name)) > 1
                 or len(model.successors(name)) > 1)
    return (config.sim_threshold_nonsequential if branching
            else config.sim_threshold_sequential)


def iteration_bound(step_size: float, n_targets: int) -> int:
    return 1 + math.ceil(100.0 / step_size) * n_targets


def run_dse(model: ModelDesc, weights: WeightStore, dataset: WeightStore,
            config: DseConfig, evaluator, conv_method: str = "tucker2",
            fc_method: str = "svd") -> DseResult:
    """Run the rank search loop to completion.

    Raises ConstraintUnreachableError (carrying the best model found)
    when every target layer is frozen or reverted and the accuracy
    bound still is not met.
    """
    input_shape = tuple(dataset[DATASET_INPUTS].shape[1:])
    shapes = model.infer_shapes(input_shape)
    targets = select_target_layers(model, input_shape, config.objective,
                                   config.target_fraction)

    def layer_input_shape(name):
        if name == model.input:
            return input_shape
        return shapes[model.predecessors(name)[0]]

    original_costs = {
        name: cost_original(model.layer(name), layer_input_shape(name))
        for name in targets}

    samples, _ = sample_dataset(dataset, config.sample_count, config.seed)
    capture = capture_feature_maps(model, weights, samples, targets)
    baseline = evaluator(model, weights)

    solutions = init_rank_one(model, weights, targets, conv_method, fc_method,
                              seed=config.seed)
    states = {}
    for name in targets:
        orig_val = original_costs[name].get(config.objective)
        fact_val = solutions[name].cost(layer_input_shape(name)) \
            .get(config.objective)
        step = 100.0 * (1.0 - fact_val / orig_val)
        states[name] = LayerSearchState(name, solutions[name], step)

    audit = []
    best = None  # (accuracy, model, weights)
    bound = iteration_bound(config.step_size, len(targets))
    success = False
    accuracy = 0.0
    for iteration in range(bound):
        current = {name: states[name].solution for name in targets}
        built_model, built_weights = install_solutions(model, weights, current)
        accuracy = evaluator(built_model, built_weights)
        if best is None or accuracy > best[0]:
            best = (accuracy, built_model, built_weights)

        active = [n for n in targets
                  if not states[n].frozen and not states[n].exhausted]
        for name in active:
            state = states[name]
            if state.solution is None:
                continue
            state.similarity = layer_similarity(state.solution, capture)

        audit.append({
            "iteration": iteration,
            "accuracy": accuracy,
            "layers": {
                name: {
                    "step": states[name].step,
                    "frozen": states[name].frozen,
                    "exhausted": states[name].exhausted,
                    "similarity": states[name].similarity,
                    "method": (states[name].solution.method
                               if states[name].solution else None),
                    "ranks": (list(states[name].solution.ranks)
                              if states[name].solution else None),
                    "objective_value": (
                        states[name].solution.cost(layer_input_shape(name))
                        .get(config.objective)
                        if states[name].solution
                        else original_costs[name].get(config.objective)),
                } for name in targets},
        })

        if accuracy >= baseline - config.accuracy_drop_limit:
            success = True
            break

        for name in active:
            state = states[name]
            if state.similarity is not None and \
                    state.similarity >= _threshold(model, name, config):
                state.frozen = True

        advanced = False
        for name in targets:
            state = states[name]
            if state.frozen or state.exhausted:
                continue
            state.step -= config.step_size
            advanced = True
            if state.step <= 0:
                state.solution = None
                state.exhausted = True
                state.similarity = None
                continue
            layer = model.layer(name)
            method = method_for_layer(layer, conv_method, fc_method)
            bucket = explore.solutions_at_ratio(
                layer, method, state.step, config.objective, config.tol,
                layer_input_shape(name))
            candidates = explore.select_candidates(bucket, config.max_sol,
                                                   seed=config.seed)
            if not candidates:
                continue
            scored = []
            for cand in candidates:
                fact = decompose_layer(layer, np.asarray(weights[name]),
                                       method, cand.ranks, plan=cand.plan,
                                       seed=config.seed)
                sim = layer_similarity(fact, capture)
                scored.append((-sim, cand.cost.flops, cand.key(), fact))
            scored.sort(key=lambda t: t[:3])
            state.solution = scored[0][3]
            state.similarity = -scored[0][0]
        if not advanced:
            raise ConstraintUnreachableError(
                f"accuracy {accuracy:.4f} never reached baseline "
                f"{baseline:.4f} - {config.accuracy_drop_limit}",
                best=(best[1], best[2], audit))
    else:
        raise AssertionError("iteration bound exceeded; step bookkeeping broken")

    final_model, final_weights = best[1], best[2]
    if success:
        final_model, final_weights = built_model, built_weights
    layer_costs = {
        name: (states[name].solution.cost(layer_input_shape(name))
               if states[name].solution else original_costs[name])
        for name in targets}
    return DseResult(model=final_model, weights=final_weights, audit=audit,
                     baseline_accuracy=baseline, final_accuracy=accuracy,
                     success=success,
                     solutions={n: states[n].solution for n in targets},
                     targets=list(targets), original_model=model,
                     original_weights=weights, layer_costs=layer_costs)


# -- hybrid combination --------------------------------------------------------


def hybrid_combine(runs: dict, objective: str = "params") -> DseResult:
    """Per-layer best-of across finished runs.

    ``runs`` maps a label to a DseResult over the same original model.
    For every target layer the solution with the smallest objective
    cost wins (the original layer counts at its original cost when a
    run reverted it).  The hybrid total is therefore no larger than
    any single run's total.
    """
    if len(runs) < 2:
        raise RankError("hybrid combination needs at least two finished runs")
    items = list(runs.items())
    first = items[0][1]
    targets = first.targets
    for label, run in items[1:]:
        if run.targets != targets:
            raise GraphError(f"run {label!r} searched different layers")

    model = first.original_model
    weights = first.original_weights
    chosen, layer_costs, sources = {}, {}, {}
    for name in targets:
        best_label = None
        for label, run in items:
            value = run.layer_costs[name].get(objective)
            if best_label is None or value < layer_costs[name].get(objective):
                best_label = label
                layer_costs[name] = run.layer_costs[name]
                chosen[name] = run.solutions[name]
        sources[name] = best_label

    hybrid_model, hybrid_weights = install_solutions(model, weights, chosen)
    audit = [{
        "iteration": 0,
        "hybrid": {name: {"source": sources[name],
                          "objective_value": layer_costs[name].get(objective)}
                   for name in targets},
    }]
    return DseResult(model=hybrid_model, weights=hybrid_weights, audit=audit,
                     baseline_accuracy=first.baseline_accuracy,
                     final_accuracy=None, success=True,
                     solutions=chosen, targets=list(targets),
                     original_model=model, original_weights=weights,
                     layer_costs=layer_costs)

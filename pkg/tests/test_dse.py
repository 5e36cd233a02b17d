import sys

import numpy as np
import pytest

from lowrank.dse import (BuiltinEvaluator, DseConfig, ExternalEvaluator,
                         hybrid_combine, init_rank_one, install_solutions,
                         iteration_bound, run_dse, select_target_layers)
from lowrank.errors import (ConstraintUnreachableError, EvaluatorError,
                            GraphError, RankError)
from lowrank.ir import (DATASET_INPUTS, DATASET_LABELS, LayerDesc, ModelDesc,
                        WeightStore)
from lowrank.similarity import forward_model

rng = np.random.default_rng(11)


def conv_chain_net(rank_one_first=True, seed=3):
    """conv -> relu -> conv -> flatten -> fc on 6x6x3 inputs.

    The first conv weight is an exact separable product, so a channel
    rank (1, 1) factorization reconstructs it to float precision.
    """
    r = np.random.default_rng(seed)
    layers = [
        LayerDesc(name="c1", kind="conv2d", kernel=(3, 3), in_channels=3,
                  out_channels=8, post_ops=("a1",)),
        LayerDesc(name="a1", kind="activation", fn="relu"),
        LayerDesc(name="c2", kind="conv2d", kernel=(3, 3), in_channels=8,
                  out_channels=12),
        LayerDesc(name="fl", kind="flatten"),
        LayerDesc(name="f1", kind="fc", in_channels=432, out_channels=10),
    ]
    edges = [("c1", "a1"), ("a1", "c2"), ("c2", "fl"), ("fl", "f1")]
    model = ModelDesc(layers=layers, edges=edges, input="c1", output="f1",
                      metadata={"input_shape": [6, 6, 3]})
    if rank_one_first:
        g = r.standard_normal((3, 3))
        u = r.standard_normal(3)
        v = r.standard_normal(8)
        w1 = np.einsum("ij,c,f->ijcf", g, u, v)
    else:
        w1 = r.standard_normal((3, 3, 3, 8))
    weights = WeightStore({
        "c1": w1.astype(np.float32),
        "c2": r.standard_normal((3, 3, 8, 12)).astype(np.float32),
        "f1": r.standard_normal((432, 10)).astype(np.float32)})
    return model, weights


def make_dataset(count=8, seed=5, shape=(6, 6, 3), classes=10):
    r = np.random.default_rng(seed)
    return WeightStore({
        DATASET_INPUTS: r.standard_normal((count,) + shape).astype(np.float32),
        DATASET_LABELS: (np.arange(count) % classes).astype(np.float32)})


class RevertDetector:
    """Scores 1.0 once the named layers carry their original weights."""

    def __init__(self, originals):
        self.originals = {k: np.asarray(v) for k, v in originals.items()}
        self.calls = 0

    def __call__(self, model, weights):
        self.calls += 1
        for name, orig in self.originals.items():
            try:
                if not np.array_equal(np.asarray(weights[name]), orig):
                    return 0.0
            except KeyError:
                return 0.0
        return 1.0


class Scripted:
    def __init__(self, values):
        self.values = list(values)

    def __call__(self, model, weights):
        return self.values.pop(0) if len(self.values) > 1 else self.values[0]


class TestConfigAndBound:
    def test_iteration_bound(self):
        assert iteration_bound(5.0, 3) == 61
        assert iteration_bound(100.0 / 3, 2) == 7
        assert iteration_bound(50.0, 1) == 3

    @pytest.mark.parametrize("kwargs", [
        {"step_size": 0.0}, {"step_size": 100.0},
        {"target_fraction": 0.0}, {"target_fraction": 1.5},
        {"sim_threshold_sequential": 0.0},
        {"sim_threshold_nonsequential": 1.5}])
    def test_config_validation(self, kwargs):
        with pytest.raises(RankError):
            DseConfig(**kwargs)


class TestTargetSelection:
    def test_largest_objective_wins(self):
        layers = [
            LayerDesc(name="fa", kind="fc", in_channels=100, out_channels=10),
            LayerDesc(name="fb", kind="fc", in_channels=10, out_channels=200),
        ]
        model = ModelDesc(layers=layers, edges=[("fa", "fb")],
                          input="fa", output="fb")
        assert select_target_layers(model, (100,), "params", 0.5) == ["fb"]
        both = select_target_layers(model, (100,), "params", 1.0)
        assert both == ["fa", "fb"]  # layer order, not size order

    def test_no_decomposable_layer(self):
        model = ModelDesc(layers=[LayerDesc(name="a", kind="activation",
                                            fn="relu")],
                          edges=[], input="a", output="a")
        with pytest.raises(GraphError):
            select_target_layers(model, (4,))


class TestInitRankOne:
    def test_minimum_ranks(self):
        model, weights = conv_chain_net()
        sols = init_rank_one(model, weights, ["c1", "c2", "f1"],
                             "tucker2", "svd")
        assert sols["c1"].ranks == (1, 1)
        assert sols["c2"].ranks == (1, 1)
        assert sols["f1"].ranks == (1,)

    def test_deterministic(self):
        model, weights = conv_chain_net()
        a = init_rank_one(model, weights, ["c2"], "cp", "svd", seed=4)
        b = init_rank_one(model, weights, ["c2"], "cp", "svd", seed=4)
        for wa, wb in zip(a["c2"].weights.values(), b["c2"].weights.values()):
            assert np.array_equal(wa, wb)


class TestInstallSolutions:
    def test_middle_layer_rewired(self):
        model, weights = conv_chain_net()
        sols = init_rank_one(model, weights, ["c2"], "tucker2", "svd")
        new_model, new_weights = install_solutions(model, weights, sols)
        names = [l.name for l in new_model.layers]
        assert "c2" not in names
        subs = [n for n in names if n.startswith("c2.lrf")]
        assert subs == ["c2.lrf0", "c2.lrf1", "c2.lrf2"]
        assert ("a1", "c2.lrf0") in new_model.edges
        assert ("c2.lrf2", "fl") in new_model.edges
        assert "c2" not in new_weights
        new_model.validate()

    def test_entry_and_exit_renamed(self):
        model, weights = conv_chain_net()
        sols = init_rank_one(model, weights, ["c1", "f1"], "tucker2", "svd")
        new_model, _ = install_solutions(model, weights, sols)
        assert new_model.input == "c1.lrf0"
        assert new_model.output == "f1.lrf1"
        new_model.validate()

    def test_none_keeps_layer(self):
        model, weights = conv_chain_net()
        new_model, new_weights = install_solutions(model, weights,
                                                   {"c2": None})
        assert [l.name for l in new_model.layers] == \
            [l.name for l in model.layers]
        assert np.array_equal(np.asarray(new_weights["c2"]),
                              np.asarray(weights["c2"]))


class TestEvaluators:
    def test_builtin_perfect_on_own_labels(self, toy_net, toy_dataset):
        model, weights = toy_net
        assert BuiltinEvaluator(toy_dataset)(model, weights) == 1.0

    def _script(self, tmp_path, body):
        path = tmp_path / "eval.py"
        path.write_text("import sys\n" + body + "\n")
        return ExternalEvaluator([sys.executable, str(path)])

    def test_external_ok(self, tmp_path, toy_net):
        model, weights = toy_net
        ev = self._script(tmp_path, "print('note'); print(0.75)")
        assert ev(model, weights) == 0.75

    def test_external_failures(self, tmp_path, toy_net):
        model, weights = toy_net
        cases = ["sys.exit(3)", "print('junk')", "print(1.5)"]
        for body in cases:
            with pytest.raises(EvaluatorError):
                self._script(tmp_path, body)(model, weights)


class TestSearchLoop:
    def test_immediate_success_keeps_rank_one(self):
        model, weights = conv_chain_net(rank_one_first=False)
        dataset = make_dataset()
        config = DseConfig(target_fraction=1.0, sample_count=4, seed=0)
        result = run_dse(model, weights, dataset, config, Scripted([1.0]))
        assert result.success
        assert len(result.audit) == 1
        assert result.final_accuracy == 1.0
        for name in ("c1", "c2", "f1"):
            assert result.solutions[name] is not None
        assert result.solutions["c1"].ranks == (1, 1)
        names = [l.name for l in result.model.layers]
        assert "c1.lrf0" in names and "f1.lrf1" in names

    def test_freeze_then_revert(self):
        # c1 is exactly recoverable at rank (1, 1): it must freeze there
        # while c2 and f1 walk their budgets down, run out, and revert.
        model, weights = conv_chain_net(rank_one_first=True)
        dataset = make_dataset()
        config = DseConfig(target_fraction=1.0, sample_count=4, seed=0,
                           step_size=20.0,
                           sim_threshold_sequential=0.9999,
                           sim_threshold_nonsequential=0.9999)
        evaluator = RevertDetector({"c2": weights["c2"], "f1": weights["f1"]})
        result = run_dse(model, weights, dataset, config, evaluator)

        assert result.success
        assert result.final_accuracy == result.baseline_accuracy == 1.0
        bound = iteration_bound(config.step_size, 3)
        assert 1 < len(result.audit) <= bound

        # per-layer steps never increase and flags never flip back
        for name in ("c1", "c2", "f1"):
            steps = [e["layers"][name]["step"] for e in result.audit]
            assert all(a >= b for a, b in zip(steps, steps[1:]))
            for flag in ("frozen", "exhausted"):
                flags = [e["layers"][name][flag] for e in result.audit]
                assert all(not (a and not b)
                           for a, b in zip(flags, flags[1:]))

        final = result.audit[-1]["layers"]
        assert final["c1"]["frozen"] and final["c1"]["ranks"] == [1, 1]
        assert result.audit[1]["layers"]["c1"]["frozen"]
        for name in ("c2", "f1"):
            assert final[name]["exhausted"]
            assert result.solutions[name] is None
        assert result.solutions["c1"] is not None
        # reverted layers carry their original weights in the output
        for name in ("c2", "f1"):
            assert np.array_equal(np.asarray(result.weights[name]),
                                  np.asarray(weights[name]))

    def test_unreachable_when_all_frozen(self):
        layers = [LayerDesc(name="c1", kind="conv2d", kernel=(3, 3),
                            in_channels=3, out_channels=8,
                            post_ops=("a1",)),
                  LayerDesc(name="a1", kind="activation", fn="relu")]
        model = ModelDesc(layers=layers, edges=[("c1", "a1")],
                          input="c1", output="a1")
        r = np.random.default_rng(2)
        w = np.einsum("ij,c,f->ijcf", r.standard_normal((3, 3)),
                      r.standard_normal(3), r.standard_normal(8))
        weights = WeightStore({"c1": w.astype(np.float32)})
        dataset = make_dataset(shape=(6, 6, 3))
        config = DseConfig(target_fraction=1.0, sample_count=4)
        with pytest.raises(ConstraintUnreachableError) as err:
            run_dse(model, weights, dataset, config, Scripted([1.0, 0.0]))
        best_model, best_weights, audit = err.value.best
        assert len(audit) == 1
        assert audit[0]["layers"]["c1"]["ranks"] == [1, 1]
        assert any(l.name == "c1.lrf0" for l in best_model.layers)
        assert "c1.lrf0" in best_weights

    def test_deterministic_audit(self):
        model, weights = conv_chain_net(rank_one_first=True)
        dataset = make_dataset()
        config = DseConfig(target_fraction=1.0, sample_count=4, seed=9,
                           step_size=25.0,
                           sim_threshold_sequential=0.9999,
                           sim_threshold_nonsequential=0.9999)
        runs = []
        for _ in range(2):
            ev = RevertDetector({"c2": weights["c2"], "f1": weights["f1"]})
            runs.append(run_dse(model, weights, dataset, config, ev))
        assert runs[0].audit == runs[1].audit
        assert runs[0].weights.to_bytes() == runs[1].weights.to_bytes()


class TestHybrid:
    def _two_runs(self):
        model, weights = conv_chain_net(rank_one_first=False)
        dataset = make_dataset()
        config = DseConfig(target_fraction=1.0, sample_count=4, seed=0)
        run_a = run_dse(model, weights, dataset, config, Scripted([1.0]),
                        conv_method="tucker2", fc_method="svd")
        run_b = run_dse(model, weights, dataset, config, Scripted([1.0]),
                        conv_method="cp", fc_method="qr")
        return model, dataset, run_a, run_b

    def test_per_layer_minimum_exact(self):
        model, dataset, run_a, run_b = self._two_runs()
        hyb = hybrid_combine({"a": run_a, "b": run_b}, objective="params")
        entry = hyb.audit[0]["hybrid"]
        total = 0
        for name in run_a.targets:
            va = run_a.layer_costs[name].params
            vb = run_b.layer_costs[name].params
            assert entry[name]["objective_value"] == min(va, vb)
            assert entry[name]["source"] == ("a" if va <= vb else "b")
            assert hyb.layer_costs[name].params == min(va, vb)
            total += min(va, vb)
        for run in (run_a, run_b):
            assert total <= sum(run.layer_costs[n].params
                                for n in run.targets)
        # rank-one cp beats rank-one tucker on convs, svd ties qr on fc
        assert entry["c1"]["source"] == "b"
        assert entry["f1"]["source"] == "a"

    def test_combined_model_runs(self):
        model, dataset, run_a, run_b = self._two_runs()
        hyb = hybrid_combine({"a": run_a, "b": run_b})
        assert hyb.final_accuracy is None and hyb.success
        out = forward_model(hyb.model, hyb.weights,
                            dataset[DATASET_INPUTS][:2])
        assert out.shape == (2, 10)

    def test_input_validation(self):
        model, dataset, run_a, run_b = self._two_runs()
        with pytest.raises(RankError):
            hybrid_combine({"a": run_a})
        run_b.targets = ["c1"]
        with pytest.raises(GraphError):
            hybrid_combine({"a": run_a, "b": run_b})

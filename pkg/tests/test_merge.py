import numpy as np
import pytest

from promerge import merge as mm
from promerge import nn
from promerge.checkpoint import ModelWeights, TaskVector, task_vector
from promerge.merge import (
    ActivationCache,
    DivergenceError,
    MergeConfig,
    MergeCoefficients,
    WorkingSetMeter,
    constant_coefficients,
    default_init_coefficient,
    distill_merge,
    materialize,
    merge_task_arithmetic,
    prodistill,
    run_method,
)
from promerge.nn import Activation, Linear
from promerge.tensor import Tensor

from conftest import make_expert_setup, perturbed_weights


def single_linear(name="lin", n_in=3, n_out=2, bias=True):
    return [Linear(name, n_in, n_out, has_bias=bias)]


def weights_for(layers, arrays):
    fp = nn.architecture_fingerprint(layers)
    return ModelWeights({k: Tensor(v) for k, v in arrays.items()}, fp)


def layer_least_squares_minimum(theta_0, taus, validation):
    """Closed-form minimum of the per-layer objective for one linear layer.

    The objective is quadratic in the element-wise coefficients, and each
    output unit decouples, so a weighted least-squares solve per column gives
    the exact optimum.
    """
    num_tasks = len(taus)
    w0 = theta_0.entries[("lin", "weight")].array
    b0 = theta_0.entries[("lin", "bias")].array
    n_in, n_out = w0.shape
    total = 0.0
    for col in range(n_out):
        rows, targets = [], []
        for i in range(num_tasks):
            x = validation[i].array
            shots = x.shape[0]
            weight = 1.0 / (2.0 * num_tasks * shots)
            tw = [tau.entries[("lin", "weight")].array[:, col] for tau in taus]
            tb = [tau.entries[("lin", "bias")].array[col] for tau in taus]
            teacher_w = w0[:, col] + taus[i].entries[("lin", "weight")].array[:, col]
            teacher_b = b0[col] + taus[i].entries[("lin", "bias")].array[col]
            target_col = x @ teacher_w + teacher_b
            base_col = x @ w0[:, col] + b0[col]
            for r in range(shots):
                feature = np.concatenate([x[r] * tw[j] for j in range(num_tasks)]
                                         + [[tb[j]] for j in range(num_tasks)])
                rows.append(np.sqrt(weight) * feature)
                targets.append(np.sqrt(weight) * (target_col[r] - base_col[r]))
        a = np.stack(rows)
        b = np.array(targets)
        solution, _, _, _ = np.linalg.lstsq(a, b, rcond=None)
        residual = a @ solution - b
        total += float(residual @ residual)
    return total


class TestTaskArithmetic:
    def test_two_task_arithmetic_by_hand(self):
        layers = single_linear(n_in=1, n_out=2, bias=False)
        theta_0 = weights_for(layers, {("lin", "weight"): [[1.0, 2.0]]})
        tau1 = TaskVector({("lin", "weight"): Tensor([[1.0, 0.0]])}, "a", theta_0.arch_fingerprint)
        tau2 = TaskVector({("lin", "weight"): Tensor([[0.0, 2.0]])}, "b", theta_0.arch_fingerprint)
        coeffs = constant_coefficients("taskwise", [tau1, tau2], layers, 0.5)
        merged = merge_task_arithmetic(theta_0, [tau1, tau2], coeffs)
        assert merged.entries[("lin", "weight")].tolist() == [[1.5, 3.0]]

    def test_unit_coefficient_recovers_expert_exactly(self, linear_pair):
        layers, theta_0, theta_1 = linear_pair
        tau = [task_vector(theta_1, theta_0)]
        coeffs = constant_coefficients("elementwise", tau, layers, 1.0)
        merged = merge_task_arithmetic(theta_0, tau, coeffs)
        for key in theta_1.keys():
            assert np.array_equal(merged.entries[key].array, theta_1.entries[key].array)

    def test_zero_coefficients_return_base_exactly(self, linear_pair):
        layers, theta_0, theta_1 = linear_pair
        tau = [task_vector(theta_1, theta_0)]
        merged = merge_task_arithmetic(
            theta_0, tau, constant_coefficients("taskwise", tau, layers, 0.0)
        )
        for key in theta_0.keys():
            assert np.array_equal(merged.entries[key].array, theta_0.entries[key].array)

    def test_empty_task_list_rejected(self, linear_pair):
        layers, theta_0, _ = linear_pair
        with pytest.raises(ValueError, match="at least one"):
            merge_task_arithmetic(theta_0, [], MergeCoefficients("taskwise", []))


class TestGranularityExpansion:
    @pytest.mark.parametrize("granularity", ["taskwise", "layerwise"])
    def test_scalar_forms_match_expanded_elementwise_bit_exact(self, granularity, linear_pair):
        layers, theta_0, theta_1 = linear_pair
        theta_2 = perturbed_weights(theta_0, 0.2, seed=9)
        taus = [task_vector(theta_1, theta_0), task_vector(theta_2, theta_0)]
        scalar = constant_coefficients(granularity, taus, layers, 0.37)
        expanded = scalar.expand_elementwise(taus)
        direct = materialize(theta_0, taus, scalar)
        via_expanded = materialize(theta_0, taus, expanded)
        for key in theta_0.keys():
            assert np.array_equal(direct.entries[key].array, via_expanded.entries[key].array)

    def test_coefficients_json_round_trip(self, linear_pair):
        layers, theta_0, theta_1 = linear_pair
        taus = [task_vector(theta_1, theta_0)]
        for granularity in ("elementwise", "layerwise", "taskwise"):
            coeffs = constant_coefficients(granularity, taus, layers, 0.3)
            back = MergeCoefficients.from_json_dict(coeffs.to_json_dict())
            merged_a = materialize(theta_0, taus, coeffs)
            merged_b = materialize(theta_0, taus, back)
            for key in theta_0.keys():
                assert np.array_equal(merged_a.entries[key].array, merged_b.entries[key].array)

    def test_default_init_by_task_count(self):
        assert default_init_coefficient(1) == 1.0
        assert default_init_coefficient(2) == 0.5
        assert default_init_coefficient(3) == 0.3
        assert default_init_coefficient(8) == 0.3


class TestMaterialize:
    def test_materialize_idempotent_bitwise(self, linear_pair):
        layers, theta_0, theta_1 = linear_pair
        taus = [task_vector(theta_1, theta_0)]
        coeffs = constant_coefficients("elementwise", taus, layers, 0.42)
        first = materialize(theta_0, taus, coeffs)
        second = materialize(theta_0, taus, coeffs)
        for key in theta_0.keys():
            assert np.array_equal(first.entries[key].array, second.entries[key].array)

    def test_coefficient_count_checked(self, linear_pair):
        layers, theta_0, theta_1 = linear_pair
        taus = [task_vector(theta_1, theta_0)]
        with pytest.raises(ValueError, match="coefficient sets"):
            materialize(theta_0, taus, MergeCoefficients("taskwise", [0.3, 0.3]))


class TestDistillMerge:
    def test_single_teacher_reaches_zero_loss(self, linear_pair):
        layers, theta_0, theta_1 = linear_pair
        taus = [task_vector(theta_1, theta_0)]
        rng = np.random.default_rng(0)
        validation = [Tensor(rng.standard_normal((8, 4)))]
        config = MergeConfig(method="distill_merge", granularity="elementwise",
                             learning_rate=0.01, epochs=30, batch_size=64, seed=0)
        coeffs, history = distill_merge(theta_0, taus, layers, validation, config)
        assert history[-1] < 1e-6
        merged = materialize(theta_0, taus, coeffs)
        merged_feats = nn.model_forward_with_features(layers, merged, validation[0])
        teacher_feats = nn.model_forward_with_features(layers, theta_1, validation[0])
        for a, b in zip(merged_feats, teacher_feats):
            assert np.max(np.abs(a.array - b.array)) < 1e-3

    def test_two_scalar_teachers_quadratic_minimum(self):
        # one 1x1 bias-free layer, base weight 0, deltas 1 and 2, input 1:
        # objective (1/4)[(w-1)^2 + (w-2)^2] has minimum 0.125 at w = 1.5
        layers = single_linear(n_in=1, n_out=1, bias=False)
        theta_0 = weights_for(layers, {("lin", "weight"): [[0.0]]})
        fp = theta_0.arch_fingerprint
        taus = [
            TaskVector({("lin", "weight"): Tensor([[1.0]])}, "a", fp),
            TaskVector({("lin", "weight"): Tensor([[2.0]])}, "b", fp),
        ]
        validation = [Tensor([[1.0]]), Tensor([[1.0]])]
        config = MergeConfig(method="distill_merge", granularity="elementwise",
                             learning_rate=0.02, epochs=400, batch_size=8, seed=1)
        coeffs, history = distill_merge(theta_0, taus, layers, validation, config)
        assert abs(history[-1] - 0.125) < 1e-6
        merged = materialize(theta_0, taus, coeffs)
        assert abs(merged.entries[("lin", "weight")].item() - 1.5) < 1e-3

    def test_loss_history_settles_after_early_epochs(self):
        layers = [Linear("l1", 3, 3), Activation("act", "relu"), Linear("l2", 3, 2)]
        theta_0, _, taus = make_expert_setup(layers, 2, seed=5)
        rng = np.random.default_rng(6)
        validation = [Tensor(rng.standard_normal((6, 3))) for _ in range(2)]
        config = MergeConfig(method="distill_merge", granularity="elementwise",
                             learning_rate=0.01, epochs=30, batch_size=64, seed=2)
        _, history = distill_merge(theta_0, taus, layers, validation, config)
        tail = history[5:]
        assert all(tail[i + 1] <= tail[i] + 1e-12 for i in range(len(tail) - 1))

    def test_method_field_enforced(self, linear_pair):
        layers, theta_0, theta_1 = linear_pair
        taus = [task_vector(theta_1, theta_0)]
        config = MergeConfig(method="prodistill")
        with pytest.raises(ValueError, match="distill_merge"):
            distill_merge(theta_0, taus, layers, [Tensor([[0.0] * 4])], config)


class TestProdistill:
    def test_single_teacher_depth_one_exact(self):
        layers = single_linear(n_in=3, n_out=2)
        theta_0, experts, taus = make_expert_setup(layers, 1, seed=3)
        rng = np.random.default_rng(4)
        validation = [Tensor(rng.standard_normal((6, 3)))]
        config = MergeConfig(method="prodistill", granularity="elementwise",
                             learning_rate=0.01, epochs=5, batch_size=64, seed=0)
        coeffs, histories = prodistill(theta_0, taus, layers, validation, config)
        assert histories["lin"][-1] < 1e-10
        merged = materialize(theta_0, taus, coeffs)
        out_merged = nn.model_forward(layers, merged, validation[0])
        out_teacher = nn.model_forward(layers, experts[0], validation[0])
        assert np.max(np.abs(out_merged.array - out_teacher.array)) < 1e-8

    def test_two_task_loss_matches_least_squares_oracle(self):
        layers = single_linear(n_in=3, n_out=2)
        theta_0, _, taus = make_expert_setup(layers, 2, seed=7, scale=1.0)
        rng = np.random.default_rng(8)
        validation = [Tensor(rng.standard_normal((4, 3))) for _ in range(2)]
        oracle = layer_least_squares_minimum(theta_0, taus, validation)
        config = MergeConfig(method="prodistill", granularity="elementwise",
                             learning_rate=0.01, epochs=2000, batch_size=64, seed=0)
        _, histories = prodistill(theta_0, taus, layers, validation, config)
        assert abs(histories["lin"][-1] - oracle) < 1e-6

    def test_identical_first_layer_reduces_to_depth_one(self):
        # experts differ only in the second layer; the first layer's deltas
        # are zero, so its coefficients never move, both cache paths stay
        # equal, and training the second layer replays the depth-1 problem
        layers = [Linear("front", 3, 3), Linear("back", 3, 2)]
        theta_0 = nn.init_weights(layers, seed=11)
        fp = theta_0.arch_fingerprint
        rng = np.random.default_rng(12)
        taus = []
        for _ in range(2):
            entries = {
                ("front", "weight"): Tensor.zeros((3, 3)),
                ("front", "bias"): Tensor.zeros((3,)),
                ("back", "weight"): Tensor(rng.standard_normal((3, 2))),
                ("back", "bias"): Tensor(rng.standard_normal(2)),
            }
            taus.append(TaskVector(entries, "t", fp))
        validation = [Tensor(rng.standard_normal((5, 3))) for _ in range(2)]
        config = MergeConfig(method="prodistill", granularity="elementwise",
                             learning_rate=0.02, epochs=20, batch_size=64, seed=3)
        cache_log = []
        coeffs, histories = prodistill(
            theta_0, taus, layers, validation, config, cache_log=cache_log
        )
        # front coefficients kept their initialization (zero gradient)
        init = config.resolve_init(2)
        for i in range(2):
            for role in ("weight", "bias"):
                assert np.all(coeffs.values[i][("front", role)].array == init)
        # caches behind the identical layer carry equal paths, bit for bit
        front_caches = dict((name, caches) for name, caches in cache_log)["front"]
        for cache in front_caches:
            assert np.array_equal(cache.z1.array, cache.z2.array)

        # depth-1 replay: same layer name means the same batch stream
        sub_layers = [Linear("back", 3, 2)]
        sub_fp = nn.architecture_fingerprint(sub_layers)
        front_params = {
            "weight": theta_0.entries[("front", "weight")],
            "bias": theta_0.entries[("front", "bias")],
        }
        sub_validation = [
            nn.layer_forward(layers[0], front_params, batch) for batch in validation
        ]
        sub_theta = ModelWeights(
            {("back", "weight"): theta_0.entries[("back", "weight")],
             ("back", "bias"): theta_0.entries[("back", "bias")]}, sub_fp,
        )
        sub_taus = [
            TaskVector({("back", "weight"): tau.entries[("back", "weight")],
                        ("back", "bias"): tau.entries[("back", "bias")]}, "t", sub_fp)
            for tau in taus
        ]
        _, sub_histories = prodistill(sub_theta, sub_taus, sub_layers, sub_validation, config)
        assert histories["back"] == sub_histories["back"]

    def test_dual_cache_consistency_with_materialized_weights(self):
        layers = [Linear("l1", 3, 4), Activation("act", "gelu"), Linear("l2", 4, 2)]
        theta_0, experts, taus = make_expert_setup(layers, 2, seed=21)
        rng = np.random.default_rng(22)
        validation = [Tensor(rng.standard_normal((5, 3))) for _ in range(2)]
        config = MergeConfig(method="prodistill", granularity="elementwise",
                             learning_rate=0.05, epochs=10, batch_size=64, seed=5)
        cache_log = []
        coeffs, _ = prodistill(theta_0, taus, layers, validation, config, cache_log=cache_log)
        merged = materialize(theta_0, taus, coeffs)
        for i in range(2):
            merged_feats = nn.model_forward_with_features(layers, merged, validation[i])
            teacher_feats = nn.model_forward_with_features(layers, experts[i], validation[i])
            for layer_index, (name, caches) in enumerate(cache_log):
                assert np.array_equal(caches[i].z1.array, merged_feats[layer_index].array)
                assert np.array_equal(caches[i].z2.array, teacher_feats[layer_index].array)

    def test_input_modes_identical_when_paths_coincide(self):
        # a single teacher at unit init keeps both cache paths equal, so all
        # three input modes pose the same per-layer objectives
        layers = [Linear("l1", 3, 3), Activation("act", "relu"), Linear("l2", 3, 2)]
        theta_0, _, taus = make_expert_setup(layers, 1, seed=31)
        rng = np.random.default_rng(32)
        validation = [Tensor(rng.standard_normal((6, 3)))]
        histories = {}
        for mode in ("dual", "merged_only", "finetuned_only"):
            config = MergeConfig(method="prodistill", granularity="elementwise",
                                 input_mode=mode, learning_rate=0.01, epochs=5,
                                 batch_size=64, seed=0)
            _, hist = prodistill(theta_0, taus, layers, validation, config)
            histories[mode] = hist
        assert histories["dual"] == histories["merged_only"] == histories["finetuned_only"]

    def test_loss_history_finite_and_improves_on_init(self):
        layers = single_linear(n_in=3, n_out=2)
        theta_0, _, taus = make_expert_setup(layers, 2, seed=41, scale=0.5)
        rng = np.random.default_rng(42)
        validation = [Tensor(rng.standard_normal((6, 3))) for _ in range(2)]
        config = MergeConfig(method="prodistill", granularity="elementwise",
                             learning_rate=0.005, epochs=40, batch_size=64, seed=0)
        _, histories = prodistill(theta_0, taus, layers, validation, config)
        history = histories["lin"]
        assert all(np.isfinite(v) for v in history)
        assert int(np.argmin(history)) >= 1

    def test_zero_task_vector_keeps_initialization(self):
        layers = single_linear(n_in=2, n_out=2)
        theta_0 = nn.init_weights(layers, seed=51)
        fp = theta_0.arch_fingerprint
        zero_tau = TaskVector({
            ("lin", "weight"): Tensor.zeros((2, 2)),
            ("lin", "bias"): Tensor.zeros((2,)),
        }, "z", fp)
        live = perturbed_weights(theta_0, 0.3, seed=52)
        taus = [zero_tau, task_vector(live, theta_0)]
        validation = [Tensor(np.random.default_rng(53).standard_normal((4, 2)))] * 2
        config = MergeConfig(method="prodistill", granularity="elementwise",
                             learning_rate=0.05, epochs=15, batch_size=64, seed=0)
        coeffs, _ = prodistill(theta_0, taus, layers, validation, config)
        init = config.resolve_init(2)
        for role in ("weight", "bias"):
            assert np.all(coeffs.values[0][("lin", role)].array == init)

    def test_layerwise_granularity_trains_scalars(self):
        layers = [Linear("l1", 3, 3), Linear("l2", 3, 2)]
        theta_0, _, taus = make_expert_setup(layers, 2, seed=61)
        validation = [Tensor(np.random.default_rng(62).standard_normal((5, 3)))] * 2
        config = MergeConfig(method="prodistill", granularity="layerwise",
                             learning_rate=0.05, epochs=20, batch_size=64, seed=0)
        coeffs, histories = prodistill(theta_0, taus, layers, validation, config)
        assert set(histories) == {"l1", "l2"}
        for value in coeffs.values:
            assert set(value) == {"l1", "l2"}
            assert all(isinstance(v, float) for v in value.values())

    def test_taskwise_granularity_rejected(self, linear_pair):
        layers, theta_0, theta_1 = linear_pair
        taus = [task_vector(theta_1, theta_0)]
        config = MergeConfig(method="prodistill", granularity="taskwise")
        with pytest.raises(ValueError, match="layer at a time"):
            prodistill(theta_0, taus, layers, [Tensor([[0.0] * 4])], config)

    def test_divergence_names_layer(self):
        layers = [Linear("badlayer", 3, 3)]
        theta_0, _, taus = make_expert_setup(layers, 2, seed=71, scale=1.0)
        validation = [Tensor(np.random.default_rng(72).standard_normal((4, 3)))] * 2
        config = MergeConfig(method="prodistill", granularity="elementwise",
                             learning_rate=1e9, epochs=200, batch_size=64, seed=0)
        with pytest.raises(DivergenceError, match="badlayer"):
            prodistill(theta_0, taus, layers, validation, config)

    def test_empty_validation_rejected(self, linear_pair):
        layers, theta_0, theta_1 = linear_pair
        taus = [task_vector(theta_1, theta_0)]
        config = MergeConfig(method="prodistill")
        with pytest.raises(ValueError, match="validation"):
            prodistill(theta_0, taus, layers, [], config)


class TestWorkingSet:
    def test_prodistill_peak_bounded_by_single_layer(self):
        width, depth, tasks = 6, 5, 3
        layers = [Linear(f"l{i}", width, width) for i in range(depth)]
        theta_0, _, taus = make_expert_setup(layers, tasks, seed=81)
        validation = [Tensor(np.random.default_rng(82).standard_normal((4, width)))] * tasks
        config = MergeConfig(method="prodistill", granularity="elementwise",
                             learning_rate=0.01, epochs=1, batch_size=64, seed=0)
        meter = WorkingSetMeter()
        prodistill(theta_0, taus, layers, validation, config, meter=meter)
        per_layer = width * width + width
        # coefficients + grads + both Adam moments (4x per task), tau slices
        # per task, and one merged-weight scratch copy
        expected = per_layer * (5 * tasks + 1)
        assert meter.peak == expected
        assert meter.peak <= 6 * (tasks + 2) * per_layer
        assert meter.current == 0

    def test_distill_merge_working_set_scales_with_model(self):
        width, tasks = 6, 2
        per_layer = width * width + width

        def peak_for(depth):
            layers = [Linear(f"l{i}", width, width) for i in range(depth)]
            theta_0, _, taus = make_expert_setup(layers, tasks, seed=91 + depth)
            validation = [Tensor(np.random.default_rng(92).standard_normal((4, width)))] * tasks
            config = MergeConfig(method="distill_merge", granularity="elementwise",
                                 learning_rate=0.01, epochs=1, batch_size=64, seed=0)
            meter = WorkingSetMeter()
            distill_merge(theta_0, taus, layers, validation, config, meter=meter)
            return meter.peak

        assert peak_for(2) == 2 * per_layer * (5 * tasks + 1)
        assert peak_for(6) == 6 * per_layer * (5 * tasks + 1)


class TestRunMethod:
    def test_dispatch_task_arithmetic_uses_default_coefficient(self, linear_pair):
        layers, theta_0, theta_1 = linear_pair
        theta_2 = perturbed_weights(theta_0, 0.2, seed=101)
        taus = [task_vector(theta_1, theta_0), task_vector(theta_2, theta_0)]
        config = MergeConfig(method="task_arithmetic", granularity="taskwise")
        coeffs, history = run_method(theta_0, taus, layers, None, config)
        assert history is None
        assert coeffs.values == [0.5, 0.5]

    def test_simple_average(self, linear_pair):
        layers, theta_0, theta_1 = linear_pair
        theta_2 = perturbed_weights(theta_0, 0.2, seed=102)
        taus = [task_vector(theta_1, theta_0), task_vector(theta_2, theta_0)]
        config = MergeConfig(method="simple_average", granularity="taskwise")
        coeffs, _ = run_method(theta_0, taus, layers, None, config)
        merged = materialize(theta_0, taus, coeffs)
        for key in theta_0.keys():
            want = 0.5 * (theta_1.entries[key].array + theta_2.entries[key].array)
            assert np.allclose(merged.entries[key].array, want, atol=1e-12)

    def test_training_methods_need_validation(self, linear_pair):
        layers, theta_0, theta_1 = linear_pair
        taus = [task_vector(theta_1, theta_0)]
        with pytest.raises(ValueError, match="validation"):
            run_method(theta_0, taus, layers, None, MergeConfig(method="prodistill"))

    def test_config_validation(self):
        with pytest.raises(ValueError, match="unknown method"):
            MergeConfig(method="magic").validate()
        with pytest.raises(ValueError, match="granularity"):
            MergeConfig(method="prodistill", granularity="modulewise").validate()
        with pytest.raises(ValueError, match="input mode"):
            MergeConfig(method="prodistill", input_mode="triple").validate()
        with pytest.raises(ValueError, match="learning_rate"):
            MergeConfig(method="prodistill", learning_rate=0.0).validate()
        with pytest.raises(ValueError, match="epochs"):
            MergeConfig(method="prodistill", epochs=0).validate()


def test_activation_cache_invariants():
    x = Tensor([[1.0, 2.0]])
    cache = ActivationCache(x, x, 0)
    assert cache.num_pairs == 1
    with pytest.raises(ValueError, match="share a shape"):
        ActivationCache(x, Tensor([[1.0, 2.0], [3.0, 4.0]]), 0)


def test_initial_caches_hold_the_raw_inputs_on_both_paths():
    batches = [Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]])]
    caches = mm.init_caches(batches)
    for cache, batch in zip(caches, batches):
        assert cache.layer_index == 0
        assert cache.z1 is batch and cache.z2 is batch


def test_batch_size_validation():
    with pytest.raises(ValueError, match="batch_size"):
        MergeConfig(method="prodistill", batch_size=0).validate()


def test_granularity_expansion_consistency_random_draws():
    rng = np.random.default_rng(123)
    layers = [Linear("a", 3, 4), Activation("act", "gelu"), Linear("b", 4, 2)]
    for trial in range(10):
        theta_0, _, taus = make_expert_setup(layers, 3, seed=200 + trial, scale=0.5)
        value = float(rng.uniform(-1.0, 1.5))
        for granularity in ("taskwise", "layerwise"):
            scalar = constant_coefficients(granularity, taus, layers, value)
            direct = materialize(theta_0, taus, scalar)
            expanded = materialize(theta_0, taus, scalar.expand_elementwise(taus))
            for key in theta_0.keys():
                assert np.array_equal(direct.entries[key].array, expanded.entries[key].array)


def test_dual_cache_consistency_with_layernorm_stack():
    from promerge.nn import LayerNorm

    layers = [Linear("l1", 3, 4), LayerNorm("norm", 4), Activation("act", "relu"),
              Linear("l2", 4, 2)]
    theta_0, experts, taus = make_expert_setup(layers, 2, seed=301)
    validation = [Tensor(np.random.default_rng(302).standard_normal((5, 3)))] * 2
    config = MergeConfig(method="prodistill", granularity="elementwise",
                         learning_rate=0.02, epochs=8, batch_size=64, seed=1)
    cache_log = []
    coeffs, histories = prodistill(theta_0, taus, layers, validation, config,
                                   cache_log=cache_log)
    assert set(histories) == {"l1", "norm", "l2"}
    merged = materialize(theta_0, taus, coeffs)
    for i in range(2):
        merged_feats = nn.model_forward_with_features(layers, merged, validation[i])
        teacher_feats = nn.model_forward_with_features(layers, experts[i], validation[i])
        for layer_index, (_, caches) in enumerate(cache_log):
            assert np.array_equal(caches[i].z1.array, merged_feats[layer_index].array)
            assert np.array_equal(caches[i].z2.array, teacher_feats[layer_index].array)

"""Merging methods over a shared pre-trained base and per-task weight deltas.

Four methods are provided:

- task arithmetic / simple averaging: fixed-coefficient weighted delta sums;
- distill_merge: train the coefficients end-to-end so the merged model's
  per-layer features match each fine-tuned teacher on that teacher's own
  few-shot inputs;
- prodistill: the progressive variant that trains one layer at a time on
  cached activation pairs and then pushes both cache paths through the
  finished layer before moving on.

Coefficients come in element-, layer- and task-wise granularities. Training
state sizes are tracked by a WorkingSetMeter so the per-layer method's
footprint can be asserted independent of depth.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .checkpoint import ModelWeights, TaskVector, check_compatible
from .nn import LayerSpec, ParamKey
from .optim import adam_step, init_adam
from .tensor import NonFiniteError, Tensor

METHODS = ("task_arithmetic", "simple_average", "distill_merge", "prodistill")
GRANULARITIES = ("elementwise", "layerwise", "taskwise")
INPUT_MODES = ("dual", "merged_only", "finetuned_only")


class DivergenceError(RuntimeError):
    """Coefficient training produced a non-finite or exploding loss."""


# Adam moves coefficients by roughly the learning rate per step no matter how
# steep the objective, so an absurd learning rate manifests as unbounded loss
# growth long before any float actually overflows. Treat an epoch loss this
# far above the starting loss as divergence rather than letting garbage out.
_DIVERGENCE_GROWTH_LIMIT = 1e9


def _check_epoch_loss(epoch_loss: float, initial_loss: float) -> None:
    if not math.isfinite(epoch_loss):
        raise NonFiniteError("loss is not finite")
    if epoch_loss > _DIVERGENCE_GROWTH_LIMIT * max(initial_loss, 1.0):
        raise NonFiniteError(
            f"loss exploded to {epoch_loss:.3e} from {initial_loss:.3e}"
        )


def default_init_coefficient(num_tasks: int) -> float:
    """1.0 for a single delta (exact), 0.5 for pairs, 0.3 beyond."""
    if num_tasks <= 1:
        return 1.0
    if num_tasks == 2:
        return 0.5
    return 0.3


@dataclass(frozen=True)
class MergeConfig:
    method: str
    granularity: str = "elementwise"
    input_mode: str = "dual"
    init_coefficient: float | None = None
    learning_rate: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(
                f"unknown granularity {self.granularity!r}, expected one of {GRANULARITIES}"
            )
        if self.input_mode not in INPUT_MODES:
            raise ValueError(
                f"unknown input mode {self.input_mode!r}, expected one of {INPUT_MODES}"
            )
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    def resolve_init(self, num_tasks: int) -> float:
        if self.init_coefficient is not None:
            return float(self.init_coefficient)
        return default_init_coefficient(num_tasks)


@dataclass
class MergeCoefficients:
    """Per-task merging coefficients at one of three granularities.

    values[i] is, per granularity:
      elementwise: dict[(layer, role) -> Tensor] shaped like task vector i,
      layerwise:   dict[layer name -> float],
      taskwise:    float.
    """

    granularity: str
    values: list

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")

    @property
    def num_tasks(self) -> int:
        return len(self.values)

    def coefficient_for(self, task: int, key: ParamKey):
        """Tensor (elementwise) or scalar float governing `key` for `task`."""
        value = self.values[task]
        if self.granularity == "elementwise":
            return value[key]
        if self.granularity == "layerwise":
            return float(value[key[0]])
        return float(value)

    def expand_elementwise(self, task_vectors: Sequence[TaskVector]) -> "MergeCoefficients":
        """Broadcast scalar coefficients into full per-entry tensors."""
        expanded = []
        for i, tau in enumerate(task_vectors):
            entries = {}
            for key, tensor in tau.entries.items():
                coeff = self.coefficient_for(i, key)
                if isinstance(coeff, Tensor):
                    entries[key] = coeff
                else:
                    entries[key] = Tensor.full(tensor.shape, coeff)
            expanded.append(entries)
        return MergeCoefficients("elementwise", expanded)

    def to_json_dict(self) -> dict:
        tasks = []
        for i, value in enumerate(self.values):
            if self.granularity == "elementwise":
                entries = {
                    f"{layer}/{role}": {
                        "shape": list(tensor.shape),
                        "values": tensor.flat.tolist(),
                    }
                    for (layer, role), tensor in sorted(value.items())
                }
                tasks.append({"task": i, "entries": entries})
            elif self.granularity == "layerwise":
                tasks.append({"task": i, "layers": {k: float(v) for k, v in sorted(value.items())}})
            else:
                tasks.append({"task": i, "value": float(value)})
        return {"granularity": self.granularity, "tasks": tasks}

    @staticmethod
    def from_json_dict(payload: dict) -> "MergeCoefficients":
        granularity = payload["granularity"]
        values = []
        for entry in payload["tasks"]:
            if granularity == "elementwise":
                tensors = {}
                for key_text, rec in entry["entries"].items():
                    layer, role = key_text.split("/")
                    tensors[(layer, role)] = Tensor(rec["values"], shape=rec["shape"])
                values.append(tensors)
            elif granularity == "layerwise":
                values.append({k: float(v) for k, v in entry["layers"].items()})
            else:
                values.append(float(entry["value"]))
        return MergeCoefficients(granularity, values)


def constant_coefficients(
    granularity: str,
    task_vectors: Sequence[TaskVector],
    layers: Sequence[LayerSpec],
    value: float,
) -> MergeCoefficients:
    """Uniform coefficients at the requested granularity."""
    values: list = []
    for tau in task_vectors:
        if granularity == "elementwise":
            values.append({key: Tensor.full(t.shape, value) for key, t in tau.entries.items()})
        elif granularity == "layerwise":
            values.append({spec.name: value for spec in layers if nn.is_parameterized(spec)})
        else:
            values.append(value)
    return MergeCoefficients(granularity, values)


@dataclass
class ActivationCache:
    """Paired merged-path / fine-tuned-path activations at one layer boundary."""

    z1: Tensor
    z2: Tensor
    layer_index: int = 0

    def __post_init__(self):
        if self.z1.shape != self.z2.shape:
            raise ValueError(
                f"cache paths must share a shape, got {self.z1.shape} and {self.z2.shape}"
            )

    @property
    def num_pairs(self) -> int:
        return self.z1.shape[0]


class WorkingSetMeter:
    """Counts parameter-sized training-state elements currently resident.

    Tracked: coefficient tensors, the task-vector slices in active use,
    gradient buffers, optimizer moments, and merged-weight scratch. Data
    activations are deliberately excluded for both methods so footprints
    compare like for like.
    """

    def __init__(self):
        self.current = 0
        self.peak = 0

    def add(self, count: int) -> None:
        self.current += count
        self.peak = max(self.peak, self.current)

    def remove(self, count: int) -> None:
        self.current -= count


# -- weighted-delta arithmetic --------------------------------------------------


def _merge_entry(theta0: Tensor, contributions: list) -> np.ndarray:
    """theta0 + sum_j lambda_j (*) tau_j, accumulated in task order.

    `contributions` holds (coefficient, tau) pairs; the coefficient is a
    Tensor for element-wise granularity or a plain float otherwise. Every
    merged-weight computation in this module funnels through here so that
    training-time and materialized weights agree bit for bit.
    """
    acc = theta0.array.copy()
    for coeff, tau in contributions:
        if isinstance(coeff, Tensor):
            acc += coeff.array * tau.array
        else:
            acc += coeff * tau.array
    return acc


def _check_merge_inputs(theta_0: ModelWeights, task_vectors: Sequence[TaskVector]) -> None:
    if not task_vectors:
        raise ValueError("need at least one task vector to merge")
    for tau in task_vectors:
        check_compatible(theta_0, tau)


def materialize(
    theta_0: ModelWeights,
    task_vectors: Sequence[TaskVector],
    coeffs: MergeCoefficients,
) -> ModelWeights:
    """Apply coefficients from any method to produce the merged weight set."""
    _check_merge_inputs(theta_0, task_vectors)
    if coeffs.num_tasks != len(task_vectors):
        raise ValueError(
            f"{coeffs.num_tasks} coefficient sets for {len(task_vectors)} task vectors"
        )
    entries = {}
    for key in theta_0.keys():
        contributions = [
            (coeffs.coefficient_for(i, key), tau.entries[key])
            for i, tau in enumerate(task_vectors)
        ]
        entries[key] = Tensor(_merge_entry(theta_0.entries[key], contributions))
    return ModelWeights(entries, theta_0.arch_fingerprint)


def merge_task_arithmetic(
    theta_0: ModelWeights,
    task_vectors: Sequence[TaskVector],
    coeffs: MergeCoefficients,
) -> ModelWeights:
    """Weighted-delta merge with fixed coefficients; no training involved."""
    return materialize(theta_0, task_vectors, coeffs)


def teacher_weights(theta_0: ModelWeights, tau: TaskVector) -> ModelWeights:
    entries = {
        key: Tensor(theta_0.entries[key].array + tau.entries[key].array)
        for key in theta_0.keys()
    }
    return ModelWeights(entries, theta_0.arch_fingerprint)


# -- shared training plumbing ---------------------------------------------------


def _task_weights_factor(task_count: int, sizes: Sequence[int]) -> list[float]:
    return [1.0 / (2.0 * task_count * size) for size in sizes]


def _epoch_batches(rng: np.random.Generator, sizes: Sequence[int], batch_size: int):
    """Per-task shuffled row-index batches; step s cycles shorter tasks."""
    per_task = []
    for size in sizes:
        order = rng.permutation(size)
        per_task.append([order[i:i + batch_size] for i in range(0, size, batch_size)])
    steps = max(len(b) for b in per_task)
    for step in range(steps):
        yield [batches[step % len(batches)] for batches in per_task]


def _layer_rng(seed: int, layer_name: str) -> np.random.Generator:
    """Deterministic per-layer batch stream, independent of layer position.

    Keyed on the layer name so the same layer trains identically whether it
    sits in a deep stack or alone on cached inputs.
    """
    digest = hashlib.sha256(layer_name.encode()).digest()
    return np.random.default_rng([seed & 0xFFFFFFFF, int.from_bytes(digest[:4], "big")])


def _validate_training_inputs(theta_0, task_vectors, layers, validation, config):
    config.validate()
    _check_merge_inputs(theta_0, task_vectors)
    nn.validate_layers(layers)
    fingerprint = nn.architecture_fingerprint(layers)
    if theta_0.arch_fingerprint and theta_0.arch_fingerprint != fingerprint:
        raise ValueError("base weights do not match the layer stack")
    if len(validation) != len(task_vectors):
        raise ValueError(
            f"{len(validation)} validation batches for {len(task_vectors)} tasks"
        )
    for i, batch in enumerate(validation):
        if len(batch.shape) != 2 or batch.shape[0] == 0:
            raise ValueError(f"empty validation set for task {i}")


class _CoefficientSet:
    """Trainable coefficients for a set of parameter keys, as a flat dict.

    Handles granularity bookkeeping: parameter layout, gradient contraction
    from merged-weight gradients, and lookup of the per-key coefficient.
    """

    def __init__(self, granularity, task_vectors, keys, init_value):
        self.granularity = granularity
        self.keys = list(keys)
        self.num_tasks = len(task_vectors)
        self.task_vectors = task_vectors
        params = {}
        for i in range(self.num_tasks):
            if granularity == "elementwise":
                for key in self.keys:
                    shape = task_vectors[i].entries[key].shape
                    params[(i, key)] = Tensor.full(shape, init_value)
            elif granularity == "layerwise":
                for layer in sorted({key[0] for key in self.keys}):
                    params[(i, layer)] = Tensor.full((), init_value)
            else:
                params[(i,)] = Tensor.full((), init_value)
        self.params = params

    def size(self) -> int:
        return sum(t.size for t in self.params.values())

    def coefficient(self, task: int, key: ParamKey):
        if self.granularity == "elementwise":
            return self.params[(task, key)]
        if self.granularity == "layerwise":
            return float(self.params[(task, key[0])].item())
        return float(self.params[(task,)].item())

    def merged_entry(self, theta_0: ModelWeights, key: ParamKey) -> np.ndarray:
        contributions = [
            (self.coefficient(i, key), self.task_vectors[i].entries[key])
            for i in range(self.num_tasks)
        ]
        return _merge_entry(theta_0.entries[key], contributions)

    def grads_from_theta(self, dtheta: dict[ParamKey, np.ndarray]) -> dict:
        """Chain dLoss/d(merged weights) into dLoss/d(coefficients)."""
        grads = {pkey: np.zeros(t.shape) for pkey, t in self.params.items()}
        for key in self.keys:
            if key not in dtheta:
                continue
            for i in range(self.num_tasks):
                tau = self.task_vectors[i].entries[key].array
                contribution = dtheta[key] * tau
                if self.granularity == "elementwise":
                    grads[(i, key)] += contribution
                elif self.granularity == "layerwise":
                    grads[(i, key[0])] += contribution.sum()
                else:
                    grads[(i,)] += contribution.sum()
        return {pkey: Tensor(g) for pkey, g in grads.items()}

    def as_coefficients(self) -> MergeCoefficients:
        values: list = []
        for i in range(self.num_tasks):
            if self.granularity == "elementwise":
                values.append({key: self.params[(i, key)] for key in self.keys})
            elif self.granularity == "layerwise":
                values.append({
                    layer: float(self.params[(i, layer)].item())
                    for layer in sorted({key[0] for key in self.keys})
                })
            else:
                values.append(float(self.params[(i,)].item()))
        return MergeCoefficients(self.granularity, values)


def _merge_coefficient_sets(granularity: str, sets: list["_CoefficientSet"]) -> MergeCoefficients:
    """Combine per-layer coefficient sets into one model-wide object."""
    num_tasks = sets[0].num_tasks
    values: list = [dict() for _ in range(num_tasks)]
    for cs in sets:
        per = cs.as_coefficients().values
        for i in range(num_tasks):
            values[i].update(per[i])
    return MergeCoefficients(granularity, values)


# -- end-to-end distillation merging --------------------------------------------


def distill_merge(
    theta_0: ModelWeights,
    task_vectors: Sequence[TaskVector],
    layers: Sequence[LayerSpec],
    validation: Sequence[Tensor],
    config: MergeConfig,
    meter: WorkingSetMeter | None = None,
) -> tuple[MergeCoefficients, list[float]]:
    """Train coefficients against the all-layer feature-matching objective.

    The loss is sum_i 1/(2 T |D_i|) sum_x ||features(merged, x) -
    features(teacher_i, x)||^2 over every layer's output. Returns the trained
    coefficients and the full-objective loss history (entry 0 is the loss at
    initialization, then one entry per epoch).
    """
    if config.method != "distill_merge":
        raise ValueError(f"config.method is {config.method!r}, expected 'distill_merge'")
    _validate_training_inputs(theta_0, task_vectors, layers, validation, config)
    meter = meter if meter is not None else WorkingSetMeter()

    num_tasks = len(task_vectors)
    keys = theta_0.keys()
    coeff_set = _CoefficientSet(
        config.granularity, task_vectors, keys, config.resolve_init(num_tasks)
    )

    teachers = [teacher_weights(theta_0, tau) for tau in task_vectors]
    teacher_feats = [
        [f.array for f in nn.model_forward_with_features(layers, teachers[i], validation[i])]
        for i in range(num_tasks)
    ]
    sizes = [batch.shape[0] for batch in validation]
    weights_factor = _task_weights_factor(num_tasks, sizes)

    tau_elems = sum(t.size for tau in task_vectors for t in tau.entries.values())
    theta_elems = theta_0.total_params()
    coeff_elems = coeff_set.size()
    # resident at once: coefficients + all task-vector slices + Adam moments
    # + gradient buffers + merged-weight scratch
    meter.add(coeff_elems * 4 + tau_elems + theta_elems)

    def merged_weights() -> ModelWeights:
        return ModelWeights(
            {key: Tensor(coeff_set.merged_entry(theta_0, key)) for key in keys},
            theta_0.arch_fingerprint,
        )

    def full_loss(weights: ModelWeights) -> float:
        total = 0.0
        for i in range(num_tasks):
            feats = nn.model_forward_with_features(layers, weights, validation[i])
            for merged_f, teacher_f in zip(feats, teacher_feats[i]):
                diff = merged_f.array - teacher_f
                total += weights_factor[i] * float((diff * diff).sum())
        return total

    rng = np.random.default_rng(config.seed)
    state = init_adam(coeff_set.params, config.learning_rate)
    try:
        history = [full_loss(merged_weights())]
        for _ in range(config.epochs):
            for batch_rows in _epoch_batches(rng, sizes, config.batch_size):
                weights = merged_weights()
                dtheta: dict[ParamKey, np.ndarray] = {}
                for i in range(num_tasks):
                    rows = batch_rows[i]
                    batch = Tensor(validation[i].array[rows])
                    feats = nn.model_forward_with_features(layers, weights, batch)
                    grads_per_layer = []
                    for idx in range(len(layers)):
                        diff = feats[idx].array - teacher_feats[i][idx][rows]
                        grads_per_layer.append(Tensor(2.0 * weights_factor[i] * diff))
                    for key, grad in nn.model_backward(
                        layers, weights, batch, grads_per_layer
                    ).items():
                        if key in dtheta:
                            dtheta[key] = dtheta[key] + grad.array
                        else:
                            dtheta[key] = grad.array
                coeff_set.params, state = adam_step(
                    state, coeff_set.params, coeff_set.grads_from_theta(dtheta)
                )
            epoch_loss = full_loss(merged_weights())
            _check_epoch_loss(epoch_loss, history[0])
            history.append(epoch_loss)
    except NonFiniteError as exc:
        raise DivergenceError(f"divergence during end-to-end training: {exc}") from exc
    finally:
        meter.remove(coeff_elems * 4 + tau_elems + theta_elems)

    return coeff_set.as_coefficients(), history


# -- progressive layer-wise distillation ----------------------------------------


def init_caches(validation: Sequence[Tensor]) -> list[ActivationCache]:
    """Boundary-0 caches: both paths start at the raw validation inputs."""
    return [ActivationCache(batch, batch, 0) for batch in validation]


def _training_inputs(cache: ActivationCache, input_mode: str) -> tuple[Tensor, Tensor]:
    if input_mode == "dual":
        return cache.z1, cache.z2
    if input_mode == "merged_only":
        return cache.z1, cache.z1
    return cache.z2, cache.z2


def prodistill(
    theta_0: ModelWeights,
    task_vectors: Sequence[TaskVector],
    layers: Sequence[LayerSpec],
    validation: Sequence[Tensor],
    config: MergeConfig,
    meter: WorkingSetMeter | None = None,
    cache_log: list | None = None,
) -> tuple[MergeCoefficients, dict[str, list[float]]]:
    """Progressively train per-layer coefficients on cached activation pairs.

    For each layer in order: fit that layer's coefficients so the merged
    layer's output on the merged-path activations matches each teacher
    layer's output on the teacher-path activations (inputs per
    config.input_mode), then advance both cache paths through the finished
    layer. Parameter-free layers skip training and only advance the caches.

    Returns the coefficients for every parameterized layer plus per-layer
    loss histories (entry 0 of each history is the loss at initialization).
    Training state for only one layer is resident at a time. If `cache_log`
    is a list, it receives (layer name, caches after that layer) snapshots.
    """
    if config.method != "prodistill":
        raise ValueError(f"config.method is {config.method!r}, expected 'prodistill'")
    if config.granularity == "taskwise":
        raise ValueError(
            "prodistill trains one layer at a time, so a single whole-model "
            "scalar per task is not trainable; use layerwise or elementwise"
        )
    _validate_training_inputs(theta_0, task_vectors, layers, validation, config)
    meter = meter if meter is not None else WorkingSetMeter()

    num_tasks = len(task_vectors)
    init_value = config.resolve_init(num_tasks)
    sizes = [batch.shape[0] for batch in validation]
    weights_factor = _task_weights_factor(num_tasks, sizes)

    caches = init_caches(validation)
    histories: dict[str, list[float]] = {}
    trained_sets: list[_CoefficientSet] = []

    for spec in layers:
        layer_keys = [(spec.name, role) for role in nn.param_shapes(spec)]
        teacher_params = [
            {
                role: Tensor(
                    theta_0.entries[(spec.name, role)].array
                    + tau.entries[(spec.name, role)].array
                )
                for role in nn.param_shapes(spec)
            }
            for tau in task_vectors
        ]

        if layer_keys:
            coeff_set = _CoefficientSet(config.granularity, task_vectors, layer_keys, init_value)
            layer_tau_elems = sum(
                task_vectors[i].entries[key].size
                for i in range(num_tasks)
                for key in layer_keys
            )
            layer_theta_elems = sum(theta_0.entries[key].size for key in layer_keys)
            resident = coeff_set.size() * 4 + layer_tau_elems + layer_theta_elems
            meter.add(resident)
            try:
                histories[spec.name] = _train_layer(
                    spec, layer_keys, coeff_set, theta_0, teacher_params,
                    caches, sizes, weights_factor, config,
                )
            finally:
                meter.remove(resident)
            trained_sets.append(coeff_set)
            merged_params = {
                role: Tensor(coeff_set.merged_entry(theta_0, (spec.name, role)))
                for role in nn.param_shapes(spec)
            }
        else:
            merged_params = {}

        for i in range(num_tasks):
            caches[i] = ActivationCache(
                nn.layer_forward(spec, merged_params, caches[i].z1),
                nn.layer_forward(spec, teacher_params[i], caches[i].z2),
                caches[i].layer_index + 1,
            )
        if cache_log is not None:
            cache_log.append((spec.name, list(caches)))

    coeffs = _merge_coefficient_sets(config.granularity, trained_sets)
    return coeffs, histories


def _train_layer(
    spec: LayerSpec,
    layer_keys: list[ParamKey],
    coeff_set: _CoefficientSet,
    theta_0: ModelWeights,
    teacher_params: list[dict[str, Tensor]],
    caches: list[ActivationCache],
    sizes: list[int],
    weights_factor: list[float],
    config: MergeConfig,
) -> list[float]:
    num_tasks = len(caches)
    rng = _layer_rng(config.seed, spec.name)
    inputs = [_training_inputs(cache, config.input_mode) for cache in caches]
    targets = [
        nn.layer_forward(spec, teacher_params[i], inputs[i][1]).array
        for i in range(num_tasks)
    ]

    def merged_params() -> dict[str, Tensor]:
        return {
            role: Tensor(coeff_set.merged_entry(theta_0, (spec.name, role)))
            for role in nn.param_shapes(spec)
        }

    def full_loss(params: dict[str, Tensor]) -> float:
        total = 0.0
        for i in range(num_tasks):
            pred = nn.layer_forward(spec, params, inputs[i][0]).array
            diff = pred - targets[i]
            total += weights_factor[i] * float((diff * diff).sum())
        return total

    state = init_adam(coeff_set.params, config.learning_rate)
    try:
        history = [full_loss(merged_params())]
        for _ in range(config.epochs):
            for batch_rows in _epoch_batches(rng, sizes, config.batch_size):
                params = merged_params()
                dtheta: dict[ParamKey, np.ndarray] = {}
                for i in range(num_tasks):
                    rows = batch_rows[i]
                    batch_in = Tensor(inputs[i][0].array[rows])
                    pred = nn.layer_forward(spec, params, batch_in)
                    upstream = Tensor(
                        2.0 * weights_factor[i] * (pred.array - targets[i][rows])
                    )
                    for role, grad in nn.layer_backward_weights(
                        spec, params, batch_in, upstream
                    ).items():
                        key = (spec.name, role)
                        if key in dtheta:
                            dtheta[key] = dtheta[key] + grad.array
                        else:
                            dtheta[key] = grad.array
                coeff_set.params, state = adam_step(
                    state, coeff_set.params, coeff_set.grads_from_theta(dtheta)
                )
            epoch_loss = full_loss(merged_params())
            _check_epoch_loss(epoch_loss, history[0])
            history.append(epoch_loss)
    except NonFiniteError as exc:
        raise DivergenceError(f"divergence at layer {spec.name}: {exc}") from exc
    return history


def run_method(
    theta_0: ModelWeights,
    task_vectors: Sequence[TaskVector],
    layers: Sequence[LayerSpec],
    validation: Sequence[Tensor] | None,
    config: MergeConfig,
    meter: WorkingSetMeter | None = None,
):
    """Dispatch a merge method; returns (coefficients, history or None)."""
    config.validate()
    if config.method == "task_arithmetic":
        value = config.resolve_init(len(task_vectors))
        return constant_coefficients(config.granularity, task_vectors, layers, value), None
    if config.method == "simple_average":
        value = 1.0 / len(task_vectors)
        return constant_coefficients(config.granularity, task_vectors, layers, value), None
    if validation is None:
        raise ValueError(f"{config.method} needs validation inputs")
    if config.method == "distill_merge":
        return distill_merge(theta_0, task_vectors, layers, validation, config, meter)
    return prodistill(theta_0, task_vectors, layers, validation, config, meter)

"""Synthetic multi-task experiments: generate tasks, fine-tune toy experts,
run every merging method, and score everything through one evaluation path.

Tasks are Gaussian-cluster classification problems built from a set of
shared prototypes that each task relabels through its own permutation, so
the fine-tuned experts genuinely disagree and merging has real conflicts to
resolve. Merging methods only ever see unlabeled validation inputs; labels
flow to expert fine-tuning, the supervised baseline and test scoring.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import merge as merge_mod
from . import nn
from .checkpoint import ModelWeights, task_vector
from .merge import MergeConfig, WorkingSetMeter
from .nn import Activation, LayerSpec, Linear
from .optim import adam_step, init_adam
from .tensor import Tensor


class FinetuneError(RuntimeError):
    """An expert missed the accuracy floor; diagnostics in the message."""


@dataclass(frozen=True)
class SuiteSpec:
    """Declarative description of a synthetic task suite.

    Generation is a pure function of this spec (seed included), so a saved
    spec fully reproduces the suite. Classes are Gaussian mixtures over
    `clusters_per_class` centers drawn from a prototype pool that all tasks
    share but assign to classes differently, so experts genuinely conflict
    and a few labeled shots cannot reveal a task's full class structure.
    """

    num_tasks: int = 4
    input_dim: int = 16
    classes: int = 3
    clusters_per_class: int = 1
    train_per_task: int = 256
    test_per_task: int = 256
    shots: int = 64
    noise: float = 0.35
    shared_fraction: float = 0.7
    mean_scale: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be at least 1")
        if self.classes < 2:
            raise ValueError("classes must be at least 2")
        if self.clusters_per_class < 1:
            raise ValueError("clusters_per_class must be at least 1")
        if min(self.train_per_task, self.test_per_task, self.shots) < 1:
            raise ValueError("split sizes must be positive")
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise ValueError("shared_fraction must lie in [0, 1]")

    def to_json_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json_dict(payload: dict) -> "SuiteSpec":
        known = {f for f in SuiteSpec.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown suite spec keys: {sorted(unknown)}")
        return SuiteSpec(**payload)


@dataclass
class TaskData:
    train_x: Tensor
    train_y: np.ndarray
    val_x: Tensor
    val_y: np.ndarray
    test_x: Tensor
    test_y: np.ndarray


@dataclass
class SyntheticTaskSuite:
    spec: SuiteSpec
    tasks: list[TaskData]

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def validation_inputs(self, shots: int | None = None) -> list[Tensor]:
        """Unlabeled few-shot inputs per task; smaller counts are prefixes."""
        if shots is None:
            shots = self.spec.shots
        if shots < 1 or shots > self.spec.shots:
            raise ValueError(f"shots must be in [1, {self.spec.shots}], got {shots}")
        return [Tensor(task.val_x.array[:shots]) for task in self.tasks]


def generate_suite(spec: SuiteSpec) -> SyntheticTaskSuite:
    """Deterministic Gaussian-mixture tasks over permuted shared prototypes."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    scale = spec.mean_scale / math.sqrt(spec.input_dim)
    pool_size = spec.classes * spec.clusters_per_class
    shared = rng.standard_normal((pool_size, spec.input_dim)) * scale

    tasks = []
    for _ in range(spec.num_tasks):
        # each task deals the same prototype pool to different classes
        perm = rng.permutation(pool_size)
        private = rng.standard_normal((pool_size, spec.input_dim)) * scale
        means = spec.shared_fraction * shared[perm] + (1.0 - spec.shared_fraction) * private
        means = means.reshape(spec.classes, spec.clusters_per_class, spec.input_dim)

        def draw(count: int) -> tuple[Tensor, np.ndarray]:
            labels = rng.integers(0, spec.classes, size=count)
            clusters = rng.integers(0, spec.clusters_per_class, size=count)
            points = means[labels, clusters] + spec.noise * rng.standard_normal(
                (count, spec.input_dim)
            )
            return Tensor(points), labels

        train_x, train_y = draw(spec.train_per_task)
        val_x, val_y = draw(spec.shots)
        test_x, test_y = draw(spec.test_per_task)
        tasks.append(TaskData(train_x, train_y, val_x, val_y, test_x, test_y))
    return SyntheticTaskSuite(spec, tasks)


def default_layers(spec: SuiteSpec, hidden: int = 16) -> list[LayerSpec]:
    return [
        Linear("lin1", spec.input_dim, hidden),
        Activation("act1", "relu"),
        Linear("lin2", hidden, hidden),
        Activation("act2", "relu"),
        Linear("head", hidden, spec.classes),
    ]


# -- supervised training and scoring ---------------------------------------------


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross entropy and its logits gradient (softmax - onehot)/B."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    count = logits.shape[0]
    loss = -float(log_probs[np.arange(count), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(count), labels] -= 1.0
    return loss, grad / count


def train_cross_entropy(
    layers: Sequence[LayerSpec],
    weights: ModelWeights,
    inputs: Tensor,
    labels: np.ndarray,
    epochs: int,
    learning_rate: float,
    batch_size: int,
    seed: int,
) -> ModelWeights:
    """Plain minibatch Adam on mean cross entropy; returns new weights."""
    rng = np.random.default_rng(seed)
    params = dict(weights.entries)
    state = init_adam(params, learning_rate)
    x = inputs.array
    count = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(count)
        for start in range(0, count, batch_size):
            rows = order[start:start + batch_size]
            batch = Tensor(x[rows])
            current = ModelWeights(params, weights.arch_fingerprint)
            logits = nn.model_forward(layers, current, batch)
            _, grad = _cross_entropy(logits.array, labels[rows])
            feature_grads: list[Tensor | None] = [None] * len(layers)
            feature_grads[-1] = Tensor(grad)
            grads = nn.model_backward(layers, current, batch, feature_grads)
            params, state = adam_step(state, params, grads)
    return ModelWeights(params, weights.arch_fingerprint)


def evaluate_accuracy(
    layers: Sequence[LayerSpec],
    weights: ModelWeights,
    inputs: Tensor,
    labels: np.ndarray,
) -> float:
    logits = nn.model_forward(layers, weights, inputs)
    return float(np.mean(logits.array.argmax(axis=1) == labels))


def per_task_accuracy(layers, weights, suite: SyntheticTaskSuite) -> list[float]:
    return [
        evaluate_accuracy(layers, weights, task.test_x, task.test_y)
        for task in suite.tasks
    ]


# -- experts ----------------------------------------------------------------------


# seed offset that keeps the held-out pretraining task out of the suite's
# own seed space
_PRETRAIN_SEED_OFFSET = 90001

PRETRAIN_MODES = ("pooled", "held_out", "none")


def finetune_experts(
    layers: Sequence[LayerSpec],
    suite: SyntheticTaskSuite,
    epochs: int = 40,
    learning_rate: float = 0.01,
    seed: int = 0,
    pretrain_epochs: int = 5,
    batch_size: int = 32,
    accuracy_floor: float = 0.9,
    pretrain_mode: str = "pooled",
) -> tuple[ModelWeights, list[ModelWeights]]:
    """Shared base then one fine-tuned expert per task.

    The base is trained per `pretrain_mode`: "pooled" fits the pooled
    (conflicting) task data briefly, "held_out" fits a separate task drawn
    from the same generator family (so the base has useful features but has
    never seen any downstream label), "none" keeps the random init. Every
    expert must clear `accuracy_floor` on its test split or the run aborts
    with diagnostics.
    """
    if pretrain_mode not in PRETRAIN_MODES:
        raise ValueError(f"unknown pretrain mode {pretrain_mode!r}")
    theta_init = nn.init_weights(layers, seed)
    if pretrain_mode == "pooled" and pretrain_epochs > 0:
        pooled_x = Tensor(np.concatenate([t.train_x.array for t in suite.tasks]))
        pooled_y = np.concatenate([t.train_y for t in suite.tasks])
        theta_0 = train_cross_entropy(
            layers, theta_init, pooled_x, pooled_y,
            pretrain_epochs, learning_rate, batch_size, seed,
        )
    elif pretrain_mode == "held_out" and pretrain_epochs > 0:
        pre_spec = replace(
            suite.spec, num_tasks=1, seed=suite.spec.seed + _PRETRAIN_SEED_OFFSET
        )
        pre_task = generate_suite(pre_spec).tasks[0]
        theta_0 = train_cross_entropy(
            layers, theta_init, pre_task.train_x, pre_task.train_y,
            pretrain_epochs, learning_rate, batch_size, seed,
        )
    else:
        theta_0 = theta_init

    experts = []
    scores = []
    for index, task in enumerate(suite.tasks):
        expert = train_cross_entropy(
            layers, theta_0, task.train_x, task.train_y,
            epochs, learning_rate, batch_size, seed + 1000 * (index + 1),
        )
        experts.append(expert)
        scores.append(evaluate_accuracy(layers, expert, task.test_x, task.test_y))

    failures = [i for i, s in enumerate(scores) if s < accuracy_floor]
    if failures:
        detail = ", ".join(f"task {i}: {scores[i]:.3f}" for i in range(len(scores)))
        raise FinetuneError(
            f"fine-tuning failed: accuracy floor {accuracy_floor} missed "
            f"on tasks {failures} ({detail})"
        )
    return theta_0, experts


# -- direct baselines --------------------------------------------------------------


def direct_train(
    layers: Sequence[LayerSpec],
    theta_0: ModelWeights,
    suite: SyntheticTaskSuite,
    shots: int,
    epochs: int = 40,
    learning_rate: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[ModelWeights, list[float]]:
    """Supervised baseline: full weights on pooled few-shot labeled data.

    Minimizes sum_i 1/(2 T |D_i|) sum_(x,y) CE(model(x), y). Zero epochs
    returns the base weights untouched.
    """
    if shots < 1:
        raise ValueError("need at least one labeled shot per task")
    num_tasks = suite.num_tasks
    xs = [task.val_x.array[:shots] for task in suite.tasks]
    ys = [task.val_y[:shots] for task in suite.tasks]
    factor = [1.0 / (2.0 * num_tasks * shots)] * num_tasks

    def full_loss(weights: ModelWeights) -> float:
        total = 0.0
        for i in range(num_tasks):
            logits = nn.model_forward(layers, weights, Tensor(xs[i]))
            mean_ce, _ = _cross_entropy(logits.array, ys[i])
            total += factor[i] * mean_ce * shots
        return total

    params = dict(theta_0.entries)
    state = init_adam(params, learning_rate) if epochs > 0 else None
    rng = np.random.default_rng(seed)
    history = [full_loss(ModelWeights(params, theta_0.arch_fingerprint))]
    for _ in range(epochs):
        for batch_rows in merge_mod._epoch_batches(rng, [shots] * num_tasks, batch_size):
            current = ModelWeights(params, theta_0.arch_fingerprint)
            grads_acc: dict = {}
            for i in range(num_tasks):
                rows = batch_rows[i]
                batch = Tensor(xs[i][rows])
                logits = nn.model_forward(layers, current, batch)
                _, grad = _cross_entropy(logits.array, ys[i][rows])
                # mean-CE grad is per-sample/len(rows); rescale to the
                # sum-form objective weight
                grad = grad * len(rows) * factor[i]
                feature_grads: list[Tensor | None] = [None] * len(layers)
                feature_grads[-1] = Tensor(grad)
                for key, g in nn.model_backward(layers, current, batch, feature_grads).items():
                    grads_acc[key] = grads_acc[key] + g.array if key in grads_acc else g.array
            grads = {key: Tensor(g) for key, g in grads_acc.items()}
            params, state = adam_step(state, params, grads)
        history.append(full_loss(ModelWeights(params, theta_0.arch_fingerprint)))
    return ModelWeights(params, theta_0.arch_fingerprint), history


def direct_distill(
    layers: Sequence[LayerSpec],
    theta_0: ModelWeights,
    experts: Sequence[ModelWeights],
    suite: SyntheticTaskSuite,
    shots: int,
    epochs: int = 40,
    learning_rate: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[ModelWeights, list[float]]:
    """Feature-matching baseline trained on raw weights, no delta scaling.

    Same all-layer objective as end-to-end coefficient training, but the
    trainable parameters are the model weights themselves.
    """
    if shots < 1:
        raise ValueError("need at least one validation shot per task")
    num_tasks = suite.num_tasks
    if len(experts) != num_tasks:
        raise ValueError(f"{len(experts)} experts for {num_tasks} tasks")
    validation = suite.validation_inputs(shots)
    teacher_feats = [
        [f.array for f in nn.model_forward_with_features(layers, experts[i], validation[i])]
        for i in range(num_tasks)
    ]
    factor = [1.0 / (2.0 * num_tasks * shots)] * num_tasks

    def full_loss(weights: ModelWeights) -> float:
        total = 0.0
        for i in range(num_tasks):
            feats = nn.model_forward_with_features(layers, weights, validation[i])
            for merged_f, teacher_f in zip(feats, teacher_feats[i]):
                diff = merged_f.array - teacher_f
                total += factor[i] * float((diff * diff).sum())
        return total

    params = dict(theta_0.entries)
    state = init_adam(params, learning_rate) if epochs > 0 else None
    rng = np.random.default_rng(seed)
    history = [full_loss(ModelWeights(params, theta_0.arch_fingerprint))]
    for _ in range(epochs):
        for batch_rows in merge_mod._epoch_batches(rng, [shots] * num_tasks, batch_size):
            current = ModelWeights(params, theta_0.arch_fingerprint)
            grads_acc: dict = {}
            for i in range(num_tasks):
                rows = batch_rows[i]
                batch = Tensor(validation[i].array[rows])
                feats = nn.model_forward_with_features(layers, current, batch)
                feature_grads = [
                    Tensor(2.0 * factor[i] * (feats[idx].array - teacher_feats[i][idx][rows]))
                    for idx in range(len(layers))
                ]
                for key, g in nn.model_backward(layers, current, batch, feature_grads).items():
                    grads_acc[key] = grads_acc[key] + g.array if key in grads_acc else g.array
            grads = {key: Tensor(g) for key, g in grads_acc.items()}
            params, state = adam_step(state, params, grads)
        history.append(full_loss(ModelWeights(params, theta_0.arch_fingerprint)))
    return ModelWeights(params, theta_0.arch_fingerprint), history


# -- the sweep ----------------------------------------------------------------------

MERGE_METHODS = ("task_arithmetic", "simple_average", "distill_merge", "prodistill")
DIRECT_METHODS = ("direct_train", "direct_distill")
ALL_METHODS = MERGE_METHODS + DIRECT_METHODS


@dataclass
class CellResult:
    method: str
    granularity: str
    input_mode: str
    shots: int
    seed: int
    per_task_accuracy: list[float]
    mean_accuracy: float
    final_loss: float | None
    wall_clock: float
    peak_working_set: int
    error: str | None = None


@dataclass
class ExperimentReport:
    suite_spec: dict
    settings: dict
    cells: list[CellResult] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "suite_spec": self.suite_spec,
            "settings": self.settings,
            "cells": [asdict(c) for c in self.cells],
        }

    def to_csv_text(self) -> str:
        """Stable results table; timing lives only in the JSON report."""
        lines = [
            "method,granularity,input_mode,shots,seed,mean_accuracy,final_loss,"
            "peak_working_set,per_task_accuracy,error"
        ]
        for c in self.cells:
            per_task = ";".join(f"{a:.6f}" for a in c.per_task_accuracy)
            loss = "" if c.final_loss is None else f"{c.final_loss:.12g}"
            err = c.error or ""
            lines.append(
                f"{c.method},{c.granularity},{c.input_mode},{c.shots},{c.seed},"
                f"{c.mean_accuracy:.6f},{loss},{c.peak_working_set},{per_task},{err}"
            )
        return "\n".join(lines) + "\n"

    def select(self, **filters) -> list[CellResult]:
        out = []
        for cell in self.cells:
            if all(getattr(cell, key) == value for key, value in filters.items()):
                out.append(cell)
        return out

    def mean_over_seeds(self, **filters) -> float:
        cells = self.select(**filters)
        if not cells:
            raise KeyError(f"no cells match {filters}")
        return float(np.mean([c.mean_accuracy for c in cells]))


def _cell_variants(method: str, granularities, input_modes):
    """Only vary the dimensions a method actually consumes."""
    if method in ("task_arithmetic", "simple_average"):
        return [("taskwise", "-")]
    if method in DIRECT_METHODS:
        return [("-", "-")]
    if method == "distill_merge":
        return [(g, "-") for g in granularities]
    return [(g, m) for g in granularities for m in input_modes]


def run_experiment(
    suite_spec: SuiteSpec,
    methods: Sequence[str] = ("task_arithmetic", "prodistill"),
    granularities: Sequence[str] = ("elementwise",),
    input_modes: Sequence[str] = ("dual",),
    shots_list: Sequence[int] = (64,),
    seeds: Sequence[int] = (0,),
    learning_rate: float = 0.05,
    epochs: int = 50,
    batch_size: int = 64,
    init_coefficient: float | None = None,
    direct_learning_rate: float = 1e-3,
    finetune_epochs: int = 40,
    finetune_learning_rate: float = 0.01,
    hidden: int = 16,
    accuracy_floor: float = 0.9,
    pretrain_mode: str = "pooled",
) -> ExperimentReport:
    """Full cross-product sweep; deterministic per seed.

    Experts are fine-tuned once per seed and shared across all cells of that
    seed. Every merged model is materialized and scored through the same
    test-path as the experts. Cells that fail keep their error message and
    the sweep continues.
    """
    for method in methods:
        if method not in ALL_METHODS:
            raise ValueError(f"unknown method {method!r}, expected one of {ALL_METHODS}")
    report = ExperimentReport(
        suite_spec=suite_spec.to_json_dict(),
        settings={
            "methods": list(methods),
            "granularities": list(granularities),
            "input_modes": list(input_modes),
            "shots": list(shots_list),
            "seeds": list(seeds),
            "learning_rate": learning_rate,
            "epochs": epochs,
            "batch_size": batch_size,
            "init_coefficient": init_coefficient,
            "direct_learning_rate": direct_learning_rate,
            "finetune_epochs": finetune_epochs,
            "finetune_learning_rate": finetune_learning_rate,
            "hidden": hidden,
            "pretrain_mode": pretrain_mode,
        },
    )

    for seed in seeds:
        suite = generate_suite(replace(suite_spec, seed=seed))
        layers = default_layers(suite.spec, hidden=hidden)
        theta_0, experts = finetune_experts(
            layers, suite,
            epochs=finetune_epochs, learning_rate=finetune_learning_rate,
            seed=seed, accuracy_floor=accuracy_floor, pretrain_mode=pretrain_mode,
        )
        task_vectors = [
            task_vector(experts[i], theta_0, source_task=f"task{i}")
            for i in range(suite.num_tasks)
        ]
        for shots in shots_list:
            for method in methods:
                for granularity, input_mode in _cell_variants(
                    method, granularities, input_modes
                ):
                    report.cells.append(
                        _run_cell(
                            method, granularity, input_mode, shots, seed,
                            layers, suite, theta_0, experts, task_vectors,
                            learning_rate, epochs, batch_size, init_coefficient,
                            direct_learning_rate,
                        )
                    )
    return report


def _run_cell(
    method, granularity, input_mode, shots, seed,
    layers, suite, theta_0, experts, task_vectors,
    learning_rate, epochs, batch_size, init_coefficient, direct_learning_rate,
) -> CellResult:
    meter = WorkingSetMeter()
    start = time.perf_counter()
    final_loss: float | None = None
    try:
        if method in MERGE_METHODS:
            config = MergeConfig(
                method=method,
                granularity=granularity if granularity != "-" else "taskwise",
                input_mode=input_mode if input_mode != "-" else "dual",
                init_coefficient=init_coefficient,
                learning_rate=learning_rate,
                epochs=epochs,
                batch_size=batch_size,
                seed=seed,
            )
            validation = suite.validation_inputs(shots)
            coeffs, history = merge_mod.run_method(
                theta_0, task_vectors, layers, validation, config, meter
            )
            if isinstance(history, dict):
                final_loss = float(np.mean([h[-1] for h in history.values()]))
            elif history is not None:
                final_loss = float(history[-1])
            merged = merge_mod.materialize(theta_0, task_vectors, coeffs)
        elif method == "direct_train":
            merged, history = direct_train(
                layers, theta_0, suite, shots,
                epochs=epochs, learning_rate=direct_learning_rate,
                batch_size=batch_size, seed=seed,
            )
            final_loss = float(history[-1])
        else:
            merged, history = direct_distill(
                layers, theta_0, experts, suite, shots,
                epochs=epochs, learning_rate=direct_learning_rate,
                batch_size=batch_size, seed=seed,
            )
            final_loss = float(history[-1])
        per_task = per_task_accuracy(layers, merged, suite)
        return CellResult(
            method, granularity, input_mode, shots, seed,
            per_task, float(np.mean(per_task)), final_loss,
            time.perf_counter() - start, meter.peak,
        )
    except (merge_mod.DivergenceError, ValueError) as exc:
        return CellResult(
            method, granularity, input_mode, shots, seed,
            [], float("nan"), None,
            time.perf_counter() - start, meter.peak, error=str(exc),
        )


def dump_final_embeddings(
    layers: Sequence[LayerSpec],
    weights: ModelWeights,
    suite: SyntheticTaskSuite,
) -> list[tuple[int, int, list[float]]]:
    """(task, class label, final-layer embedding) per test sample."""
    rows = []
    for index, task in enumerate(suite.tasks):
        feats = nn.model_forward_with_features(layers, weights, task.test_x)
        final = feats[-1].array
        for row, label in zip(final, task.test_y):
            rows.append((index, int(label), [float(v) for v in row]))
    return rows


def save_suite_spec(spec: SuiteSpec, path: str) -> None:
    with open(path, "w") as handle:
        json.dump({"format": "promerge-suite v1", "spec": spec.to_json_dict()}, handle, indent=2)
        handle.write("\n")


def load_suite_spec(path: str) -> SuiteSpec:
    with open(path) as handle:
        payload = json.load(handle)
    if payload.get("format") != "promerge-suite v1":
        raise ValueError(f"{path} is not a suite spec file")
    return SuiteSpec.from_json_dict(payload["spec"])

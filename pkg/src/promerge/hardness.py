"""Adversarial constructions showing weight-only merging can be made to fail.

Two executable constructions, each packaged with a machine-checkable report:

- a linear-regression instance: given two experts and the output of any
  deterministic weight-only merger, build one data point per expert such that
  each expert is exact on its own data, a ground-truth regressor fits both
  points, yet the merged regressor suffers at least a chosen loss C;
- a max-margin classification instance: starting from two axis-aligned
  two-point datasets, inject a single far-out point that no re-learned
  expert moves on, yet drives the merged classifier's hinge loss above C.

The learner for the second construction is a hard-margin separator (dual
projected gradient plus an exact KKT polish), returned with unit-norm weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable

import numpy as np

from .tensor import Tensor


class DegenerateMergerError(ValueError):
    """The construction's non-degeneracy requirement is violated."""


class InfeasibleDataError(ValueError):
    """No separating hyperplane exists for the given dataset."""


@dataclass(frozen=True)
class LinearRegressor:
    """Linear predictor x -> w.x under averaged squared loss 0.5(w.x - y)^2."""

    w: Tensor

    def predict(self, x: np.ndarray) -> float:
        return float(self.w.array @ x)


@dataclass(frozen=True)
class LinearClassifier:
    """Affine separator x -> w.x + b; weights unit-norm unless degenerate."""

    w: Tensor
    b: float

    def score(self, x: np.ndarray) -> float:
        return float(self.w.array @ x) + self.b


@dataclass
class LabeledDataset:
    points: list[tuple[Tensor, float]] = field(default_factory=list)

    def __post_init__(self):
        dims = {x.shape for x, _ in self.points}
        if len(dims) > 1:
            raise ValueError(f"inconsistent point dimensions: {dims}")

    @property
    def dim(self) -> int:
        return self.points[0][0].shape[0]

    def x_matrix(self) -> np.ndarray:
        return np.stack([x.array for x, _ in self.points])

    def y_array(self) -> np.ndarray:
        return np.array([y for _, y in self.points], dtype=np.float64)

    def union(self, other: "LabeledDataset") -> "LabeledDataset":
        return LabeledDataset(list(self.points) + list(other.points))


def squared_loss(dataset: LabeledDataset, model: LinearRegressor) -> float:
    """Average of 0.5 (w.x - y)^2 over the dataset."""
    residual = dataset.x_matrix() @ model.w.array - dataset.y_array()
    return float(0.5 * np.mean(residual**2))


def hinge_loss(dataset: LabeledDataset, model: LinearClassifier) -> float:
    """Average of max(-y (w.x + b), 0) over the dataset."""
    scores = dataset.x_matrix() @ model.w.array + model.b
    return float(np.mean(np.maximum(-dataset.y_array() * scores, 0.0)))


def classification_accuracy(dataset: LabeledDataset, model: LinearClassifier) -> float:
    scores = dataset.x_matrix() @ model.w.array + model.b
    return float(np.mean(dataset.y_array() * scores > 0.0))


# -- weight-only mergers used as adversarial targets -----------------------------


def regressor_task_arithmetic(coefficient: float = 0.5) -> Callable:
    """Weighted sum of expert weights (zero base model)."""

    def merger(f1: LinearRegressor, f2: LinearRegressor) -> LinearRegressor:
        return LinearRegressor(Tensor(coefficient * f1.w.array + coefficient * f2.w.array))

    return merger


def classifier_task_arithmetic(coefficient: float = 0.5) -> Callable:
    def merger(f1: LinearClassifier, f2: LinearClassifier) -> LinearClassifier:
        return LinearClassifier(
            Tensor(coefficient * f1.w.array + coefficient * f2.w.array),
            coefficient * f1.b + coefficient * f2.b,
        )

    return merger


def classifier_keep_first() -> Callable:
    """Degenerate-looking merger that ignores the second expert entirely."""

    def merger(f1: LinearClassifier, f2: LinearClassifier) -> LinearClassifier:
        return f1

    return merger


REGRESSOR_MERGERS = {"task-arith": regressor_task_arithmetic}
CLASSIFIER_MERGERS = {
    "task-arith": classifier_task_arithmetic,
    "keep-first": lambda coefficient=0.5: classifier_keep_first(),
}


# -- regression construction -----------------------------------------------------


@dataclass
class RegressionHardInstance:
    d1: LabeledDataset
    d2: LabeledDataset
    f_star: LinearRegressor
    merged: LinearRegressor
    report: dict


def construct_theorem1_instance(
    f1: LinearRegressor,
    f2: LinearRegressor,
    merged: LinearRegressor,
    C: float,
    eps: float = 1e-10,
) -> RegressionHardInstance:
    """Single-point-per-expert datasets on which the merged regressor fails.

    The first point is orthogonal to (w1, -1) so expert 1 is exact on it,
    while its inner product with (merged w, -1) is pushed to 2 sqrt(C),
    forcing an average loss of at least C on the two-point union. The second
    point is orthogonal to (w2, -1) and not collinear with the first, so an
    exact ground-truth regressor for both points exists.
    """
    if C <= 0:
        raise ValueError("C must be positive")
    w1 = f1.w.array
    w2 = f2.w.array
    w_hat = merged.w.array
    d = w1.shape[0]
    if d < 2:
        raise ValueError("construction needs input dimension >= 2")
    delta = w_hat - w1
    if not np.any(delta != 0.0):
        raise DegenerateMergerError(
            "degenerate: construction requires the first expert to differ "
            "from the merged regressor"
        )

    # tiny overshoot keeps the >= 2 sqrt(C) clause true after rounding
    target = 2.0 * math.sqrt(C) * (1.0 + 1e-9)
    x1 = (target / float(delta @ delta)) * delta
    y1 = float(x1 @ w1)

    # a basis vector off x1's support is never collinear with x1
    k = int(np.argmin(np.abs(x1)))
    x2 = np.zeros(d)
    x2[k] = 1.0
    y2 = float(x2 @ w2)

    d1 = LabeledDataset([(Tensor(x1), y1)])
    d2 = LabeledDataset([(Tensor(x2), y2)])

    system = np.stack([x1, x2])
    rhs = np.array([y1, y2])
    w_star, _, rank, _ = np.linalg.lstsq(system, rhs, rcond=None)
    f_star = LinearRegressor(Tensor(w_star))

    union = d1.union(d2)
    inner = float(x1 @ w_hat - y1)
    report = {
        "construction": "regression",
        "C": C,
        "eps": eps,
        "dimension": d,
        "dimension_note": (
            "any d >= 2 supports the construction: the attacked direction "
            "plus one independent basis vector give two non-collinear points "
            "that a single regressor can fit exactly"
        ),
        "points": {
            "x1": x1.tolist(), "y1": y1,
            "x2": x2.tolist(), "y2": y2,
        },
        "merged_w": w_hat.tolist(),
        "f_star_w": w_star.tolist(),
        "clauses": {
            "expert1_exact": _clause(squared_loss(d1, f1), "<=", eps),
            "expert2_exact": _clause(squared_loss(d2, f2), "<=", eps),
            "orthogonality": _clause(abs(float(x1 @ w1) - y1), "<", 1e-10),
            "inner_product": _clause(inner, ">=", 2.0 * math.sqrt(C) - 1e-8),
            "not_collinear": _clause(float(rank), ">=", 2.0),
            "merged_loss": _clause(squared_loss(union, merged), ">=", C),
            "ground_truth": _clause(squared_loss(union, f_star), "<=", eps),
        },
    }
    return RegressionHardInstance(d1, d2, f_star, merged, report)


def run_theorem1(
    f1: LinearRegressor,
    f2: LinearRegressor,
    merger: Callable,
    C: float,
    eps: float = 1e-10,
) -> RegressionHardInstance:
    """Quantify over the merger first, then build the datasets from its output."""
    merged = merger(f1, f2)
    if np.array_equal(merged.w.array, f1.w.array):
        # the proof's relabeling: attack whichever expert the merger moved from
        f1, f2 = f2, f1
    return construct_theorem1_instance(f1, f2, merged, C, eps)


def _clause(value: float, op: str, threshold: float) -> dict:
    ok = {
        "<=": value <= threshold,
        "<": value < threshold,
        ">=": value >= threshold,
        ">": value > threshold,
    }[op]
    return {"value": value, "op": op, "threshold": threshold, "pass": bool(ok)}


def report_all_pass(report: dict) -> bool:
    return all(clause["pass"] for clause in report["clauses"].values())


# -- hard-margin separator --------------------------------------------------------


def _project_dual(alpha: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {a >= 0, y.a = 0} via bisection on the shift."""

    def shifted(nu: float) -> np.ndarray:
        return np.maximum(alpha - nu * y, 0.0)

    def balance(nu: float) -> float:
        return float(y @ shifted(nu))

    lo, hi = -1.0, 1.0
    while balance(lo) < 0.0:
        lo *= 2.0
        if lo < -1e12:
            break
    while balance(hi) > 0.0:
        hi *= 2.0
        if hi > 1e12:
            break
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if balance(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return shifted(0.5 * (lo + hi))


def _kkt_candidate(X, y, Q, subset) -> tuple[np.ndarray, float, np.ndarray] | None:
    """Solve the margin equalities on `subset`; None if the KKT checks fail."""
    s = np.asarray(subset)
    k = s.size
    system = np.zeros((k + 1, k + 1))
    system[:k, :k] = Q[np.ix_(s, s)]
    system[:k, k] = y[s]
    system[k, :k] = y[s]
    rhs = np.concatenate([np.ones(k), [0.0]])
    solution, _, _, _ = np.linalg.lstsq(system, rhs, rcond=None)
    alpha_s, b = solution[:k], float(solution[k])
    w = (alpha_s * y[s]) @ X[s]
    margins = y * (X @ w + b)
    scale = 1.0 + float(np.abs(alpha_s).max(initial=0.0))
    ok = (
        np.all(alpha_s >= -1e-9 * scale)
        and np.all(margins >= 1.0 - 1e-9)
        and np.all(np.abs(margins[s] - 1.0) <= 1e-8)
    )
    return (w, b, alpha_s) if ok else None


def max_margin_learn(
    dataset: LabeledDataset,
    max_iters: int = 400,
    kkt_tol: float = 1e-8,
) -> LinearClassifier:
    """Maximum-margin separator with bias, weights normalized to unit length.

    Solves the hard-margin dual by projected gradient to localize the support
    set, then polishes it with an exact KKT solve. On ill-conditioned
    instances (far-out points make the dual Hessian badly scaled) the
    gradient phase cannot reach the KKT tolerance, so a desk-scale active-set
    enumeration over deduplicated points finishes the job exactly. Raises
    InfeasibleDataError when no separating hyperplane exists.
    """
    y_all = dataset.y_array()
    if not np.all(np.isin(y_all, (-1.0, 1.0))):
        raise ValueError("labels must be +1/-1")
    if not (np.any(y_all > 0) and np.any(y_all < 0)):
        raise InfeasibleDataError("need both classes present to define a margin")

    # duplicates never change the separator; drop them so enumeration stays small
    seen: dict[tuple, int] = {}
    keep = []
    for index, (x, label) in enumerate(dataset.points):
        key = (tuple(x.array.tolist()), label)
        if key not in seen:
            seen[key] = index
            keep.append(index)
    X = dataset.x_matrix()[keep]
    y = y_all[keep]

    n, d = X.shape
    Q = (y[:, None] * y[None, :]) * (X @ X.T)
    step = 1.0 / max(float(np.linalg.eigvalsh(Q)[-1]), 1e-12)

    alpha = _project_dual(np.full(n, 0.1), y)
    for _ in range(max_iters):
        new_alpha = _project_dual(alpha + step * (1.0 - Q @ alpha), y)
        if float(np.max(np.abs(new_alpha - alpha))) < 1e-13:
            alpha = new_alpha
            break
        alpha = new_alpha

    support = np.flatnonzero(alpha > 1e-6 * max(float(np.max(alpha)), 1e-12))
    candidate = _kkt_candidate(X, y, Q, support) if support.size else None

    if candidate is None:
        best = None
        for size in range(2, min(n, d + 2) + 1):
            for subset in combinations(range(n), size):
                solved = _kkt_candidate(X, y, Q, subset)
                if solved is None:
                    continue
                objective = float(solved[0] @ solved[0])
                if best is None or objective < best[0]:
                    best = (objective, solved)
        if best is None:
            raise InfeasibleDataError("dataset is not separable: no KKT point exists")
        candidate = best[1]

    w_raw, b_raw, _ = candidate
    margins = y * (X @ w_raw + b_raw)
    if not np.all(margins >= 1.0 - kkt_tol):
        raise InfeasibleDataError("dataset is not separable at solver tolerance")
    norm = float(np.linalg.norm(w_raw))
    if norm <= 0.0:
        raise InfeasibleDataError("degenerate zero-weight separator")
    return LinearClassifier(Tensor(w_raw / norm), b_raw / norm)


# -- classification construction ---------------------------------------------------


def axis_base_datasets() -> tuple[LabeledDataset, LabeledDataset]:
    """Two axis-aligned two-point tasks whose separators are the coordinate axes."""
    d1 = LabeledDataset([
        (Tensor([1.0, 0.0]), 1.0),
        (Tensor([-1.0, 0.0]), -1.0),
    ])
    d2 = LabeledDataset([
        (Tensor([0.0, 1.0]), 1.0),
        (Tensor([0.0, -1.0]), -1.0),
    ])
    return d1, d2


@dataclass
class ClassificationHardInstance:
    d1: LabeledDataset
    d2: LabeledDataset
    adversarial_point: tuple[Tensor, float]
    merged: LinearClassifier
    f_star: LinearClassifier
    report: dict


def _adversarial_point(merged: LinearClassifier, C: float) -> tuple[float, float, str]:
    """A point (p, q) with merged score below -5C and p > 1 or q > 1."""
    w1, w2 = float(merged.w.array[0]), float(merged.w.array[1])
    b = merged.b
    target = -5.0 * C - 1.0  # slack keeps the strict inequality safe
    tol = 1e-12
    if abs(w2) > tol:
        p = 2.0
        q = (target - b - w1 * p) / w2
        return p, q, "first"
    if abs(w1) > tol:
        q = 2.0
        p = (target - b - w2 * q) / w1
        return p, q, "second"
    raise DegenerateMergerError(
        f"merged classifier has zero weights (w={merged.w.tolist()}, b={b}); "
        "the construction requires a non-degenerate merger"
    )


def construct_theorem2_instance(
    merger: Callable,
    C: float,
    copies: int = 1,
    learner: Callable = max_margin_learn,
) -> ClassificationHardInstance:
    """Augment the axis-aligned tasks so the merged separator fails badly.

    The injected positive point sits strictly outside the attacked task's
    margin (so re-learning returns the same expert) yet scores below -5C
    under the merged classifier, pushing its average hinge loss on the union
    above C. With `copies` > 1 the point is repeated to also drive the merged
    model's 0/1 accuracy down.
    """
    if C <= 0:
        raise ValueError("C must be positive")
    if copies < 1:
        raise ValueError("copies must be at least 1")
    base1, base2 = axis_base_datasets()
    f1 = learner(base1)
    f2 = learner(base2)
    merged = merger(f1, f2)

    p, q, branch = _adversarial_point(merged, C)
    z5 = (Tensor([p, q]), 1.0)
    extra = [z5] * copies
    if branch == "first":
        d1 = LabeledDataset(list(base1.points) + extra)
        d2 = base2
    else:
        d1 = base1
        d2 = LabeledDataset(list(base2.points) + extra)

    f1_relearned = learner(d1)
    f2_relearned = learner(d2)
    union = d1.union(d2)
    f_star = learner(union)

    merged_score = merged.score(z5[0].array)

    def _points(dataset: LabeledDataset) -> list:
        return [{"x": x.tolist(), "y": y} for x, y in dataset.points]

    report = {
        "construction": "classification",
        "C": C,
        "copies": copies,
        "branch": branch,
        "adversarial_point": {"x": [p, q], "y": 1.0},
        "datasets": {"d1": _points(d1), "d2": _points(d2)},
        "experts": {
            "f1": {"w": f1.w.tolist(), "b": f1.b},
            "f2": {"w": f2.w.tolist(), "b": f2.b},
        },
        "merged": {"w": merged.w.tolist(), "b": merged.b},
        "f_star": {"w": f_star.w.tolist(), "b": f_star.b},
        "merged_accuracy": classification_accuracy(union, merged),
        "clauses": {
            "merged_score_low": _clause(merged_score, "<", -5.0 * C),
            "outside_margin": _clause(max(p, q), ">", 1.0),
            "expert1_unchanged": _clause(_classifier_distance(f1, f1_relearned), "<=", 1e-6),
            "expert2_unchanged": _clause(_classifier_distance(f2, f2_relearned), "<=", 1e-6),
            "expert1_exact": _clause(hinge_loss(d1, f1_relearned), "<=", 1e-12),
            "expert2_exact": _clause(hinge_loss(d2, f2_relearned), "<=", 1e-12),
            "merged_loss": _clause(hinge_loss(union, merged), ">", C),
            "union_separable": _clause(hinge_loss(union, f_star), "<=", 1e-9),
        },
    }
    return ClassificationHardInstance(d1, d2, z5, merged, f_star, report)


def _classifier_distance(a: LinearClassifier, b: LinearClassifier) -> float:
    return float(np.max(np.abs(a.w.array - b.w.array))) + abs(a.b - b.b)

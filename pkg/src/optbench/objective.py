"""Differentiable objectives, synthetic datasets, and minibatch partitioning.

Parameters are flat 1-D float64 arrays. All randomness goes through
``numpy.random.default_rng`` with explicit seeds, so identical seeds give
bit-identical datasets, batch plans, and initial parameters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MODEL_KINDS = ("quadratic", "rosenbrock", "logistic-regression", "mlp")
DATASET_KINDS = ("gaussians", "spirals")


class DivergenceError(RuntimeError):
    """An evaluation produced a non-finite loss, gradient, or parameter."""


# ---------------------------------------------------------------------------
# model specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """What to train: a test function or a small classifier.

    ``layers`` is the (input, hidden..., output) width tuple for the two
    classifier kinds; logistic regression is the no-hidden-layer case.
    ``dim`` is the total flat parameter count and must be consistent with
    the kind.
    """

    kind: str
    layers: tuple[int, ...] = ()
    dim: int = 0
    classes: int = 0

    def __post_init__(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind in ("logistic-regression", "mlp"):
            if len(self.layers) < 2:
                raise ValueError(f"{self.kind} needs at least (input, output) layer sizes")
            if self.kind == "logistic-regression" and len(self.layers) != 2:
                raise ValueError("logistic-regression has no hidden layers")
            expected = _packed_dim(self.layers)
            if self.dim != expected:
                raise ValueError(f"dim {self.dim} inconsistent with layers {self.layers} (expected {expected})")
            if self.classes != self.layers[-1]:
                raise ValueError("class count must equal the output width")
        elif self.kind == "rosenbrock" and self.dim != 2:
            raise ValueError("rosenbrock is two-dimensional")
        elif self.kind == "quadratic" and self.dim < 1:
            raise ValueError("quadratic needs dim >= 1")

    @property
    def is_classifier(self) -> bool:
        return self.kind in ("logistic-regression", "mlp")


def _packed_dim(layers: Sequence[int]) -> int:
    return sum((layers[i] + 1) * layers[i + 1] for i in range(len(layers) - 1))


def quadratic_model(dim: int) -> ModelSpec:
    return ModelSpec(kind="quadratic", dim=dim)


def rosenbrock_model() -> ModelSpec:
    return ModelSpec(kind="rosenbrock", dim=2)


def logistic_regression_model(features: int, classes: int) -> ModelSpec:
    layers = (features, classes)
    return ModelSpec(kind="logistic-regression", layers=layers, dim=_packed_dim(layers), classes=classes)


def mlp_model(layers: Sequence[int]) -> ModelSpec:
    layers = tuple(int(w) for w in layers)
    return ModelSpec(kind="mlp", layers=layers, dim=_packed_dim(layers), classes=layers[-1])


def model_from_config(kind: str, layers: Sequence[int] = (), dim: int = 0) -> ModelSpec:
    """Build a ModelSpec from experiment-file fields."""
    if kind == "quadratic":
        return quadratic_model(dim or 2)
    if kind == "rosenbrock":
        return rosenbrock_model()
    if kind == "logistic-regression":
        if len(layers) != 2:
            raise ValueError("logistic-regression config needs layers = [features, classes]")
        return logistic_regression_model(layers[0], layers[1])
    if kind == "mlp":
        return mlp_model(layers)
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus labels, with disjoint train/test index splits."""

    features: np.ndarray
    labels: np.ndarray
    classes: int
    train_indices: np.ndarray
    test_indices: np.ndarray

    def __post_init__(self) -> None:
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise ValueError("feature rows and labels are misaligned")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError("labels must lie in [0, classes)")
        both = np.intersect1d(self.train_indices, self.test_indices)
        if both.size:
            raise ValueError("train and test splits overlap")
        all_idx = np.concatenate([self.train_indices, self.test_indices])
        if all_idx.size and (all_idx.min() < 0 or all_idx.max() >= n):
            raise ValueError("split indices out of range")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def train_count(self) -> int:
        return int(self.train_indices.size)

    @property
    def test_count(self) -> int:
        return int(self.test_indices.size)


def generate_synthetic_dataset(
    kind: str,
    n: int,
    classes: int,
    seed: int,
    test_count: int = 0,
) -> Dataset:
    """Deterministic 2-D classification data with balanced classes.

    ``n`` is the training-set size; ``test_count`` extra rows form the test
    split. Both must be divisible by ``classes``. Features are standardized
    to zero mean and unit variance per coordinate over all rows.
    """
    if kind not in DATASET_KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if n < 1 or classes < 1:
        raise ValueError("need n >= 1 and classes >= 1")
    if n % classes != 0:
        raise ValueError(f"n={n} not divisible by classes={classes}")
    if test_count % classes != 0:
        raise ValueError(f"test_count={test_count} not divisible by classes={classes}")

    rng = np.random.default_rng(seed)
    per_class = (n + test_count) // classes
    feats = []
    labels = []
    for c in range(classes):
        if kind == "gaussians":
            angle = 2.0 * np.pi * c / classes
            center = 3.0 * np.array([np.cos(angle), np.sin(angle)])
            pts = center + rng.normal(scale=0.8, size=(per_class, 2))
        else:  # spirals
            t = np.linspace(0.2, 1.0, per_class) + rng.normal(scale=0.02, size=per_class)
            angle = 2.0 * np.pi * c / classes + 1.25 * 2.0 * np.pi * t
            radius = 3.0 * t
            pts = np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])
            pts += rng.normal(scale=0.2, size=pts.shape)
        # shuffle within the class so the train/test split is not ordered
        # by generation position (spiral samples are radius-ordered)
        pts = pts[rng.permutation(per_class)]
        feats.append(pts)
        labels.append(np.full(per_class, c, dtype=np.int64))

    n_train_per = n // classes
    train_parts = [f[:n_train_per] for f in feats]
    test_parts = [f[n_train_per:] for f in feats]
    features = np.vstack(train_parts + test_parts).astype(np.float64)
    labels_arr = np.concatenate(
        [lab[:n_train_per] for lab in labels] + [lab[n_train_per:] for lab in labels]
    )
    features -= features.mean(axis=0)
    std = features.std(axis=0)
    std[std == 0.0] = 1.0
    features /= std
    return Dataset(
        features=features,
        labels=labels_arr,
        classes=classes,
        train_indices=np.arange(n, dtype=np.int64),
        test_indices=np.arange(n, n + test_count, dtype=np.int64),
    )


def save_dataset_csv(data: Dataset, train_path: str | Path, test_path: str | Path | None = None) -> None:
    """Write the splits as CSV files with header f0..f{d-1},label."""
    _write_split_csv(train_path, data.features[data.train_indices], data.labels[data.train_indices])
    if test_path is not None:
        _write_split_csv(test_path, data.features[data.test_indices], data.labels[data.test_indices])


def _write_split_csv(path: str | Path, features: np.ndarray, labels: np.ndarray) -> None:
    d = features.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(d)] + ["label"])
        for row, lab in zip(features, labels):
            writer.writerow([format(v, ".17g") for v in row] + [int(lab)])


def load_dataset_csv(train_path: str | Path, test_path: str | Path | None = None, classes: int | None = None) -> Dataset:
    """Reconstruct a Dataset from CSVs written by :func:`save_dataset_csv`."""
    feats_tr, labs_tr = _read_split_csv(train_path)
    if test_path is not None:
        feats_te, labs_te = _read_split_csv(test_path)
    else:
        feats_te = np.empty((0, feats_tr.shape[1]))
        labs_te = np.empty(0, dtype=np.int64)
    features = np.vstack([feats_tr, feats_te])
    labels = np.concatenate([labs_tr, labs_te])
    n_train = feats_tr.shape[0]
    if classes is None:
        classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(
        features=features,
        labels=labels,
        classes=classes,
        train_indices=np.arange(n_train, dtype=np.int64),
        test_indices=np.arange(n_train, features.shape[0], dtype=np.int64),
    )


def _read_split_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise ValueError(f"{path}: expected header f0..f{{d-1}},label")
        d = len(header) - 1
        feats, labs = [], []
        for row in reader:
            feats.append([float(v) for v in row[:d]])
            labs.append(int(row[d]))
    features = np.asarray(feats, dtype=np.float64).reshape(len(labs), d)
    return features, np.asarray(labs, dtype=np.int64)


# ---------------------------------------------------------------------------
# batch plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchPlan:
    """A shuffled partition of {0..n-1} into equal blocks of size k."""

    batches: tuple[np.ndarray, ...]
    batch_size: int


def make_batch_plan(n: int, k: int, seed: int) -> BatchPlan:
    """Shuffle {0..n-1} and split into n/k contiguous blocks of size k.

    Rejects k that does not divide n: a truncated batch marks an illegal
    experiment configuration, not a recoverable condition.
    """
    if n < 1 or k < 1:
        raise ValueError("need n >= 1 and k >= 1")
    if n % k != 0:
        raise ValueError(f"batch size {k} does not divide training-set size {n}")
    perm = np.random.default_rng(seed).permutation(n)
    blocks = tuple(perm[i * k : (i + 1) * k] for i in range(n // k))
    return BatchPlan(batches=blocks, batch_size=k)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def init_params(model: ModelSpec, seed: int) -> np.ndarray:
    """Starting parameters: fixed classic points for the test functions,
    1/sqrt(fan-in) Gaussian weights with zero biases for the classifiers."""
    if model.kind == "quadratic":
        return np.ones(model.dim)
    if model.kind == "rosenbrock":
        return np.array([-1.2, 1.0])
    rng = np.random.default_rng(seed)
    parts = []
    for i in range(len(model.layers) - 1):
        fan_in, fan_out = model.layers[i], model.layers[i + 1]
        w = rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        parts.append(w.ravel())
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def _unpack(model: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of (W, b) per layer, no copies."""
    out = []
    pos = 0
    for i in range(len(model.layers) - 1):
        fan_in, fan_out = model.layers[i], model.layers[i + 1]
        w = params[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = params[pos : pos + fan_out]
        pos += fan_out
        out.append((w, b))
    return out


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Evaluation:
    loss: float
    gradient: np.ndarray
    accuracy: float


def _check_finite(loss: float, gradient: np.ndarray, context: str) -> None:
    if not np.isfinite(loss) or not np.isfinite(gradient).all():
        raise DivergenceError(f"non-finite evaluation in {context}")


def _forward(model: ModelSpec, params: np.ndarray, x: np.ndarray):
    """Hidden activations are tanh; the last layer is linear (softmax later)."""
    layers = _unpack(model, params)
    hs = [x]
    for w, b in layers[:-1]:
        hs.append(np.tanh(hs[-1] @ w + b))
    w, b = layers[-1]
    logits = hs[-1] @ w + b
    return hs, logits


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _test_function_loss_grad(model: ModelSpec, params: np.ndarray) -> tuple[float, np.ndarray]:
    if model.kind == "quadratic":
        return 0.5 * float(params @ params), params.copy()
    a, b = params
    loss = float((1.0 - a) ** 2 + 100.0 * (b - a * a) ** 2)
    grad = np.array([-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)])
    return loss, grad


def _evaluate_raw(model: ModelSpec, params: np.ndarray, data: Dataset | None, indices: np.ndarray | None) -> Evaluation:
    if params.shape != (model.dim,):
        raise ValueError(f"params dimension {params.shape} does not match model dim {model.dim}")

    if not model.is_classifier:
        loss, grad = _test_function_loss_grad(model, params)
        return Evaluation(loss=loss, gradient=grad, accuracy=1.0 / (1.0 + loss))

    if data is None or indices is None:
        raise ValueError(f"{model.kind} evaluation needs a dataset and an index block")
    x = data.features[indices]
    y = data.labels[indices]
    hs, logits = _forward(model, params, x)
    probs = _softmax(logits)
    m = len(indices)
    with np.errstate(divide="ignore"):
        loss = float(-np.log(probs[np.arange(m), y]).mean())

    # backprop through softmax cross-entropy, then the tanh stack
    delta = probs.copy()
    delta[np.arange(m), y] -= 1.0
    delta /= m
    layers = _unpack(model, params)
    grads: list[np.ndarray] = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads.append(delta.sum(axis=0))          # bias
        grads.append((hs[i].T @ delta).ravel())  # weights
        if i > 0:
            delta = (delta @ w.T) * (1.0 - hs[i] ** 2)
    grad = np.concatenate(grads[::-1])
    accuracy = float((logits.argmax(axis=1) == y).mean())
    return Evaluation(loss=loss, gradient=grad, accuracy=accuracy)


def evaluate(model: ModelSpec, params: np.ndarray, data: Dataset | None, indices: np.ndarray | None) -> Evaluation:
    """Loss, exact analytic gradient, and accuracy over one index block.

    Classifiers use mean softmax cross-entropy over the block; the test
    functions ignore the data and report accuracy = 1/(1+loss) so every
    model kind records a value in [0, 1]. Non-finite results raise
    :class:`DivergenceError` rather than propagating silently.
    """
    ev = _evaluate_raw(model, params, data, indices)
    _check_finite(ev.loss, ev.gradient, model.kind)
    return ev


def measure_accuracy(model: ModelSpec, params: np.ndarray, data: Dataset | None, indices: np.ndarray | None) -> float:
    """Accuracy only, no gradient: the per-epoch test-set measurement."""
    if not np.isfinite(params).all():
        raise DivergenceError("non-finite parameters")
    if not model.is_classifier:
        return 1.0 / (1.0 + _test_function_loss_grad(model, params)[0])
    if data is None or indices is None:
        raise ValueError(f"{model.kind} accuracy needs a dataset and an index block")
    _, logits = _forward(model, params, data.features[indices])
    return float((logits.argmax(axis=1) == data.labels[indices]).mean())


class BatchObjective:
    """Value/gradient oracle for a model pinned to one fixed batch.

    This is the per-batch objective the optimizers step against. ``value``
    skips the gradient work, which matters inside line searches. Neither
    method raises on non-finite results: line searches must be free to
    probe and reject bad trial points, so divergence at the accepted
    iterate is flagged by the optimizer, not here.
    """

    def __init__(self, model: ModelSpec, data: Dataset | None, indices: np.ndarray | None):
        self.model = model
        self.data = data
        self.indices = indices

    def value(self, params: np.ndarray) -> float:
        if not self.model.is_classifier:
            return _test_function_loss_grad(self.model, params)[0]
        x = self.data.features[self.indices]
        y = self.data.labels[self.indices]
        _, logits = _forward(self.model, params, x)
        probs = _softmax(logits)
        with np.errstate(divide="ignore"):
            return float(-np.log(probs[np.arange(len(y)), y]).mean())

    def value_and_grad(self, params: np.ndarray) -> tuple[float, np.ndarray]:
        ev = _evaluate_raw(self.model, params, self.data, self.indices)
        return ev.loss, ev.gradient

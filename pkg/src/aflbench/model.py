"""Flat-parameter models, local SGD and synthetic non-IID data.

Three task kinds share one calling convention: a flat float64 parameter
vector in, ``(loss, grad)`` out.

* ``softmax_linear``: multinomial logistic regression, ``W`` (feature_dim x
  num_classes) followed by a bias.
* ``mlp_one_hidden``: ``tanh`` hidden layer, then a linear softmax head.
* ``quadratic``: ``0.5 * mean_rows ||w - x_row||^2``; each agent's rows are
  its optimum, so the per-agent objective is exactly controllable.

All tasks add ``0.5 * l2_coefficient * ||params||^2``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Dataset",
    "TaskSpec",
    "BatchSampler",
    "init_params",
    "loss_and_gradient",
    "predict",
    "accuracy",
    "local_train",
    "generate_synthetic_classification",
    "partition_noniid",
    "save_dataset_csv",
    "load_dataset_csv",
]

TASK_KINDS = ("softmax_linear", "mlp_one_hidden", "quadratic")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    # row ids in the dataset this one was carved from (audit trail only)
    index: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        if self.index is not None:
            idx = np.asarray(self.index, dtype=np.int64).reshape(-1)
            if idx.shape[0] != y.shape[0]:
                raise ValueError("index length must match row count")
            object.__setattr__(self, "index", idx)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        index = self.index[rows] if self.index is not None else rows
        return Dataset(self.features[rows], self.labels[rows], index=index)


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "softmax_linear"
    feature_dim: int = 20
    num_classes: int = 10
    hidden_dim: int = 0
    l2_coefficient: float = 0.0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.kind != "quadratic" and self.num_classes < 2:
            raise ValueError("classification tasks need num_classes >= 2")
        if self.kind == "mlp_one_hidden" and self.hidden_dim < 1:
            raise ValueError("mlp_one_hidden needs hidden_dim >= 1")
        if self.l2_coefficient < 0:
            raise ValueError("l2_coefficient must be >= 0")

    @property
    def param_dim(self) -> int:
        f, c, h = self.feature_dim, self.num_classes, self.hidden_dim
        if self.kind == "softmax_linear":
            return (f + 1) * c
        if self.kind == "mlp_one_hidden":
            return (f + 1) * h + (h + 1) * c
        return f

    @property
    def is_classifier(self) -> bool:
        return self.kind != "quadratic"


def init_params(task: TaskSpec, rng_seed: Union[int, np.random.Generator] = 0, scale: float = 0.0) -> np.ndarray:
    """Starting parameters.  Zero for linear/quadratic tasks unless ``scale``
    is given; the MLP always gets a small random first layer so its hidden
    units are not symmetric."""
    rng = np.random.default_rng(rng_seed)
    w = rng.normal(0.0, scale, task.param_dim) if scale > 0 else np.zeros(task.param_dim)
    if task.kind == "mlp_one_hidden" and scale == 0:
        n1 = (task.feature_dim + 1) * task.hidden_dim
        w[:n1] = rng.normal(0.0, 1.0 / np.sqrt(task.feature_dim), n1)
    return w


def _unpack_mlp(task: TaskSpec, params: np.ndarray):
    f, h, c = task.feature_dim, task.hidden_dim, task.num_classes
    o = 0
    W1 = params[o:o + f * h].reshape(f, h); o += f * h
    b1 = params[o:o + h]; o += h
    W2 = params[o:o + h * c].reshape(h, c); o += h * c
    b2 = params[o:o + c]
    return W1, b1, W2, b2


def _logits(task: TaskSpec, params: np.ndarray, X: np.ndarray):
    if task.kind == "softmax_linear":
        f, c = task.feature_dim, task.num_classes
        W = params[: f * c].reshape(f, c)
        return X @ W + params[f * c:], None
    W1, b1, W2, b2 = _unpack_mlp(task, params)
    H = np.tanh(X @ W1 + b1)
    return H @ W2 + b2, H


def _softmax_xent(logits: np.ndarray, y: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    m = y.shape[0]
    loss = -logp[np.arange(m), y].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(m), y] -= 1.0
    return loss, dlogits / m


def _check(task: TaskSpec, params: np.ndarray, batch: Dataset) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64).reshape(-1)
    if params.shape[0] != task.param_dim:
        raise ValueError(f"params have dimension {params.shape[0]}, task expects {task.param_dim}")
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.feature_dim != task.feature_dim:
        raise ValueError(f"batch has {batch.feature_dim} features, task expects {task.feature_dim}")
    return params


def loss_and_gradient(task: TaskSpec, params: np.ndarray, batch: Dataset) -> tuple[float, np.ndarray]:
    """Mean loss over ``batch`` and its exact gradient."""
    params = _check(task, params, batch)
    X, y = batch.features, batch.labels
    if task.kind == "quadratic":
        diff = params[None, :] - X
        loss = 0.5 * float(np.mean(np.sum(diff * diff, axis=1)))
        grad = diff.mean(axis=0)
    elif task.kind == "softmax_linear":
        logits, _ = _logits(task, params, X)
        loss, d = _softmax_xent(logits, y)
        grad = np.concatenate([(X.T @ d).ravel(), d.sum(axis=0)])
    else:
        W1, b1, W2, b2 = _unpack_mlp(task, params)
        logits, H = _logits(task, params, X)
        loss, d = _softmax_xent(logits, y)
        dW2 = H.T @ d
        db2 = d.sum(axis=0)
        dpre = (d @ W2.T) * (1.0 - H * H)
        dW1 = X.T @ dpre
        db1 = dpre.sum(axis=0)
        grad = np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])
    if task.l2_coefficient:
        loss += 0.5 * task.l2_coefficient * float(params @ params)
        grad = grad + task.l2_coefficient * params
    return float(loss), grad


def predict(task: TaskSpec, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    if not task.is_classifier:
        raise ValueError("quadratic task has no class predictions")
    logits, _ = _logits(task, np.asarray(params, dtype=np.float64), np.asarray(X, dtype=np.float64))
    return np.argmax(logits, axis=1)


def accuracy(task: TaskSpec, params: np.ndarray, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("cannot score an empty dataset")
    return float(np.mean(predict(task, params, data.features) == data.labels))


class BatchSampler:
    """Minibatches without replacement within an epoch, reshuffled per epoch.

    One sampler per client; its state carries across local-training calls so
    the client walks through its shard epoch by epoch.
    """

    def __init__(self, num_examples: int, batch_size: Optional[int], rng_seed: Union[int, np.random.Generator] = 0):
        if num_examples < 1:
            raise ValueError("sampler needs at least one example")
        self.num_examples = int(num_examples)
        self.batch_size = None if batch_size is None or batch_size >= num_examples else int(batch_size)
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.rng = np.random.default_rng(rng_seed)
        self._perm = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next_batch(self) -> Optional[np.ndarray]:
        """Row indices of the next batch, or ``None`` for full batch."""
        if self.batch_size is None:
            return None
        if self._pos + self.batch_size > self._perm.shape[0]:
            self._perm = self.rng.permutation(self.num_examples)
            self._pos = 0
        rows = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return rows


def local_train(
    task: TaskSpec,
    start: np.ndarray,
    data: Dataset,
    Q: int,
    eta_l: Union[float, Sequence[float]],
    batch_size: Optional[int] = None,
    rng_seed: Union[int, np.random.Generator, BatchSampler] = 0,
) -> np.ndarray:
    """Run ``Q`` SGD steps from ``start`` and return ``y_Q - y_0``.

    ``eta_l`` may be a scalar or one rate per step.  ``rng_seed`` may also be
    a live :class:`BatchSampler`, in which case its stream is advanced and
    ``batch_size`` is ignored.
    """
    if Q < 1:
        raise ValueError(f"Q must be >= 1, got {Q}")
    lrs = np.broadcast_to(np.asarray(eta_l, dtype=np.float64), (Q,))
    if np.any(lrs <= 0):
        raise ValueError("local learning rates must be > 0")
    sampler = rng_seed if isinstance(rng_seed, BatchSampler) else BatchSampler(len(data), batch_size, rng_seed)
    y0 = np.array(start, dtype=np.float64).reshape(-1)
    y = y0.copy()
    for q in range(Q):
        rows = sampler.next_batch()
        batch = data if rows is None else data.subset(rows)
        _, g = loss_and_gradient(task, y, batch)
        y = y - lrs[q] * g
    return y - y0


def generate_synthetic_classification(
    num_classes: int,
    feature_dim: int,
    examples_per_class: int,
    class_separation: float,
    rng_seed: int = 0,
) -> Dataset:
    """Unit-covariance Gaussian blobs with class means on a sphere of radius
    ``class_separation``.  Rows are grouped by class."""
    if num_classes < 1 or feature_dim < 1 or examples_per_class < 1:
        raise ValueError("num_classes, feature_dim and examples_per_class must all be >= 1")
    if class_separation <= 0:
        raise ValueError("class_separation must be > 0")
    rng = np.random.default_rng(rng_seed)
    means = rng.normal(size=(num_classes, feature_dim))
    means *= class_separation / np.linalg.norm(means, axis=1, keepdims=True)
    X = np.repeat(means, examples_per_class, axis=0) + rng.normal(size=(num_classes * examples_per_class, feature_dim))
    y = np.repeat(np.arange(num_classes), examples_per_class)
    return Dataset(X, y)


def partition_noniid(
    data: Dataset,
    fast_count: int,
    slow_count: int,
    fast_labels: Iterable[int],
    slow_labels: Iterable[int],
    holdout_fraction: float = 0.2,
    rng_seed: int = 0,
) -> tuple[list[Dataset], Dataset]:
    """Stratified holdout over all labels, then label-disjoint client shards.

    Returns ``fast_count + slow_count`` shards (fast agents first) and the
    holdout.  Within a group, examples are shuffled and dealt out as evenly
    as possible; every source row lands in exactly one output.
    """
    fast = {int(v) for v in fast_labels}
    slow = {int(v) for v in slow_labels}
    if fast & slow:
        raise ValueError(f"labels {sorted(fast & slow)} are assigned to both groups")
    if not 0 < holdout_fraction < 1:
        raise ValueError("holdout_fraction must lie in (0, 1)")
    if fast_count < 0 or slow_count < 0 or fast_count + slow_count < 1:
        raise ValueError("need a non-negative agent count per group and at least one agent")
    if fast and fast_count == 0:
        raise ValueError("fast label set is non-empty but there are no fast agents")
    if slow and slow_count == 0:
        raise ValueError("slow label set is non-empty but there are no slow agents")
    present = set(np.unique(data.labels).tolist())
    stray = present - fast - slow
    if stray:
        raise ValueError(f"labels {sorted(stray)} belong to neither group")

    rng = np.random.default_rng(rng_seed)
    holdout_rows, pools = [], {"fast": [], "slow": []}
    for label in sorted(present):
        rows = rng.permutation(np.flatnonzero(data.labels == label))
        k = int(round(holdout_fraction * rows.shape[0]))
        holdout_rows.append(rows[:k])
        pools["fast" if label in fast else "slow"].append(rows[k:])

    shards = []
    for group, count in (("fast", fast_count), ("slow", slow_count)):
        pool = np.concatenate(pools[group]) if pools[group] else np.empty(0, dtype=np.int64)
        pool = rng.permutation(pool)
        for part in np.array_split(pool, count) if count else []:
            shards.append(data.subset(np.sort(part)))
    holdout = data.subset(np.sort(np.concatenate(holdout_rows)))
    return shards, holdout


def save_dataset_csv(path, data: Dataset) -> None:
    """Write ``f0..f{d-1},label`` rows; floats keep full precision."""
    header = [f"f{j}" for j in range(data.feature_dim)] + ["label"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for x, y in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def load_dataset_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label" or header[:-1] != [f"f{j}" for j in range(len(header) - 1)]:
            raise ValueError(f"{path}: expected header f0..f{{d-1}},label, got {header}")
        rows = [r for r in reader if r]
    if not rows:
        return Dataset(np.empty((0, len(header) - 1)), np.empty(0, dtype=np.int64))
    X = np.array([[float(v) for v in r[:-1]] for r in rows])
    y = np.array([int(r[-1]) for r in rows])
    return Dataset(X, y)

"""Convergence-bound calculator and post-run metrics.

The bound is the ergodic rate for staleness-weighted buffered aggregation in
the smooth non-convex setting::

    avg ||grad f||^2 <= 2 (f(w0) - f*) / (eta_g alpha(Q) T)
                      + 12 eta_g^2 tau^2 beta(Q) Q L^2 ((b tau + 1)/(tau + 1))^2 (s_l + s_g + G)
                      + 12 beta(Q) Q L^2 (s_l + s_g + G)
                      + 4 b^2 U(tau) G

with ``alpha(Q)``/``beta(Q)`` the sum / sum of squares of the local rates and
``U`` the worst squared gap between ``1/b`` and a normalized fair weight.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .engine import MetricsLog, SimConfig, SimData, initial_parameters
from .mechanism import alpha_norm_bounds
from .model import Dataset, TaskSpec, accuracy, loss_and_gradient

__all__ = [
    "BoundInputs",
    "BoundTerms",
    "alpha_beta",
    "u_max",
    "convergence_bound",
    "empirical_grad_norm_average",
    "quadratic_minimizer",
    "measure_bound_inputs",
    "FairnessReport",
    "fairness_metrics",
    "staleness_relation_holds",
    "run_report",
]


class StepSizeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BoundInputs:
    f0_minus_fstar: float
    L: float
    sigma_l2: float
    sigma_g2: float
    G: float
    local_lrs: tuple
    eta_g: float
    b: int
    tau_max_b: float
    T: int

    def __post_init__(self):
        lrs = tuple(float(v) for v in np.atleast_1d(self.local_lrs))
        object.__setattr__(self, "local_lrs", lrs)
        checks = {
            "f0_minus_fstar": self.f0_minus_fstar >= 0,
            "L": self.L > 0,
            "sigma_l2": self.sigma_l2 >= 0,
            "sigma_g2": self.sigma_g2 >= 0,
            "G": self.G >= 0,
            "local_lrs": len(lrs) >= 1 and all(v > 0 for v in lrs),
            "eta_g": self.eta_g > 0,
            "b": self.b >= 1,
            "tau_max_b": self.tau_max_b >= 0,
            "T": self.T >= 1,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid bound inputs: {bad}")
        if not self.step_size_ok:
            warnings.warn(
                f"step-size condition eta_g * eta_l * Q <= 1/L violated "
                f"(eta_g={self.eta_g}, max eta_l={max(lrs)}, Q={self.Q}, L={self.L})",
                StepSizeWarning,
                stacklevel=3,
            )

    @property
    def Q(self) -> int:
        return len(self.local_lrs)

    @property
    def step_size_ok(self) -> bool:
        return all(self.eta_g * lr * self.Q <= 1.0 / self.L * (1 + 1e-12) for lr in self.local_lrs)

    def replace(self, **changes) -> "BoundInputs":
        kw = asdict(self)
        kw.update(changes)
        return BoundInputs(**kw)


@dataclass(frozen=True)
class BoundTerms:
    term1: float
    term2: float
    term3: float
    term4: float

    @property
    def total(self) -> float:
        return self.term1 + self.term2 + self.term3 + self.term4

    def to_dict(self) -> dict:
        return {**asdict(self), "total": self.total}


def alpha_beta(local_lrs: Sequence[float]) -> tuple[float, float]:
    lrs = np.asarray(local_lrs, dtype=np.float64).reshape(-1)
    if lrs.size == 0:
        raise ValueError("need at least one local learning rate")
    if np.any(lrs <= 0):
        raise ValueError("local learning rates must be positive")
    return float(lrs.sum()), float(np.sum(lrs * lrs))


def u_max(b: int, tau_max_b: float) -> float:
    lower, upper = alpha_norm_bounds(b, tau_max_b)
    return max((1.0 / b - upper) ** 2, (1.0 / b - lower) ** 2)


def convergence_bound(inputs: BoundInputs) -> BoundTerms:
    p = inputs
    aQ, bQ = alpha_beta(p.local_lrs)
    Q, tau, b, L = p.Q, p.tau_max_b, p.b, p.L
    noise = p.sigma_l2 + p.sigma_g2 + p.G
    stale_factor = ((b * tau + 1.0) / (tau + 1.0)) ** 2
    return BoundTerms(
        term1=2.0 * p.f0_minus_fstar / (p.eta_g * aQ * p.T),
        term2=12.0 * p.eta_g ** 2 * tau ** 2 * bQ * Q * L ** 2 * stale_factor * noise,
        term3=12.0 * bQ * Q * L ** 2 * noise,
        term4=4.0 * b ** 2 * u_max(b, tau) * p.G,
    )


def empirical_grad_norm_average(norms_sq: Union[MetricsLog, Sequence[float]], T: Optional[int] = None) -> float:
    """Average of recorded ``||grad f(w^t)||^2`` over ``t = 0..T``.

    Divides by the number of summed terms (``T + 1``).  ``T`` defaults to the
    last recorded version.
    """
    values = norms_sq.grad_norms_sq if isinstance(norms_sq, MetricsLog) else norms_sq
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no gradient norms recorded")
    if T is not None:
        if not 0 <= T < values.size:
            raise ValueError(f"T={T} outside recorded range 0..{values.size - 1}")
        values = values[: T + 1]
    return float(values.mean())


def quadratic_minimizer(task: TaskSpec, shards: Sequence[Dataset]) -> np.ndarray:
    """Minimizer of the uniform average of per-client quadratic objectives."""
    if task.kind != "quadratic":
        raise ValueError("closed-form minimizer only exists for the quadratic task")
    centre = np.mean([s.features.mean(axis=0) for s in shards], axis=0)
    return centre / (1.0 + task.l2_coefficient)


def measure_bound_inputs(
    config: SimConfig,
    data: SimData,
    log: MetricsLog,
    initial_params: Optional[np.ndarray] = None,
    T: Optional[int] = None,
) -> BoundInputs:
    """Bound constants measured from a quadratic-task run.

    ``L`` is the exact curvature, ``G`` and ``sigma_g2`` are maxima over the
    visited global iterates, ``sigma_l2`` is zero for full-batch clients (a
    minibatch client has no exact value here and is rejected) and
    ``tau_max_b`` is the largest staleness observed in the first ``T``
    aggregations.
    """
    task = config.task
    if task.kind != "quadratic":
        raise ValueError("constants can only be measured exactly on the quadratic task")
    if not log.grad_norms_sq:
        raise ValueError("run was not recorded with record_grad_norms=True")
    if any(c.batch_size is not None and c.batch_size < len(data.shards[c.shard if c.shard is not None else c.agent_id])
           for c in config.clients):
        raise ValueError("sigma_l2 is only measured for full-batch clients")
    lrs = {(c.Q, c.eta_l) for c in config.clients}
    if len(lrs) != 1:
        raise ValueError("bound assumes every client shares Q and eta_l")
    (Q, eta_l), = lrs
    T = len(log.rows) if T is None else T

    def f(w):
        return float(np.mean([loss_and_gradient(task, w, s)[0] for s in data.shards]))

    if initial_params is None:
        initial_params = initial_parameters(config)
    w_star = quadratic_minimizer(task, data.shards)
    stale = np.concatenate([r.observed_stalenesses for r in log.rows[:T]])
    return BoundInputs(
        f0_minus_fstar=max(f(initial_params) - f(w_star), 0.0),
        L=1.0 + task.l2_coefficient,
        sigma_l2=0.0,
        sigma_g2=float(max(log.client_grad_dispersion[: T + 1])),
        G=float(max(log.client_grad_max_sq[: T + 1])),
        local_lrs=(eta_l,) * Q,
        eta_g=config.eta_g,
        b=config.buffer_size,
        tau_max_b=float(stale.max()),
        T=T,
    )


@dataclass
class FairnessReport:
    final_global_acc: float
    final_fast_acc: float
    final_slow_acc: float
    acc_gap: float
    agg_rounds_to_target: float
    acc_target: float

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["agg_rounds_to_target"]):
            d["agg_rounds_to_target"] = None
        return d


def fairness_metrics(
    log: MetricsLog,
    task: TaskSpec,
    final_params: np.ndarray,
    holdout: Dataset,
    fast_labels: Sequence[int],
    slow_labels: Sequence[int],
    acc_target: float = 0.8,
) -> FairnessReport:
    """Final-model holdout accuracy overall and on the fast-/slow-exclusive
    label slices, plus the first version whose logged global accuracy
    reached ``acc_target`` (``inf`` if none did)."""
    if not log.rows:
        raise ValueError("empty metrics log")
    fast_rows = np.flatnonzero(np.isin(holdout.labels, list(fast_labels)))
    slow_rows = np.flatnonzero(np.isin(holdout.labels, list(slow_labels)))
    if fast_rows.size == 0 or slow_rows.size == 0:
        raise ValueError("holdout has no examples for one of the label groups")
    fast_acc = accuracy(task, final_params, holdout.subset(fast_rows))
    slow_acc = accuracy(task, final_params, holdout.subset(slow_rows))
    accs = log.column("global_test_accuracy")
    hit = np.flatnonzero(accs >= acc_target)
    rounds = float(log.rows[hit[0]].version) if hit.size else math.inf
    return FairnessReport(
        final_global_acc=accuracy(task, final_params, holdout),
        final_fast_acc=fast_acc,
        final_slow_acc=slow_acc,
        acc_gap=fast_acc - slow_acc,
        agg_rounds_to_target=rounds,
        acc_target=acc_target,
    )


def staleness_relation_holds(tau_max_1: float, tau_max_b: float, b: int, slack: int = 1) -> bool:
    """``tau_max_b <= ceil(tau_max_1 / b) + slack``."""
    return tau_max_b <= math.ceil(tau_max_1 / b) + slack


def run_report(
    config: SimConfig,
    data: SimData,
    log: MetricsLog,
    initial_params: Optional[np.ndarray] = None,
    acc_target: float = 0.8,
) -> dict:
    """JSON-ready summary: bound terms and empirical gradient average for
    quadratic runs, fairness metrics for classification runs."""
    stale = log.all_stalenesses
    report: dict = {
        "strategy": config.strategy,
        "master_seed": config.master_seed,
        "aggregations": len(log.rows),
        "total_pushes": log.total_pushes,
        "in_flight_discarded": len(log.in_flight),
        "max_observed_staleness": int(stale.max()) if stale.size else None,
        "mean_observed_staleness": float(stale.mean()) if stale.size else None,
        "bound": None,
        "empirical_grad_norm_average": None,
        "fairness": None,
    }
    if log.grad_norms_sq:
        report["empirical_grad_norm_average"] = empirical_grad_norm_average(log)
    if config.task.kind == "quadratic" and log.grad_norms_sq:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", StepSizeWarning)
            inputs = measure_bound_inputs(config, data, log, initial_params)
        report["bound"] = {"inputs": asdict(inputs), "step_size_ok": inputs.step_size_ok,
                           **convergence_bound(inputs).to_dict()}
    if config.task.is_classifier and data.holdout is not None and log.final_params is not None:
        report["fairness"] = fairness_metrics(
            log, config.task, log.final_params, data.holdout, data.fast_labels, data.slow_labels, acc_target
        ).to_dict()
    return report

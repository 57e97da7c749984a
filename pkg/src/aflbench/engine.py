"""Deterministic virtual-time simulation of buffered asynchronous FL.

Each client loops forever: pull the latest global model, train locally,
wait a sampled delay, push ``(delta, base_version)``.  The server aggregates
whenever its buffer holds ``b`` updates.  Training runs at pull time (the
result only depends on the pulled model), so a completion event is processed
atomically as *push -> aggregate if full -> pull next model*.

Simultaneous completions are ordered by ``(time, agent_id, sequence)``.
"""

from __future__ import annotations

import heapq
import io
import csv
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .aggregation import STRATEGIES, ClientUpdate, StalenessTracker, UpdateBuffer, aggregate
from .mechanism import WEIGHT_FORMS, RateProfile
from .model import (
    BatchSampler,
    Dataset,
    TaskSpec,
    accuracy,
    generate_synthetic_classification,
    init_params,
    local_train,
    loss_and_gradient,
    partition_noniid,
)

__all__ = [
    "DelaySpec",
    "ClientSpec",
    "DataSpec",
    "SimConfig",
    "SimData",
    "MetricsRow",
    "MetricsLog",
    "SimulationError",
    "Event",
    "tiebreak_order",
    "prepare_data",
    "initial_parameters",
    "run_simulation",
    "staleness_monte_carlo",
    "fairness_config",
    "METRICS_COLUMNS",
]

DELAY_KINDS = ("uniform", "constant", "exponential")

METRICS_COLUMNS = (
    "version",
    "virtual_time",
    "global_test_loss",
    "global_test_accuracy",
    "per_group_accuracy",
    "weights_applied",
    "observed_stalenesses",
    "contributing_agent_ids",
)


class SimulationError(RuntimeError):
    def __init__(self, message: str, log: Optional["MetricsLog"] = None):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class DelaySpec:
    """Training-plus-network delay in virtual time units."""

    kind: str = "constant"
    lo: float = 1.0
    hi: float = 1.0
    value: float = 1.0
    mean: float = 1.0

    def __post_init__(self):
        if self.kind not in DELAY_KINDS:
            raise ValueError(f"unknown delay kind {self.kind!r}; expected one of {DELAY_KINDS}")
        if self.kind == "uniform" and not 0 < self.lo <= self.hi:
            raise ValueError(f"uniform delay needs 0 < lo <= hi, got ({self.lo}, {self.hi})")
        if self.kind == "constant" and self.value <= 0:
            raise ValueError("constant delay must be > 0")
        if self.kind == "exponential" and self.mean <= 0:
            raise ValueError("exponential delay mean must be > 0")

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "DelaySpec":
        return cls(kind="uniform", lo=lo, hi=hi)

    @classmethod
    def constant(cls, value: float) -> "DelaySpec":
        return cls(kind="constant", value=value)

    @classmethod
    def exponential(cls, mean: float) -> "DelaySpec":
        return cls(kind="exponential", mean=mean)

    @property
    def expected(self) -> float:
        if self.kind == "uniform":
            return 0.5 * (self.lo + self.hi)
        return self.value if self.kind == "constant" else self.mean

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "constant":
            return self.value
        if self.kind == "uniform":
            return float(rng.uniform(self.lo, self.hi))
        d = float(rng.exponential(self.mean))
        # exact zero would collapse two events onto one instant
        return d if d > 0 else np.finfo(float).tiny

    def to_dict(self) -> dict:
        if self.kind == "uniform":
            return {"kind": "uniform", "lo": self.lo, "hi": self.hi}
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        return {"kind": "exponential", "mean": self.mean}


@dataclass(frozen=True)
class ClientSpec:
    agent_id: int
    delay: DelaySpec
    shard: Optional[int] = None  # index into SimData.shards; defaults to agent_id
    Q: int = 1
    eta_l: float = 0.01
    batch_size: Optional[int] = None
    group: str = ""
    rng_seed: Optional[int] = None

    def __post_init__(self):
        if self.Q < 1:
            raise ValueError(f"client {self.agent_id}: Q must be >= 1")
        if self.eta_l <= 0:
            raise ValueError(f"client {self.agent_id}: eta_l must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["delay"] = self.delay.to_dict()
        return d


@dataclass(frozen=True)
class DataSpec:
    """How to build client shards and the holdout.

    ``kind="blobs"``: Gaussian-blob classification split by label group.
    ``kind="quadratic"``: each client's shard is a single optimum point drawn
    from ``N(0, optimum_scale^2)``; there is no holdout.
    ``kind="none"``: no data, clients push zero deltas (timing studies).
    """

    kind: str = "blobs"
    num_classes: int = 10
    examples_per_class: int = 200
    class_separation: float = 3.0
    fast_labels: tuple = (4, 5, 6, 7, 8, 9)
    slow_labels: tuple = (0, 1, 2, 3)
    holdout_fraction: float = 0.2
    optimum_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("blobs", "quadratic", "none"):
            raise ValueError(f"unknown data kind {self.kind!r}")
        object.__setattr__(self, "fast_labels", tuple(int(v) for v in self.fast_labels))
        object.__setattr__(self, "slow_labels", tuple(int(v) for v in self.slow_labels))


@dataclass(frozen=True)
class SimConfig:
    clients: tuple
    buffer_size: int = 5
    strategy: str = "fedstaleweight"
    eta_g: float = 1.0
    total_aggregations: int = 100
    task: TaskSpec = field(default_factory=TaskSpec)
    data: DataSpec = field(default_factory=DataSpec)
    master_seed: int = 0
    weight_form: str = "eq8"
    estimator: str = "mean"
    ema_beta: float = 0.1
    record_grad_norms: bool = False
    evaluate: bool = True
    init_scale: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(self.clients))
        if not self.clients:
            raise ValueError("at least one client is required")
        if self.buffer_size < 1:
            raise ValueError("buffer_size must be >= 1")
        if self.total_aggregations < 1:
            raise ValueError("total_aggregations must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.weight_form not in WEIGHT_FORMS:
            raise ValueError(f"unknown weight_form {self.weight_form!r}")
        ids = [c.agent_id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ValueError("client agent_ids must be unique")

    @property
    def n(self) -> int:
        return len(self.clients)

    def replace(self, **changes) -> "SimConfig":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return SimConfig(**kw)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["clients"] = [c.to_dict() for c in self.clients]
        d["task"] = asdict(self.task)
        d["data"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.data).items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown SimConfig keys: {sorted(unknown)}")
        clients = []
        for c in d.pop("clients"):
            c = dict(c)
            c["delay"] = DelaySpec(**c["delay"])
            clients.append(ClientSpec(**c))
        if "task" in d:
            d["task"] = TaskSpec(**d["task"])
        if "data" in d:
            d["data"] = DataSpec(**d["data"])
        return cls(clients=tuple(clients), **d)


@dataclass
class SimData:
    shards: list
    holdout: Optional[Dataset] = None
    fast_labels: tuple = ()
    slow_labels: tuple = ()


class Event(NamedTuple):
    time: float
    agent_id: int
    seq: int


def tiebreak_order(events: Sequence[Event]) -> list:
    """Total order on completion events: virtual time, then agent id, then
    the agent's own sequence number."""
    return sorted(events, key=lambda e: (e.time, e.agent_id, e.seq))


@dataclass
class MetricsRow:
    version: int
    virtual_time: float
    global_test_loss: float
    global_test_accuracy: float
    per_group_accuracy: tuple  # (fast, slow)
    weights_applied: np.ndarray
    observed_stalenesses: np.ndarray
    contributing_agent_ids: list


def _fmt(v) -> str:
    return repr(float(v))


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)
    # squared norm of the full objective's gradient at versions 0..N, when recorded
    grad_norms_sq: list = field(default_factory=list)
    # per version: max_i ||grad F_i||^2 and mean_i ||grad F_i - grad f||^2
    client_grad_max_sq: list = field(default_factory=list)
    client_grad_dispersion: list = field(default_factory=list)
    in_flight: list = field(default_factory=list)
    total_pushes: int = 0
    final_params: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    @property
    def all_stalenesses(self) -> np.ndarray:
        if not self.rows:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([r.observed_stalenesses for r in self.rows])

    def staleness_by_agent(self) -> dict:
        out: dict = {}
        for r in self.rows:
            for a, t in zip(r.contributing_agent_ids, r.observed_stalenesses):
                out.setdefault(int(a), []).append(int(t))
        return out

    def to_csv(self, path=None) -> str:
        """Serialize one row per aggregation; vector cells are ``;``-joined."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in self.rows:
            w.writerow([
                r.version,
                _fmt(r.virtual_time),
                _fmt(r.global_test_loss),
                _fmt(r.global_test_accuracy),
                ";".join(_fmt(v) for v in r.per_group_accuracy),
                ";".join(_fmt(v) for v in r.weights_applied),
                ";".join(str(int(v)) for v in r.observed_stalenesses),
                ";".join(str(int(v)) for v in r.contributing_agent_ids),
            ])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "MetricsLog":
        def vec(s, typ):
            return np.array([typ(v) for v in s.split(";")]) if s else np.empty(0)

        log = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != METRICS_COLUMNS:
                raise ValueError(f"{path}: unexpected metrics header {header}")
            for rec in reader:
                log.rows.append(MetricsRow(
                    version=int(rec[0]),
                    virtual_time=float(rec[1]),
                    global_test_loss=float(rec[2]),
                    global_test_accuracy=float(rec[3]),
                    per_group_accuracy=tuple(vec(rec[4], float)),
                    weights_applied=vec(rec[5], float),
                    observed_stalenesses=vec(rec[6], int).astype(np.int64),
                    contributing_agent_ids=[int(v) for v in rec[7].split(";")] if rec[7] else [],
                ))
        return log


def _seeds(master_seed: int, n_clients: int):
    root = np.random.SeedSequence(master_seed)
    data_ss, part_ss, init_ss, clients_ss = root.spawn(4)
    per_client = [c.spawn(2) for c in clients_ss.spawn(n_clients)]
    return data_ss, part_ss, init_ss, per_client


def prepare_data(config: SimConfig) -> SimData:
    """Build shards and holdout from ``config.data`` using the data/partition
    streams of ``master_seed`` (independent of strategy and delays)."""
    ds = config.data
    data_ss, part_ss, _, _ = _seeds(config.master_seed, config.n)
    if ds.kind == "none":
        return SimData(shards=[])
    if ds.kind == "quadratic":
        rng = np.random.default_rng(data_ss)
        d = config.task.feature_dim
        shards = [Dataset(rng.normal(0.0, ds.optimum_scale, (1, d)), [0]) for _ in range(config.n)]
        return SimData(shards=shards)
    full = generate_synthetic_classification(
        ds.num_classes, config.task.feature_dim, ds.examples_per_class, ds.class_separation,
        rng_seed=int(data_ss.generate_state(1)[0]),
    )
    groups = [c.group for c in config.clients]
    fast_count, slow_count = groups.count("fast"), groups.count("slow")
    if fast_count + slow_count != config.n:
        raise ValueError("blob data needs every client tagged group='fast' or 'slow'")
    shards, holdout = partition_noniid(
        full, fast_count, slow_count, ds.fast_labels, ds.slow_labels,
        ds.holdout_fraction, rng_seed=int(part_ss.generate_state(1)[0]),
    )
    # partition deals fast shards first; map them back onto client order
    fast_iter = iter(shards[:fast_count])
    slow_iter = iter(shards[fast_count:])
    ordered = [next(fast_iter) if g == "fast" else next(slow_iter) for g in groups]
    return SimData(shards=ordered, holdout=holdout, fast_labels=ds.fast_labels, slow_labels=ds.slow_labels)


def initial_parameters(config: SimConfig) -> np.ndarray:
    """Starting global model, drawn from the init stream of ``master_seed``."""
    init_ss = _seeds(config.master_seed, config.n)[2]
    return init_params(config.task, np.random.default_rng(init_ss), scale=config.init_scale)


class _Evaluator:
    def __init__(self, task: TaskSpec, data: SimData):
        self.task = task
        self.data = data
        h = data.holdout
        self.fast = self.slow = None
        if h is not None and task.is_classifier:
            fm = np.isin(h.labels, data.fast_labels)
            sm = np.isin(h.labels, data.slow_labels)
            self.fast = h.subset(np.flatnonzero(fm)) if fm.any() else None
            self.slow = h.subset(np.flatnonzero(sm)) if sm.any() else None

    def objective_gradient(self, params: np.ndarray) -> tuple[float, np.ndarray]:
        """Uniform-weight average of the clients' full-shard objectives."""
        losses, grads = zip(*(loss_and_gradient(self.task, params, s) for s in self.data.shards))
        return float(np.mean(losses)), np.mean(grads, axis=0)

    def grad_stats(self, params: np.ndarray) -> tuple[float, float, float]:
        grads = np.array([loss_and_gradient(self.task, params, s)[1] for s in self.data.shards])
        g = grads.mean(axis=0)
        per_client = np.sum(grads * grads, axis=1)
        dispersion = np.mean(np.sum((grads - g) ** 2, axis=1))
        return float(g @ g), float(per_client.max()), float(dispersion)

    def __call__(self, params: np.ndarray) -> tuple[float, float, tuple]:
        nan = float("nan")
        h = self.data.holdout
        if not self.task.is_classifier:
            loss = self.objective_gradient(params)[0] if self.data.shards else nan
            return loss, nan, (nan, nan)
        if h is None:
            return nan, nan, (nan, nan)
        loss, _ = loss_and_gradient(self.task, params, h)
        acc = accuracy(self.task, params, h)
        fast = accuracy(self.task, params, self.fast) if self.fast is not None else nan
        slow = accuracy(self.task, params, self.slow) if self.slow is not None else nan
        return loss, acc, (fast, slow)


def run_simulation(config: SimConfig, data: Optional[SimData] = None, initial_params: Optional[np.ndarray] = None) -> MetricsLog:
    """Run the event loop until ``config.total_aggregations`` aggregations.

    Returns a :class:`MetricsLog` with one row per aggregation.  Updates still
    in flight at the end are discarded and listed in ``log.in_flight``.
    """
    if data is None:
        data = prepare_data(config)
    noop = config.data.kind == "none" and not data.shards
    task = config.task
    client_seeds = _seeds(config.master_seed, config.n)[3]

    if initial_params is not None:
        params = np.array(initial_params, dtype=np.float64).reshape(-1)
    elif noop:
        params = np.zeros(1)
    else:
        params = initial_parameters(config)
    if not noop and params.shape[0] != task.param_dim:
        raise ValueError(f"initial params have dimension {params.shape[0]}, task expects {task.param_dim}")

    clients = config.clients
    shards = []
    if not noop:
        for c in clients:
            idx = c.agent_id if c.shard is None else c.shard
            if not 0 <= idx < len(data.shards):
                raise ValueError(f"client {c.agent_id} refers to missing shard {idx}")
            shards.append(data.shards[idx])

    delay_rngs, samplers = [], []
    for k, c in enumerate(clients):
        d_ss, b_ss = client_seeds[k]
        if c.rng_seed is not None:
            d_ss, b_ss = np.random.SeedSequence(c.rng_seed).spawn(2)
        delay_rngs.append(np.random.default_rng(d_ss))
        samplers.append(None if noop else BatchSampler(len(shards[k]), c.batch_size, np.random.default_rng(b_ss)))

    evaluate = _Evaluator(task, data) if (config.evaluate and not noop) else None
    log = MetricsLog()
    grad_probe = _Evaluator(task, data) if (config.record_grad_norms and not noop) else None

    def record_grads() -> None:
        if grad_probe is not None:
            norm_sq, gmax, disp = grad_probe.grad_stats(params)
            log.grad_norms_sq.append(norm_sq)
            log.client_grad_max_sq.append(gmax)
            log.client_grad_dispersion.append(disp)

    record_grads()

    tracker = StalenessTracker(config.estimator, config.ema_beta)
    buffer = UpdateBuffer(config.buffer_size)
    version = 0
    heap: list = []
    seq = [0] * len(clients)
    pending: dict = {}

    def pull(k: int, now: float) -> None:
        c = clients[k]
        if noop:
            delta = params
        else:
            delta = local_train(task, params, shards[k], c.Q, c.eta_l, rng_seed=samplers[k])
        t = now + c.delay.sample(delay_rngs[k])
        ev = Event(t, c.agent_id, seq[k])
        seq[k] += 1
        pending[(c.agent_id, ev.seq)] = (k, delta, version)
        heapq.heappush(heap, ev)

    for k in sorted(range(len(clients)), key=lambda k: clients[k].agent_id):
        pull(k, 0.0)

    while version < config.total_aggregations:
        ev = heapq.heappop(heap)
        k, delta, base = pending.pop((ev.agent_id, ev.seq))
        buffer.push(ClientUpdate(delta=delta if not noop else np.zeros(1), base_version=base, agent_id=ev.agent_id, produced_at=ev.time))
        log.total_pushes += 1
        if buffer.full:
            out = aggregate(
                config.strategy, buffer.drain(), tracker, params, config.eta_g, config.n, version,
                weight_form=config.weight_form,
            )
            params = out.new_params
            version = out.version
            if not np.all(np.isfinite(params)):
                nan = float("nan")
                log.rows.append(MetricsRow(version, ev.time, nan, nan, (nan, nan), out.weights_applied,
                                           out.observed_stalenesses, out.agent_ids))
                raise SimulationError(f"non-finite parameters after aggregation {version}", log)
            if evaluate is not None:
                loss, acc, groups = evaluate(params)
            else:
                loss = acc = float("nan")
                groups = (float("nan"), float("nan"))
            log.rows.append(MetricsRow(version, ev.time, loss, acc, groups, out.weights_applied,
                                       out.observed_stalenesses, out.agent_ids))
            record_grads()
        if version < config.total_aggregations:
            pull(k, ev.time)

    log.in_flight = [
        {"agent_id": e.agent_id, "seq": e.seq, "arrival_time": e.time, "base_version": pending[(e.agent_id, e.seq)][2]}
        for e in tiebreak_order(heap)
    ]
    log.final_params = params
    return log


def _delay_for_rate(rate: float, kind: str) -> DelaySpec:
    mean = 1.0 / rate
    if kind == "constant":
        return DelaySpec.constant(mean)
    if kind == "exponential":
        return DelaySpec.exponential(mean)
    if kind == "uniform":
        return DelaySpec.uniform(0.5 * mean, 1.5 * mean)
    raise ValueError(f"unknown delay kind {kind!r}")


def staleness_monte_carlo(
    profile,
    b: int,
    delay_kind: str = "constant",
    num_aggregations: int = 10_000,
    seed: int = 0,
) -> np.ndarray:
    """Empirical mean staleness per agent from a no-training run whose agent
    ``i`` has mean delay ``1 / rate_i``."""
    p = profile if isinstance(profile, RateProfile) else RateProfile(profile)
    clients = [ClientSpec(agent_id=i, delay=_delay_for_rate(r, delay_kind)) for i, r in enumerate(p.rates)]
    cfg = SimConfig(
        clients=tuple(clients), buffer_size=b, strategy="fedavg", total_aggregations=num_aggregations,
        data=DataSpec(kind="none"), master_seed=seed, evaluate=False,
    )
    log = run_simulation(cfg)
    by_agent = log.staleness_by_agent()
    return np.array([np.mean(by_agent[i]) if i in by_agent else np.nan for i in range(p.n)])


def fairness_config(
    strategy: str = "fedstaleweight",
    master_seed: int = 0,
    total_aggregations: int = 1000,
    fast_count: int = 10,
    slow_count: int = 5,
    fast_delay: tuple = (1.0, 2.0),
    slow_delay: tuple = (8.0, 12.0),
    buffer_size: int = 5,
    Q: int = 1,
    eta_l: float = 0.01,
    eta_g: float = 1.0,
    task: Optional[TaskSpec] = None,
    data: Optional[DataSpec] = None,
) -> SimConfig:
    """Fast/slow agent population with label-disjoint data: fast agents hold
    labels 4-9, slow agents labels 0-3, 20% stratified holdout."""
    task = task or TaskSpec(kind="softmax_linear", feature_dim=20, num_classes=10)
    data = data or DataSpec(kind="blobs", num_classes=task.num_classes)
    clients = []
    for i in range(fast_count + slow_count):
        fast = i < fast_count
        lo, hi = fast_delay if fast else slow_delay
        clients.append(ClientSpec(agent_id=i, delay=DelaySpec.uniform(lo, hi), Q=Q, eta_l=eta_l,
                                  group="fast" if fast else "slow"))
    return SimConfig(
        clients=tuple(clients), buffer_size=buffer_size, strategy=strategy, eta_g=eta_g,
        total_aggregations=total_aggregations, task=task, data=data, master_seed=master_seed,
    )

"""Self-check suites behind ``aflbench verify``.

Each suite returns a list of :class:`Check` results; a suite passes when
every check does.  Random instances are drawn from fixed seeds so a run is
reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import mechanism as mech
from .analysis import BoundInputs, convergence_bound, u_max
from .engine import staleness_monte_carlo
from .model import Dataset, TaskSpec, loss_and_gradient


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}" + (f": {self.detail}" if self.detail else "")


def _random_profile(rng: np.random.Generator, n_max: int = 20) -> np.ndarray:
    n = int(rng.integers(1, n_max + 1))
    return np.exp(rng.uniform(np.log(0.1), np.log(10.0), n))


def mechanism_suite(instances: int = 1000, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    worst = dict(sum=0.0, compose=0.0, const=0.0, rescale=0.0, wsum=0.0)
    bounds_ok = monotone_ok = True
    sign_checked = sign_agree = 0
    for _ in range(instances):
        rates = _random_profile(rng)
        n = rates.size
        b = int(rng.choice([1, 2, 5]))
        p = mech.RateProfile(rates)
        worst["sum"] = max(worst["sum"], abs(sum(mech.influence(p, i) for i in range(n)) - 1.0))
        c = float(rng.uniform(0.01, 100.0))
        scaled = mech.RateProfile(rates * c)
        stale = []
        for i in range(n):
            e = mech.expected_staleness(p, i, b)
            stale.append(e)
            worst["compose"] = max(worst["compose"], abs(mech.influence_from_staleness(e, b) - mech.influence(p, i)))
            worst["const"] = max(worst["const"], abs(mech.fair_weight(e, b, n) * mech.influence_from_staleness(e, b) - 1.0 / n))
            worst["rescale"] = max(worst["rescale"], abs(mech.expected_staleness(scaled, i, b) - e))
        comp = rng.integers(0, n, b)
        s = np.array(stale)[comp]
        w = mech.normalized_weights(s, b, n)
        w_scaled = mech.normalized_weights([mech.expected_staleness(scaled, int(a), b) for a in comp], b, n)
        worst["rescale"] = max(worst["rescale"], float(np.max(np.abs(w - w_scaled))))
        worst["wsum"] = max(worst["wsum"], abs(w.sum() - 1.0))
        lo, hi = mech.alpha_norm_bounds(b, float(s.max()))
        bounds_ok &= bool(np.all(w >= lo - 1e-12) and np.all(w <= hi + 1e-12))
        order = np.argsort(s, kind="stable")
        monotone_ok &= bool(np.all(np.diff(w[order]) >= -1e-15))

        # single-slot deviation: agent i once, other slots drawn from the rest
        if n >= 2:
            i = int(rng.integers(n))
            others = [a for a in range(n) if a != i]
            comp_u = [i] + [int(v) for v in rng.choice(others, b - 1)] if b > 1 else [i]
            r = rates[i]
            h = 1e-6 * r
            fd = (mech.agent_utility(p.with_rate(i, r + h), comp_u, i)
                  - mech.agent_utility(p.with_rate(i, r - h), comp_u, i)) / (2 * h)
            if abs(fd) > 1e-9:
                sign_checked += 1
                sign_agree += int(np.sign(fd) == mech.utility_derivative_sign(p, comp_u, i))
    return [
        Check("influences sum to one", worst["sum"] <= 1e-12, f"max err {worst['sum']:.2e}"),
        Check("influence from expected staleness equals influence", worst["compose"] <= 1e-12, f"max err {worst['compose']:.2e}"),
        Check("fair weight times influence equals 1/n", worst["const"] <= 1e-12, f"max err {worst['const']:.2e}"),
        Check("rate-rescaling invariance", worst["rescale"] <= 1e-12, f"max err {worst['rescale']:.2e}"),
        Check("normalized weights form a probability vector within weight bounds",
              worst["wsum"] <= 1e-9 and bounds_ok, f"max sum err {worst['wsum']:.2e}, bounds {'ok' if bounds_ok else 'violated'}"),
        Check("derivative sign agrees with finite differences", sign_agree == sign_checked,
              f"{sign_agree}/{sign_checked} agree"),
        Check("weight non-decreasing in staleness", monotone_ok),
    ]


def staleness_oracle_suite(profiles: int = 15, aggregations: int = 10_000, seed: int = 1) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for k in range(profiles):
        n = int(rng.integers(2, 21))
        rates = rng.uniform(0.5, 4.0, n)
        b = (1, 2, 5)[k % 3]
        mc = staleness_monte_carlo(rates, b, "constant", aggregations, seed=k)
        ex = np.array([mech.expected_staleness(rates, i, b) for i in range(n)])
        rel = float(np.max(np.abs(mc - ex) / ex))
        out.append(Check(f"profile {k} (n={n}, b={b}) Monte-Carlo vs closed form", rel <= 0.15, f"max rel err {rel:.3f}"))
    return out


def bound_suite() -> list:
    b1 = convergence_bound(BoundInputs(1.0, 1.0, 0.0, 0.0, 1.0, (0.1,), 1.0, 1, 0.0, 100))
    big_t = convergence_bound(BoundInputs(1.0, 1.0, 0.0, 0.0, 1.0, (0.1,), 1.0, 1, 0.0, 1000))
    return [
        Check("u_max(2, 1) = 1/16", abs(u_max(2, 1.0) - 1 / 16) <= 1e-12),
        Check("u_max(b, 0) = 0", all(u_max(b, 0.0) == 0.0 for b in range(1, 10))),
        Check("u_max(1, tau) = 0", all(u_max(1, t) == 0.0 for t in (0.5, 3.0, 40.0))),
        Check("reference bound total 0.32", abs(b1.total - 0.32) <= 1e-12, f"total {b1.total!r}"),
        Check("term1 scales as 1/T", abs(big_t.term1 - b1.term1 / 10) <= 1e-12
              and (big_t.term2, big_t.term3, big_t.term4) == (b1.term2, b1.term3, b1.term4)),
    ]


def _fd_check(task: TaskSpec, rng: np.random.Generator, draws: int) -> tuple[bool, float]:
    worst = 0.0
    for _ in range(draws):
        m = int(rng.integers(1, 8))
        X = rng.normal(size=(m, task.feature_dim))
        y = rng.integers(0, max(task.num_classes, 1), m)
        batch = Dataset(X, y)
        w = rng.normal(0, 0.5, task.param_dim)
        _, g = loss_and_gradient(task, w, batch)
        h = 1e-6
        fd = np.empty_like(w)
        for j in range(w.size):
            e = np.zeros_like(w)
            e[j] = h
            fd[j] = (loss_and_gradient(task, w + e, batch)[0] - loss_and_gradient(task, w - e, batch)[0]) / (2 * h)
        err = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-4)
        worst = max(worst, float(err.max()))
    return worst <= 1e-4, worst


def gradients_suite(draws: int = 100, seed: int = 2) -> list:
    rng = np.random.default_rng(seed)
    tasks = [
        TaskSpec("softmax_linear", feature_dim=4, num_classes=3, l2_coefficient=0.01),
        TaskSpec("mlp_one_hidden", feature_dim=4, num_classes=3, hidden_dim=5, l2_coefficient=0.01),
        TaskSpec("quadratic", feature_dim=6, l2_coefficient=0.1),
    ]
    out = []
    for t in tasks:
        ok, worst = _fd_check(t, rng, draws)
        out.append(Check(f"{t.kind} gradient vs central differences", ok, f"max rel err {worst:.2e}"))
    return out


SUITES: dict[str, Callable[[], list]] = {
    "mechanism": mechanism_suite,
    "staleness-oracle": staleness_oracle_suite,
    "bound": bound_suite,
    "gradients": gradients_suite,
}


def run_suites(names, echo=print) -> bool:
    ok = True
    for name in names:
        t0 = time.perf_counter()
        checks = SUITES[name]()
        passed = all(c.passed for c in checks)
        ok &= passed
        echo(f"== {name}: {'PASS' if passed else 'FAIL'} ({time.perf_counter() - t0:.1f}s)")
        for c in checks:
            echo("  " + c.line())
    return ok

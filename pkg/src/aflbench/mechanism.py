"""Staleness-based fair weighting: influence, expected staleness, buffer
normalization, agent utility and throttling checks.

Everything here is a pure function of reported update rates.  A rate is a
mean number of updates per unit of virtual time; a *composition* lists which
agent produced each slot of an aggregation buffer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

__all__ = [
    "RateProfile",
    "ThrottleReport",
    "influence",
    "expected_staleness",
    "influence_from_staleness",
    "fair_weight",
    "normalized_weights",
    "alpha_norm_bounds",
    "agent_utility",
    "isolated_utility",
    "utility_derivative",
    "utility_derivative_sign",
    "check_no_profitable_throttle",
]

WEIGHT_FORMS = ("eq8", "alg1")

# certification threshold for "no profitable throttle"
TRUTHFUL_GAIN_TOL = 1e-9


@dataclass(frozen=True)
class RateProfile:
    """Reported (or true) mean update rates of ``n`` agents."""

    rates: np.ndarray

    def __post_init__(self):
        rates = np.asarray(self.rates, dtype=np.float64).reshape(-1)
        if rates.size < 1:
            raise ValueError("a rate profile needs at least one agent")
        if not np.all(np.isfinite(rates)) or np.any(rates <= 0):
            raise ValueError(f"rates must be finite and strictly positive, got {rates}")
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)

    @property
    def n(self) -> int:
        return int(self.rates.size)

    def with_rate(self, i: int, rate: float) -> "RateProfile":
        rates = self.rates.copy()
        rates[i] = rate
        return RateProfile(rates)


ProfileLike = Union[RateProfile, Sequence[float], np.ndarray]


def _profile(profile: ProfileLike) -> RateProfile:
    return profile if isinstance(profile, RateProfile) else RateProfile(profile)


def _check_index(i: int, n: int) -> int:
    if not 0 <= i < n:
        raise IndexError(f"agent index {i} out of range for {n} agents")
    return int(i)


def _check_buffer_size(b: int) -> int:
    if b < 1:
        raise ValueError(f"buffer size must be >= 1, got {b}")
    return int(b)


def _composition(composition: Sequence[int], n: int) -> np.ndarray:
    comp = np.asarray(composition, dtype=np.int64).reshape(-1)
    if comp.size < 1:
        raise ValueError("buffer composition must hold at least one slot")
    if np.any(comp < 0) or np.any(comp >= n):
        raise IndexError(f"composition {comp.tolist()} has indices outside [0, {n})")
    return comp


def influence(profile: ProfileLike, i: int) -> float:
    """Expected share of aggregated updates produced by agent ``i``."""
    p = _profile(profile)
    i = _check_index(i, p.n)
    return float(p.rates[i] / p.rates.sum())


def expected_staleness(profile: ProfileLike, i: int, b: int) -> float:
    """Mean number of server versions that elapse while agent ``i`` trains.

    ``(sum_j r_j / r_i - 1) / b``.  Invariant to rescaling every rate by the
    same constant.
    """
    p = _profile(profile)
    i = _check_index(i, p.n)
    b = _check_buffer_size(b)
    ratio = float(np.sum(p.rates / p.rates[i]))
    # ratio >= 1 mathematically; clamp rounding noise
    return max(ratio - 1.0, 0.0) / b


def influence_from_staleness(exp_staleness: float, b: int) -> float:
    if exp_staleness < 0:
        raise ValueError(f"expected staleness must be >= 0, got {exp_staleness}")
    b = _check_buffer_size(b)
    return 1.0 / (exp_staleness * b + 1.0)


def fair_weight(exp_staleness: float, b: int, n: int, weight_form: str = "eq8") -> float:
    """Un-normalized fair weight of an update given its agent's expected staleness.

    With the default ``eq8`` form the weight is ``(E[tau]*b + 1)/n``, the
    reciprocal of ``n`` times the influence implied by that staleness, so
    weight times influence is ``1/n`` for every agent.  ``alg1`` uses
    ``(E[tau] + 1)/n`` instead.
    """
    if exp_staleness < 0:
        raise ValueError(f"expected staleness must be >= 0, got {exp_staleness}")
    if n < 1:
        raise ValueError(f"agent count must be >= 1, got {n}")
    b = _check_buffer_size(b)
    if weight_form == "eq8":
        return (exp_staleness * b + 1.0) / n
    if weight_form == "alg1":
        return (exp_staleness + 1.0) / n
    raise ValueError(f"unknown weight_form {weight_form!r}; expected one of {WEIGHT_FORMS}")


def normalized_weights(
    exp_stalenesses: Sequence[float], b: int, n: int, weight_form: str = "eq8"
) -> np.ndarray:
    """Fair weights of one buffer, rescaled to sum to one."""
    s = np.asarray(exp_stalenesses, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("cannot normalize an empty buffer")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ValueError(f"stalenesses must be finite and >= 0, got {s}")
    if n < 1:
        raise ValueError(f"agent count must be >= 1, got {n}")
    b = _check_buffer_size(b)
    if weight_form == "eq8":
        raw = (s * b + 1.0) / n
    elif weight_form == "alg1":
        raw = (s + 1.0) / n
    else:
        raise ValueError(f"unknown weight_form {weight_form!r}; expected one of {WEIGHT_FORMS}")
    return raw / raw.sum()


def alpha_norm_bounds(b: int, tau_max: float) -> tuple[float, float]:
    """Smallest and largest normalized weight reachable in a buffer of ``b``
    updates whose expected stalenesses lie in ``[0, tau_max]``.

    The largest comes from one maximally stale update among fresh ones, the
    smallest from one fresh update among maximally stale ones.
    """
    b = _check_buffer_size(b)
    if tau_max < 0:
        raise ValueError(f"tau_max must be >= 0, got {tau_max}")
    upper = (b * tau_max + 1.0) / (b * (tau_max + 1.0))
    lower = 1.0 / ((b - 1) * (b * tau_max + 1.0) + 1.0)
    return lower, upper


def _slot_of(comp: np.ndarray, i: int) -> int:
    slots = np.flatnonzero(comp == i)
    if slots.size == 0:
        raise ValueError(f"agent {i} does not appear in composition {comp.tolist()}")
    if slots.size > 1:
        raise ValueError(f"agent {i} appears {slots.size} times; only single-slot deviations are supported")
    return int(slots[0])


def agent_utility(profile: ProfileLike, composition: Sequence[int], i: int) -> float:
    """Normalized buffer weight of agent ``i``'s slot times its update frequency."""
    p = _profile(profile)
    i = _check_index(i, p.n)
    comp = _composition(composition, p.n)
    slot = _slot_of(comp, i)
    b = comp.size
    stale = [expected_staleness(p, int(a), b) for a in comp]
    w = normalized_weights(stale, b, p.n)
    return float(w[slot] * influence(p, i))


def isolated_utility(profile: ProfileLike, i: int, b: int) -> float:
    """Fair weight times influence before any per-buffer normalization (always ``1/n``)."""
    p = _profile(profile)
    e = expected_staleness(p, i, b)
    return fair_weight(e, b, p.n) * influence(p, i)


def _derivative_terms(p: RateProfile, comp: np.ndarray, i: int):
    r = p.rates
    others = comp[comp != i]
    A = float(r.sum() - r[i])
    C = float(np.sum(1.0 / r[others]))
    D = 0.0
    for a in others:
        mask = np.ones(p.n, dtype=bool)
        mask[[a, i]] = False
        D += float(r[mask].sum() / r[a])
    return A, C, D


def utility_derivative(profile: ProfileLike, composition: Sequence[int], i: int) -> float:
    """Closed-form d(utility)/d(rate_i): ``(A - C r^2) / (C r^2 + (b + D) r + A)^2``.

    ``A`` is the summed rate of the other agents, ``C`` the summed inverse
    rate of the other buffer slots and ``D`` collects the remaining
    rate-independent cross terms.
    """
    p = _profile(profile)
    i = _check_index(i, p.n)
    comp = _composition(composition, p.n)
    _slot_of(comp, i)
    A, C, D = _derivative_terms(p, comp, i)
    r = float(p.rates[i])
    b = comp.size
    return (A - C * r * r) / (C * r * r + (b + D) * r + A) ** 2


def utility_derivative_sign(profile: ProfileLike, composition: Sequence[int], i: int) -> int:
    """Sign (-1, 0, +1) of the numerator ``A - C r_i^2`` of the utility derivative."""
    p = _profile(profile)
    i = _check_index(i, p.n)
    comp = _composition(composition, p.n)
    _slot_of(comp, i)
    A, C, _ = _derivative_terms(p, comp, i)
    cr2 = C * float(p.rates[i]) ** 2
    num = A - cr2
    if abs(num) <= 1e-12 * max(A, cr2):
        return 0
    return 1 if num > 0 else -1


@dataclass
class ThrottleReport:
    agent: int
    true_rate: float
    truthful_utility: float
    grid: np.ndarray
    utilities: np.ndarray
    best_rate: float
    max_utility_gain: float

    @property
    def strategy_proof(self) -> bool:
        return self.max_utility_gain <= TRUTHFUL_GAIN_TOL


def check_no_profitable_throttle(
    profile: ProfileLike,
    composition: Sequence[int],
    i: int,
    grid: Sequence[float],
    utility: str = "normalized",
) -> ThrottleReport:
    """Search a grid of under-reported rates for agent ``i``, others held fixed.

    ``profile`` holds true rates.  ``utility`` is ``"normalized"`` (buffer
    normalized weight times frequency) or ``"isolated"`` (fair weight times
    influence, no normalization).  Ties in utility resolve to the highest
    rate, so an indifferent agent is reported as truthful.
    """
    p = _profile(profile)
    i = _check_index(i, p.n)
    comp = _composition(composition, p.n)
    g = np.asarray(grid, dtype=np.float64).reshape(-1)
    if g.size == 0:
        raise ValueError("throttle grid is empty")
    true_rate = float(p.rates[i])
    if np.any(g <= 0) or np.any(g > true_rate * (1 + 1e-12)):
        raise ValueError(f"grid values must lie in (0, {true_rate}]")

    if utility == "normalized":
        def u(profile_):
            return agent_utility(profile_, comp, i)
    elif utility == "isolated":
        def u(profile_):
            return isolated_utility(profile_, i, comp.size)
    else:
        raise ValueError(f"unknown utility {utility!r}")

    truthful = u(p)
    utils = np.array([u(p.with_rate(i, float(c))) for c in g])
    gains = utils - truthful
    best_gain = float(gains.max())
    if best_gain <= TRUTHFUL_GAIN_TOL:
        best_rate = true_rate
    else:
        best_rate = float(g[int(np.argmax(gains))])
    return ThrottleReport(
        agent=i,
        true_rate=true_rate,
        truthful_utility=truthful,
        grid=g,
        utilities=utils,
        best_rate=best_rate,
        max_utility_gain=best_gain,
    )

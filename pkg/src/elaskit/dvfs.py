"""Minimum frequency uplift that brings a straggler stage onto a target time."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, List


class DvfsStatus(enum.Enum):
    ACHIEVABLE = "achievable"
    UNACHIEVABLE = "unachievable"


@dataclass(frozen=True)
class DvfsQuery:
    f_cur: float
    f_max: float
    t_star: float
    epsilon: float
    delta_f_min: float = 10.0
    window: int = 1

    def __post_init__(self):
        if self.f_cur > self.f_max:
            raise ValueError("f_cur above f_max")
        if self.epsilon <= 0 or self.delta_f_min <= 0 or self.window < 1:
            raise ValueError("epsilon, delta_f_min must be > 0 and window >= 1")

    def grid(self) -> List[float]:
        """Candidate frequencies: f_cur + k*delta, capped by (and ending at) f_max."""
        steps = math.ceil((self.f_max - self.f_cur) / self.delta_f_min - 1e-9)
        pts = [self.f_cur + k * self.delta_f_min for k in range(steps)]
        pts.append(self.f_max)
        return pts


@dataclass(frozen=True)
class DvfsResult:
    f_star: float
    status: DvfsStatus
    observations: int = 0


def plan_frequency(q: DvfsQuery, observe: Callable[[float], float]) -> DvfsResult:
    """Bisection over the frequency grid for the lowest f with t(f) <= T* + eps.

    ``observe(f)`` returns the mini-step time at frequency ``f`` averaged over
    the observation window; it is assumed non-increasing in ``f``.
    """
    calls = 0

    def obs(f):
        nonlocal calls
        calls += 1
        return observe(f)

    bound = q.t_star + q.epsilon
    t_cur = obs(q.f_cur)
    if abs(t_cur - q.t_star) <= q.epsilon or t_cur <= bound:
        return DvfsResult(q.f_cur, DvfsStatus.ACHIEVABLE, calls)
    if obs(q.f_max) > bound:
        return DvfsResult(q.f_max, DvfsStatus.UNACHIEVABLE, calls)

    grid = q.grid()
    lo, hi = 0, len(grid) - 1  # grid[lo] infeasible, grid[hi] feasible
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if obs(grid[mid]) <= bound:
            hi = mid
        else:
            lo = mid
    return DvfsResult(grid[hi], DvfsStatus.ACHIEVABLE, calls)


def scan_frequency(q: DvfsQuery, observe: Callable[[float], float]) -> DvfsResult:
    """Linear scan over the same grid; the reference the bisection must match."""
    bound = q.t_star + q.epsilon
    t_cur = observe(q.f_cur)
    if abs(t_cur - q.t_star) <= q.epsilon or t_cur <= bound:
        return DvfsResult(q.f_cur, DvfsStatus.ACHIEVABLE)
    for f in q.grid()[1:]:
        if observe(f) <= bound:
            return DvfsResult(f, DvfsStatus.ACHIEVABLE)
    return DvfsResult(q.f_max, DvfsStatus.UNACHIEVABLE)

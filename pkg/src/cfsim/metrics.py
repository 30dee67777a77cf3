"""Regret, cold-start, and theory-overlay computation over run traces.

Everything here is pure post-processing: traces in, curves and reports
out.  Expected regret is estimated by seed-averaging with a standard
error attached; theory overlays are reported at their configured scale
but never asserted against desk-size runs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .engine import RunTrace
from .itemspace import ParameterError
from .similarity import TheoryConstants


@dataclass
class RegretCurve:
    """Per-user-normalized cumulative bad recommendations on a time grid."""

    t_grid: np.ndarray
    r: np.ndarray
    n_users: int
    seed: int
    algo_id: str = ""

    def __post_init__(self):
        self.t_grid = np.asarray(self.t_grid, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        if self.t_grid.shape != self.r.shape:
            raise ParameterError("grid and values must align")


@dataclass
class MeanCurve:
    """Pointwise mean regret across seeds with its standard error."""

    t_grid: np.ndarray
    r_mean: np.ndarray
    r_stderr: np.ndarray
    n_seeds: int
    algo_id: str = ""


def regret(trace: RunTrace, stride: int = 1) -> RegretCurve:
    """Exact cumulative bad-recommendation count / N, sampled every `stride` steps."""
    if stride < 1:
        raise ParameterError("stride must be positive")
    n = trace.n_users
    bad = trace.bad_cumulative()
    idx = np.arange(stride - 1, len(bad), stride)
    t_grid = (idx + 1) / n
    values = bad[idx] / n
    return RegretCurve(t_grid, values, n_users=n, seed=trace.seed,
                       algo_id=trace.algo_id)


def mean_regret(curves: Sequence[RegretCurve]) -> MeanCurve:
    """Seed-average a family of curves computed on identical grids."""
    if len(curves) < 2:
        raise ParameterError("need at least two seeds for a mean curve")
    grid = curves[0].t_grid
    for c in curves[1:]:
        if c.t_grid.shape != grid.shape or not np.allclose(c.t_grid, grid):
            raise ParameterError("curves were computed on different grids")
    stack = np.stack([c.r for c in curves])
    mean = stack.mean(axis=0)
    stderr = stack.std(axis=0, ddof=1) / math.sqrt(len(curves))
    return MeanCurve(grid.copy(), mean, stderr, n_seeds=len(curves),
                     algo_id=curves[0].algo_id)


@dataclass
class ColdStartEstimate:
    """Result of the cold-start search on a mean regret curve.

    t_cold_start = t_start + gamma is the first time after which the
    incremental regret slope stays below the threshold for every probed
    grid offset.  The search is grid-restricted: offsets are multiples of
    the curve's resolution, the finest the trace can resolve.
    """

    found: bool
    t_start: float
    gamma: float
    t_cold_start: float
    threshold: float
    horizon: float
    trailing_slope: float
    window_points: int

    def to_json(self) -> dict:
        return {
            "found": self.found,
            "t_start": self.t_start,
            "gamma": self.gamma,
            "t_cold_start": self.t_cold_start,
            "threshold": self.threshold,
            "horizon": self.horizon,
            "trailing_slope": self.trailing_slope,
            "window_points": self.window_points,
        }


def cold_start_time(
    curve: MeanCurve | RegretCurve,
    threshold: float = 0.1,
    resolution: int = 1,
) -> ColdStartEstimate:
    """Least T + Gamma with mean incremental regret below threshold*Delta.

    For each grid T the minimal feasible Gamma is the largest grid offset
    still violating the slope condition; the estimate minimizes T + Gamma
    over the grid.  A curve whose tail never verifies the condition on at
    least one probed offset is reported not-found together with its best
    trailing slope.
    """
    if threshold <= 0:
        raise ParameterError("threshold must be positive")
    r_values = curve.r_mean if isinstance(curve, MeanCurve) else curve.r
    t = np.concatenate([[0.0], np.asarray(curve.t_grid, dtype=float)[::resolution]])
    r = np.concatenate([[0.0], np.asarray(r_values, dtype=float)[::resolution]])
    horizon = float(t[-1])
    n = len(t)

    best = (math.inf, 0.0, 0.0, 0)  # objective, T, gamma, verified points
    best_trailing = math.inf
    for a in range(n - 1):
        dt = t[a + 1:] - t[a]
        dr = r[a + 1:] - r[a]
        violating = dr > threshold * dt + 1e-12
        if violating.any():
            last_violation = len(dt) - 1 - int(np.argmax(violating[::-1]))
            gamma = float(dt[last_violation])
            verified = len(dt) - 1 - last_violation
        else:
            gamma = 0.0
            verified = len(dt)
        trailing = float(dr[-1] / dt[-1])
        best_trailing = min(best_trailing, trailing)
        objective = float(t[a]) + gamma
        if verified > 0 and objective < best[0]:
            best = (objective, float(t[a]), gamma, verified)
    if math.isinf(best[0]):
        return ColdStartEstimate(
            found=False, t_start=math.nan, gamma=math.nan, t_cold_start=math.nan,
            threshold=threshold, horizon=horizon,
            trailing_slope=best_trailing, window_points=0,
        )
    return ColdStartEstimate(
        found=True, t_start=best[1], gamma=best[2], t_cold_start=best[0],
        threshold=threshold, horizon=horizon,
        trailing_slope=best_trailing, window_points=best[3],
    )


def window_slope(curve: MeanCurve | RegretCurve, t_lo: float, t_hi: float) -> float:
    """Mean regret slope over [t_lo, t_hi] (grid-snapped endpoints)."""
    r_values = curve.r_mean if isinstance(curve, MeanCurve) else curve.r
    t = np.asarray(curve.t_grid, dtype=float)
    a = int(np.searchsorted(t, t_lo, side="left"))
    b = int(np.searchsorted(t, t_hi, side="right")) - 1
    if b <= a:
        raise ParameterError("window contains fewer than two grid points")
    return float((r_values[b] - r_values[a]) / (t[b] - t[a]))


def linear_lower_bound(nu: float, n_users: int) -> float:
    """Unavoidable asymptotic regret slope (1 - 2 nu) / N."""
    if not (0 < nu <= 0.5):
        raise ParameterError("nu must lie in (0, 1/2]")
    if n_users < 1:
        raise ParameterError("need at least one user")
    return (1.0 - 2.0 * nu) / n_users


@dataclass
class BoundsOverlay:
    """Closed-form theory quantities for plotting next to measured curves.

    Computed at whatever scale the constants carry; at desk scale these
    are context, not assertions.  Where the derivation writes `log` the
    base-2 logarithm is used.
    """

    t_min: float
    t_max: float
    eps_n: float
    alpha: float
    beta: float
    mp1: float
    c_precision: float
    linear_slope: float
    scale_name: str

    def to_json(self) -> dict:
        return {
            "t_min": self.t_min,
            "t_max": self.t_max,
            "eps_n": self.eps_n,
            "alpha": self.alpha,
            "beta": self.beta,
            "mp1": self.mp1,
            "c_precision": self.c_precision,
            "linear_slope": self.linear_slope,
            "scale": self.scale_name,
        }


def bounds_overlay(tc: TheoryConstants) -> BoundsOverlay:
    d, nu, n = tc.d, tc.nu, tc.n_users
    mp1 = tc.mp1()
    t_mp = mp1 / n
    t_min = t_mp + tc.t_min_tau(1)
    c = tc.c_precision
    c_m = tc.scale.m * 2.0 ** max(3.5 * d, 8.0) / nu * (3 * d + 1)
    inner = nu / (
        630.0 * (2 * d + 11) * (d + 2) ** 4 * tc.scale.eps_n * 2.0 ** (5 * d + 18)
    )
    g = nu / 4.0 * c_m * (1.0 / c) ** (d + 2) * inner ** ((d + 2) / (d + 5))
    t_max = g * n ** ((d + 2) / (d + 5))
    log2_2c = math.log2(2.0 / c)
    c_prime = (
        c_m / 2.0
        * math.log2(1.0 / (c * (d + 2)) / log2_2c / c_m)
        * 2.0 ** (4 * (d + 1))
    )
    alpha = c_prime * (1.0 / c_m / log2_2c) ** ((d + 1) / (d + 2))
    span = t_max - t_min
    if span > 1:
        beta = t_min + alpha * span ** ((d + 1) / (d + 2)) * math.log2(span)
    else:
        beta = t_min
    return BoundsOverlay(
        t_min=t_min,
        t_max=t_max,
        eps_n=tc.eps_n,
        alpha=alpha,
        beta=beta,
        mp1=mp1,
        c_precision=c,
        linear_slope=linear_lower_bound(nu, n),
        scale_name=tc.scale.name,
    )


def mean_curve_to_csv(curve: MeanCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T", "R_mean", "R_stderr", "n_seeds"])
        for t, m, s in zip(curve.t_grid, curve.r_mean, curve.r_stderr):
            w.writerow([repr(float(t)), repr(float(m)), repr(float(s)), curve.n_seeds])


def curve_to_csv(curve: RegretCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T", "R"])
        for t, v in zip(curve.t_grid, curve.r):
            w.writerow([repr(float(t)), repr(float(v))])

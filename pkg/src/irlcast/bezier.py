"""Bezier-parameterized trajectories.

Plans become continuous trajectories in three steps: the cell-center
polyline is walked at the target's observed speed to get timestamped
points, a degree-n Bezier curve is fit to them by linear least squares on
the Bernstein design matrix, and the curve is sampled back at t_s / t_f.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nnops import ContractViolation


def bernstein(i: int, n: int, t: float) -> float:
    """C(n,i) t^i (1-t)^(n-i) for 0 <= i <= n, 0 <= t <= 1."""
    if not (0 <= i <= n):
        raise ContractViolation(f"bernstein index {i} outside 0..{n}")
    if not (0.0 <= t <= 1.0):
        raise ContractViolation(f"bernstein parameter {t} outside [0, 1]")
    return math.comb(n, i) * t ** i * (1.0 - t) ** (n - i)


def bernstein_row(n: int, t: float) -> np.ndarray:
    return np.array([bernstein(i, n, t) for i in range(n + 1)])


@dataclass(eq=False)
class BezierCurve:
    control_points: np.ndarray   # (n+1, 2)

    def __post_init__(self):
        self.control_points = np.asarray(self.control_points, dtype=float)
        if self.control_points.ndim != 2 or self.control_points.shape[0] < 1:
            raise ContractViolation("control points must be a (n+1, d) array")
        if not np.all(np.isfinite(self.control_points)):
            raise ContractViolation("control points must be finite")

    @property
    def degree(self) -> int:
        return self.control_points.shape[0] - 1

    def __eq__(self, other):
        return (isinstance(other, BezierCurve)
                and np.array_equal(self.control_points, other.control_points))


def bezier_eval(curve: BezierCurve, t: float) -> np.ndarray:
    """De Casteljau evaluation (numerically stable convex combinations)."""
    if not (0.0 <= t <= 1.0):
        raise ContractViolation(f"curve parameter {t} outside [0, 1]")
    pts = curve.control_points.copy()
    for level in range(curve.degree):
        pts = (1.0 - t) * pts[:-1] + t * pts[1:]
    return pts[0]


def bezier_eval_bernstein(curve: BezierCurve, t: float) -> np.ndarray:
    """Direct Bernstein-sum evaluation; agrees with de Casteljau to 1e-12."""
    return bernstein_row(curve.degree, t) @ curve.control_points


@dataclass(eq=False)
class TrajectoryProposal:
    positions: np.ndarray        # (t_f, 2), position s is curve at s/t_f
    curve: BezierCurve
    cluster_id: int = -1


def sample_at_timestamps(curve: BezierCurve, t_f: int) -> TrajectoryProposal:
    if t_f < 1:
        raise ContractViolation("t_f must be >= 1")
    positions = np.stack([bezier_eval(curve, s / t_f) for s in range(1, t_f + 1)])
    return TrajectoryProposal(positions=positions, curve=curve)


def time_parameterize(waypoints: np.ndarray, v0: float, t_f: int,
                      dt: float) -> np.ndarray:
    """Constant-speed arc-length walk along a polyline.

    Returns (t_f, 2) positions; step k sits at arc length min(k*v0*dt,
    total length), so a plan that runs out of path clamps to its last
    waypoint.
    """
    pts = np.asarray(waypoints, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ContractViolation("time_parameterize requires >= 1 waypoint")
    if v0 < 0:
        raise ContractViolation("v0 must be nonnegative")
    if pts.shape[0] == 1:
        return np.repeat(pts, t_f, axis=0)
    seg = np.diff(pts, axis=0)
    lens = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    targets = np.minimum(np.arange(1, t_f + 1) * v0 * dt, cum[-1])
    out = np.empty((t_f, 2))
    j = np.searchsorted(cum, targets, side="right") - 1
    j = np.clip(j, 0, len(lens) - 1)
    frac = np.where(lens[j] > 0, (targets - cum[j]) / np.where(lens[j] > 0, lens[j], 1.0), 0.0)
    out = pts[j] + frac[:, None] * seg[j]
    return out


def fit_control_points(points: np.ndarray, params: np.ndarray,
                       degree: int) -> tuple[BezierCurve, float]:
    """Least-squares Bezier fit of `points` at curve parameters `params`.

    Solves min ||B p - y||^2 with the Bernstein design matrix through a
    rank-revealing factorization; returns (curve, residual sum of squares).
    Rank-deficient designs (too few distinct parameters) are rejected.
    """
    y = np.asarray(points, dtype=float)
    t = np.asarray(params, dtype=float)
    if y.ndim != 2 or y.shape[0] != t.shape[0]:
        raise ContractViolation("points and params must align")
    if y.shape[0] < degree + 1:
        raise ContractViolation(
            f"need >= {degree + 1} points to fit a degree-{degree} curve")
    design = np.stack([bernstein_row(degree, ti) for ti in t])
    ctrl, rss, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < degree + 1:
        raise ContractViolation(
            f"rank-deficient Bernstein design (rank {rank} < {degree + 1}); "
            "parameters are not distinct enough")
    residual = float(rss.sum()) if rss.size else float(
        np.sum((design @ ctrl - y) ** 2))
    return BezierCurve(ctrl), residual


def fit_proposal(trajectory: np.ndarray, degree: int) -> TrajectoryProposal:
    """Fit a (t_f, 2) trajectory sampled at s/t_f and resample it."""
    t_f = trajectory.shape[0]
    params = np.arange(1, t_f + 1) / t_f
    curve, _ = fit_control_points(trajectory, params, degree)
    return sample_at_timestamps(curve, t_f)

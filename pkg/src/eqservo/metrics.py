"""Pose-accuracy metrics: average model-point distance and correct-servoing rate."""

from __future__ import annotations

import numpy as np

from .geom import RigidTransform


def add_metric(points, gt: RigidTransform, est: RigidTransform) -> float:
    """Mean distance between the model points under two poses.

    ADD = (1/|M|) * sum_x || (R x + T) - (R' x + T') ||
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise ValueError("point set must be a non-empty (N, 3) array")
    return float(np.linalg.norm(gt.apply(pts) - est.apply(pts), axis=1).mean())


def pcs(add_values, eps: float) -> float:
    """Fraction of trials with ADD strictly below the tolerance eps."""
    values = np.asarray(add_values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("need at least one ADD value")
    if eps <= 0:
        raise ValueError("tolerance must be positive")
    return float(np.count_nonzero(values < eps)) / values.size

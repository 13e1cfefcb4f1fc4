"""Planar segment-segment distances with gradients.

Used by the two-link arm system for its collision boundary function. All
routines are vectorized over leading batch dimensions; points are (..., 2)
arrays.
"""

from __future__ import annotations

import numpy as np

_PARALLEL_EPS = 1e-12


def segment_closest_params(p1, p2, q1, q2):
    """Clamped parameters (s, t) of the closest points between segments.

    Segment one is p1 + s*(p2-p1), segment two is q1 + t*(q2-q1) with
    s, t in [0, 1]. Degenerate (near-parallel or zero-length) cases fall
    back deterministically to s = 0 before the re-clamp pass.
    """
    d1 = p2 - p1
    d2 = q2 - q1
    r = p1 - q1
    a = np.sum(d1 * d1, axis=-1)
    e = np.sum(d2 * d2, axis=-1)
    b = np.sum(d1 * d2, axis=-1)
    c = np.sum(d1 * r, axis=-1)
    f = np.sum(d2 * r, axis=-1)

    denom = a * e - b * b
    s = np.where(denom > _PARALLEL_EPS,
                 np.clip((b * f - c * e) / np.where(denom > _PARALLEL_EPS, denom, 1.0), 0.0, 1.0),
                 0.0)
    e_safe = np.where(e > _PARALLEL_EPS, e, 1.0)
    t_raw = (b * s + f) / e_safe
    t = np.clip(t_raw, 0.0, 1.0)
    # When t was clamped the optimal s must be recomputed against the clamp.
    a_safe = np.where(a > _PARALLEL_EPS, a, 1.0)
    s_re = np.clip((b * t - c) / a_safe, 0.0, 1.0)
    s = np.where(t_raw != t, s_re, s)
    return s, t


def segment_distance(p1, p2, q1, q2):
    """Euclidean distance between two segments (batched)."""
    s, t = segment_closest_params(p1, p2, q1, q2)
    diff = (p1 + s[..., None] * (p2 - p1)) - (q1 + t[..., None] * (q2 - q1))
    return np.sqrt(np.sum(diff * diff, axis=-1))


def segment_distance_with_gradients(p1, p2, q1, q2):
    """Distance plus gradients with respect to the four endpoints.

    Returns (dist, gp1, gp2, gq1, gq2). The gradients follow from the
    envelope theorem at the clamped optimum: with u the unit vector from
    the closest point on segment two to the one on segment one,
    d(dist)/dp1 = (1-s)*u and so on. At zero distance the gradient is set
    to zero (the non-smooth point of the norm).
    """
    s, t = segment_closest_params(p1, p2, q1, q2)
    c1 = p1 + s[..., None] * (p2 - p1)
    c2 = q1 + t[..., None] * (q2 - q1)
    diff = c1 - c2
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    safe = np.where(dist > 0.0, dist, 1.0)
    u = diff / safe[..., None]
    u = np.where(dist[..., None] > 0.0, u, 0.0)
    s_ = s[..., None]
    t_ = t[..., None]
    return dist, (1.0 - s_) * u, s_ * u, -(1.0 - t_) * u, -t_ * u


def brute_force_segment_distance(p1, p2, q1, q2, samples: int = 2001) -> float:
    """Dense point-sampling oracle for a single segment pair.

    Independent of the closed-form routine; used to validate it.
    """
    ts = np.linspace(0.0, 1.0, samples)
    a = np.asarray(p1) + ts[:, None] * (np.asarray(p2) - np.asarray(p1))
    b = np.asarray(q1) + ts[:, None] * (np.asarray(q2) - np.asarray(q1))
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    return float(np.sqrt(d2.min()))

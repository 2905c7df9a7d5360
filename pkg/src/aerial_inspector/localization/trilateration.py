"""Position from ranges to known anchors (Gauss-Newton on the range residuals)."""

from dataclasses import dataclass

import numpy as np

from .models import LocalizationError, geometry_rank


class TrilaterationError(LocalizationError):
    pass


@dataclass(frozen=True)
class TrilaterationResult:
    position: np.ndarray
    residual: float  # RMS range error at the solution, m
    iterations: int


def _plane_normal(positions):
    centered = positions - positions.mean(axis=0)
    normal = np.linalg.svd(centered)[2][-1]
    # orient towards +z (the configured half-space), falling back to +x/+y
    for k in (2, 0, 1):
        if abs(normal[k]) > 1e-9:
            return normal if normal[k] > 0 else -normal
    return normal


def _linear_guess(anchors, ranges, coplanar):
    a0, r0 = anchors[0], ranges[0]
    A = 2.0 * (anchors[1:] - a0)
    b = (np.sum(anchors[1:] ** 2, axis=1) - a0 @ a0) - (ranges[1:] ** 2 - r0 ** 2)
    if not coplanar:
        return np.linalg.lstsq(A, b, rcond=None)[0]
    # in-plane solve, then lift off the plane onto the positive side
    normal = _plane_normal(anchors)
    basis = np.linalg.svd(anchors - anchors.mean(axis=0))[2][:2]
    origin = anchors.mean(axis=0)
    uv = np.linalg.lstsq(A @ basis.T, b - A @ origin, rcond=None)[0]
    foot = origin + uv @ basis
    heights = ranges ** 2 - np.sum((anchors - foot) ** 2, axis=1)
    h = np.sqrt(max(float(np.mean(heights)), 0.0))
    return foot + max(h, 0.1) * normal


def trilaterate(measurements, anchors, max_iter=50, tol=1e-12):
    """Least-squares tag position from at least three ranges.

    For coplanar anchors the two mirror solutions fit equally well; the one on
    the positive side of the anchor plane (z >= 0 for ground anchors) is kept.
    """
    ids = [m.anchor_id for m in measurements]
    if len(set(ids)) < 3:
        raise TrilaterationError("need ranges to at least 3 distinct anchors")
    pos = np.array([anchors.position_of(i) for i in ids])
    rng = np.array([m.range for m in measurements], dtype=float)
    rank = geometry_rank(pos)
    if rank < 2:
        raise TrilaterationError("ambiguous solution: anchors are collinear")
    coplanar = rank == 2
    normal = _plane_normal(pos) if coplanar else None
    plane_point = pos.mean(axis=0)

    def reflect(p):
        if coplanar:
            h = (p - plane_point) @ normal
            if h < 0.0:
                p = p - 2.0 * h * normal
        return p

    def residuals(p):
        return rng - np.linalg.norm(p - pos, axis=1)

    p = reflect(_linear_guess(pos, rng, coplanar))
    res = residuals(p)
    cost = res @ res
    for it in range(1, max_iter + 1):
        diff = p - pos
        dist = np.linalg.norm(diff, axis=1)
        if np.any(dist < 1e-12):
            p = p + 1e-6 * (normal if coplanar else np.array([0.0, 0.0, 1.0]))
            continue
        J = diff / dist[:, None]
        step = np.linalg.lstsq(J, res, rcond=None)[0]
        lam = 1.0
        while True:
            cand = reflect(p + lam * step)
            cand_res = residuals(cand)
            cand_cost = cand_res @ cand_res
            if cand_cost <= cost or lam < 1e-6:
                break
            lam *= 0.5
        moved = np.linalg.norm(cand - p)
        p, res, cost = cand, cand_res, cand_cost
        if moved < tol * max(1.0, np.linalg.norm(p)):
            return TrilaterationResult(p, float(np.sqrt(cost / len(rng))), it)
    raise TrilaterationError(f"Gauss-Newton did not converge in {max_iter} iterations")

"""Rigid registration from feature correspondences, scored against ground truth."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFit, NoConsensus, NoGroundTruth
from .geometry import RigidTransform, distances

RANK_TOL = 1e-9


def _point_arrays(correspondences, clouds):
    """``(P, Q)`` point arrays from a correspondence set and its two clouds,
    or from an explicit pair of equal-length arrays when ``clouds`` is None."""
    if clouds is None:
        P, Q = correspondences
        return np.asarray(P, dtype=np.float64), np.asarray(Q, dtype=np.float64)
    src, dst = clouds
    src = getattr(src, "points", src)
    dst = getattr(dst, "points", dst)
    return np.asarray(src)[correspondences.query], np.asarray(dst)[correspondences.target]


def kabsch(P, Q):
    """Least-squares ``R, t`` with ``R P + t ~ Q`` (rows are points)."""
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    Q = np.asarray(Q, dtype=np.float64).reshape(-1, 3)
    if len(P) != len(Q):
        raise ValueError("point sets differ in length")
    if len(P) < 3:
        raise DegenerateFit(f"need at least 3 correspondences, got {len(P)}")
    cp, cq = P.mean(axis=0), Q.mean(axis=0)
    Pc, Qc = P - cp, Q - cq
    sp = np.linalg.svd(Pc, compute_uv=False)
    sq = np.linalg.svd(Qc, compute_uv=False)
    if sp[1] <= RANK_TOL * max(sp[0], 1e-300) or sq[1] <= RANK_TOL * max(sq[0], 1e-300):
        raise DegenerateFit("correspondences are collinear or coincident")
    H = Pc.T @ Qc
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    S = np.diag([1.0, 1.0, d])
    R = Vt.T @ S @ U.T
    # polish against round-off so the result passes the orthonormality check
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    if np.linalg.det(R) < 0:
        u[:, -1] *= -1
        R = u @ vt
    t = cq - R @ cp
    return RigidTransform(R, t)


def fit_rigid(correspondences, clouds=None):
    """Rigid transform mapping the query points onto their matches.

    ``correspondences`` is a :class:`~cgf.matching.CorrespondenceSet` with
    ``clouds = (source, target)``, or a ``(P, Q)`` tuple of point arrays.
    """
    P, Q = _point_arrays(correspondences, clouds)
    return kabsch(P, Q)


def _sse(T, P, Q):
    r = T.apply(P) - Q
    return float((r * r).sum())


@dataclass
class RegistrationResult:
    transform: RigidTransform
    inliers: int
    rmse: float | None = None
    success: bool | None = None
    inlier_mask: np.ndarray | None = None

    def to_json(self):
        return json.dumps({
            "rotation": [float(v) for v in self.transform.rotation.reshape(-1)],
            "translation": [float(v) for v in self.transform.translation],
            "rmse": None if self.rmse is None else float(self.rmse),
            "inliers": int(self.inliers),
            "success": None if self.success is None else bool(self.success),
        }, indent=2) + "\n"


def fit_rigid_robust(correspondences, clouds=None, iterations=1000, inlier_tol=0.05, seed=0):
    """Sample-consensus rigid fit over random 3-point samples.

    The candidate with the most inliers (``|T p - q| <= inlier_tol``) wins;
    ties go to the lower inlier residual, then to the earlier iteration. The
    winner is refit on its inliers. Deterministic for a fixed seed.
    """
    P, Q = _point_arrays(correspondences, clouds)
    m = len(P)
    if m < 3:
        raise DegenerateFit(f"need at least 3 correspondences, got {m}")
    rng = np.random.default_rng(seed)
    best = None  # (count, sse, iteration, mask)
    for it in range(iterations):
        pick = rng.choice(m, size=3, replace=False)
        try:
            T = kabsch(P[pick], Q[pick])
        except DegenerateFit:
            continue
        r = distances(T.apply(P), Q)
        mask = r <= inlier_tol
        count = int(mask.sum())
        if count < 3:
            continue
        sse = float((r[mask] ** 2).sum())
        if best is None or (count, -sse) > (best[0], -best[1]):
            best = (count, sse, it, mask)
    if best is None:
        raise NoConsensus("no sampled model reached 3 inliers")
    mask = best[3]
    try:
        T = kabsch(P[mask], Q[mask])
    except DegenerateFit as exc:
        raise NoConsensus(f"inlier set is degenerate: {exc}") from None
    # the refit can shift the inlier set; keep the larger of the two
    refit_mask = distances(T.apply(P), Q) <= inlier_tol
    if refit_mask.sum() < mask.sum():
        refit_mask = mask
    return RegistrationResult(T, int(refit_mask.sum()), inlier_mask=refit_mask)


def ground_truth_pairs(aligned, i, j, gt_tau):
    """Points of cloud i with a true counterpart in cloud j within ``gt_tau``.

    Returns ``(query, target)`` index arrays.
    """
    idx, d = aligned.world_tree(j).nearest_many(aligned.world(i))
    keep = np.flatnonzero(d <= gt_tau)
    return keep, idx[keep]


def registration_rmse(T_est, aligned, i, j, gt_tau):
    """RMSE between ``T_est p`` and the true position ``T_j^-1 T_i p``.

    ``T_est`` maps cloud i's frame into cloud j's frame. Only points with a
    ground-truth counterpart within ``gt_tau`` count.
    """
    query, _ = ground_truth_pairs(aligned, i, j, gt_tau)
    if len(query) == 0:
        raise NoGroundTruth(f"clouds {i} and {j} share no points within {gt_tau}")
    p = aligned.clouds[i].points[query]
    truth = aligned.relative(i, j).apply(p)
    r = distances(T_est.apply(p), truth)
    return float(np.sqrt(np.mean(r * r)))


def success_threshold(diameter=None):
    """2% of the diameter, or 0.2 for metric data without a diameter."""
    return 0.2 if diameter is None else 0.02 * diameter


def score(result, aligned, i, j, gt_tau, threshold=None):
    """Fill in ``rmse`` and ``success`` of a registration result."""
    if threshold is None:
        threshold = success_threshold(aligned.diameter)
    result.rmse = registration_rmse(result.transform, aligned, i, j, gt_tau)
    result.success = result.rmse < threshold
    return result

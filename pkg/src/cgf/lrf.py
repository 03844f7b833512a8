"""Normals and sign-disambiguated local reference frames.

The frame at ``p`` comes from the distance-weighted scatter matrix of its
neighbors (weights ``r - d``), as popularised by the SHOT descriptor: the
largest-eigenvalue direction is the x axis, the smallest is z, and each sign
is chosen so that most neighbors project non-negatively. Finally the frame
is turned so that z agrees with the estimated normal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateNeighborhood

# rank tests on eigenvalue ratios
RANK_TOL = 1e-12
# margins used only to flag frames that a rigid motion could perturb
GAP_TOL = 1e-6
SIGN_TOL = 1e-9


@dataclass(frozen=True)
class LrfConfig:
    normal_radius: float
    lrf_radius: float

    def __post_init__(self):
        if not (self.normal_radius > 0 and self.lrf_radius > 0):
            raise ValueError("normal_radius and lrf_radius must be positive")

    @classmethod
    def relative(cls, diameter, normal_fraction=0.02, lrf_fraction=0.02):
        return cls(normal_fraction * diameter, lrf_fraction * diameter)


@dataclass(frozen=True, eq=False)
class LocalFrame:
    origin: np.ndarray
    x_axis: np.ndarray
    y_axis: np.ndarray
    z_axis: np.ndarray
    index: int | None = None

    @property
    def axes(self):
        """3x3 matrix whose rows are the x, y and z axes."""
        return np.stack([self.x_axis, self.y_axis, self.z_axis])

    def to_local(self, points):
        return (np.asarray(points, dtype=np.float64) - self.origin) @ self.axes.T

    @classmethod
    def identity(cls, origin=(0.0, 0.0, 0.0), index=None):
        e = np.eye(3)
        return cls(np.asarray(origin, dtype=np.float64), e[0], e[1], e[2], index)


@dataclass(frozen=True, eq=False)
class FrameBatch:
    """Frames for a set of cloud points.

    ``axes[k]`` holds rows x, y, z for point ``indices[k]``; invalid rows are
    zero. ``stable`` marks valid frames whose every discrete decision
    (neighbor membership, eigenvector order, sign votes, normal orientation)
    has a safety margin.
    """

    indices: np.ndarray
    origins: np.ndarray
    axes: np.ndarray
    normals: np.ndarray
    valid: np.ndarray
    stable: np.ndarray

    def __len__(self):
        return len(self.indices)

    def frame(self, k):
        if not self.valid[k]:
            raise DegenerateNeighborhood(f"no valid frame at point {self.indices[k]}")
        a = self.axes[k]
        return LocalFrame(self.origins[k], a[0], a[1], a[2], int(self.indices[k]))


def _neighborhoods(cloud, tree, indices, radius):
    centers = cloud.points[indices]
    offsets, nbr, d = tree.radius_many(centers, radius)
    owner = np.repeat(np.arange(len(indices)), np.diff(offsets))
    keep = nbr != indices[owner]
    return owner[keep], nbr[keep], d[keep]


def _scatter(owner, diff, weights, n):
    """Per-owner weighted sums of outer products ``sum w * d d^T``."""
    M = np.zeros((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s = np.bincount(owner, weights=weights * diff[:, a] * diff[:, b], minlength=n)
            M[:, a, b] = s
            M[:, b, a] = s
    return M


def _group_first(owner, order_keys, n):
    """Position (into the owner array) of the first element of each group
    under the given lexsort keys; -1 for empty groups."""
    order = np.lexsort(tuple(order_keys) + (owner,))
    first = np.full(n, -1, dtype=np.int64)
    sorted_owner = owner[order]
    starts = np.flatnonzero(np.r_[True, sorted_owner[1:] != sorted_owner[:-1]]) if len(owner) else []
    first[sorted_owner[starts]] = order[starts]
    return first


def _orientation_reference(cloud, points):
    """Vectors the normal should point along (non-negative dot product)."""
    if cloud.viewpoint is not None:
        return cloud.viewpoint - points
    return points - cloud.centroid


def estimate_normals(cloud, tree, normal_radius, indices=None):
    """Covariance normals for many points.

    Returns ``(normals, valid, stable)``. Normals point toward the cloud's
    viewpoint when it has one, otherwise away from the cloud centroid.
    """
    indices = np.arange(len(cloud)) if indices is None else np.asarray(indices, dtype=np.int64)
    n = len(indices)
    owner, nbr, d = _neighborhoods(cloud, tree, indices, normal_radius)
    counts = np.bincount(owner, minlength=n)
    # centre on the query point first for numerical stability
    diff = cloud.points[nbr] - cloud.points[indices][owner]
    k = (counts + 1).astype(np.float64)  # the query point itself contributes d = 0
    mean = np.stack([np.bincount(owner, weights=diff[:, a], minlength=n) for a in range(3)], axis=1) / k[:, None]
    cov = _scatter(owner, diff, np.ones(len(owner)), n) / k[:, None, None]
    cov -= mean[:, :, None] * mean[:, None, :]
    lam, vec = np.linalg.eigh(cov)
    normals = vec[:, :, 0].copy()
    valid = (counts >= 3) & (lam[:, 2] > 0) & (lam[:, 1] > RANK_TOL * lam[:, 2])

    ref = _orientation_reference(cloud, cloud.points[indices])
    dots = (normals * ref).sum(axis=1)
    normals[dots < 0] *= -1
    normals[~valid] = 0.0

    on_boundary = np.bincount(owner, weights=(np.abs(d - normal_radius) <= SIGN_TOL * normal_radius), minlength=n) > 0
    stable = (
        valid
        & (lam[:, 1] - lam[:, 0] > GAP_TOL * lam[:, 2])
        & (np.abs(dots) > SIGN_TOL * np.linalg.norm(ref, axis=1))
        & ~on_boundary
    )
    return normals, valid, stable


def estimate_normal(cloud, tree, index, normal_radius):
    normals, valid, _ = estimate_normals(cloud, tree, normal_radius, [index])
    if not valid[0]:
        raise DegenerateNeighborhood(f"cannot estimate a normal at point {index}")
    return normals[0]


def _disambiguate(owner, proj, d, n, farthest):
    """+1/-1 per owner so that most neighbors project non-negatively.

    Exact ties fall back to the sign of the farthest neighbor's projection.
    Also returns a flag telling whether the vote is robust to tiny
    perturbations of the projections.
    """
    pos = np.bincount(owner, weights=(proj >= 0), minlength=n)
    neg = np.bincount(owner, weights=(proj < 0), minlength=n)
    sign = np.where(neg > pos, -1.0, 1.0)
    tie = pos == neg
    has = farthest >= 0
    far_proj = np.zeros(n)
    far_proj[has] = proj[farthest[has]]
    sign[tie & (far_proj < 0)] = -1.0

    scale = np.sqrt(np.bincount(owner, weights=d * d, minlength=n) / np.maximum(pos + neg, 1))
    near_zero = np.bincount(owner, weights=(np.abs(proj) <= SIGN_TOL * scale[owner]), minlength=n)
    robust = (np.abs(pos - neg) > 2 * near_zero) & ~tie
    return sign, robust


def estimate_frames(cloud, tree, config, indices=None):
    """Local reference frames for many points (vectorised)."""
    indices = np.arange(len(cloud)) if indices is None else np.asarray(indices, dtype=np.int64)
    n = len(indices)
    origins = cloud.points[indices]
    normals, n_valid, n_stable = estimate_normals(cloud, tree, config.normal_radius, indices)

    r = config.lrf_radius
    owner, nbr, d = _neighborhoods(cloud, tree, indices, r)
    counts = np.bincount(owner, minlength=n)
    diff = cloud.points[nbr] - origins[owner]
    w = r - d
    wsum = np.bincount(owner, weights=w, minlength=n)
    M = _scatter(owner, diff, w, n) / np.where(wsum > 0, wsum, 1.0)[:, None, None]
    lam, vec = np.linalg.eigh(M)
    x = vec[:, :, 2].copy()
    z = vec[:, :, 0].copy()
    valid = (
        n_valid
        & (counts >= 5)
        & (wsum > 0)
        & (lam[:, 2] > 0)
        & (lam[:, 1] > RANK_TOL * lam[:, 2])
    )

    # farthest neighbor, lowest index on equal distance
    farthest = _group_first(owner, (nbr, -d), n)
    sx, rx = _disambiguate(owner, (diff * x[owner]).sum(axis=1), d, n, farthest)
    sz, rz = _disambiguate(owner, (diff * z[owner]).sum(axis=1), d, n, farthest)
    x *= sx[:, None]
    z *= sz[:, None]

    nz = (normals * z).sum(axis=1)
    flip = np.where(nz < 0, -1.0, 1.0)
    # negating x and z keeps the frame right-handed; y = z cross x is unchanged
    x *= flip[:, None]
    z *= flip[:, None]
    y = np.cross(z, x)

    axes = np.stack([x, y, z], axis=1)
    axes[~valid] = 0.0

    on_boundary = np.bincount(owner, weights=(np.abs(d - r) <= SIGN_TOL * r), minlength=n) > 0
    stable = (
        valid
        & n_stable
        & (lam[:, 1] - lam[:, 0] > GAP_TOL * lam[:, 2])
        & (lam[:, 2] - lam[:, 1] > GAP_TOL * lam[:, 2])
        & rx
        & rz
        & (np.abs(nz) > SIGN_TOL)
        & ~on_boundary
    )
    return FrameBatch(indices, origins, axes, normals, valid, stable)


def estimate_frame(cloud, tree, index, config):
    batch = estimate_frames(cloud, tree, config, [index])
    return batch.frame(0)

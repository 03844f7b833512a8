"""Aligned point-cloud sets, overlap detection, triplet mining and a
synthetic multi-view scan generator."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateCloud, NoCorrespondences, ParseError
from .geometry import KdTree, PointCloud, RigidTransform, load_cloud, random_rigid, save_cloud
from .surfaces import make_surface

OVERLAP_THRESHOLD = 0.3


@dataclass(eq=False)
class AlignedSet:
    """Clouds in their own coordinates plus transforms into a common frame.

    ``transforms[i]`` maps cloud ``i`` into world space.
    """

    clouds: list
    transforms: list
    _eps: float | None = field(default=None, repr=False)
    _world: dict = field(default_factory=dict, repr=False)
    _trees: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.clouds) != len(self.transforms):
            raise ValueError("need exactly one transform per cloud")

    def __len__(self):
        return len(self.clouds)

    def world(self, i):
        if i not in self._world:
            pts = self.transforms[i].apply(self.clouds[i].points)
            pts.setflags(write=False)
            self._world[i] = pts
        return self._world[i]

    def world_tree(self, i):
        if i not in self._trees:
            self._trees[i] = KdTree(self.world(i))
        return self._trees[i]

    def relative(self, i, j):
        """Ground-truth transform taking cloud ``i`` coordinates to cloud ``j``'s."""
        return self.transforms[j].inverse() @ self.transforms[i]

    @property
    def diameter(self):
        """Bounding-box diagonal of all clouds in world space."""
        pts = np.concatenate([self.world(i) for i in range(len(self))])
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))

    @property
    def eps(self):
        if self._eps is None:
            self._eps = compute_eps(self)
        return self._eps


def _lower_median(values):
    values = np.sort(np.asarray(values))
    return float(values[(len(values) - 1) // 2])


def nn_spacing(cloud):
    """Distance from each point to its nearest other point."""
    if len(cloud) < 2:
        raise DegenerateCloud("need at least two points for a nearest-neighbor spacing")
    tree = KdTree(cloud.points)
    # with k=2 the point itself (distance 0) is always among the results
    _, idx = tree._tree.query(cloud.points, k=2)
    a = np.where(idx[:, 0] == np.arange(len(cloud)), idx[:, 1], idx[:, 0])
    diff = cloud.points[a] - cloud.points
    return np.sqrt((diff * diff).sum(axis=1))


def compute_eps(aligned):
    """Largest per-cloud median nearest-neighbor spacing (lower median)."""
    return max(_lower_median(nn_spacing(c)) for c in aligned.clouds)


def overlap_fraction(aligned, i, j, eps=None):
    """Fraction of cloud ``i`` with an aligned counterpart in ``j`` within eps."""
    eps = aligned.eps if eps is None else eps
    _, d = aligned.world_tree(j).nearest_many(aligned.world(i))
    return float(np.count_nonzero(d <= eps)) / len(aligned.clouds[i])


@dataclass(frozen=True)
class OverlapPair:
    i: int
    j: int
    alpha_ij: float
    alpha_ji: float


def find_overlapping_pairs(aligned, threshold=OVERLAP_THRESHOLD, eps=None):
    """All unordered pairs with ``min(alpha_ij, alpha_ji) >= threshold``."""
    pairs = []
    for i in range(len(aligned)):
        for j in range(i + 1, len(aligned)):
            a_ij = overlap_fraction(aligned, i, j, eps)
            a_ji = overlap_fraction(aligned, j, i, eps)
            if min(a_ij, a_ji) >= threshold:
                pairs.append(OverlapPair(i, j, a_ij, a_ji))
    return pairs


# ---------------------------------------------------------------------------
# triplet mining

@dataclass(frozen=True)
class MiningConfig:
    tau: float
    triplets_per_point: int = 40
    hard_negatives_per_point: int = 15
    random_negatives_per_point: int = 25
    max_anchors: int | None = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.hard_negatives_per_point + self.random_negatives_per_point != self.triplets_per_point:
            raise ValueError("hard + random negatives must equal triplets_per_point")


@dataclass(frozen=True, eq=False)
class MinedTriplets:
    """Index triplets: anchors in cloud ``a``, positives/negatives in cloud ``b``."""

    cloud_a: int
    cloud_b: int
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    hard: np.ndarray

    def __len__(self):
        return len(self.anchor)


def _valid_mask(h, n):
    if h is None:
        return np.ones(n, dtype=bool)
    mask = getattr(h, "valid", h)
    return np.asarray(mask, dtype=bool)


def _csr_sample(rng, offsets, counts, rows):
    """One uniformly random CSR position for each entry of ``rows``."""
    return offsets[rows] + (rng.random(len(rows)) * counts[rows]).astype(np.int64)


def mine_triplets(aligned, pair, histograms_i=None, histograms_j=None, config=None, seed=0):
    """Triplets for the ordered pair ``(i, j)``.

    Anchors are valid points of cloud ``i`` with at least one valid point of
    cloud ``j`` within ``tau`` after alignment. For each anchor, positives are
    drawn from that ball, hard negatives from the shell ``tau < d <= 2 tau``
    and random negatives from the rest of cloud ``j``. Anchors whose shell is
    empty get random negatives instead of hard ones.
    """
    i, j = (pair.i, pair.j) if isinstance(pair, OverlapPair) else pair
    rng = np.random.default_rng(seed)
    valid_i = _valid_mask(histograms_i, len(aligned.clouds[i]))
    valid_j = _valid_mask(histograms_j, len(aligned.clouds[j]))
    tau = config.tau

    cand = np.flatnonzero(valid_i)
    offsets, nbr, d = aligned.world_tree(j).radius_many(aligned.world(i)[cand], 2 * tau)
    owner = np.repeat(np.arange(len(cand)), np.diff(offsets))
    keep = valid_j[nbr]
    owner, nbr, d = owner[keep], nbr[keep], d[keep]
    inner = d <= tau

    n_in = np.bincount(owner[inner], minlength=len(cand))
    anchors_k = np.flatnonzero(n_in > 0)
    if len(anchors_k) == 0:
        raise NoCorrespondences(f"no point of cloud {i} has a counterpart in cloud {j} within tau")
    if config.max_anchors is not None and len(anchors_k) > config.max_anchors:
        anchors_k = np.sort(rng.choice(anchors_k, size=config.max_anchors, replace=False))

    # CSR views of the ball and the shell, grouped by candidate
    in_owner, in_nbr = owner[inner], nbr[inner]
    sh_owner, sh_nbr = owner[~inner], nbr[~inner]
    in_off = np.r_[0, np.cumsum(n_in)]
    n_sh = np.bincount(sh_owner, minlength=len(cand))
    sh_off = np.r_[0, np.cumsum(n_sh)]

    H, T = config.hard_negatives_per_point, config.triplets_per_point
    per_anchor = np.repeat(anchors_k, T)
    slot = np.tile(np.arange(T), len(anchors_k))
    positive = in_nbr[_csr_sample(rng, in_off, n_in, per_anchor)]

    hard = (slot < H) & (n_sh[per_anchor] > 0)
    negative = np.empty(len(per_anchor), dtype=np.int64)
    rows = np.flatnonzero(hard)
    negative[rows] = sh_nbr[_csr_sample(rng, sh_off, n_sh, per_anchor[rows])]

    # random negatives avoid each anchor's tau-ball
    pool = np.flatnonzero(valid_j)
    nj = len(aligned.clouds[j])
    forbidden = np.sort(in_owner * nj + in_nbr)
    todo = np.flatnonzero(~hard)
    for _ in range(1000):
        if len(todo) == 0:
            break
        negative[todo] = pool[rng.integers(0, len(pool), size=len(todo))]
        key = per_anchor[todo] * nj + negative[todo]
        pos = np.minimum(np.searchsorted(forbidden, key), len(forbidden) - 1)
        todo = todo[forbidden[pos] == key]
    ok = np.ones(len(per_anchor), dtype=bool)
    ok[todo] = False  # anchors whose ball covers all of cloud j

    anchor = cand[per_anchor]
    return MinedTriplets(i, j, anchor[ok], positive[ok], negative[ok], hard[ok])


def save_triplets(path, mined):
    """Binary cache: magic, record count, then int64 records
    ``(cloud_a, anchor, cloud_b, positive, negative)``."""
    recs = [np.stack([np.full(len(m), m.cloud_a), m.anchor,
                      np.full(len(m), m.cloud_b), m.positive, m.negative], axis=1)
            for m in mined]
    recs = np.concatenate(recs).astype("<i8") if recs else np.zeros((0, 5), "<i8")
    with open(path, "wb") as fh:
        fh.write(b"CGF-TRI1")
        fh.write(struct.pack("<Q", len(recs)))
        fh.write(recs.tobytes())


def load_triplets(path):
    """Inverse of :func:`save_triplets`; returns an (m, 5) int64 array."""
    data = Path(path).read_bytes()
    if data[:8] != b"CGF-TRI1":
        raise ParseError("not a triplet cache (bad magic)")
    if len(data) < 16:
        raise ParseError("truncated triplet cache")
    (count,) = struct.unpack("<Q", data[8:16])
    body = data[16:]
    if len(body) != count * 40:
        raise ParseError(f"triplet cache holds {len(body)} bytes, expected {count * 40}")
    return np.frombuffer(body, dtype="<i8").reshape(count, 5).astype(np.int64)


# ---------------------------------------------------------------------------
# manifests

def save_manifest(path, aligned, names=None):
    """One line per cloud: path, row-major 4x4 transform, optional viewpoint."""
    path = Path(path)
    names = names or [f"cloud_{k:03d}.ply" for k in range(len(aligned))]
    lines = ["# cloud m00 m01 ... m33 [vx vy vz]"]
    for name, cloud, T in zip(names, aligned.clouds, aligned.transforms):
        save_cloud(path.parent / name, cloud)
        vals = [f"{v:.17g}" for v in T.matrix.ravel()]
        if cloud.viewpoint is not None:
            vals += [f"{v:.17g}" for v in cloud.viewpoint]
        lines.append(" ".join([name] + vals))
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path):
    path = Path(path)
    clouds, transforms = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) not in (17, 20):
            raise ParseError("expected a path, 16 matrix entries and an optional viewpoint", lineno)
        try:
            vals = [float(t) for t in tokens[1:]]
            T = RigidTransform.from_matrix(vals[:16])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        cloud = load_cloud(path.parent / tokens[0])
        if len(vals) == 19:
            cloud = PointCloud(cloud.points, cloud.normals, vals[16:])
        clouds.append(cloud)
        transforms.append(T)
    return AlignedSet(clouds, transforms)


# ---------------------------------------------------------------------------
# synthetic scans

@dataclass(frozen=True)
class SynthConfig:
    surface: str = "sphere"
    samples: int = 4000
    views: int = 6
    noise_sigma: float = 0.0
    seed: int = 0
    view_distance: float = 4.0
    translation_scale: float = 1.0
    rig: str = "axes"  # "axes" or "random" (the six-view rig in a random orientation)
    resample_views: bool = False

    def __post_init__(self):
        if self.samples <= 0:
            raise ValueError("samples must be positive")
        if self.views < 2:
            raise ValueError("need at least two views")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.rig not in ("axes", "random"):
            raise ValueError(f"unknown rig {self.rig!r}")


def view_directions(views):
    """Six axis-aligned directions for six views, a Fibonacci sphere otherwise."""
    if views == 6:
        e = np.eye(3)
        return np.array([e[0], -e[0], e[1], -e[1], e[2], -e[2]])
    k = np.arange(views) + 0.5
    z = 1 - 2 * k / views
    phi = k * math.pi * (3 - math.sqrt(5))
    s = np.sqrt(1 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


def poisson_thin(points, delta, rng):
    """Indices of a maximal subset with pairwise distances > delta.

    Luby-style rounds: an undecided point is kept when its random priority
    beats every undecided neighbor; kept points knock out their neighbors.
    """
    tree = KdTree(points)
    offsets, nbr, _ = tree.radius_many(points, delta)
    owner = np.repeat(np.arange(len(points)), np.diff(offsets))
    off_diag = owner != nbr
    owner, nbr = owner[off_diag], nbr[off_diag]
    priority = rng.permutation(len(points)).astype(np.float64)
    state = np.zeros(len(points), dtype=np.int8)  # 0 undecided, 1 kept, -1 removed
    while np.any(state == 0):
        live = (state[owner] == 0) & (state[nbr] == 0)
        best = np.full(len(points), -1.0)
        np.maximum.at(best, owner[live], priority[nbr[live]])
        winners = (state == 0) & (priority > best)
        state[winners] = 1
        hit = winners[owner]
        state[nbr[hit & (state[nbr] == 0)]] = -1
    return np.flatnonzero(state == 1)


def _blue_noise_sample(surface, rng, n, oversample=4):
    """About ``n`` well-spread surface samples (random sequential packing)."""
    pts, nrm = surface.sample(rng, oversample * n)
    spacing = np.median(nn_spacing(PointCloud(pts)))
    # spacing of a uniform sample with density rho is about 0.5 / sqrt(rho)
    area = len(pts) * (2.0 * spacing) ** 2 / 4.0 * 4.0
    delta = math.sqrt(0.696 * area / n)
    keep = poisson_thin(pts, delta, rng)
    return pts[keep], nrm[keep]


def generate_synthetic_set(config):
    """Partial scans of an analytic surface with exact ground-truth poses.

    The surface is sampled once (area-uniform, thinned to blue noise so the
    spacing is as even as in a depth image). Each view crops the points whose
    outward normal faces its viewpoint, adds its own isotropic Gaussian noise
    and is expressed in its own random rigid frame. With ``resample_views``
    every view draws a fresh sample instead. The recorded transform maps the
    view back to world space; each cloud remembers its viewpoint in local
    coordinates.
    """
    rng = np.random.default_rng(config.seed)
    surface = make_surface(config.surface, shape_seed=config.seed)
    directions = view_directions(config.views)
    if config.rig == "random":
        # keeps the views from lining up with axis-aligned faces
        directions = random_rigid(rng, 0.0).apply_vectors(directions)
    shared = None if config.resample_views else _blue_noise_sample(surface, rng, config.samples)
    clouds, transforms = [], []
    for v in directions:
        pts, nrm = shared or _blue_noise_sample(surface, rng, config.samples)
        # the view distance is measured from the origin, surfaces are unit-sized
        eye = config.view_distance * v
        facing = ((eye - pts) * nrm).sum(axis=1) > 0
        pts = pts[facing]
        if config.noise_sigma > 0:
            pts = pts + rng.normal(0.0, config.noise_sigma, size=pts.shape)
        T = random_rigid(rng, config.translation_scale)
        inv = T.inverse()
        clouds.append(PointCloud(inv.apply(pts), viewpoint=inv.apply(eye)))
        transforms.append(T)
    return AlignedSet(clouds, transforms)


def surface_residual(config, aligned):
    """Max |implicit residual| of all views mapped back to world space."""
    surface = make_surface(config.surface, shape_seed=config.seed)
    return max(float(np.abs(surface.residual(aligned.world(i))).max()) for i in range(len(aligned)))

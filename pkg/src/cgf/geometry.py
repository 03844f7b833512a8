"""Points, rigid transforms, exact nearest-neighbor search and cloud I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import EmptyCloud, InvalidRadius, ParseError

ORTHO_TOL = 1e-9
UNIT_TOL = 1e-6

# radius queries are padded by this factor before the exact filter
_RADIUS_PAD = 1e-9


def distances(points, q):
    """Euclidean distances from each row of ``points`` to ``q``.

    Every distance comparison in the package goes through this one formula so
    that closed-ball and nearest-neighbor decisions agree with each other.
    """
    diff = np.asarray(points, dtype=np.float64) - np.asarray(q, dtype=np.float64)
    return np.sqrt((diff * diff).sum(axis=-1))


@dataclass(frozen=True)
class RigidTransform:
    """Rotation followed by translation: ``x -> R @ x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform has non-finite entries")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation has det != +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        if np.abs(m[3] - [0, 0, 0, 1]).max() > ORTHO_TOL:
            raise ValueError("last row of a rigid 4x4 matrix must be 0 0 0 1")
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        """Composition; ``(a @ b)(x) == a(b(x))``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_vectors(self, vectors):
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T


def random_rigid(rng, translation_scale=1.0):
    """Uniformly random rotation and a Gaussian translation."""
    R = Rotation.random(random_state=rng).as_matrix()
    # re-orthonormalize so the strict invariant check always passes
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    t = rng.normal(0.0, translation_scale, size=3)
    return RigidTransform(R, t)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered set of 3D points with optional unit normals.

    ``viewpoint`` is the acquisition position when known (synthetic scans
    record it); it only influences the sign convention of estimated normals.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    viewpoint: np.ndarray | None = None
    diameter: float = field(init=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1 and pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain NaN or Inf")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError("normals must match points in shape")
            if len(nrm) and np.abs(np.linalg.norm(nrm, axis=1) - 1.0).max() > UNIT_TOL:
                raise ValueError("normals must have unit length")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

        if self.viewpoint is not None:
            vp = np.array(self.viewpoint, dtype=np.float64).reshape(3)
            vp.setflags(write=False)
            object.__setattr__(self, "viewpoint", vp)

        if len(pts) == 0:
            diam = 0.0
        else:
            diam = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
        object.__setattr__(self, "diameter", diam)

    def __len__(self):
        return len(self.points)

    @property
    def centroid(self):
        return self.points.mean(axis=0)

    def subset(self, indices):
        indices = np.asarray(indices)
        normals = None if self.normals is None else self.normals[indices]
        return PointCloud(self.points[indices], normals, self.viewpoint)


class KdTree:
    """Exact nearest-neighbor and closed-ball search over points of any dimension.

    Backed by ``scipy.spatial.cKDTree``. Candidates found by the tree are
    re-checked with :func:`distances`, so results are exact with respect to
    that formula. Nearest-neighbor ties resolve to the lowest index.
    """

    def __init__(self, data):
        data = np.array(data, dtype=np.float64)
        if data.ndim != 2 or len(data) == 0:
            raise EmptyCloud("cannot build a k-d tree over zero points")
        data.setflags(write=False)
        self.data = data
        self._tree = cKDTree(data)

    def __len__(self):
        return len(self.data)

    @property
    def dim(self):
        return self.data.shape[1]

    def nearest(self, q):
        idx, dist = self.nearest_many(np.asarray(q, dtype=np.float64)[None, :])
        return int(idx[0]), float(dist[0])

    def nearest_many(self, queries, workers=1):
        """Nearest index and distance for each query row."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, self.dim)
        if len(queries) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        if len(self.data) == 1:
            idx = np.zeros(len(queries), dtype=np.int64)
            return idx, distances(self.data[0], queries)
        d, i = self._tree.query(queries, k=2, workers=workers)
        idx = i[:, 0].astype(np.int64)
        # near-ties get resolved exactly, lowest index first
        close = d[:, 1] <= d[:, 0] * (1.0 + _RADIUS_PAD) + 1e-300
        for row in np.flatnonzero(close):
            cand = self._tree.query_ball_point(
                queries[row], d[row, 0] * (1.0 + 2 * _RADIUS_PAD) + 1e-300
            )
            cand = np.sort(np.asarray(cand, dtype=np.int64))
            dc = distances(self.data[cand], queries[row])
            idx[row] = cand[np.argmin(dc)]
        dist = distances(self.data[idx], queries)
        return idx, dist

    def radius(self, center, radius):
        """Sorted indices of points with distance <= radius (closed ball)."""
        if radius < 0:
            raise InvalidRadius(f"radius must be >= 0, got {radius}")
        center = np.asarray(center, dtype=np.float64)
        cand = self._tree.query_ball_point(center, radius * (1.0 + _RADIUS_PAD) + 1e-300)
        cand = np.sort(np.asarray(cand, dtype=np.int64))
        if len(cand) == 0:
            return cand
        return cand[distances(self.data[cand], center) <= radius]

    def radius_many(self, centers, radius, chunk=2048, sort=True):
        """Closed-ball neighborhoods of many centers.

        Returns ``(offsets, indices, dists)``; the neighbors of center ``k``
        are ``indices[offsets[k]:offsets[k+1]]`` in increasing index order.
        With ``sort=False`` the pairs come back ungrouped (but in a
        deterministic order) as ``(owners, indices, dists)``.
        """
        if radius < 0:
            raise InvalidRadius(f"radius must be >= 0, got {radius}")
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, self.dim)
        padded = radius * (1.0 + _RADIUS_PAD) + 1e-300
        owners, nbrs = [], []
        # spatially coherent blocks keep the dual-tree traversal cheap
        order = cKDTree(centers).indices if len(centers) > chunk else np.arange(len(centers))
        start = 0
        while start < len(centers):
            ids = order[start:start + chunk]
            pairs = cKDTree(centers[ids]).sparse_distance_matrix(
                self._tree, padded, output_type="ndarray"
            )
            owners.append(ids[pairs["i"]].astype(np.int64))
            nbrs.append(pairs["j"].astype(np.int64))
            start += len(ids)
            # aim for a few million pairs per block
            per_center = max(len(pairs) / len(ids), 1.0)
            chunk = int(min(max(4_000_000 / per_center, 256), 65536))
        owner = np.concatenate(owners) if owners else np.zeros(0, np.int64)
        nbr = np.concatenate(nbrs) if nbrs else np.zeros(0, np.int64)
        d = distances(self.data[nbr], centers[owner])
        keep = d <= radius
        owner, nbr, d = owner[keep], nbr[keep], d[keep]
        if not sort:
            return owner, nbr, d
        order = np.argsort(owner * len(self.data) + nbr, kind="stable")
        owner, nbr, d = owner[order], nbr[order], d[order]
        offsets = np.zeros(len(centers) + 1, dtype=np.int64)
        np.cumsum(np.bincount(owner, minlength=len(centers)), out=offsets[1:])
        return offsets, nbr, d


def build_kdtree(cloud):
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if len(points) == 0:
        raise EmptyCloud("cannot build a k-d tree over an empty cloud")
    return KdTree(points)


def radius_neighbors(tree, center, radius):
    return tree.radius(center, radius)


def apply_transform(cloud, T):
    normals = None if cloud.normals is None else T.apply_vectors(cloud.normals)
    viewpoint = None if cloud.viewpoint is None else T.apply(cloud.viewpoint)
    return PointCloud(T.apply(cloud.points), normals, viewpoint)


# ---------------------------------------------------------------------------
# file I/O

def _guess_format(path):
    return "ply_ascii" if Path(path).suffix.lower() == ".ply" else "xyz"


def _parse_floats(tokens, lineno):
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"non-numeric value in {' '.join(tokens)!r}", lineno) from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError("NaN or Inf component", lineno)
    return vals


def _finish(points, normals, lineno):
    points = np.array(points, dtype=np.float64).reshape(-1, 3)
    if normals is None:
        return PointCloud(points)
    normals = np.array(normals, dtype=np.float64).reshape(-1, 3)
    norms = np.linalg.norm(normals, axis=1)
    if np.any(norms == 0):
        raise ParseError("zero-length normal", lineno)
    off = np.abs(norms - 1.0) > UNIT_TOL
    normals[off] /= norms[off, None]
    return PointCloud(points, normals)


def _load_xyz(path):
    points, normals, ncols = [], [], None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) not in (3, 6):
                raise ParseError(f"expected 3 or 6 columns, got {len(tokens)}", lineno)
            if ncols is None:
                ncols = len(tokens)
            elif len(tokens) != ncols:
                raise ParseError(f"expected {ncols} columns, got {len(tokens)}", lineno)
            vals = _parse_floats(tokens, lineno)
            points.append(vals[:3])
            if ncols == 6:
                normals.append(vals[3:])
    return _finish(points, normals if ncols == 6 else None, None)


def _load_ply(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    elements = []  # (name, count, [property names])
    lineno = 1
    header_end = None
    while lineno < len(lines):
        line = lines[lineno].strip()
        lineno += 1
        tokens = line.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise ParseError("only ASCII PLY is supported", lineno)
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise ParseError("malformed element line", lineno)
            try:
                count = int(tokens[2])
            except ValueError:
                raise ParseError("element count is not an integer", lineno) from None
            elements.append((tokens[1], count, []))
        elif tokens[0] == "property":
            if not elements:
                raise ParseError("property before any element", lineno)
            if len(tokens) >= 2 and tokens[1] == "list":
                if elements[-1][0] == "vertex":
                    raise ParseError("list properties on vertices are not supported", lineno)
                elements[-1][2].append(tokens[-1])
            elif len(tokens) == 3:
                elements[-1][2].append(tokens[2])
            else:
                raise ParseError("malformed property line", lineno)
        elif tokens[0] == "end_header":
            header_end = lineno
            break
        else:
            raise ParseError(f"unexpected header keyword {tokens[0]!r}", lineno)
    if header_end is None:
        raise ParseError("missing end_header", lineno)

    row = header_end
    points, normals = [], []
    has_vertex = False
    for name, count, props in elements:
        if name != "vertex":
            # rows of other elements are skipped
            row += count
            continue
        has_vertex = True
        try:
            cols = [props.index(c) for c in ("x", "y", "z")]
        except ValueError:
            raise ParseError("vertex element lacks x, y, z properties", header_end) from None
        ncols = None
        if all(c in props for c in ("nx", "ny", "nz")):
            ncols = [props.index(c) for c in ("nx", "ny", "nz")]
        for _ in range(count):
            if row >= len(lines):
                raise ParseError("file ends before all vertices were read", row + 1)
            tokens = lines[row].split()
            row += 1
            if len(tokens) != len(props):
                raise ParseError(f"expected {len(props)} values, got {len(tokens)}", row)
            vals = _parse_floats(tokens, row)
            points.append([vals[c] for c in cols])
            if ncols is not None:
                normals.append([vals[c] for c in ncols])
    if not has_vertex:
        raise ParseError("no vertex element", header_end)
    return _finish(points, normals if normals else None, None)


def load_cloud(path, format=None):
    """Load an ASCII PLY or XYZ text cloud; points keep file order."""
    format = format or _guess_format(path)
    if format == "xyz":
        return _load_xyz(path)
    if format == "ply_ascii":
        return _load_ply(path)
    raise ValueError(f"unknown cloud format {format!r}")


def save_cloud(path, cloud, format=None):
    """Write a cloud losslessly (17 significant digits)."""
    format = format or _guess_format(path)
    cols = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    rows = "\n".join(" ".join(f"{v:.17g}" for v in r) for r in cols)
    with open(path, "w") as fh:
        if format == "ply_ascii":
            names = ["x", "y", "z"] + ([] if cloud.normals is None else ["nx", "ny", "nz"])
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(cloud)}\n")
            for n in names:
                fh.write(f"property double {n}\n")
            fh.write("end_header\n")
        elif format != "xyz":
            raise ValueError(f"unknown cloud format {format!r}")
        if rows:
            fh.write(rows + "\n")

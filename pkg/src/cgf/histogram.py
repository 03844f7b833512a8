"""Spherical histograms: the high-dimensional network input.

A sphere of radius ``r`` around each point is cut into ``R`` logarithmic
radial shells, ``E`` elevation bands measured from the frame's z axis and
``A`` azimuth sectors measured from its x axis. Bins are linearised
radial-major: ``j*E*A + e*A + a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import build_kdtree
from .lrf import estimate_frames
from .errors import ParseError

OUTSIDE = -1


@dataclass(frozen=True)
class HistogramConfig:
    radial_bins: int = 17
    elevation_bins: int = 11
    azimuth_bins: int = 12
    r: float = 1.2
    r_min: float = 0.1

    def __post_init__(self):
        if min(self.radial_bins, self.elevation_bins, self.azimuth_bins) < 1:
            raise ValueError("bin counts must be >= 1")
        if not (0 < self.r_min < self.r):
            raise ValueError("need 0 < r_min < r")

    @property
    def size(self):
        return self.radial_bins * self.elevation_bins * self.azimuth_bins

    @classmethod
    def relative(cls, diameter, r_fraction=0.17, r_min_fraction=0.015, **bins):
        """Radii as fractions of a model diameter (laser-scan convention)."""
        return cls(r=r_fraction * diameter, r_min=r_min_fraction * diameter, **bins)


def radial_thresholds(config):
    """The R+1 shell radii ``t_i = exp(ln r_min + i/R ln(r/r_min))``."""
    R = config.radial_bins
    i = np.arange(R + 1)
    t = np.exp(math.log(config.r_min) + i / R * math.log(config.r / config.r_min))
    t[0] = config.r_min
    t[-1] = config.r
    return t


def bin_indices_local(config, local):
    """Linear bin index of points given in frame coordinates.

    ``local`` has shape (k, 3); points beyond ``r`` get ``OUTSIDE``. A point
    at the origin lands in bin 0.
    """
    local = np.asarray(local, dtype=np.float64).reshape(-1, 3)
    R, E, A = config.radial_bins, config.elevation_bins, config.azimuth_bins
    lx, ly, lz = local[:, 0], local[:, 1], local[:, 2]
    rho = np.hypot(lx, ly)
    d = np.sqrt(lx * lx + ly * ly + lz * lz)

    t = radial_thresholds(config)
    # bin 0 spans [0, t_1); the last shell is closed at r
    radial = np.searchsorted(t[1:R], d, side="right")

    theta = np.arctan2(rho, lz)  # [0, pi]
    theta[d == 0] = 0.0  # arctan2(0, -0.0) is pi
    elev = np.minimum((theta / (math.pi / E)).astype(np.int64), E - 1)

    phi = np.arctan2(ly, lx)
    phi = np.where(phi < 0, phi + 2 * math.pi, phi)
    phi[rho == 0] = 0.0  # on the z axis, signed zeros would give pi
    azim = np.minimum((phi / (2 * math.pi / A)).astype(np.int64), A - 1)

    idx = radial * (E * A) + elev * A + azim
    idx[d > config.r] = OUTSIDE
    return idx


def bin_index(config, frame, q):
    """Bin of a single point ``q`` relative to ``frame``, or ``OUTSIDE``."""
    return int(bin_indices_local(config, frame.to_local(np.asarray(q)[None, :]))[0])


def boundary_margin(config, local):
    """Distance-like slack between each local point and its nearest bin wall.

    Radial walls are measured along the radius, angular walls as arc length.
    Used to exclude points whose bin could change under rounding.
    """
    local = np.asarray(local, dtype=np.float64).reshape(-1, 3)
    R, E, A = config.radial_bins, config.elevation_bins, config.azimuth_bins
    lx, ly, lz = local[:, 0], local[:, 1], local[:, 2]
    rho = np.hypot(lx, ly)
    d = np.sqrt(lx * lx + ly * ly + lz * lz)
    t = radial_thresholds(config)
    m_rad = np.abs(d[:, None] - t[None, 1:]).min(axis=1)

    theta = np.arctan2(rho, lz)
    if E > 1:
        walls = np.arange(1, E) * (math.pi / E)
        m_el = d * np.abs(theta[:, None] - walls[None, :]).min(axis=1)
    else:
        m_el = np.full(len(d), np.inf)

    phi = np.mod(np.arctan2(ly, lx), 2 * math.pi)
    if A > 1:
        walls = np.arange(A + 1) * (2 * math.pi / A)
        m_az = rho * np.abs(phi[:, None] - walls[None, :]).min(axis=1)
    else:
        m_az = np.full(len(d), np.inf)
    return np.minimum(np.minimum(m_rad, m_el), m_az)


@dataclass(frozen=True, eq=False)
class SphericalHistogram:
    values: np.ndarray
    config: HistogramConfig

    @property
    def count(self):
        return int(np.count_nonzero(self.values))


def _neighbor_bins(cloud, tree, centers, center_ids, axes, config):
    owner, nbr, _ = tree.radius_many(centers, config.r, sort=False)
    keep = nbr != center_ids[owner]
    owner, nbr = owner[keep], nbr[keep]
    diff = cloud.points[nbr] - centers[owner]
    local = np.einsum("kij,kj->ki", axes[owner], diff)
    return owner, nbr, local


def neighbor_bins(cloud, tree, frames, config, with_margin=False):
    """Per-neighbor bin assignments for a batch of frames.

    Returns ``(owner, neighbor, bins)`` (plus margins if requested), where
    ``owner`` indexes into ``frames``. The center point is excluded.
    """
    owner, nbr, local = _neighbor_bins(
        cloud, tree, frames.origins, frames.indices, frames.axes, config
    )
    bins = bin_indices_local(config, local)
    if with_margin:
        return owner, nbr, bins, boundary_margin(config, local)
    return owner, nbr, bins


def compute_histogram(cloud, tree, frame, config):
    """Normalised neighbor counts around ``frame.origin``.

    The frame's own point (``frame.index``) is not counted. An empty
    neighborhood yields the all-zero vector.
    """
    center_id = -1 if frame.index is None else frame.index
    owner, _, local = _neighbor_bins(
        cloud, tree, frame.origin[None, :], np.array([center_id]), frame.axes[None], config
    )
    bins = bin_indices_local(config, local)
    values = np.bincount(bins, minlength=config.size).astype(np.float64)
    if len(bins):
        values /= len(bins)
    return SphericalHistogram(values, config)


@dataclass(frozen=True, eq=False)
class HistogramBatch:
    """One histogram row per cloud point plus a validity flag."""

    values: np.ndarray
    valid: np.ndarray
    config: HistogramConfig

    def __len__(self):
        return len(self.values)

    @property
    def valid_indices(self):
        return np.flatnonzero(self.valid)

    def save(self, path):
        c = self.config
        with open(path, "w") as fh:
            fh.write(f"CGFH {c.radial_bins} {c.elevation_bins} {c.azimuth_bins} "
                     f"{c.r!r} {c.r_min!r} {len(self)}\n")
            for flag, row in zip(self.valid, self.values):
                fh.write(("1 " if flag else "0 ") + " ".join(
                    "0" if v == 0 else repr(float(v)) for v in row) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            lines = [(no, ln.split("#", 1)[0].split()) for no, ln in enumerate(fh, start=1)]
        lines = [(no, tok) for no, tok in lines if tok]
        if not lines or lines[0][1][0] != "CGFH" or len(lines[0][1]) != 7:
            raise ParseError("missing or malformed CGFH header", lines[0][0] if lines else 1)
        head = lines[0][1]
        try:
            config = HistogramConfig(int(head[1]), int(head[2]), int(head[3]),
                                     float(head[4]), float(head[5]))
            count = int(head[6])
        except ValueError as exc:
            raise ParseError(f"bad header: {exc}", lines[0][0]) from None
        rows = lines[1:]
        if len(rows) != count:
            raise ParseError(f"header promises {count} rows, found {len(rows)}", lines[-1][0])
        values = np.zeros((count, config.size))
        valid = np.zeros(count, dtype=bool)
        for k, (no, tok) in enumerate(rows):
            if len(tok) != config.size + 1 or tok[0] not in ("0", "1"):
                raise ParseError(f"expected flag plus {config.size} values", no)
            valid[k] = tok[0] == "1"
            try:
                values[k] = [float(v) for v in tok[1:]]
            except ValueError:
                raise ParseError("non-numeric histogram entry", no) from None
        return cls(values, valid, config)


def featurize_cloud(cloud, config, lrf_config, tree=None, chunk=1024, out=None):
    """Histograms for every point of ``cloud``.

    Points whose frame is degenerate, or that have no neighbors, are flagged
    invalid and get an all-zero row. ``out`` is an optional preallocated
    (n, N) float64 array to fill in place.
    """
    n = len(cloud)
    if out is None:
        values = np.zeros((n, config.size))
    else:
        if out.shape != (n, config.size) or out.dtype != np.float64:
            raise ValueError("out must be a float64 array of shape (n, N)")
        values = out
    valid = np.zeros(n, dtype=bool)
    if n == 0:
        return HistogramBatch(values, valid, config)
    tree = tree or build_kdtree(cloud)
    frames = estimate_frames(cloud, tree, lrf_config)
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        ids = frames.indices[sl]
        owner, _, local = _neighbor_bins(
            cloud, tree, frames.origins[sl], ids, frames.axes[sl], config
        )
        bins = bin_indices_local(config, local)
        m = len(ids)
        counts = np.bincount(owner, minlength=m)
        block = np.bincount(owner * config.size + bins, minlength=m * config.size)
        block = block.reshape(m, config.size).astype(np.float64)
        ok = frames.valid[sl] & (counts > 0)
        block[ok] /= counts[ok, None]
        block[~ok] = 0.0
        values[sl] = block
        valid[sl] = ok
    return HistogramBatch(values, valid, config)

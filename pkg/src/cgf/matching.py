"""Correspondence search in feature space, precision curves and the PCA baseline."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .errors import EmptyTarget, InsufficientSamples, NoRetainedMatches, ShapeError
from .geometry import KdTree, distances


@dataclass(frozen=True, eq=False)
class Features:
    """Feature vectors of a subset of a cloud's points (``index`` into the cloud)."""

    index: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        index = np.asarray(self.index, dtype=np.int64).reshape(-1)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 and values.size == 0:
            values = values.reshape(0, 0)
        if values.ndim != 2 or len(values) != len(index):
            raise ShapeError("need one feature row per index")
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.index)

    @property
    def dim(self):
        return self.values.shape[1]

    @classmethod
    def dense(cls, values):
        values = np.asarray(values, dtype=np.float64)
        return cls(np.arange(len(values)), values)


def feature_tree(features):
    """Exact k-d tree over feature vectors."""
    if len(features) == 0:
        raise EmptyTarget("cannot search an empty feature set")
    return KdTree(features.values)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Matched point pairs ``(query[k], target[k])`` between clouds i and j."""

    query: np.ndarray
    target: np.ndarray
    residual: np.ndarray | None = None

    def __len__(self):
        return len(self.query)

    def take(self, mask):
        res = None if self.residual is None else self.residual[mask]
        return CorrespondenceSet(self.query[mask], self.target[mask], res)

    @property
    def pairs(self):
        return np.stack([self.query, self.target], axis=1)


def match(features_i, features_j, tree=None):
    """Nearest neighbor in ``features_j`` for every feature of ``features_i``.

    Ties resolve to the lowest row of ``features_j``.
    """
    if len(features_j) == 0:
        raise EmptyTarget("target feature set is empty")
    if len(features_i) and features_i.dim != features_j.dim:
        raise ShapeError(f"feature dims differ: {features_i.dim} vs {features_j.dim}")
    tree = tree or feature_tree(features_j)
    rows, _ = tree.nearest_many(features_i.values)
    return CorrespondenceSet(features_i.index.copy(), features_j.index[rows])


def world_residuals(corr, aligned, i, j):
    """``|T_i p - T_j q|`` for every correspondence."""
    return distances(aligned.world(i)[corr.query], aligned.world(j)[corr.target])


def prune_unmatched(corr, aligned, i, j, tau):
    """Keep correspondences whose query has a true counterpart within ``tau``.

    A counterpart is any point of cloud j whose aligned position lies within
    ``tau`` of the aligned query. Residuals are attached to the result.
    """
    _, d = aligned.world_tree(j).nearest_many(aligned.world(i)[corr.query])
    kept = corr.take(d <= tau)
    return CorrespondenceSet(kept.query, kept.target, world_residuals(kept, aligned, i, j))


@dataclass(frozen=True, eq=False)
class PrecisionCurve:
    thresholds: np.ndarray
    fractions: np.ndarray
    retained: int

    def at(self, x):
        """Fraction at the largest threshold not exceeding ``x``."""
        k = np.searchsorted(self.thresholds, x, side="right") - 1
        return float(self.fractions[k]) if k >= 0 else 0.0


def precision_from_residuals(residuals, thresholds):
    residuals = np.sort(np.asarray(residuals, dtype=np.float64))
    if len(residuals) == 0:
        raise NoRetainedMatches("no correspondences left after pruning")
    thresholds = np.sort(np.asarray(thresholds, dtype=np.float64))
    counts = np.searchsorted(residuals, thresholds, side="right")
    return PrecisionCurve(thresholds, counts / len(residuals), len(residuals))


def precision_curve(corr_pruned, aligned, i, j, thresholds):
    """Fraction of retained matches with world residual ``<= x`` for each ``x``."""
    if len(corr_pruned) == 0:
        raise NoRetainedMatches("no correspondences left after pruning")
    res = corr_pruned.residual
    if res is None:
        res = world_residuals(corr_pruned, aligned, i, j)
    return precision_from_residuals(res, thresholds)


def default_thresholds(diameter=None, count=40):
    """Evenly spaced thresholds on [0, 3% of diameter], or [0, 0.25] if no
    diameter is given (metric data)."""
    top = 0.25 if diameter is None else 0.03 * diameter
    return np.linspace(0.0, top, count)


# ---------------------------------------------------------------------------
# PCA baseline

@dataclass(frozen=True, eq=False)
class PcaEmbedder:
    mean: np.ndarray
    projection: np.ndarray  # (n, N), orthonormal rows
    variances: np.ndarray

    @property
    def output_dim(self):
        return self.projection.shape[0]

    def __call__(self, x):
        return pca_embed(self, x)


def _fix_signs(vectors):
    """Make the largest-magnitude entry of each row positive."""
    k = np.argmax(np.abs(vectors), axis=1)
    s = np.sign(vectors[np.arange(len(vectors)), k])
    s[s == 0] = 1.0
    return vectors * s[:, None]


def fit_pca(histograms, n):
    """Top-``n`` principal directions of the centered sample rows."""
    X = np.asarray(histograms, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("expected a 2-D sample matrix")
    m, N = X.shape
    if m < n + 1:
        raise InsufficientSamples(f"need at least {n + 1} samples for {n} components, got {m}")
    if n > N:
        raise ShapeError(f"cannot keep {n} components of {N}-dim data")
    mean = X.mean(axis=0)
    Xc = X - mean
    if m >= N:
        w, V = np.linalg.eigh(Xc.T @ Xc / (m - 1))
        order = np.argsort(w)[::-1][:n]
        vectors = V[:, order].T
        var = w[order]
    else:
        # Gram route: eigenvectors of Xc Xc^T map to directions via Xc^T
        w, U = np.linalg.eigh(Xc @ Xc.T / (m - 1))
        order = np.argsort(w)[::-1][:n]
        vectors = (Xc.T @ U[:, order]).T
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        var = w[order]
    return PcaEmbedder(mean, _fix_signs(vectors), np.maximum(var, 0.0))


def pca_embed(embedder, histogram):
    x = np.asarray(histogram, dtype=np.float64)
    if x.shape[-1] != len(embedder.mean):
        raise ShapeError(f"expected {len(embedder.mean)}-dim input, got {x.shape[-1]}")
    return (x - embedder.mean) @ embedder.projection.T


# ---------------------------------------------------------------------------
# timing

def time_queries(features_i, tree_over_j, repeats=3):
    """Mean wall-clock seconds per nearest-neighbor query, single-threaded.

    Runs every query of ``features_i`` ``repeats`` times.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    values = getattr(features_i, "values", features_i)
    values = np.asarray(values, dtype=np.float64)
    tree = tree_over_j._tree
    tree.query(values[: min(len(values), 64)], k=1, workers=1)  # warm-up
    start = time.perf_counter()
    for _ in range(repeats):
        tree.query(values, k=1, workers=1)
    elapsed = time.perf_counter() - start
    return elapsed / (len(values) * repeats)


# ---------------------------------------------------------------------------
# CSV output

def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_correspondences_csv(path, corr):
    res = corr.residual if corr.residual is not None else [float("nan")] * len(corr)
    _write_rows(path, ["query_idx", "match_idx", "residual"],
                ([int(q), int(t), repr(float(r))] for q, t, r in zip(corr.query, corr.target, res)))


def read_correspondences_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    q = np.array([int(r[0]) for r in rows], dtype=np.int64)
    t = np.array([int(r[1]) for r in rows], dtype=np.int64)
    res = np.array([float(r[2]) for r in rows])
    return CorrespondenceSet(q, t, None if np.isnan(res).all() else res)


def write_precision_csv(path, curve):
    _write_rows(path, ["threshold", "fraction"],
                ([repr(float(x)), repr(float(f))] for x, f in zip(curve.thresholds, curve.fractions)))


def write_timing_csv(path, rows):
    """``rows`` of ``(feature, dim, mean_ms)``."""
    _write_rows(path, ["feature", "dim", "mean_ms"],
                ([name, int(dim), repr(float(ms))] for name, dim, ms in rows))


def write_features_csv(path, features):
    _write_rows(path, ["index"] + [f"f{k}" for k in range(features.dim)],
                ([int(i)] + [repr(float(v)) for v in row]
                 for i, row in zip(features.index, features.values)))


def read_features_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    if not rows:
        return Features(np.zeros(0, np.int64), np.zeros((0, 0)))
    index = np.array([int(r[0]) for r in rows], dtype=np.int64)
    values = np.array([[float(v) for v in r[1:]] for r in rows])
    return Features(index, values)

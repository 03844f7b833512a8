"""Worked examples with hand-derived or brute-force expected values."""

import numpy as np
import pytest

from cgf.dataset import (
    AlignedSet,
    SynthConfig,
    compute_eps,
    find_overlapping_pairs,
    generate_synthetic_set,
    overlap_fraction,
)
from cgf.geometry import KdTree, PointCloud, RigidTransform, random_rigid
from cgf.histogram import HistogramBatch, HistogramConfig, featurize_cloud
from cgf.lrf import LrfConfig
from cgf.matching import (
    CorrespondenceSet,
    Features,
    fit_pca,
    match,
    precision_curve,
    prune_unmatched,
)
from cgf.net import (
    AdamState,
    EmbeddingNet,
    IndexedTriplets,
    NetConfig,
    adam_step,
    embed_all,
    init_net,
    load_model,
    save_model,
    train,
)
from cgf.registration import RegistrationResult, fit_rigid, fit_rigid_robust, registration_rmse


# geometry -------------------------------------------------------------------

def test_unit_cube_nearest_against_linear_scan():
    rng = np.random.default_rng(0)
    data = rng.uniform(size=(1000, 3))
    tree = KdTree(data)
    for q in rng.uniform(size=(100, 3)):
        d = np.sqrt(((data - q) ** 2).sum(axis=1))
        assert tree.nearest(q) == (int(np.argmin(d)), float(d.min()))


def test_grid_radius_one_gives_six_axis_neighbors():
    g = np.arange(-2, 3, dtype=float)
    grid = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    got = grid[KdTree(grid).radius([0.0, 0, 0], 1.0)]
    want = {(0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)}
    assert {tuple(p) for p in got.astype(int)} == want


# net ------------------------------------------------------------------------

def test_weight_block_statistics():
    w = init_net(NetConfig(512, (512,), 4), seed=0).weights[1]
    assert w.shape == (4, 512)
    big = init_net(NetConfig(512, (512, 512), 4), seed=0).weights[1]
    assert big.shape == (512, 512)
    assert abs(big.mean()) < 0.002 and abs(big.std() - 0.1) < 0.005


def test_dead_hidden_layer_outputs_the_last_bias():
    w1 = -np.ones((4, 3))
    b1 = -np.ones(4)
    w2 = np.arange(8.0).reshape(2, 4)
    b2 = np.array([0.5, -2.0])
    net = EmbeddingNet([w1, w2], [b1, b2])
    x = np.abs(np.random.default_rng(1).normal(size=(10, 3)))
    assert np.array_equal(net(x), np.tile(b2, (10, 1)))


def test_first_adam_step_by_hand():
    net = EmbeddingNet([np.array([[2.0]])], [np.array([0.0])])
    state = AdamState.for_net(net, lr=1e-4, eps=1e-8)
    adam_step(net, state, [np.array([[0.5]]), np.array([0.0])])
    assert net.weights[0][0, 0] - 2.0 == pytest.approx(-1e-4 * 0.5 / (0.5 + 1e-8), rel=1e-9)
    assert net.biases[0][0] == 0.0


def _class_histograms(kind, n, rng):
    cfg = HistogramConfig(3, 2, 4, r=0.3, r_min=0.03)
    if kind == "sphere":
        u = rng.normal(size=(n, 3))
        pts = u / np.linalg.norm(u, axis=1, keepdims=True)
    else:
        pts = np.c_[rng.uniform(-1, 1, size=(n, 2)), np.zeros(n)]
    b = featurize_cloud(PointCloud(pts, viewpoint=np.array([0.0, 0, 5])), cfg, LrfConfig(0.2, 0.2))
    return b.values[b.valid]


def test_toy_two_surface_task_reduces_loss():
    rng = np.random.default_rng(2)
    S, P = _class_histograms("sphere", 1500, rng), _class_histograms("plane", 1500, rng)
    pool = np.r_[S, P]
    m = 3000
    cls = rng.integers(0, 2, size=m)
    off = np.where(cls == 0, 0, len(S))
    size = np.where(cls == 0, len(S), len(P))
    other_off = np.where(cls == 0, len(S), 0)
    other_size = np.where(cls == 0, len(P), len(S))
    a = off + (rng.random(m) * size).astype(int)
    p = off + (rng.random(m) * size).astype(int)
    n = other_off + (rng.random(m) * other_size).astype(int)
    net = init_net(NetConfig(pool.shape[1], (32, 32), 4), 0)
    res = train(net, IndexedTriplets(pool, a, p, n), epochs=3, batch_size=128, seed=0, lr=1e-3)
    means = res.epoch_means()
    assert means[-1] < means[0]


def test_epoch_orders_differ():
    rng = np.random.default_rng(3)
    pool = rng.normal(size=(50, 4))
    idx = np.arange(50)
    res = train(init_net(NetConfig(4, (3,), 2), 0), IndexedTriplets(pool, idx, idx, idx[::-1]),
                epochs=3, batch_size=16, seed=4, keep_permutations=True)
    perms = [tuple(p) for p in res.permutations]
    assert len(set(perms)) == 3


def test_saved_model_gives_bitwise_equal_outputs(tmp_path):
    net = init_net(NetConfig(20, (16, 16), 5), 9)
    save_model(tmp_path / "m.cgf", net)
    x = np.random.default_rng(5).normal(size=(100, 20))
    assert np.array_equal(load_model(tmp_path / "m.cgf")(x), net(x))


def test_batch_embedding_equals_point_by_point():
    net = init_net(NetConfig(12, (8,), 3), 1)
    X = np.random.default_rng(6).normal(size=(30, 12))
    _, batch = embed_all(net, X)
    # matrix-matrix and matrix-vector BLAS paths may round differently
    np.testing.assert_allclose(batch, np.array([net(x) for x in X]), rtol=1e-12, atol=1e-15)


# dataset --------------------------------------------------------------------

def test_eps_of_unit_spaced_line():
    line = PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]]))
    assert compute_eps(AlignedSet([line], [RigidTransform.identity()])) == 1.0


def test_four_of_ten_points_overlap():
    A = np.c_[np.arange(10.0), np.zeros(10), np.zeros(10)]
    B = np.r_[A[:4] + [0, 0.05, 0], A[4:] + [0, 50, 0]]
    T = random_rigid(np.random.default_rng(7))
    s = AlignedSet([PointCloud(A), PointCloud(T.inverse().apply(B))], [RigidTransform.identity(), T])
    assert overlap_fraction(s, 0, 1, eps=0.1) == 0.4


def test_adjacent_axis_views_of_a_sphere_overlap():
    s = generate_synthetic_set(SynthConfig("sphere", samples=3000, seed=0))
    pairs = {(p.i, p.j): p for p in find_overlapping_pairs(s)}
    # views are +x, -x, +y, -y, +z, -z; adjacent means perpendicular
    for i in range(6):
        for j in range(i + 1, 6):
            if i // 2 != j // 2:
                assert (i, j) in pairs
                assert min(pairs[i, j].alpha_ij, pairs[i, j].alpha_ji) >= 0.3


# matching -------------------------------------------------------------------

def test_500_random_32d_features_match_linear_scan():
    rng = np.random.default_rng(8)
    Fi, Fj = rng.normal(size=(500, 32)), rng.normal(size=(500, 32))
    corr = match(Features.dense(Fi), Features.dense(Fj))
    want = [int(np.argmin(((Fj - f) ** 2).sum(axis=1))) for f in Fi]
    assert corr.target.tolist() == want


def test_half_overlap_retained_count():
    rng = np.random.default_rng(9)
    A = rng.uniform(size=(200, 3))
    B = A + [0.5, 0, 0]
    s = AlignedSet([PointCloud(A), PointCloud(B)], [RigidTransform.identity()] * 2)
    tau = 0.05
    corr = CorrespondenceSet(np.arange(200), rng.integers(0, 200, size=200))
    kept = prune_unmatched(corr, s, 0, 1, tau)
    brute = sum(np.sqrt(((B - a) ** 2).sum(axis=1)).min() <= tau for a in A)
    assert len(kept) == brute and 0 < brute < 200


def test_world_coordinates_as_features_are_perfect():
    s = generate_synthetic_set(SynthConfig("torus", samples=2000, seed=1, rig="random"))
    p = find_overlapping_pairs(s)[0]
    fi = Features.dense(s.world(p.i))
    fj = Features.dense(s.world(p.j))
    pruned = prune_unmatched(match(fi, fj), s, p.i, p.j, s.eps)
    curve = precision_curve(pruned, s, p.i, p.j, [s.eps, 2 * s.eps])
    assert np.all(curve.fractions == 1.0)


def test_random_features_match_at_chance():
    rng = np.random.default_rng(10)
    centers = rng.uniform(-100, 100, size=(2, 3))
    A = np.r_[centers[0] + rng.normal(size=(300, 3)), centers[1] + rng.normal(size=(300, 3))]
    s = AlignedSet([PointCloud(A), PointCloud(A.copy())], [RigidTransform.identity()] * 2)
    hits = []
    for trial in range(20):
        fi, fj = rng.normal(size=(600, 8)), rng.normal(size=(600, 8))
        pruned = prune_unmatched(match(Features.dense(fi), Features.dense(fj)), s, 0, 1, 1e-9)
        hits.append(precision_curve(pruned, s, 0, 1, [1e-9]).fractions[0])
    # chance rate is 1/600 per match
    assert np.mean(hits) == pytest.approx(1 / 600, abs=1.5e-3)


def test_isotropic_gaussian_captured_variance():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(20000, 40))
    emb = fit_pca(X, 8)
    frac = emb.variances.sum() / X.var(axis=0, ddof=1).sum()
    assert frac == pytest.approx(8 / 40, abs=0.02)


# registration ---------------------------------------------------------------

def test_fit_error_shrinks_with_noise():
    errors = []
    for sigma in (1e-2, 1e-3, 1e-4):
        rng = np.random.default_rng(12)
        T = random_rigid(rng)
        P = rng.uniform(-1, 1, size=(200, 3))
        Q = T.apply(P) + rng.normal(0, sigma, size=P.shape)
        errors.append(np.linalg.norm(fit_rigid((P, Q)).rotation - T.rotation))
    assert errors[0] > errors[1] > errors[2]


def test_robust_fit_with_noisy_inliers():
    rng = np.random.default_rng(13)
    T = random_rigid(rng)
    P = rng.uniform(-1, 1, size=(100, 3))
    Q = T.apply(P) + rng.normal(0, 1e-3, size=P.shape)
    Q[:20] = rng.uniform(-3, 3, size=(20, 3))
    res = fit_rigid_robust((P, Q), iterations=300, inlier_tol=0.01, seed=0)
    assert res.inliers >= 78
    assert np.linalg.norm(res.transform.rotation - T.rotation) < 5e-3


def test_identity_on_unit_offset_pair():
    rng = np.random.default_rng(14)
    A = rng.uniform(size=(100, 3))
    s = AlignedSet([PointCloud(A), PointCloud(A - [1.0, 0, 0])],
                   [RigidTransform.identity(), RigidTransform(np.eye(3), [1.0, 0, 0])])
    assert registration_rmse(RigidTransform.identity(), s, 0, 1, 1e-9) == pytest.approx(1.0)
    assert RegistrationResult(RigidTransform.identity(), 0).rmse is None

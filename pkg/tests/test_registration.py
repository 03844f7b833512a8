import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgf.dataset import SynthConfig, generate_synthetic_set
from cgf.errors import DegenerateFit, NoConsensus, NoGroundTruth
from cgf.geometry import RigidTransform, random_rigid
from cgf.matching import CorrespondenceSet
from cgf.registration import (
    fit_rigid,
    fit_rigid_robust,
    registration_rmse,
    score,
    success_threshold,
)


def planted(seed, n=100, outliers=0.2):
    rng = np.random.default_rng(seed)
    T = random_rigid(rng)
    P = rng.uniform(-1, 1, size=(n, 3))
    Q = T.apply(P)
    bad = rng.choice(n, size=int(outliers * n), replace=False)
    Q[bad] = rng.uniform(-3, 3, size=(len(bad), 3))
    return T, P, Q, bad


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_exact_fit_recovers_transform(seed):
    T, P, Q, _ = planted(seed, n=20, outliers=0.0)
    est = fit_rigid((P, Q))
    assert np.linalg.norm(est.rotation - T.rotation) < 1e-9
    assert np.linalg.norm(est.translation - T.translation) < 1e-9


def test_fit_from_correspondence_set():
    T, P, Q, _ = planted(1, n=10, outliers=0.0)
    corr = CorrespondenceSet(np.arange(9, -1, -1), np.arange(9, -1, -1))
    est = fit_rigid(corr, (P, Q))
    assert np.linalg.norm(est.rotation - T.rotation) < 1e-9


def test_reflection_is_never_returned():
    rng = np.random.default_rng(2)
    P = rng.normal(size=(30, 3))
    Q = P * [1, 1, -1]  # a mirror image has no proper rotation fit
    est = fit_rigid((P, Q))
    assert np.linalg.det(est.rotation) == pytest.approx(1.0)


def test_degenerate_inputs():
    with pytest.raises(DegenerateFit):
        fit_rigid((np.zeros((2, 3)), np.zeros((2, 3))))
    line = np.c_[np.arange(5.0), np.zeros(5), np.zeros(5)]
    with pytest.raises(DegenerateFit):
        fit_rigid((line, line))


@pytest.mark.parametrize("seed", range(5))
def test_robust_fit_ignores_outliers(seed):
    T, P, Q, bad = planted(seed)
    res = fit_rigid_robust((P, Q), iterations=500, inlier_tol=1e-6, seed=seed)
    assert np.linalg.norm(res.transform.rotation - T.rotation) < 1e-6
    assert res.inliers == 80
    assert not res.inlier_mask[bad].any()


def test_robust_fit_is_seeded():
    _, P, Q, _ = planted(7, outliers=0.4)
    a = fit_rigid_robust((P, Q), iterations=50, inlier_tol=1e-6, seed=3)
    b = fit_rigid_robust((P, Q), iterations=50, inlier_tol=1e-6, seed=3)
    assert np.array_equal(a.transform.matrix, b.transform.matrix)


def test_no_consensus():
    rng = np.random.default_rng(8)
    P, Q = rng.normal(size=(10, 3)), rng.normal(size=(10, 3)) * 100
    with pytest.raises(NoConsensus):
        fit_rigid_robust((P, Q), iterations=20, inlier_tol=1e-9)


def test_rmse_and_score_on_synthetic_pair():
    s = generate_synthetic_set(SynthConfig("sphere", samples=1500, seed=4))
    i, j = 0, 2
    truth = s.relative(i, j)
    assert registration_rmse(truth, s, i, j, 0.05) < 1e-12
    from cgf.registration import RegistrationResult
    res = score(RegistrationResult(truth, 10), s, i, j, 0.05)
    assert res.success and res.rmse < 1e-12
    off = RigidTransform(truth.rotation, truth.translation + [0.3, 0.4, 0])
    assert registration_rmse(off, s, i, j, 0.05) == pytest.approx(0.5)
    body = json.loads(res.to_json())
    assert len(body["rotation"]) == 9 and body["success"] is True
    with pytest.raises(NoGroundTruth):
        registration_rmse(truth, s, i, j, 0.0)
    assert success_threshold(10.0) == pytest.approx(0.2) and success_threshold() == 0.2

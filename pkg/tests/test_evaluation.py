import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from klio.evaluation import EvaluationError, ape, ape_rmse, associate, umeyama_align
from klio.geometry import Pose, so3_exp, so3_log

from _support import random_pose


def _random_trajectory(rng, n=60, dt=0.1):
    out, pose = [], Pose()
    for k in range(n):
        pose = pose @ Pose(so3_exp(rng.normal(0, 0.05, 3)), rng.normal([0.3, 0, 0], 0.1))
        out.append((k * dt, pose))
    return out


def test_identical_stamps_pair_fully():
    t = np.arange(20) * 0.1
    assert associate(t, t) == [(i, i) for i in range(20)]


def test_offset_beyond_window_fails():
    t = np.arange(20.0)
    with pytest.raises(EvaluationError):
        associate(t + 0.5, t, max_dt=0.02)


def test_empty_input_fails():
    with pytest.raises(EvaluationError):
        associate([], [0.0])


def _brute_force_pairs(est, ref, max_dt):
    """Largest one-to-one matching within the window, then least total |dt|."""
    best = None
    for perm in itertools.permutations(range(len(ref)), len(est)):
        pairs = [(i, j) for i, j in enumerate(perm) if abs(est[i] - ref[j]) <= max_dt]
        key = (-len(pairs), sum(abs(est[i] - ref[j]) for i, j in pairs))
        if best is None or key < best[0]:
            best = (key, sorted(pairs))
    return best[1]


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_jittered_association_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    ref = np.arange(6) * 0.1
    est = ref[rng.permutation(6)[:5]] + rng.uniform(-0.005, 0.005, 5)
    assert associate(est, ref, 0.02) == _brute_force_pairs(est, ref, 0.02)


def test_each_reference_used_once():
    assert associate([0.0, 0.0004, 0.002], [0.0005], 0.02) == [(1, 0)]
    # equal gaps go to the lower estimate index
    assert associate([0.0, 0.001], [0.0005], 0.02) == [(0, 0)]


def test_align_identity():
    rng = np.random.default_rng(70)
    pts = rng.normal(size=(30, 3))
    g = umeyama_align(pts, pts)
    np.testing.assert_allclose(g.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(g.translation, 0.0, atol=1e-12)


def test_align_recovers_rigid_transform():
    rng = np.random.default_rng(71)
    for _ in range(50):
        ref = rng.normal(size=(40, 3)) * 5
        g = random_pose(rng)
        est = g.inverse().transform(ref)
        got = umeyama_align(est, ref)
        assert np.abs(got.as_matrix() - g.as_matrix()).max() < 1e-9


def test_reflection_is_never_returned():
    rng = np.random.default_rng(72)
    ref = rng.normal(size=(20, 3))
    est = ref * [1, 1, -1]  # mirror image
    g = umeyama_align(est, ref)
    assert np.linalg.det(g.rotation) == pytest.approx(1.0)


def test_closed_form_is_globally_optimal():
    rng = np.random.default_rng(73)
    ref = rng.normal(size=(50, 3)) * 3
    est = random_pose(rng).transform(ref) + rng.normal(0, 0.01, ref.shape)
    g = umeyama_align(est, ref)

    def rms(x):
        p = g.boxplus(x)
        return np.sqrt(np.mean(np.sum((ref - p.transform(est)) ** 2, axis=1)))

    refined = minimize(rms, np.zeros(6), method="Nelder-Mead",
                       options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000})
    assert rms(np.zeros(6)) <= refined.fun + 1e-9


@pytest.mark.parametrize("pts", [
    np.zeros((5, 3)),
    np.outer(np.arange(5.0), [1.0, 2.0, 3.0]),
    np.ones((2, 3)),
])
def test_degenerate_alignment(pts):
    with pytest.raises(EvaluationError):
        umeyama_align(pts, pts)


def test_identical_trajectories_have_zero_error():
    traj = _random_trajectory(np.random.default_rng(74))
    res = ape(traj, traj)
    assert res.rmse < 1e-12
    assert res.num_pairs == len(traj)


def test_uniform_shift_is_absorbed():
    traj = _random_trajectory(np.random.default_rng(75))
    shifted = [(t, Pose(p.rotation, p.translation + [0.1, 0.0, 0.0])) for t, p in traj]
    assert ape_rmse(shifted, traj) < 1e-9


def test_known_residual():
    traj = _random_trajectory(np.random.default_rng(76))
    est = traj[:-1] + [(traj[-1][0], Pose(traj[-1][1].rotation, traj[-1][1].translation + [0, 0, 1.0]))]
    res = ape(est, traj)
    # the same residual evaluated at the optimal alignment
    pos_e = np.array([p.translation for _, p in est])
    pos_r = np.array([p.translation for _, p in traj])
    g = umeyama_align(pos_e, pos_r)
    expected = np.sqrt(np.mean(np.sum((g.transform(pos_e) - pos_r) ** 2, axis=1)))
    assert res.rmse == pytest.approx(expected, abs=1e-12)
    assert 0 < res.rmse < 1.0 / np.sqrt(len(traj)) + 1e-12


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_rmse_invariant_to_rigid_motion_of_estimate(seed):
    rng = np.random.default_rng(seed)
    ref = _random_trajectory(rng, 30)
    est = [(t, p.boxplus(rng.normal(0, 0.05, 6))) for t, p in ref]
    g = random_pose(rng, max_shift=100.0)
    moved = [(t, g @ p) for t, p in est]
    assert abs(ape_rmse(est, ref) - ape_rmse(moved, ref)) < 1e-9


def test_report_formats():
    traj = _random_trajectory(np.random.default_rng(77), 10)
    est = [(t, p.boxplus(np.full(6, 0.01))) for t, p in traj]
    res = ape(est, traj)
    assert "ape_rmse" in res.report()
    kv = dict(line.split("=") for line in res.key_values().splitlines())
    assert float(kv["ape_rmse"]) == res.rmse
    assert int(kv["num_pairs"]) == 10
    rows = res.error_csv().splitlines()
    assert rows[0] == "timestamp,trans_error_m,rot_error_deg" and len(rows) == 11
    assert np.degrees(np.linalg.norm(so3_log(so3_exp(np.full(3, 0.01))))) == pytest.approx(
        res.rot_errors_deg[0], rel=1e-6)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from klio.geometry import (
    Pose,
    hat,
    is_rotation,
    orthonormalize,
    so3_exp,
    so3_exp_batch,
    so3_log,
    so3_right_jacobian,
    transform_point,
    vee,
)

from _support import random_pose, random_rotation

finite = st.floats(-10, 10, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)


def test_exp_of_zero_is_identity():
    assert np.array_equal(so3_exp(np.zeros(3)), np.eye(3))


def test_exp_quarter_turn_about_z():
    r = so3_exp([0.0, 0.0, np.pi / 2])
    np.testing.assert_allclose(r @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-15)


@pytest.mark.parametrize("bad", [[np.nan, 0, 0], [0, np.inf, 0]])
def test_exp_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        so3_exp(bad)


def test_exp_matches_scipy():
    rng = np.random.default_rng(1)
    for v in rng.normal(size=(200, 3)):
        np.testing.assert_allclose(so3_exp(v), Rotation.from_rotvec(v).as_matrix(), atol=1e-13)


def test_exp_taylor_branch_is_continuous():
    v = np.array([3e-8, -2e-8, 1e-8])
    np.testing.assert_allclose(so3_exp(v), Rotation.from_rotvec(v).as_matrix(), atol=1e-15)
    np.testing.assert_allclose(so3_exp_batch(v[None])[0], so3_exp(v), atol=1e-15)


def test_log_identity_and_half_turn():
    assert np.array_equal(so3_log(np.eye(3)), np.zeros(3))
    np.testing.assert_allclose(so3_log(np.diag([1.0, -1.0, -1.0])), [np.pi, 0, 0], atol=1e-12)


def test_round_trip_random():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        axis = rng.normal(size=3)
        v = axis / np.linalg.norm(axis) * rng.uniform(0, np.pi - 1e-6)
        np.testing.assert_allclose(so3_log(so3_exp(v)), v, atol=1e-9)


def test_round_trip_near_pi():
    rng = np.random.default_rng(3)
    for _ in range(500):
        axis = rng.normal(size=3)
        v = axis / np.linalg.norm(axis) * rng.uniform(np.pi - 1e-4, np.pi)
        np.testing.assert_allclose(so3_log(so3_exp(v)), v, atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(vec3)
def test_log_is_principal(v):
    w = so3_log(so3_exp(v))
    assert np.linalg.norm(w) <= np.pi + 1e-12
    np.testing.assert_allclose(so3_exp(w), so3_exp(v), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(vec3)
def test_hat_vee(v):
    assert np.array_equal(vee(hat(v)), v)
    np.testing.assert_allclose(hat(v) @ [1.0, 2.0, 3.0], np.cross(v, [1.0, 2.0, 3.0]), atol=1e-12)


def test_right_jacobian_matches_finite_difference():
    rng = np.random.default_rng(4)
    for _ in range(20):
        v = rng.normal(size=3)
        jr = so3_right_jacobian(v)
        eps = 1e-6
        num = np.zeros((3, 3))
        for i in range(3):
            d = np.zeros(3)
            d[i] = eps
            num[:, i] = (so3_log(so3_exp(v).T @ so3_exp(v + d)) - so3_log(so3_exp(v).T @ so3_exp(v - d))) / (2 * eps)
        np.testing.assert_allclose(jr, num, atol=1e-8)


def test_transform_point_examples():
    np.testing.assert_array_equal(transform_point(Pose(), [1, 2, 3]), [1, 2, 3])
    np.testing.assert_allclose(transform_point(Pose(np.eye(3), [0.3, 0, 0]), [0, 0, 0]), [0.3, 0, 0])


def test_pose_inverse_undoes_transform():
    rng = np.random.default_rng(5)
    for _ in range(100):
        t = random_pose(rng)
        p = rng.normal(size=3) * 10
        np.testing.assert_allclose(t.inverse().transform(t.transform(p)), p, atol=1e-12)
        np.testing.assert_allclose((t @ t.inverse()).as_matrix(), np.eye(4), atol=1e-9)


def test_composition_is_associative():
    rng = np.random.default_rng(6)
    for _ in range(100):
        a, b, c = (random_pose(rng) for _ in range(3))
        p = rng.normal(size=3)
        np.testing.assert_allclose((a @ b).transform(p), a.transform(b.transform(p)), atol=1e-10)
        np.testing.assert_allclose(((a @ b) @ c).as_matrix(), (a @ (b @ c)).as_matrix(), atol=1e-10)


def test_long_composition_stays_orthonormal():
    rng = np.random.default_rng(7)
    r = np.eye(3)
    for i in range(10_000):
        r = r @ random_rotation(rng)
        if i % 1000 == 999:
            r = orthonormalize(r)
    assert np.abs(r.T @ r - np.eye(3)).max() < 1e-8
    assert is_rotation(r, tol=1e-8)


def test_pose_vector_and_matrix_round_trip():
    rng = np.random.default_rng(8)
    t = random_pose(rng)
    np.testing.assert_allclose(Pose.from_matrix(t.as_matrix()).as_matrix(), t.as_matrix(), atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-1, 1)), st.integers(0, 2**31))
def test_boxplus_boxminus_round_trip(delta, seed):
    base = random_pose(np.random.default_rng(seed))
    np.testing.assert_allclose(base.boxplus(delta).boxminus(base), delta, atol=1e-9)


def test_boxplus_is_right_multiplicative():
    rng = np.random.default_rng(9)
    base = random_pose(rng)
    d = np.array([0.1, -0.2, 0.3, 1.0, 2.0, 3.0])
    out = base.boxplus(d)
    np.testing.assert_allclose(out.rotation, base.rotation @ so3_exp(d[:3]), atol=1e-15)
    np.testing.assert_allclose(out.translation, base.translation + d[3:], atol=1e-15)


def test_pose_validity_check():
    assert Pose().is_valid()
    assert not Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3)).is_valid()
    assert not Pose(np.eye(3), [np.nan, 0, 0]).is_valid()

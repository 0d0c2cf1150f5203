import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from klio.ekf import (
    ACCEL_BIAS_CLAMP,
    GYRO_BIAS_CLAMP,
    MASKED_VARIANCE,
    Measurement,
    MeasurementNoise,
    build_measurement,
    build_measurement_noise,
    floored_inverse,
    inflate_prediction,
    innovation,
    kalman_update,
)
from klio.errors import NumericalFailureError
from klio.geometry import Pose, so3_exp
from klio.preintegration import ImuSample, NavState
from klio.registration import MatchResult

from _support import G, random_pose, random_spd, random_state


def _measurement_near(state: NavState, rng, scale=0.1) -> Measurement:
    d = rng.normal(0, scale, 15)
    d[9:12] = np.clip(d[9:12], -0.4, 0.4)
    d[12:15] = np.clip(d[12:15], -1.5, 1.5)
    s = state.boxplus(d)
    return Measurement(s.pose, s.velocity, s.gyro_bias, s.accel_bias)


def test_velocity_is_finite_difference():
    z = build_measurement(Pose(np.eye(3), [0.1, 0, 0]), Pose(), [], G, 0.1)
    np.testing.assert_allclose(z.velocity, [1.0, 0, 0])
    assert z.valid_mask == (True, True, False, False)


def test_no_rotation_no_rate_gives_zero_gyro_bias():
    batch = [ImuSample(0.01 * k, np.zeros(3), -G) for k in range(1, 11)]
    z = build_measurement(Pose(), Pose(), batch, G, 0.1)
    np.testing.assert_allclose(z.gyro_bias, 0.0, atol=1e-15)


def test_first_frame_is_pose_only():
    z = build_measurement(Pose(), None, [], G, 0.1)
    assert z.valid_mask == (True, False, False, False)


def test_accel_bias_needs_previous_velocity():
    batch = [ImuSample(0.01 * k, np.zeros(3), -G) for k in range(1, 11)]
    z = build_measurement(Pose(), Pose(), batch, G, 0.1)
    assert z.valid_mask == (True, True, True, False)
    z = build_measurement(Pose(), Pose(), batch, G, 0.1, prev_velocity=np.zeros(3))
    assert z.valid_mask == (True, True, True, True)
    np.testing.assert_allclose(z.accel_bias, 0.0, atol=1e-12)


def test_accel_bias_uses_previous_body_frame():
    r_prev = so3_exp([0.0, 0.0, np.pi / 2])
    bias = np.array([0.05, -0.02, 0.01])
    # constant world acceleration (1, 0, 0) seen in a yawed body frame
    acc_world = np.array([1.0, 0.0, 0.0])
    batch = [ImuSample(0.01 * k, np.zeros(3), r_prev.T @ (acc_world - G) + bias) for k in range(1, 11)]
    dt = 0.1
    prev = Pose(r_prev, np.zeros(3))
    v_prev = np.array([2.0, 0.0, 0.0])
    curr = Pose(r_prev, (v_prev + acc_world * dt) * dt)
    z = build_measurement(curr, prev, batch, G, dt, prev_velocity=v_prev)
    np.testing.assert_allclose(z.accel_bias, bias, atol=1e-12)


def test_accepts_match_results():
    m = MatchResult(Pose(np.eye(3), [0.2, 0, 0]), np.eye(6), 1.0, 1, True, 0.0)
    z = build_measurement(m, MatchResult(Pose(), np.eye(6), 1.0, 1, True, 0.0), [], G, 0.1)
    np.testing.assert_allclose(z.velocity, [2.0, 0, 0])


@pytest.mark.parametrize("dt", [0.0, -0.1])
def test_rejects_non_positive_interval(dt):
    with pytest.raises(ValueError):
        build_measurement(Pose(), Pose(), [], G, dt)


def test_noise_with_identity_hessian():
    r = build_measurement_noise(np.eye(6), MeasurementNoise())
    np.testing.assert_allclose(r[:6, :6], 100 * np.eye(6))
    np.testing.assert_allclose(np.diag(r)[6:], 0.1)
    assert np.count_nonzero(r - np.diag(np.diag(r))) == 0


def test_floored_inverse_bounds_singular_hessian():
    rng = np.random.default_rng(40)
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    h = q @ np.diag([0, 0, 0, 2.0, 5.0, 40.0]) @ q.T
    r = build_measurement_noise(h, MeasurementNoise())[:6, :6]
    assert np.all(np.isfinite(r))
    np.testing.assert_allclose(np.linalg.eigvalsh(r).max(), 100 / (1e-6 * 40.0), rtol=1e-9)
    np.testing.assert_allclose(floored_inverse(np.diag([4.0, 2.0])), np.diag([0.25, 0.5]))


def test_measurement_noise_must_be_positive():
    with pytest.raises(ValueError):
        MeasurementNoise(sigma_v_sq=0.0)


def test_huge_noise_returns_prior():
    rng = np.random.default_rng(41)
    x = random_state(rng)
    cov = random_spd(rng, 15)
    z = _measurement_near(x, rng)
    post, post_cov = kalman_update(x, cov, z, 1e12 * np.eye(15))
    assert np.abs(post.boxminus(x)).max() < 1e-6
    np.testing.assert_allclose(post_cov, cov, atol=1e-9)


def test_zero_noise_returns_measurement():
    rng = np.random.default_rng(42)
    x = random_state(rng)
    z = _measurement_near(x, rng)
    post, post_cov = kalman_update(x, random_spd(rng, 15), z, np.zeros((15, 15)))
    assert np.abs(post.boxminus(z.as_state())).max() < 1e-12
    assert np.array_equal(post_cov, np.zeros((15, 15)))


def test_scalar_kalman_on_one_coordinate():
    x = NavState()
    cov = np.eye(15)
    z = Measurement(Pose(np.eye(3), [0.0, 0.0, 0.0]), velocity=np.array([0.0, 2.0, 0.0]))
    r = 1e12 * np.eye(15)
    r[7, 7] = 1.0
    post, post_cov = kalman_update(x, cov, z, r)
    assert post.velocity[1] == pytest.approx(1.0, abs=1e-9)
    assert post_cov[7, 7] == pytest.approx(0.5, abs=1e-9)


def test_masked_blocks_are_not_updated():
    rng = np.random.default_rng(43)
    x = random_state(rng)
    s = x.boxplus(rng.normal(0, 0.1, 15))
    z = Measurement(s.pose, s.velocity, s.gyro_bias, s.accel_bias, (True, False, False, False))
    cov = np.eye(15)
    post, post_cov = kalman_update(x, cov, z, np.eye(15) * 0.01)
    assert np.abs(post.velocity - x.velocity).max() < 1e-9
    assert np.abs(post.gyro_bias - x.gyro_bias).max() < 1e-9
    assert np.allclose(post_cov[6:, 6:], cov[6:, 6:], atol=1e-9)
    assert MASKED_VARIANCE == 1e12


def test_bias_innovation_is_clamped():
    x = NavState()
    z = Measurement(Pose(), gyro_bias=np.array([3.0, -3.0, 0.1]), accel_bias=np.array([9.0, 0, -9.0]))
    y = innovation(z, x)
    np.testing.assert_array_equal(y[9:12], [GYRO_BIAS_CLAMP, -GYRO_BIAS_CLAMP, 0.1])
    np.testing.assert_array_equal(y[12:15], [ACCEL_BIAS_CLAMP, 0, -ACCEL_BIAS_CLAMP])


def test_singular_innovation_covariance():
    z = Measurement(Pose())
    with pytest.raises(NumericalFailureError, match="cond"):
        kalman_update(NavState(), np.zeros((15, 15)), z, np.zeros((15, 15)))


def test_zero_innovation_keeps_state():
    rng = np.random.default_rng(44)
    x = random_state(rng)
    z = Measurement(x.pose, x.velocity, x.gyro_bias, x.accel_bias)
    post, _ = kalman_update(x, random_spd(rng, 15), z, random_spd(rng, 15))
    assert np.abs(post.boxminus(x)).max() < 1e-12


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.floats(1e-4, 1e2), st.floats(1e-4, 1e2))
def test_posterior_shrinks_and_stays_psd(seed, prior_scale, noise_scale):
    rng = np.random.default_rng(seed)
    x = random_state(rng)
    cov = random_spd(rng, 15, prior_scale)
    r = random_spd(rng, 15, noise_scale)
    _, post = kalman_update(x, cov, _measurement_near(x, rng), r)
    assert np.all(np.diag(post) <= np.diag(cov) + 1e-10)
    assert np.abs(post - post.T).max() < 1e-8 * max(1.0, np.abs(cov).max())
    assert np.linalg.eigvalsh(post).min() > -1e-8 * max(1.0, np.abs(cov).max())


def test_joseph_form_agrees_in_well_conditioned_regime():
    rng = np.random.default_rng(45)
    x = random_state(rng)
    cov = random_spd(rng, 15)
    r = random_spd(rng, 15)
    _, post = kalman_update(x, cov, _measurement_near(x, rng), r)
    k = cov @ np.linalg.inv(cov + r)
    i_k = np.eye(15) - k
    joseph = i_k @ cov @ i_k.T + k @ r @ k.T
    np.testing.assert_allclose(post, joseph, atol=1e-8)


@settings(max_examples=100)
@given(arrays(np.float64, 15, elements=st.floats(-0.5, 0.5)), st.integers(0, 2**32 - 1))
def test_boxplus_boxminus_consistency(delta, seed):
    x = random_state(np.random.default_rng(seed))
    np.testing.assert_allclose(x.boxplus(delta).boxminus(x), delta, atol=1e-9)


def test_inflated_prediction():
    rng = np.random.default_rng(46)
    x = random_state(rng, t=1.0)
    state, cov = inflate_prediction(x, np.eye(15), 2.0, 0.1, 1.1)
    assert state.timestamp == 1.1
    assert np.array_equal(state.pose.translation, x.pose.translation)
    np.testing.assert_allclose(cov, 1.2 * np.eye(15))

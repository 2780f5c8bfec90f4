import numpy as np
import pytest

from conftest import random_q
from gazestab.fusion import predict_flow_reafference
from gazestab.kinematics import HeadState, forward_kinematics
from gazestab.sensors import (
    ImageGrid,
    RetinalSlip,
    ScenarioFault,
    SceneTarget,
    SensorChannel,
    SensorConfig,
    dense_flow_field,
    emission_mask,
    fovea_depth,
    interaction_matrix,
    sample_gyro,
    sample_retinal_slip,
    true_gyro,
    true_retinal_slip,
)
from oracles import fd_local_angular_velocity, full_interaction_matrix, reprojection_flow

TARGET = np.array([2.1, 0.0, 1.25])  # 2 m in front of the nominal camera


def target_ahead(v=(0, 0, 0)):
    return SceneTarget(TARGET, np.asarray(v, dtype=float))


def state(chain, q=None, qdot=None):
    n = chain.n
    return HeadState(np.zeros(n) if q is None else np.asarray(q, float), np.zeros(n) if qdot is None else np.asarray(qdot, float))


def test_sensor_config_validation():
    with pytest.raises(ValueError):
        SensorConfig(rate=0.0)
    with pytest.raises(ValueError):
        SensorConfig(rate=10.0, latency=-1e-3)
    with pytest.raises(ValueError):
        SensorConfig(rate=10.0, noise_std=-0.1)


def test_true_gyro_static_is_zero(chain):
    np.testing.assert_array_equal(true_gyro(chain, state(chain)), 0.0)


def test_true_gyro_hip_yaw(chain):
    qdot = np.zeros(chain.n)
    qdot[1] = 0.3
    w = true_gyro(chain, state(chain, qdot=qdot))
    # IMU z is aligned with the (downward) yaw axes
    np.testing.assert_allclose(w, [0, 0, 0.3], atol=1e-15)


def test_true_gyro_matches_orientation_finite_difference(chain, rng):
    for _ in range(20):
        q = random_q(chain, rng)
        qdot = rng.normal(size=chain.n)
        w = true_gyro(chain, state(chain, q, qdot))
        w_fd = fd_local_angular_velocity(chain, q, qdot, "imu")
        np.testing.assert_allclose(w, w_fd, atol=1e-5)


def test_sample_gyro_full_rate_is_identity():
    ch = SensorChannel(SensorConfig(1000.0), 1000.0, 3, stream=0)
    for k in range(20):
        truth = np.array([k, -k, 2.0 * k])
        r = sample_gyro(ch, truth, k * 1e-3)
        np.testing.assert_array_equal(r.omega, truth)


def test_sample_gyro_rate_division():
    ch = SensorChannel(SensorConfig(100.0), 1000.0, 3, stream=0)
    got = [sample_gyro(ch, np.zeros(3), k * 1e-3) for k in range(1000)]
    emitted = [k for k, r in enumerate(got) if r is not None]
    assert len(emitted) == 100
    assert np.all(np.diff(emitted) == 10)


def test_gyro_latency_delays_by_whole_ticks():
    ch = SensorChannel(SensorConfig(1000.0, latency=0.005), 1000.0, 3, stream=0)
    out = [sample_gyro(ch, np.full(3, float(k)), k * 1e-3) for k in range(20)]
    assert all(r is None for r in out[:5])
    for k in range(5, 20):
        assert out[k].omega[0] == k - 5
        assert out[k].capture_t == pytest.approx((k - 5) * 1e-3)


def test_gyro_noise_statistics():
    ch = SensorChannel(SensorConfig(1000.0, noise_std=0.01, seed=7), 1000.0, 1, stream=0)
    x = np.array([ch.push(np.zeros(1))[0][0] for _ in range(100_000)])
    assert abs(x.std() - 0.01) < 0.05 * 0.01
    assert abs(x.mean()) < 1e-3


def test_noise_is_seeded_and_stream_separated():
    cfg = SensorConfig(200.0, noise_std=0.1)
    a = [SensorChannel(cfg, 1000.0, 3, 0, run_seed=4).push(np.zeros(3))[0] for _ in range(1)]
    b = [SensorChannel(cfg, 1000.0, 3, 0, run_seed=4).push(np.zeros(3))[0] for _ in range(1)]
    c = [SensorChannel(cfg, 1000.0, 3, 1, run_seed=4).push(np.zeros(3))[0] for _ in range(1)]
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.allclose(a[0], c[0])


def test_emission_count_over_duration():
    for rate in (30.0, 200.0, 60.0, 47.0):
        for T in (1.0, 2.5, 32.0):
            n = int(round(T * 1000))
            count = int(emission_mask(n, rate, 1000.0).sum())
            assert abs(count - np.floor(T * rate)) <= 1


def test_slip_sampling_30hz_one_frame_latency():
    cfg = SensorConfig(30.0, latency=1 / 30)
    ch = SensorChannel(cfg, 1000.0, 2, stream=1)
    frames = []
    for k in range(300):
        s = sample_retinal_slip(ch, np.array([k, 0.0]), k * 1e-3)
        if s is not None:
            frames.append((k, s))
    ticks = [k for k, _ in frames]
    assert np.all(np.isin(np.diff(ticks), (33, 34)))
    # the first frame arrives before a delayed sample exists
    assert not frames[0][1].valid
    for k, s in frames:
        if s.valid:
            assert s.udot == k - 33


def test_slip_noise_statistics():
    ch = SensorChannel(SensorConfig(1000.0, noise_std=0.02, seed=3), 1000.0, 2, stream=1)
    x = np.array([sample_retinal_slip(ch, np.zeros(2), 0.0).value for _ in range(50_000)])
    assert abs(x.std() - 0.02) < 0.05 * 0.02


def test_static_scene_has_no_slip(chain):
    np.testing.assert_array_equal(true_retinal_slip(chain, state(chain), target_ahead()), 0.0)


def test_moving_target_slip_is_f_over_Z_v(chain):
    # world +y is to the camera's left, so a target moving right has v = -y
    v = 0.3
    for f in (1.0, 2.0):
        slip = true_retinal_slip(chain, state(chain), target_ahead((0, -v, 0)), f)
        np.testing.assert_allclose(slip, [f / 2.0 * v, 0.0], atol=1e-15)


def test_rotating_camera_slip_matches_flow_reafference_prediction(chain, rng):
    for _ in range(10):
        q = np.zeros(chain.n)
        q[2:] = rng.uniform(-0.3, 0.3, size=5)
        qdot = np.zeros(chain.n)
        qdot[2:] = rng.normal(size=5)
        s = state(chain, q, qdot)
        Rc = forward_kinematics(chain, q)["camera"]
        Z = fovea_depth(Rc.rotation, Rc.translation, target_ahead())
        truth = true_retinal_slip(chain, s, target_ahead())
        pred = predict_flow_reafference(chain, q, qdot, Z)
        # with image axes u right / v down the slip and the prediction carry
        # the same sign
        np.testing.assert_allclose(truth, pred, atol=1e-9)


def test_target_behind_camera_is_a_scenario_fault(chain):
    behind = SceneTarget(np.array([-2.0, 0.0, 1.25]), normal=np.array([1.0, 0.0, 0.0]))
    with pytest.raises(ScenarioFault):
        true_retinal_slip(chain, state(chain), behind)
    away = SceneTarget(TARGET, normal=np.array([1.0, 0.0, 0.0]))
    with pytest.raises(ScenarioFault):
        true_retinal_slip(chain, state(chain), away)


def test_interaction_matrix_matches_written_out_form(rng):
    for _ in range(20):
        u, v = rng.uniform(-0.4, 0.4, 2)
        Z, f = rng.uniform(0.5, 5), rng.uniform(0.5, 2)
        np.testing.assert_allclose(interaction_matrix(u, v, Z, f), full_interaction_matrix(u, v, Z, f), atol=1e-14)


def test_dense_flow_static_is_zero(chain):
    ff = dense_flow_field(chain, state(chain), target_ahead())
    assert ff.grid.shape == (13, 17, 2)
    np.testing.assert_array_equal(ff.grid, 0.0)


def test_dense_flow_centre_pure_yaw(chain):
    w = 0.2
    qdot = np.zeros(chain.n)
    qdot[5] = w  # eye yaw: rotates the camera about its own centre
    ff = dense_flow_field(chain, state(chain, qdot=qdot), target_ahead())
    centre = ff.grid[6, 8]
    np.testing.assert_allclose(abs(centre[0]), w, atol=1e-15)
    assert abs(centre[1]) < 1e-15


def test_dense_flow_matches_reprojection(chain, rng):
    grid = ImageGrid.default(1.0)
    for _ in range(5):
        q = np.zeros(chain.n)
        q[1:] = rng.uniform(-0.2, 0.2, size=chain.n - 1)
        qdot = rng.normal(scale=0.3, size=chain.n)
        vel = np.array([0.0, rng.normal(scale=0.2), rng.normal(scale=0.2)])
        tgt = SceneTarget(TARGET, vel)
        ff = dense_flow_field(chain, state(chain, q, qdot), tgt, 1.0, grid)
        # world points seen by each pixel, recovered by ray-plane intersection
        pose = forward_kinematics(chain, q)["camera"]
        R, c = pose.rotation, pose.translation
        pts, ref_px = [], []
        for i, v in enumerate(grid.v):
            for j, u in enumerate(grid.u):
                d = R @ np.array([-u, -v, 1.0])
                s = ((TARGET - c) @ tgt.normal) / (d @ tgt.normal)
                pts.append(c + s * d)
                ref_px.append(ff.grid[i, j])
        fd = reprojection_flow(chain, q, qdot, pts, [vel] * len(pts), 1.0)
        assert np.max(np.abs(fd - np.array(ref_px))) < 1e-4


def test_distant_scene_rotation_dominates(chain):
    qdot = np.zeros(chain.n)
    qdot[2] = 0.5  # neck yaw also translates the camera
    far = SceneTarget(np.array([100.1, 0.0, 1.25]))
    full = dense_flow_field(chain, state(chain, qdot=qdot), far).grid
    # zero out translation by moving the scene to infinity
    inf = SceneTarget(np.array([1e9, 0.0, 1.25]))
    rot = dense_flow_field(chain, state(chain, qdot=qdot), inf).grid
    trans = full - rot
    assert np.linalg.norm(trans) < 0.01 * np.linalg.norm(rot)


def test_noiseless_zero_latency_reproduces_truth_bitwise(chain, rng):
    ch = SensorChannel(SensorConfig(1000.0), 1000.0, 3, stream=0)
    for k in range(10):
        truth = true_gyro(chain, state(chain, random_q(chain, rng), rng.normal(size=chain.n)))
        assert np.array_equal(sample_gyro(ch, truth, k * 1e-3).omega, truth)


def test_retinal_slip_value_vector():
    s = RetinalSlip(0.1, -0.2, 0.0)
    np.testing.assert_array_equal(s.value, [0.1, -0.2])

import numpy as np
import pytest

from conftest import random_q
from gazestab.controllers import EyeCommand, JointCommand, okr_step, vor_step
from gazestab.fusion import (
    CombinerKind,
    Reafference,
    combine,
    compute_exafference,
    encoder_view,
    imu_to_camera,
    predict_flow_reafference,
    predict_gyro_reafference,
)
from gazestab.kinematics import HeadState, frame_twist
from gazestab.scenarios import ScenarioConfig, run
from gazestab.sensors import GyroReading, RetinalSlip, centre_slip, interaction_matrix, true_gyro
from oracles import full_interaction_matrix

SLOTS = (3, 4)


def test_gyro_reafference_zero_without_motion(chain, rng):
    q = random_q(chain, rng)
    np.testing.assert_array_equal(predict_gyro_reafference(chain, q, np.zeros(chain.n)), 0.0)


def test_gyro_reafference_is_true_gyro_on_encoder_state(chain, rng):
    q = random_q(chain, rng)
    qdot = rng.normal(size=chain.n)
    q[0] = qdot[0] = 0.0
    s = HeadState(q, qdot)
    np.testing.assert_allclose(predict_gyro_reafference(chain, q, qdot), true_gyro(chain, s), atol=1e-15)


def test_encoder_view_hides_platform(chain):
    s = HeadState(np.full(chain.n, 0.2), np.full(chain.n, 0.5))
    q_enc, qdot_enc = encoder_view(chain, s)
    assert q_enc[0] == 0.0 and qdot_enc[0] == 0.0
    np.testing.assert_array_equal(q_enc[1:], 0.2)


def test_flow_reafference_pure_camera_rotation(chain):
    qdot = np.zeros(chain.n)
    qdot[5] = -0.1  # eye yaw about the downward axis = +0.1 about camera y
    _, w = frame_twist(chain, np.zeros(chain.n), qdot, "camera", local=True)
    np.testing.assert_allclose(w, [0, 0.1, 0], atol=1e-15)
    np.testing.assert_allclose(predict_flow_reafference(chain, np.zeros(chain.n), qdot, 2.0, 1.0), [0.1, 0.0], atol=1e-15)


def test_centre_slip_translation_term():
    np.testing.assert_allclose(centre_slip(np.array([0.2, 0, 0]), np.zeros(3), 2.0, 1.0), [0.1, 0.0])


def test_flow_reafference_equals_full_interaction_matrix_at_centre(chain, rng):
    for _ in range(20):
        q = random_q(chain, rng)
        qdot = rng.normal(size=chain.n)
        Z, f = rng.uniform(0.5, 10), rng.uniform(0.5, 2)
        v, w = frame_twist(chain, q, qdot, "camera", local=True)
        ref = full_interaction_matrix(0.0, 0.0, Z, f) @ np.concatenate([v, w])
        got = predict_flow_reafference(chain, q, qdot, Z, f)
        assert np.max(np.abs(got - ref)) < 1e-12


def test_flow_reafference_rejects_bad_depth(chain):
    with pytest.raises(ValueError):
        predict_flow_reafference(chain, np.zeros(chain.n), np.zeros(chain.n), 0.0)


def test_flow_reafference_external_rotation_term(chain, rng):
    q = random_q(chain, rng)
    q[0] = 0.0
    w_ext = rng.normal(size=3)
    base = predict_flow_reafference(chain, q, np.zeros(chain.n), 2.0)
    np.testing.assert_array_equal(base, 0.0)
    got = predict_flow_reafference(chain, q, np.zeros(chain.n), 2.0, omega_external=w_ext)
    w_cam = imu_to_camera(chain, q) @ w_ext
    np.testing.assert_allclose(got, [w_cam[1], -w_cam[0]], atol=1e-15)


def test_exafference_examples():
    reaf = Reafference(np.array([0.3, 0.0, 0.0]), np.zeros(2), 0.0)
    ex = compute_exafference(GyroReading(np.array([0.3, 0.0, 0.1]), 0.005, 0.0), reaf)
    np.testing.assert_allclose(ex.omega_exaff, [0, 0, 0.1])
    assert ex.slip_exaff is None and not ex.fault
    same = compute_exafference(GyroReading(np.array([0.3, 0.0, 0.0]), 0.0, 0.0), reaf)
    np.testing.assert_array_equal(same.omega_exaff, 0.0)


def test_exafference_slip_channel_and_misalignment():
    reaf = Reafference(np.zeros(3), np.array([0.1, 0.2]), 0.100)
    ex = compute_exafference(RetinalSlip(0.1, 0.3, 0.133, capture_t=0.100), reaf, dt=1e-3)
    np.testing.assert_allclose(ex.slip_exaff, [0.0, 0.1])
    assert not ex.fault
    late = compute_exafference(RetinalSlip(0.1, 0.3, 0.133, capture_t=0.105), reaf, dt=1e-3)
    assert late.fault
    with pytest.raises(TypeError):
        compute_exafference(object(), reaf)


def test_combine_all_zero():
    z = EyeCommand(0.0, 0.0, "VOR")
    for kind in CombinerKind:
        out = combine(kind, z, z, JointCommand(np.zeros(5)), SLOTS)
        np.testing.assert_array_equal(out.qdot, 0.0)


def test_combine_sum_and_mean(rng):
    vor = EyeCommand(*rng.normal(size=2), "VOR")
    okr = EyeCommand(*rng.normal(size=2), "OKR")
    ik = JointCommand(rng.normal(size=5))
    s = combine("sum", vor, okr, ik, SLOTS).qdot
    expected = ik.qdot.copy()
    expected[3] += vor.qdot_yaw + okr.qdot_yaw
    expected[4] += vor.qdot_pitch + okr.qdot_pitch
    np.testing.assert_array_equal(s, expected)
    m = combine(CombinerKind.MEAN, vor, okr, ik, SLOTS).qdot
    np.testing.assert_array_equal(m, s / 3.0)
    with pytest.raises(ValueError):
        combine("median", vor, okr, ik, SLOTS)


def test_transparency_without_self_motion(chain, rng):
    """No encoder motion: reafference is zero and Reafference equals raw reflexes."""
    q = random_q(chain, rng)
    q[0] = 0.0
    still = np.zeros(chain.n)
    reaf = Reafference(
        predict_gyro_reafference(chain, q, still), predict_flow_reafference(chain, q, still, 2.0), 0.0
    )
    g = GyroReading(rng.normal(size=3), 0.0, 0.0)
    s = RetinalSlip(*rng.normal(size=2), 0.0, capture_t=0.0)
    gex = compute_exafference(g, reaf).omega_exaff
    sex = compute_exafference(s, reaf).slip_exaff
    np.testing.assert_array_equal(gex, g.omega)
    np.testing.assert_array_equal(sex, s.value)
    ik = JointCommand(np.zeros(5))
    a = combine("reafference", vor_step(gex), okr_step(sex), ik, SLOTS).qdot
    b = combine("sum", vor_step(g), okr_step(s), ik, SLOTS).qdot
    np.testing.assert_array_equal(a, b)


def test_self_robot_prediction_equals_truth_over_run():
    tr = run(ScenarioConfig.reference("SelfRobot", controller="reafference", duration=16).noiseless())
    assert np.max(np.abs(tr.gyro_reaf - tr.gyro_true)) < 1e-12


def test_external_robot_prediction_is_identically_zero():
    tr = run(ScenarioConfig.reference("ExternalRobot", controller="none", duration=16))
    assert np.all(tr.gyro_reaf == 0.0)
    assert np.max(np.abs(tr.gyro_true)) > 0.3


def test_perfect_prediction_inhibition_exact():
    """Noiseless, zero latency, all motion self-generated: Reafference == IK."""
    from gazestab.sensors import SensorConfig

    cfg = ScenarioConfig.reference(
        "SelfRobot",
        duration=16,
        gyro=SensorConfig(1000.0),
        camera=SensorConfig(100.0),
    )
    reaf = run(cfg.with_(controller="reafference"))
    ik = run(cfg.with_(controller="ik"))
    assert np.all(reaf.gyro_exaf == 0.0) and np.all(reaf.slip_exaf == 0.0)
    np.testing.assert_array_equal(reaf.cmd, ik.cmd)


def test_external_target_reafference_output_is_okr():
    tr = run(ScenarioConfig.reference("ExternalTarget", controller="reafference").noiseless())
    assert np.all(tr.ik == 0.0)
    np.testing.assert_array_equal(tr.vor, 0.0)
    np.testing.assert_allclose(tr.cmd[:, 3:], tr.okr, atol=0)


def test_sum_doubles_the_needed_eye_command():
    tr = run(ScenarioConfig.reference("SelfRobot", controller="sum").noiseless())
    ik_yaw = tr.ik[:, 3]
    vor_yaw = tr.vor[:, 0]
    busy = np.abs(ik_yaw) > 0.5 * np.abs(ik_yaw).max()
    ratio = np.median((ik_yaw[busy] + vor_yaw[busy]) / ik_yaw[busy])
    assert ratio == pytest.approx(2.0, rel=0.1)
    ik_only = run(ScenarioConfig.reference("SelfRobot", controller="ik").noiseless())
    assert tr.index().value > 5 * ik_only.index().value

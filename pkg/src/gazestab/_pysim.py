"""Pure-Python closed loop, assembled from the public operations.

Slow (a few hundred microseconds per tick) but easy to audit; the compiled
loop in ``_csim`` is checked against it.
"""

from __future__ import annotations

import logging

import numpy as np

from .controllers import GazeTask, JointCommand, fixation_point, ik_feedforward, ik_step, okr_step, vor_step
from .fusion import (
    Reafference,
    combine,
    compute_exafference,
    encoder_view,
    imu_to_camera,
    predict_gyro_reafference,
)
from .kinematics import HeadState, frame_pose, frame_twist
from .sensors import (
    CAMERA_STREAM,
    GYRO_STREAM,
    ImageGrid,
    SceneTarget,
    SensorChannel,
    centre_slip,
    fovea_depth,
    dense_flow_field,
    sample_gyro,
    sample_retinal_slip,
    true_gyro,
    true_retinal_slip,
)

log = logging.getLogger(__name__)


class SimulationAbort(RuntimeError):
    """A non-finite value appeared in the loop."""


def _check(k: int, name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise SimulationAbort(f"non-finite {name} at tick {k}: {value}")


def simulate(plan) -> "SimulationTrace":
    from .scenarios import SimulationTrace

    cfg = plan.cfg
    chain = cfg.chain
    N, dt, n = plan.n_ticks, plan.dt, chain.n
    ctrl = plan.ctrl
    nc = len(ctrl)
    yaw_slot, pitch_slot = plan.eye_slots
    f, Z = cfg.focal, cfg.target_distance
    grid = ImageGrid(plan.grid_u, plan.grid_v)
    nominal = SceneTarget(plan.target_p0, np.zeros(3), plan.normal)
    gyro_ch = SensorChannel(cfg.gyro, cfg.control_rate, 3, GYRO_STREAM, cfg.seed)
    cam_ch = SensorChannel(cfg.camera, cfg.control_rate, 2, CAMERA_STREAM, cfg.seed)
    mode = cfg.controller
    combined = mode == "combined"
    reafference_mode = combined and plan.combiner == 0
    vol_eye = np.asarray(cfg.voluntary_eye_rate, dtype=float)

    rec = {
        name: np.zeros((N, width))
        for name, width in (
            ("q", n), ("qdot", n), ("cmd", nc), ("ik", nc), ("vor", 2), ("okr", 2),
            ("gyro_true", 3), ("gyro_aff", 3), ("gyro_reaf", 3), ("gyro_exaf", 3),
            ("slip_true", 2), ("slip_aff", 2), ("slip_reaf", 2), ("slip_exaf", 2),
        )
    }
    gyro_emit = np.zeros(N, dtype=bool)
    cam_emit = np.zeros(N, dtype=bool)
    enc_slip = np.zeros((N, 2))
    imu2cam = np.zeros((N, 3, 3))
    gyro_pred = np.zeros((N, 3))
    gexaf_at = np.zeros((N, 3))
    gexaf_valid = np.zeros(N, dtype=bool)
    flows, flow_t, flow_frame = [], [], []
    vel_clamps = np.zeros(nc, dtype=np.int64)
    pos_clamps = np.zeros(nc, dtype=np.int64)
    singular = 0
    faults = 0

    q = np.zeros(n)
    qdot = np.zeros(n)
    cmd = np.zeros(nc)
    g_aff = np.zeros(3)
    g_exaf = np.zeros(3)
    s_aff = np.zeros(2)
    s_exaf = np.zeros(2)
    s_reaf = np.zeros(2)
    s_valid = False
    frame_idx = 0

    for k in range(N):
        t = k * dt
        if k > 0:
            q[ctrl] = np.clip(q[ctrl] + dt * cmd, plan.lower[ctrl], plan.upper[ctrl])
            qdot[ctrl] = cmd
        if plan.pert_joint >= 0:
            q[plan.pert_joint] = plan.pert_q[k]
            qdot[plan.pert_joint] = plan.pert_qdot[k]
        state = HeadState(q.copy(), qdot.copy(), t)
        target = SceneTarget(plan.target_p0 + plan.target_off[k], plan.target_vel[k], plan.normal)

        # ground truth and forward-model predictions
        w_true = true_gyro(chain, state)
        slip_true = true_retinal_slip(chain, state, target, f)
        q_enc, qdot_enc = encoder_view(chain, state)
        gyro_pred[k] = predict_gyro_reafference(chain, q_enc, qdot_enc)
        pose = frame_pose(chain, q_enc, "camera")
        v_cam, w_cam = frame_twist(chain, q_enc, qdot_enc, "camera", local=True)
        Z_enc = fovea_depth(pose.rotation, pose.translation, nominal)
        enc_slip[k] = centre_slip(v_cam, w_cam, Z_enc, f)
        imu2cam[k] = imu_to_camera(chain, q_enc)
        _check(k, "ground truth", np.concatenate([w_true, slip_true]))

        # sensors and exafference, latency-aligned through the capture tick
        reading = sample_gyro(gyro_ch, w_true, t)
        if reading is not None:
            cap = int(round(reading.capture_t / dt))
            ex = compute_exafference(reading, Reafference(gyro_pred[cap], np.zeros(2), cap * dt), dt)
            faults += ex.fault
            g_aff = reading.omega
            g_exaf = ex.omega_exaff
            gexaf_at[cap] = g_exaf
            gexaf_valid[cap] = True
            gyro_emit[k] = True
        slip = sample_retinal_slip(cam_ch, slip_true, t)
        if slip is not None and slip.valid:
            cap = int(round(slip.capture_t / dt))
            j = cap
            while j >= 0 and not gexaf_valid[j]:
                j -= 1
            w_ext = imu2cam[cap] @ gexaf_at[j] if j >= 0 else np.zeros(3)
            s_reaf = enc_slip[cap] + centre_slip(np.zeros(3), w_ext, 1.0, f)
            ex = compute_exafference(slip, Reafference(np.zeros(3), s_reaf, cap * dt), dt)
            faults += ex.fault
            s_aff = slip.value
            s_exaf = ex.slip_exaff
            s_valid = True
            cam_emit[k] = True

        # stabilizers
        ik_cmd = np.zeros(nc)
        if mode == "ik" or combined:
            xff = ik_feedforward(chain, q_enc, qdot_enc, Z)
            task = GazeTask(fixation_point(chain, q_enc, Z), plan.x_des)
            out = ik_step(chain, q_enc, task, xff, cfg.ik, Z)
            ik_cmd = out.qdot
            singular += out.singular
        use_exaf = reafference_mode
        vor = vor_step(g_exaf if use_exaf else g_aff, cfg.k_vor)
        okr = okr_step((s_exaf if use_exaf else s_aff) if s_valid else None, cfg.k_okr)
        faults += vor.fault + okr.fault
        if combined:
            new = combine(cfg.combiner, vor, okr, JointCommand(ik_cmd), plan.eye_slots).qdot
        else:
            new = np.zeros(nc)
            if mode == "ik":
                new = ik_cmd.copy()
            elif mode == "vor":
                new[[yaw_slot, pitch_slot]] = vor.value
            elif mode == "okr":
                new[[yaw_slot, pitch_slot]] = okr.value
        new[yaw_slot] += vol_eye[0]
        new[pitch_slot] += vol_eye[1]
        _check(k, "command", new)

        # velocity clamp, then stop joints pushing against a position limit
        lim = plan.max_velocity
        over = np.abs(new) > lim
        vel_clamps += over
        new = np.clip(new, -lim, lim)
        qc = q[ctrl]
        blocked = ((qc >= plan.upper[ctrl]) & (new > 0)) | ((qc <= plan.lower[ctrl]) & (new < 0))
        pos_clamps += blocked
        new[blocked] = 0.0
        cmd = new
        qdot[ctrl] = cmd

        rec["q"][k] = q
        rec["qdot"][k] = qdot
        rec["cmd"][k] = cmd
        rec["ik"][k] = ik_cmd
        rec["vor"][k] = vor.value
        rec["okr"][k] = okr.value
        rec["gyro_true"][k] = w_true
        rec["gyro_aff"][k] = g_aff
        rec["gyro_reaf"][k] = gyro_pred[k]
        rec["gyro_exaf"][k] = g_exaf
        rec["slip_true"][k] = slip_true
        rec["slip_aff"][k] = s_aff
        rec["slip_reaf"][k] = s_reaf
        rec["slip_exaf"][k] = s_exaf

        if plan.cam_mask[k] and cfg.record_flow:
            ff = dense_flow_field(chain, HeadState(q.copy(), qdot.copy(), t), target, f, grid)
            flows.append(ff.grid)
            flow_t.append(t)
            flow_frame.append(frame_idx)
        if plan.cam_mask[k]:
            frame_idx += 1

    h, w = len(plan.grid_v), len(plan.grid_u)
    return SimulationTrace(
        cfg=cfg,
        t=np.arange(N) * dt,
        gyro_emit=gyro_emit,
        cam_emit=cam_emit,
        flow=np.array(flows) if flows else np.zeros((0, h, w, 2)),
        flow_t=np.array(flow_t),
        flow_frame=np.array(flow_frame, dtype=np.int64),
        velocity_clamps=vel_clamps,
        position_clamps=pos_clamps,
        singular_ticks=int(singular),
        faults=int(faults),
        backend="python",
        **rec,
    )

"""Forward model, exafference and the Reafference / Sum / Mean combiners.

The forward model only sees what the robot knows about itself: encoder
positions and velocities of the measured joints. Unmeasured joints (the
mobile platform) are zeroed before prediction.

The flow forward model additionally accepts the rotation rate that the gyro
attributes to external causes (the gyro exafference). Adding it lets the
flow prediction account for eye counter-rotations that a VOR already
produced in response to that external rotation, so the OKR does not react
to the same disturbance a second time.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .controllers import EyeCommand, JointCommand
from .kinematics import HeadState, KinematicChain, frame_twist, joint_frames
from .sensors import GyroReading, RetinalSlip, centre_slip


class CombinerKind(str, enum.Enum):
    REAFFERENCE = "reafference"
    SUM = "sum"
    MEAN = "mean"

    @classmethod
    def parse(cls, name: "str | CombinerKind") -> "CombinerKind":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(f"unknown combiner {name!r}; expected one of {[k.value for k in cls]}") from None


@dataclass(frozen=True)
class Reafference:
    omega_pred: np.ndarray
    slip_pred: np.ndarray
    t: float


@dataclass(frozen=True)
class Exafference:
    """Afference minus reafference; a channel is ``None`` when not part of the reading."""

    omega_exaff: np.ndarray | None
    slip_exaff: np.ndarray | None
    t: float
    fault: bool = False


def encoder_view(chain: KinematicChain, state: HeadState) -> tuple[np.ndarray, np.ndarray]:
    """Joint positions and velocities as seen by the encoders."""
    mask = chain.measured_mask
    return np.where(mask, state.q, 0.0), np.where(mask, state.qdot, 0.0)


def predict_gyro_reafference(chain: KinematicChain, q_enc, qdot_enc) -> np.ndarray:
    """IMU-frame angular velocity explained by self-motion."""
    _, w = frame_twist(chain, q_enc, qdot_enc, "imu", local=True)
    return w


def imu_to_camera(chain: KinematicChain, q_enc) -> np.ndarray:
    """Rotation taking IMU-frame vectors to camera-frame vectors."""
    Rs, _ = joint_frames(chain, q_enc)
    imu, cam = chain.frame("imu"), chain.frame("camera")
    R_imu = Rs[imu.joint] @ imu.offset.rotation
    R_cam = Rs[cam.joint] @ cam.offset.rotation
    return R_cam.T @ R_imu


def predict_flow_reafference(
    chain: KinematicChain,
    q_enc,
    qdot_enc,
    Z: float,
    f: float = 1.0,
    omega_external=None,
) -> np.ndarray:
    """Centre retinal slip predicted from the camera twist of the encoder state.

    ``omega_external`` is an optional IMU-frame rotation rate of external
    origin that is added to the camera angular velocity.
    """
    if not Z > 0:
        raise ValueError("target distance Z must be positive")
    v_cam, w_cam = frame_twist(chain, q_enc, qdot_enc, "camera", local=True)
    if omega_external is not None:
        w_cam = w_cam + imu_to_camera(chain, q_enc) @ np.asarray(omega_external, dtype=float)
    return centre_slip(v_cam, w_cam, Z, f)


def compute_exafference(afference, reafference: Reafference, dt: float = 1e-3) -> Exafference:
    """Channel-wise ``afference - reafference``.

    The reafference must be the prediction for the afference's capture time;
    a mismatch larger than one control tick raises the fault flag.
    """
    if not isinstance(afference, (GyroReading, RetinalSlip)):
        raise TypeError(f"unsupported afference type {type(afference).__name__}")
    capture = afference.capture_t if np.isfinite(afference.capture_t) else afference.t
    fault = abs(capture - reafference.t) > dt * (1 + 1e-9)
    if isinstance(afference, GyroReading):
        return Exafference(np.asarray(afference.omega) - reafference.omega_pred, None, afference.t, fault)
    return Exafference(None, afference.value - reafference.slip_pred, afference.t, fault)


def combine(
    kind: CombinerKind | str,
    vor_out: EyeCommand,
    okr_out: EyeCommand,
    ik_out: JointCommand,
    eye_slots: tuple[int, int],
) -> JointCommand:
    """Merge the three stabilizers into one controllable-joint command.

    For ``REAFFERENCE`` the reflex commands must come from exafferences, for
    ``SUM`` and ``MEAN`` from raw afferences. ``MEAN`` divides every channel,
    neck included, by three.
    """
    kind = CombinerKind.parse(kind)
    out = np.array(ik_out.qdot, dtype=float)
    yaw, pitch = eye_slots
    out[yaw] += vor_out.qdot_yaw + okr_out.qdot_yaw
    out[pitch] += vor_out.qdot_pitch + okr_out.qdot_pitch
    if kind is CombinerKind.MEAN:
        out /= 3.0
    return JointCommand(out, kind.value, ik_out.singular)

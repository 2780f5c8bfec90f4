"""Individual gaze stabilizers: VOR, OKR and fixation-point inverse kinematics."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .kinematics import KinematicChain, joint_frames

log = logging.getLogger(__name__)

SINGULAR_THRESHOLD = 1e-4


@dataclass(frozen=True)
class EyeCommand:
    qdot_yaw: float
    qdot_pitch: float
    source: str
    fault: bool = False

    @property
    def value(self) -> np.ndarray:
        return np.array([self.qdot_yaw, self.qdot_pitch])

    def clamped(self, limit: float) -> "EyeCommand":
        """Per-axis clip to ``limit`` rad/s; never flips a sign."""
        yaw, pitch = np.clip(self.value, -limit, limit)
        if (yaw, pitch) != (self.qdot_yaw, self.qdot_pitch):
            log.debug("%s eye command clamped to %.3g rad/s", self.source, limit)
        return EyeCommand(float(yaw), float(pitch), self.source, self.fault)


@dataclass
class JointCommand:
    """Velocities for the controllable joints, in chain order."""

    qdot: np.ndarray
    source: str = "ik"
    singular: bool = False


@dataclass
class GazeTask:
    fixation_point: np.ndarray
    desired_fixation: np.ndarray


@dataclass
class IkConfig:
    Kp: float = 0.0
    damping: float = 0.01
    weight_flow: float = 0.1
    weight_head: float = 1.0

    def __post_init__(self):
        if self.damping <= 0:
            raise ValueError("damping must be positive")
        if self.weight_flow < 0 or self.weight_head < 0:
            raise ValueError("weights must be non-negative")
        if self.weight_flow == 0 and self.weight_head == 0:
            raise ValueError("weight_flow and weight_head cannot both be zero")


def vor_step(omega, k_vor: float = 1.0) -> EyeCommand:
    """Counter-rotate the eyes against head yaw (w_z) and pitch (w_y)."""
    omega = np.asarray(getattr(omega, "omega", omega), dtype=float)
    if not np.all(np.isfinite(omega)):
        return EyeCommand(0.0, 0.0, "VOR", fault=True)
    return EyeCommand(-k_vor * float(omega[2]), -k_vor * float(omega[1]), "VOR")


def okr_step(slip, k_okr: float = 0.8) -> EyeCommand:
    """Follow the retinal slip ``(u', v')``; invalid slip gives a zero command."""
    if slip is None:
        return EyeCommand(0.0, 0.0, "OKR")
    if hasattr(slip, "valid"):
        if not slip.valid:
            return EyeCommand(0.0, 0.0, "OKR")
        value = np.array([slip.udot, slip.vdot])
    else:
        value = np.asarray(slip, dtype=float)
    if not np.all(np.isfinite(value)):
        return EyeCommand(0.0, 0.0, "OKR", fault=True)
    return EyeCommand(k_okr * float(value[0]), k_okr * float(value[1]), "OKR")


def fixation_point(chain: KinematicChain, q, distance: float) -> np.ndarray:
    """Point on the optical axis at ``distance`` in front of the camera."""
    Rs, ps = joint_frames(chain, q)
    fr = chain.frame("camera")
    R = Rs[fr.joint] @ fr.offset.rotation
    c = Rs[fr.joint] @ fr.offset.translation + ps[fr.joint]
    return c + distance * R[:, 2]


def fixation_jacobian(chain: KinematicChain, q, distance: float) -> np.ndarray:
    """3 x n jacobian of the fixation point, treated as rigidly fixed to the camera."""
    Rs, ps = joint_frames(chain, q)
    fr = chain.frame("camera")
    R = Rs[fr.joint] @ fr.offset.rotation
    c = Rs[fr.joint] @ fr.offset.translation + ps[fr.joint]
    p = c + distance * R[:, 2]
    J = np.zeros((3, chain.n))
    for i in range(fr.joint + 1):
        a = Rs[i] @ chain.joints[i].axis
        J[:, i] = np.cross(a, p - ps[i])
    return J


def ik_feedforward(chain: KinematicChain, q, qdot_voluntary, distance: float) -> np.ndarray:
    """World velocity of the fixation point caused by the voluntary joints alone.

    ``qdot_voluntary`` is a full-length joint vector; only the voluntary
    (measured, not gaze-controlled) entries are used.
    """
    qdot_voluntary = np.asarray(qdot_voluntary, dtype=float)
    vol = chain.voluntary
    if len(vol) == 0:
        return np.zeros(3)
    J = fixation_jacobian(chain, q, distance)
    return J[:, vol] @ qdot_voluntary[vol]


def ik_weights(chain: KinematicChain, cfg: IkConfig) -> np.ndarray:
    """Diagonal joint-space cost over the controllable joints."""
    return np.array(
        [cfg.weight_flow if chain.joints[i].group == "eye" else cfg.weight_head for i in chain.controllable]
    )


def damped_weighted_solve(J: np.ndarray, xdot: np.ndarray, reg: np.ndarray) -> np.ndarray:
    """argmin_x |J x - xdot|^2 + x' diag(reg) x, solved in task space."""
    JR = J / reg
    A = JR @ J.T + np.eye(J.shape[0])
    return JR.T @ np.linalg.solve(A, xdot)


def ik_step(
    chain: KinematicChain,
    q,
    task: GazeTask,
    xdot_ff: np.ndarray,
    cfg: IkConfig,
    distance: float,
) -> JointCommand:
    """Map the corrective fixation-point velocity to controllable joint velocities.

    The corrective task velocity is ``Kp (x_des - x) - xdot_ff``: feedback
    toward the desired fixation plus cancellation of the self-induced motion.
    Redundancy is resolved with a diagonal cost: ``weight_head`` on neck
    joints, ``weight_flow`` on eye joints, plus ``damping**2`` on every joint.
    """
    ctrl = chain.controllable
    J = fixation_jacobian(chain, q, distance)[:, ctrl]
    xdot_des = cfg.Kp * (np.asarray(task.desired_fixation) - np.asarray(task.fixation_point)) - np.asarray(xdot_ff)
    reg = ik_weights(chain, cfg) + cfg.damping**2
    singular = np.linalg.svd(J, compute_uv=False)[-1] < SINGULAR_THRESHOLD
    if singular:
        log.warning("fixation jacobian near singular; damping bounds the IK output")
    if not np.any(xdot_des):
        return JointCommand(np.zeros(len(ctrl)), "IK", singular)
    return JointCommand(damped_weighted_solve(J, xdot_des, reg), "IK", singular)

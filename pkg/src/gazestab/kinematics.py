"""Serial revolute chain for the robot head: poses, rotations and jacobians.

Conventions
-----------
Each joint frame is obtained from its parent by first applying the fixed
``parent_offset`` (rotation and translation expressed in the parent frame)
and then rotating about the joint ``axis`` (expressed in the offset frame)
by ``q``::

    T_i = T_{i-1} @ Offset_i @ Rot(axis_i, q_i)

Named frames are rigidly attached to one joint frame (index ``-1`` means the
world) through an additional fixed offset. Jacobians are 6 x n with rows
``[linear velocity; angular velocity]`` in world coordinates.

The canonical head uses a "yaw axes point down" convention: a positive yaw
turns the camera to the right when seen from above.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

AXIS_TOL = 1e-12
ORTHO_TOL = 1e-9

JOINT_GROUPS = ("base", "neck", "eye")


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rotation_about(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis``, normalised here."""
    axis = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(axis)
    if not norm > 0:
        raise ValueError("rotation axis must be non-zero")
    x, y, z = axis / norm
    s, c = np.sin(angle), np.cos(angle)
    C = 1.0 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector (axis * angle) of ``R``; valid for angles below pi."""
    cos_angle = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-8:
        return 0.5 * w
    return angle / (2.0 * np.sin(angle)) * w


@dataclass(frozen=True)
class RigidTransform:
    """Rotation followed by translation: ``p_parent = R @ p_child + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=ORTHO_TOL) or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, t: Sequence[float]) -> "RigidTransform":
        return cls(np.eye(3), np.asarray(t, dtype=float))

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, p: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(p, dtype=float) + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T


@dataclass(frozen=True)
class JointSpec:
    """One revolute joint.

    ``measured`` joints are seen by the robot's encoders; the mobile platform
    is not. ``group`` is one of ``base``, ``neck`` or ``eye``.
    """

    name: str
    axis: np.ndarray
    parent_offset: RigidTransform = field(default_factory=RigidTransform)
    limits: tuple[float, float] = (-np.pi, np.pi)
    controllable: bool = True
    measured: bool = True
    group: str = "neck"
    max_velocity: float = 10.0

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        if abs(np.linalg.norm(axis) - 1.0) > AXIS_TOL:
            raise ValueError(f"joint {self.name!r}: axis must be a unit vector")
        lo, hi = (float(v) for v in self.limits)
        if not lo < hi:
            raise ValueError(f"joint {self.name!r}: limits must satisfy min < max")
        if self.group not in JOINT_GROUPS:
            raise ValueError(f"joint {self.name!r}: unknown group {self.group!r}")
        if self.max_velocity <= 0:
            raise ValueError(f"joint {self.name!r}: max_velocity must be positive")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "limits", (lo, hi))


@dataclass
class HeadState:
    """Joint positions and velocities for every joint, including the base."""

    q: np.ndarray
    qdot: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qdot = np.asarray(self.qdot, dtype=float)
        if self.q.shape != self.qdot.shape:
            raise ValueError("q and qdot must have the same shape")

    @classmethod
    def zeros(cls, n: int, t: float = 0.0) -> "HeadState":
        return cls(np.zeros(n), np.zeros(n), t)


@dataclass(frozen=True)
class FrameSpec:
    joint: int
    offset: RigidTransform = field(default_factory=RigidTransform)


class KinematicChain:
    """Ordered revolute chain with named attachment frames."""

    def __init__(self, joints: Sequence[JointSpec], frames: Mapping[str, FrameSpec]):
        self.joints = tuple(joints)
        self.frames = dict(frames)
        n = len(self.joints)
        names = [j.name for j in self.joints]
        if len(set(names)) != n:
            raise ValueError("joint names must be unique")
        for name, fr in self.frames.items():
            if not -1 <= fr.joint < n:
                raise ValueError(f"frame {name!r} bound to missing joint index {fr.joint}")
        neck = [i for i, j in enumerate(self.joints) if j.group == "neck"]
        eyes = [i for i, j in enumerate(self.joints) if j.group == "eye" and j.controllable]
        if len(eyes) < 2:
            raise ValueError("chain needs at least two controllable eye joints (yaw, pitch)")
        if neck and min(eyes) < max(neck):
            raise ValueError("eye joints must be distal to every neck joint")
        for required in ("imu", "camera"):
            if required not in self.frames:
                raise ValueError(f"chain must define a {required!r} frame")
        self._index = {name: i for i, name in enumerate(names)}

    def __len__(self) -> int:
        return len(self.joints)

    @property
    def n(self) -> int:
        return len(self.joints)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown joint {name!r}") from None

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(j.name for j in self.joints)

    @property
    def controllable(self) -> np.ndarray:
        return np.array([i for i, j in enumerate(self.joints) if j.controllable], dtype=np.intp)

    @property
    def measured_mask(self) -> np.ndarray:
        return np.array([j.measured for j in self.joints])

    @property
    def voluntary(self) -> np.ndarray:
        """Joints the robot moves itself but the gaze controllers do not command."""
        return np.array(
            [i for i, j in enumerate(self.joints) if j.measured and not j.controllable], dtype=np.intp
        )

    @property
    def eye_joints(self) -> tuple[int, int]:
        """Chain indices of the (yaw, pitch) eye joints."""
        eyes = [i for i, j in enumerate(self.joints) if j.group == "eye" and j.controllable]
        return eyes[0], eyes[1]

    @property
    def eye_slots(self) -> tuple[int, int]:
        """Positions of the eye joints inside the controllable-joint vector."""
        ctrl = list(self.controllable)
        yaw, pitch = self.eye_joints
        return ctrl.index(yaw), ctrl.index(pitch)

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.limits[0] for j in self.joints])

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.limits[1] for j in self.joints])

    def frame(self, name: str) -> FrameSpec:
        try:
            return self.frames[name]
        except KeyError:
            raise KeyError(f"unknown frame {name!r}") from None

    def check_q(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n,):
            raise ValueError(f"expected {self.n} joint values, got shape {q.shape}")
        return q

    # -- config round trip ---------------------------------------------------

    def to_dict(self) -> dict:
        def tf(t: RigidTransform) -> dict:
            return {"rotation": t.rotation.tolist(), "translation": t.translation.tolist()}

        return {
            "joints": [
                {
                    "name": j.name,
                    "axis": j.axis.tolist(),
                    "offset": tf(j.parent_offset),
                    "limits": list(j.limits),
                    "controllable": j.controllable,
                    "measured": j.measured,
                    "group": j.group,
                    "max_velocity": j.max_velocity,
                }
                for j in self.joints
            ],
            "frames": {
                name: {"joint": self.joints[fr.joint].name if fr.joint >= 0 else None, **tf(fr.offset)}
                for name, fr in self.frames.items()
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "KinematicChain":
        def tf(d: Mapping | None) -> RigidTransform:
            d = d or {}
            return RigidTransform(
                np.asarray(d.get("rotation", np.eye(3)), dtype=float),
                np.asarray(d.get("translation", np.zeros(3)), dtype=float),
            )

        joints = []
        for jd in data["joints"]:
            joints.append(
                JointSpec(
                    name=jd["name"],
                    axis=np.asarray(jd["axis"], dtype=float),
                    parent_offset=tf(jd.get("offset")),
                    limits=tuple(jd.get("limits", (-np.pi, np.pi))),
                    controllable=bool(jd.get("controllable", True)),
                    measured=bool(jd.get("measured", True)),
                    group=jd.get("group", "neck"),
                    max_velocity=float(jd.get("max_velocity", 10.0)),
                )
            )
        index = {j.name: i for i, j in enumerate(joints)}
        frames = {}
        for name, fd in data["frames"].items():
            jname = fd.get("joint")
            if jname is not None and jname not in index:
                raise ValueError(f"frame {name!r} references unknown joint {jname!r}")
            frames[name] = FrameSpec(index[jname] if jname is not None else -1, tf(fd))
        return cls(joints, frames)


# Camera frame: x left, y up, z along the optical axis. With image axes
# u (right) = -x/z and v (down) = -y/z this makes the centre-pixel flow
# u' = v_x/Z + w_y, v' = v_y/Z - w_x.
CAMERA_MOUNT = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
# IMU mounted with z along the (downward) yaw axes and y along the pitch axes.
IMU_MOUNT = rotation_about((0.0, 1.0, 0.0), np.pi)

DOWN = (0.0, 0.0, -1.0)
LEFT = (0.0, 1.0, 0.0)
FORWARD = (1.0, 0.0, 0.0)


def canonical_chain() -> KinematicChain:
    """Desk-scale stand-in for a humanoid head on a hip and mobile platform.

    world -> platform yaw (external) -> hip yaw (voluntary) -> neck yaw,
    pitch, roll -> cyclopean eye yaw, pitch.
    """
    T = RigidTransform.from_translation
    joints = [
        JointSpec("platform_yaw", DOWN, controllable=False, measured=False, group="base"),
        JointSpec("hip_yaw", DOWN, T((0.0, 0.0, 0.5)), controllable=False, group="base"),
        JointSpec("neck_yaw", DOWN, T((0.0, 0.0, 0.6)), (-1.2, 1.2), max_velocity=3.0),
        JointSpec("neck_pitch", LEFT, limits=(-0.6, 0.6), max_velocity=3.0),
        JointSpec("neck_roll", FORWARD, limits=(-0.5, 0.5), max_velocity=3.0),
        JointSpec("eye_yaw", DOWN, T((0.1, 0.0, 0.15)), (-1.0, 1.0), group="eye", max_velocity=8.0),
        JointSpec("eye_pitch", LEFT, limits=(-0.7, 0.7), group="eye", max_velocity=8.0),
    ]
    frames = {
        "world": FrameSpec(-1),
        "platform": FrameSpec(0),
        "hip": FrameSpec(1),
        "neck_base": FrameSpec(2),
        "imu": FrameSpec(4, RigidTransform(IMU_MOUNT)),
        "camera": FrameSpec(6, RigidTransform(CAMERA_MOUNT)),
    }
    return KinematicChain(joints, frames)


# -- forward kinematics ------------------------------------------------------


def joint_frames(chain: KinematicChain, q) -> tuple[np.ndarray, np.ndarray]:
    """World rotation (n, 3, 3) and origin (n, 3) of every joint frame."""
    q = chain.check_q(q)
    n = chain.n
    Rs = np.empty((n, 3, 3))
    ps = np.empty((n, 3))
    R = np.eye(3)
    p = np.zeros(3)
    for i, joint in enumerate(chain.joints):
        off = joint.parent_offset
        p = R @ off.translation + p
        R = R @ off.rotation @ rotation_about(joint.axis, q[i])
        Rs[i] = R
        ps[i] = p
    return Rs, ps


def _frame_from_joints(chain: KinematicChain, Rs, ps, name: str) -> RigidTransform:
    fr = chain.frame(name)
    if fr.joint < 0:
        return fr.offset
    return RigidTransform(Rs[fr.joint], ps[fr.joint]) @ fr.offset


def forward_kinematics(chain: KinematicChain, q) -> dict[str, RigidTransform]:
    """World pose of every named frame."""
    Rs, ps = joint_frames(chain, q)
    return {name: _frame_from_joints(chain, Rs, ps, name) for name in chain.frames}


def frame_pose(chain: KinematicChain, q, frame: str) -> RigidTransform:
    chain.frame(frame)
    Rs, ps = joint_frames(chain, q)
    return _frame_from_joints(chain, Rs, ps, frame)


def frame_rotation(chain: KinematicChain, q, frame: str) -> np.ndarray:
    return frame_pose(chain, q, frame).rotation


def point_jacobian(chain: KinematicChain, q, joint: int, point: np.ndarray) -> np.ndarray:
    """Linear-velocity jacobian (3 x n) of a world point rigidly fixed to ``joint``."""
    Rs, ps = joint_frames(chain, q)
    J = np.zeros((3, chain.n))
    for i in range(joint + 1):
        w = Rs[i] @ chain.joints[i].axis
        J[:, i] = np.cross(w, point - ps[i])
    return J


def geometric_jacobian(chain: KinematicChain, q, frame: str) -> np.ndarray:
    """6 x n jacobian of ``frame``: rows are world linear then angular velocity.

    Columns of joints distal to the frame are exactly zero.
    """
    fr = chain.frame(frame)
    Rs, ps = joint_frames(chain, q)
    origin = _frame_from_joints(chain, Rs, ps, frame).translation
    J = np.zeros((6, chain.n))
    for i in range(fr.joint + 1):
        w = Rs[i] @ chain.joints[i].axis
        J[:3, i] = np.cross(w, origin - ps[i])
        J[3:, i] = w
    return J


def frame_twist(chain: KinematicChain, q, qdot, frame: str, local: bool = False):
    """Linear and angular velocity of ``frame``.

    With ``local=True`` both vectors are expressed in the frame itself,
    i.e. ``blockdiag(R.T, R.T) @ J @ qdot``.
    """
    qdot = chain.check_q(qdot)
    twist = geometric_jacobian(chain, q, frame) @ qdot
    v, w = twist[:3], twist[3:]
    if local:
        R = frame_rotation(chain, q, frame)
        return R.T @ v, R.T @ w
    return v, w

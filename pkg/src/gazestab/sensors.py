"""Gyroscope, retinal-slip and dense optical-flow simulation.

Image model: normalised pinhole with focal length ``f``; ``u`` grows to the
right and ``v`` downwards. The camera frame has x to the left, y up and z
along the optical axis, so a static point at depth ``Z`` projects to
``u = -f x / Z`` and ``v = -f y / Z``.

The scene is a plane through the visual target. Retinal slip is the image
velocity of the scene content at the image centre (the fovea); dense flow is
evaluated on a fixed pixel grid, each pixel seeing the plane at its own depth.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .kinematics import HeadState, KinematicChain, frame_pose, frame_twist, joint_frames
from .metrics import FlowField

log = logging.getLogger(__name__)

GYRO_STREAM = 0
CAMERA_STREAM = 1


class ScenarioFault(RuntimeError):
    """The simulated scene became geometrically invalid (e.g. target behind camera)."""


@dataclass
class SensorConfig:
    rate: float
    latency: float = 0.0
    noise_std: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("sensor rate must be positive")
        if self.latency < 0:
            raise ValueError("sensor latency must be non-negative")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @classmethod
    def gyro_default(cls) -> "SensorConfig":
        return cls(rate=200.0, latency=0.005, noise_std=0.001)

    @classmethod
    def camera_default(cls) -> "SensorConfig":
        return cls(rate=30.0, latency=1.0 / 30.0, noise_std=0.001)


@dataclass(frozen=True)
class GyroReading:
    omega: np.ndarray
    t: float
    capture_t: float


@dataclass(frozen=True)
class RetinalSlip:
    udot: float
    vdot: float
    t: float
    capture_t: float = float("nan")
    valid: bool = True

    @property
    def value(self) -> np.ndarray:
        return np.array([self.udot, self.vdot])


@dataclass
class SceneTarget:
    """Visual target lying on a planar scene with world normal ``normal``.

    ``normal`` points from the scene back toward the robot.
    """

    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    normal: np.ndarray = field(default_factory=lambda: np.array([-1.0, 0.0, 0.0]))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        n = np.asarray(self.normal, dtype=float)
        self.normal = n / np.linalg.norm(n)


@dataclass(frozen=True)
class ImageGrid:
    """Pixel centres in focal-length units; shape (h, w)."""

    u: np.ndarray
    v: np.ndarray

    @classmethod
    def default(cls, f: float = 1.0, w: int = 17, h: int = 13, half_angle: float = 0.4) -> "ImageGrid":
        step = f * np.tan(half_angle) / ((w - 1) / 2.0)
        u = step * (np.arange(w) - (w - 1) / 2.0)
        v = step * (np.arange(h) - (h - 1) / 2.0)
        return cls(u, v)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.v), len(self.u)


def interaction_matrix(u: float, v: float, Z: float, f: float = 1.0) -> np.ndarray:
    """2 x 6 image jacobian mapping the camera twist ``[v_cam, w_cam]`` to ``(u', v')``.

    Specialised at ``u = v = 0`` it reduces to
    ``u' = (f/Z) v_x + f w_y`` and ``v' = (f/Z) v_y - f w_x``.
    """
    return np.array(
        [
            [f / Z, 0.0, u / Z, -u * v / f, f + u * u / f, v],
            [0.0, f / Z, v / Z, -(f + v * v / f), u * v / f, -u],
        ]
    )


def true_gyro(chain: KinematicChain, state: HeadState) -> np.ndarray:
    """Angular velocity of the IMU, expressed in the IMU frame (rad/s)."""
    _, w = frame_twist(chain, state.q, state.qdot, "imu", local=True)
    return w


def fovea_depth(R_cam: np.ndarray, c: np.ndarray, target: SceneTarget) -> float:
    """Distance along the optical axis from the camera centre to the scene plane."""
    z_axis = R_cam[:, 2]
    denom = float(z_axis @ target.normal)
    if denom >= 0.0:
        raise ScenarioFault("optical axis does not intersect the scene plane")
    Z = float((target.position - c) @ target.normal) / denom
    if not Z > 0.0:
        raise ScenarioFault(f"visual target behind the camera (Z = {Z:.4g})")
    return Z


def centre_slip(v_cam: np.ndarray, w_cam: np.ndarray, Z: float, f: float) -> np.ndarray:
    """Centre-pixel image velocity for a camera-frame twist."""
    return np.array([f / Z * v_cam[0] + f * w_cam[1], f / Z * v_cam[1] - f * w_cam[0]])


def true_retinal_slip(
    chain: KinematicChain, state: HeadState, target: SceneTarget, f: float = 1.0
) -> np.ndarray:
    """Apparent velocity (rad/s) of the scene content at the image centre.

    Combines camera self-motion with the target's own world velocity.
    """
    pose = frame_pose(chain, state.q, "camera")
    v_cam, w_cam = frame_twist(chain, state.q, state.qdot, "camera", local=True)
    Z = fovea_depth(pose.rotation, pose.translation, target)
    v_rel = v_cam - pose.rotation.T @ target.velocity
    return centre_slip(v_rel, w_cam, Z, f)


def dense_flow_field(
    chain: KinematicChain,
    state: HeadState,
    scene: SceneTarget,
    f: float = 1.0,
    grid: ImageGrid | None = None,
) -> FlowField:
    """Analytic optical flow on a pixel grid looking at the scene plane."""
    grid = grid or ImageGrid.default(f)
    pose = frame_pose(chain, state.q, "camera")
    v_cam, w_cam = frame_twist(chain, state.q, state.qdot, "camera", local=True)
    v_rel = v_cam - pose.rotation.T @ scene.velocity
    flow = flow_on_grid(
        pose.rotation, pose.translation, v_rel, w_cam, scene.position, scene.normal, grid, f
    )
    return FlowField(flow, state.t)


def flow_on_grid(R_cam, c, v_rel, w_cam, plane_point, normal, grid: ImageGrid, f: float) -> np.ndarray:
    """Vectorised full interaction-matrix flow, returns (h, w, 2)."""
    U, V = np.meshgrid(grid.u, grid.v)
    # ray direction in camera coordinates with unit depth
    d = np.stack([-U / f, -V / f, np.ones_like(U)], axis=-1)
    n_cam = R_cam.T @ normal
    denom = d @ n_cam
    Z = float((plane_point - c) @ normal) / denom
    if np.any(~(Z > 0.0)):
        raise ScenarioFault("scene plane not in front of every pixel")
    vx, vy, vz = v_rel
    wx, wy, wz = w_cam
    du = f / Z * vx + U / Z * vz - U * V / f * wx + (f + U * U / f) * wy + V * wz
    dv = f / Z * vy + V / Z * vz - (f + V * V / f) * wx + U * V / f * wy - U * wz
    return np.stack([du, dv], axis=-1)


# -- sampling ----------------------------------------------------------------


def emission_mask(n_ticks: int, rate: float, control_rate: float) -> np.ndarray:
    """True on control ticks where a sensor running at ``rate`` emits a sample."""
    k = np.arange(n_ticks, dtype=float)
    idx = np.floor(k * rate / control_rate)
    mask = np.empty(n_ticks, dtype=bool)
    if n_ticks:
        mask[0] = True
        mask[1:] = idx[1:] > idx[:-1]
    return mask


def latency_ticks(cfg: SensorConfig, control_rate: float) -> int:
    return int(round(cfg.latency * control_rate))


def noise_generator(cfg: SensorConfig, stream: int, run_seed: int = 0) -> np.random.Generator:
    """Counter-based stream, one per sensor per run."""
    seed = cfg.seed if cfg.seed is not None else run_seed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), stream])))


class SensorChannel:
    """Rate limiting, latency and additive Gaussian noise for one sensor.

    Call :meth:`push` once per control tick with the current ground truth.
    """

    def __init__(self, cfg: SensorConfig, control_rate: float, channels: int, stream: int, run_seed: int = 0):
        self.cfg = cfg
        self.control_rate = float(control_rate)
        self.dt = 1.0 / self.control_rate
        self.channels = channels
        self.delay = latency_ticks(cfg, control_rate)
        self._history: deque[np.ndarray] = deque(maxlen=self.delay + 1)
        self._rng = noise_generator(cfg, stream, run_seed)
        self.k = 0
        self.samples = 0

    def _emits(self, k: int) -> bool:
        if k == 0:
            return True
        r, cr = self.cfg.rate, self.control_rate
        return np.floor(k * r / cr) > np.floor((k - 1) * r / cr)

    def push(self, truth) -> tuple[np.ndarray, int] | None:
        """Returns ``(value, capture_tick)`` on emission ticks once the delay line is full."""
        k = self.k
        self.k += 1
        self._history.append(np.asarray(truth, dtype=float))
        if not self._emits(k) or k < self.delay:
            return None
        value = self._history[0] if len(self._history) > self.delay else self._history[-1]
        if self.cfg.noise_std > 0:
            value = value + self.cfg.noise_std * self._rng.standard_normal(self.channels)
        self.samples += 1
        return value, k - self.delay


def sample_gyro(channel: SensorChannel, truth: np.ndarray, t: float) -> GyroReading | None:
    out = channel.push(truth)
    if out is None:
        return None
    value, capture = out
    return GyroReading(value, t, capture * channel.dt)


def sample_retinal_slip(channel: SensorChannel, truth: np.ndarray, t: float) -> RetinalSlip | None:
    k = channel.k
    out = channel.push(truth)
    if out is None:
        if channel._emits(k):
            # frame boundary before the first delayed frame is available
            return RetinalSlip(0.0, 0.0, t, valid=False)
        return None
    value, capture = out
    return RetinalSlip(float(value[0]), float(value[1]), t, capture * channel.dt)


def camera_pose_and_twist(chain: KinematicChain, q, qdot):
    """Camera rotation, centre and camera-frame twist from one FK pass."""
    Rs, ps = joint_frames(chain, q)
    fr = chain.frame("camera")
    R = Rs[fr.joint] @ fr.offset.rotation
    c = Rs[fr.joint] @ fr.offset.translation + ps[fr.joint]
    w = np.zeros(3)
    v = np.zeros(3)
    for i in range(fr.joint + 1):
        a = Rs[i] @ chain.joints[i].axis
        w += a * qdot[i]
        v += np.cross(a, c - ps[i]) * qdot[i]
    return R, c, R.T @ v, R.T @ w

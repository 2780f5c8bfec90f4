"""Perturbation scenarios, the closed-loop run and its trace.

Three perturbations are reproduced:

* ``SelfRobot``: the robot swings its own hip yaw joint. The motion is
  known to the encoders and to the IK feed-forward.
* ``ExternalRobot``: the mobile platform yaws underneath the robot. No
  encoder sees it.
* ``ExternalTarget``: the visual scene (a plane through the target)
  translates sideways so the target subtends a sinusoidal angle.

The loop runs at a fixed control rate. On every tick ``k``:

1. the perturbation channel is set analytically for ``t_k``;
2. controllable joints are Euler-integrated with the previous command;
3. ground truth and the encoder-based predictions are evaluated;
4. sensors are sampled (rate, latency, noise) and exafferences formed;
5. the stabilizers run and their outputs are combined into ``cmd_k``,
   which is applied over ``[t_k, t_{k+1})``;
6. the state, with ``qdot`` equal to the applied command, is recorded, and
   a dense flow snapshot is taken on camera frame ticks.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .controllers import IkConfig
from .fusion import CombinerKind
from .kinematics import KinematicChain, canonical_chain, joint_frames
from .metrics import StabilizationIndex, stabilization_index
from .sensors import (
    CAMERA_STREAM,
    GYRO_STREAM,
    ImageGrid,
    SensorConfig,
    emission_mask,
    latency_ticks,
    noise_generator,
)

log = logging.getLogger(__name__)

TRACE_SCHEMA = "gazestab-trace/1"
FLOW_SCHEMA = "gazestab-flow/1"

CONTROLLERS = ("none", "ik", "vor", "okr", "combined")


class ScenarioKind(str, enum.Enum):
    SELF_ROBOT = "SelfRobot"
    EXTERNAL_ROBOT = "ExternalRobot"
    EXTERNAL_TARGET = "ExternalTarget"

    @classmethod
    def parse(cls, name: "str | ScenarioKind") -> "ScenarioKind":
        if isinstance(name, cls):
            return name
        key = str(name).replace("_", "").replace("-", "").lower()
        for kind in cls:
            if kind.value.lower() == key:
                return kind
        raise ValueError(f"unknown scenario {name!r}; expected one of {[k.value for k in cls]}")


# amplitude (rad), frequency (Hz)
REFERENCE_PERTURBATIONS = {
    ScenarioKind.SELF_ROBOT: (0.48, 0.125),
    ScenarioKind.EXTERNAL_ROBOT: (0.48, 0.125),
    ScenarioKind.EXTERNAL_TARGET: (0.1, 0.066),
}

PERTURBED_JOINT = {
    ScenarioKind.SELF_ROBOT: "hip_yaw",
    ScenarioKind.EXTERNAL_ROBOT: "platform_yaw",
}


def parse_controller(name: str) -> tuple[str, CombinerKind | None]:
    """Map a controller label to ``(controller, combiner)``.

    Combiner names are accepted directly, e.g. ``"sum"`` means the combined
    controller with the Sum combiner.
    """
    key = str(name).lower()
    if key in ("none", "ik", "vor", "okr"):
        return key, None
    if key == "combined":
        return key, None
    return "combined", CombinerKind.parse(key)


@dataclass
class ScenarioConfig:
    kind: ScenarioKind = ScenarioKind.SELF_ROBOT
    amplitude: float = 0.48
    frequency: float = 0.125
    duration: float = 32.0
    target_distance: float = 2.0
    control_rate: float = 1000.0
    gyro: SensorConfig = field(default_factory=SensorConfig.gyro_default)
    camera: SensorConfig = field(default_factory=SensorConfig.camera_default)
    controller: str = "none"
    combiner: CombinerKind = CombinerKind.REAFFERENCE
    k_vor: float = 1.0
    k_okr: float = 0.8
    ik: IkConfig = field(default_factory=IkConfig)
    focal: float = 1.0
    seed: int = 0
    voluntary_eye_rate: tuple[float, float] = (0.0, 0.0)
    grid_width: int = 17
    grid_height: int = 13
    half_angle: float = 0.4
    record_flow: bool = True
    chain: KinematicChain = field(default_factory=canonical_chain, repr=False)

    def __post_init__(self):
        self.kind = ScenarioKind.parse(self.kind)
        controller, combiner = parse_controller(self.controller)
        self.controller = controller
        self.combiner = combiner or CombinerKind.parse(self.combiner)
        if self.frequency <= 0:
            raise ValueError("frequency must be positive")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        periods = self.duration * self.frequency
        if periods < 2.0 - 1e-9:
            raise ValueError(f"duration covers only {periods:.2f} perturbation periods (need >= 2)")
        if periods < 4.0 - 1e-9:
            log.info("duration covers %.2f perturbation periods (fewer than 4)", periods)
        fastest = max(self.gyro.rate, self.camera.rate)
        if self.control_rate < fastest:
            raise ValueError("control_rate must not be below any sensor rate")
        if self.control_rate < 10.0 * fastest - 1e-9:
            log.info("control rate is %.1fx the fastest sensor rate", self.control_rate / fastest)
        if not self.target_distance > 0:
            raise ValueError("target_distance must be positive")
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")
        if self.kind is ScenarioKind.EXTERNAL_TARGET and self.amplitude >= np.pi / 2:
            raise ValueError("target angular amplitude must stay below pi/2")
        self.voluntary_eye_rate = tuple(float(v) for v in self.voluntary_eye_rate)

    @classmethod
    def reference(cls, kind: "str | ScenarioKind", **overrides) -> "ScenarioConfig":
        """Config with the reference amplitude and frequency for ``kind``."""
        kind = ScenarioKind.parse(kind)
        amplitude, frequency = REFERENCE_PERTURBATIONS[kind]
        params = {"amplitude": amplitude, "frequency": frequency, **overrides}
        return cls(kind=kind, **params)

    @property
    def label(self) -> str:
        return self.combiner.value if self.controller == "combined" else self.controller

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration * self.control_rate))

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    def noiseless(self) -> "ScenarioConfig":
        return replace(
            self,
            gyro=replace(self.gyro, noise_std=0.0),
            camera=replace(self.camera, noise_std=0.0),
        )

    def to_dict(self) -> dict:
        def sensor(s: SensorConfig) -> dict:
            return {"rate": s.rate, "latency": s.latency, "noise_std": s.noise_std, "seed": s.seed}

        return {
            "scenario": {
                "kind": self.kind.value,
                "amplitude": self.amplitude,
                "frequency": self.frequency,
                "duration": self.duration,
                "target_distance": self.target_distance,
                "control_rate": self.control_rate,
                "focal": self.focal,
                "grid": {"width": self.grid_width, "height": self.grid_height, "half_angle": self.half_angle},
            },
            "sensors": {"gyro": sensor(self.gyro), "camera": sensor(self.camera)},
            "controller": {
                "name": self.controller,
                "combiner": self.combiner.value,
                "k_vor": self.k_vor,
                "k_okr": self.k_okr,
                "voluntary_eye_rate": list(self.voluntary_eye_rate),
                "ik": {
                    "Kp": self.ik.Kp,
                    "damping": self.ik.damping,
                    "weight_flow": self.ik.weight_flow,
                    "weight_head": self.ik.weight_head,
                },
            },
            "seed": self.seed,
            "chain": self.chain.to_dict(),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- perturbations -----------------------------------------------------------


@dataclass
class Perturbation:
    """Motion channels at one or many instants.

    ``joint`` names the perturbed joint (``None`` for ExternalTarget).
    ``target_offset``/``target_velocity`` have a trailing axis of size 3.
    """

    joint: str | None
    angle: np.ndarray
    rate: np.ndarray
    target_offset: np.ndarray
    target_velocity: np.ndarray
    voluntary: bool


def perturbation_signal(cfg: ScenarioConfig, t) -> Perturbation:
    """Sinusoidal perturbation ``A sin(2 pi f t)`` routed to the scenario's channel.

    For ExternalTarget the angle is the target direction seen from the
    nominal camera, realised by translating the scene plane sideways by
    ``Z tan(angle)``.
    """
    t = np.asarray(t, dtype=float)
    w = 2.0 * np.pi * cfg.frequency
    angle = cfg.amplitude * np.sin(w * t)
    rate = cfg.amplitude * w * np.cos(w * t)
    zeros3 = np.zeros(t.shape + (3,))
    if cfg.kind is ScenarioKind.EXTERNAL_TARGET:
        Z = cfg.target_distance
        offset = zeros3.copy()
        velocity = zeros3.copy()
        # scene translates along world +y (left), so the target drifts left
        offset[..., 1] = Z * np.tan(angle)
        velocity[..., 1] = Z * rate / np.cos(angle) ** 2
        return Perturbation(None, angle, rate, offset, velocity, False)
    joint = PERTURBED_JOINT[cfg.kind]
    return Perturbation(joint, angle, rate, zeros3, zeros3.copy(), cfg.kind is ScenarioKind.SELF_ROBOT)


def nominal_camera(chain: KinematicChain) -> tuple[np.ndarray, np.ndarray]:
    """Camera rotation and centre at the zero configuration."""
    Rs, ps = joint_frames(chain, np.zeros(chain.n))
    fr = chain.frame("camera")
    return Rs[fr.joint] @ fr.offset.rotation, Rs[fr.joint] @ fr.offset.translation + ps[fr.joint]


def nominal_target(chain: KinematicChain, Z: float) -> tuple[np.ndarray, np.ndarray]:
    """Target position and scene-plane normal facing the nominal camera."""
    R, c = nominal_camera(chain)
    axis = R[:, 2]
    return c + Z * axis, -axis


# -- loop plan ---------------------------------------------------------------


MODES = {"none": 0, "ik": 1, "vor": 2, "okr": 3, "combined": 4}
COMBINERS = {CombinerKind.REAFFERENCE: 0, CombinerKind.SUM: 1, CombinerKind.MEAN: 2}


@dataclass
class LoopPlan:
    """Everything a backend needs, precomputed as flat arrays."""

    cfg: ScenarioConfig
    n_ticks: int
    dt: float
    axes: np.ndarray
    off_R: np.ndarray
    off_t: np.ndarray
    imu_joint: int
    imu_R: np.ndarray
    imu_t: np.ndarray
    cam_joint: int
    cam_R: np.ndarray
    cam_t: np.ndarray
    measured: np.ndarray
    ctrl: np.ndarray
    voluntary: np.ndarray
    eye_slots: tuple[int, int]
    lower: np.ndarray
    upper: np.ndarray
    max_velocity: np.ndarray
    reg: np.ndarray
    pert_joint: int
    pert_q: np.ndarray
    pert_qdot: np.ndarray
    target_p0: np.ndarray
    normal: np.ndarray
    target_off: np.ndarray
    target_vel: np.ndarray
    x_des: np.ndarray
    gyro_mask: np.ndarray
    cam_mask: np.ndarray
    gyro_delay: int
    cam_delay: int
    gyro_noise: np.ndarray
    cam_noise: np.ndarray
    grid_u: np.ndarray
    grid_v: np.ndarray
    mode: int
    combiner: int


def _noise_block(cfg: SensorConfig, mask: np.ndarray, delay: int, channels: int, stream: int, seed: int):
    emitted = np.flatnonzero(mask)
    count = int(np.sum(emitted >= delay))
    if cfg.noise_std == 0.0:
        return np.zeros((count, channels))
    rng = noise_generator(cfg, stream, seed)
    return cfg.noise_std * rng.standard_normal((count, channels))


def build_plan(cfg: ScenarioConfig) -> LoopPlan:
    chain = cfg.chain
    N = cfg.n_ticks
    dt = 1.0 / cfg.control_rate
    t = np.arange(N) * dt
    pert = perturbation_signal(cfg, t)
    target_p0, normal = nominal_target(chain, cfg.target_distance)
    gyro_mask = emission_mask(N, cfg.gyro.rate, cfg.control_rate)
    cam_mask = emission_mask(N, cfg.camera.rate, cfg.control_rate)
    gyro_delay = latency_ticks(cfg.gyro, cfg.control_rate)
    cam_delay = latency_ticks(cfg.camera, cfg.control_rate)
    imu, cam = chain.frame("imu"), chain.frame("camera")
    if imu.joint < 0 or cam.joint < 0:
        raise ValueError("imu and camera frames must be attached to joints")
    from .controllers import ik_weights

    grid = ImageGrid.default(cfg.focal, cfg.grid_width, cfg.grid_height, cfg.half_angle)
    ctrl = chain.controllable
    return LoopPlan(
        cfg=cfg,
        n_ticks=N,
        dt=dt,
        axes=np.array([j.axis for j in chain.joints]),
        off_R=np.array([j.parent_offset.rotation for j in chain.joints]),
        off_t=np.array([j.parent_offset.translation for j in chain.joints]),
        imu_joint=imu.joint,
        imu_R=imu.offset.rotation.copy(),
        imu_t=imu.offset.translation.copy(),
        cam_joint=cam.joint,
        cam_R=cam.offset.rotation.copy(),
        cam_t=cam.offset.translation.copy(),
        measured=chain.measured_mask.astype(np.int8),
        ctrl=ctrl.astype(np.intp),
        voluntary=chain.voluntary.astype(np.intp),
        eye_slots=chain.eye_slots,
        lower=chain.lower,
        upper=chain.upper,
        max_velocity=np.array([chain.joints[i].max_velocity for i in ctrl]),
        reg=ik_weights(chain, cfg.ik) + cfg.ik.damping**2,
        pert_joint=chain.index(pert.joint) if pert.joint else -1,
        pert_q=np.ascontiguousarray(pert.angle),
        pert_qdot=np.ascontiguousarray(pert.rate),
        target_p0=target_p0,
        normal=normal,
        target_off=np.ascontiguousarray(pert.target_offset),
        target_vel=np.ascontiguousarray(pert.target_velocity),
        x_des=target_p0.copy(),
        gyro_mask=gyro_mask.astype(np.int8),
        cam_mask=cam_mask.astype(np.int8),
        gyro_delay=gyro_delay,
        cam_delay=cam_delay,
        gyro_noise=_noise_block(cfg.gyro, gyro_mask, gyro_delay, 3, GYRO_STREAM, cfg.seed),
        cam_noise=_noise_block(cfg.camera, cam_mask, cam_delay, 2, CAMERA_STREAM, cfg.seed),
        grid_u=grid.u,
        grid_v=grid.v,
        mode=MODES[cfg.controller],
        combiner=COMBINERS[cfg.combiner],
    )


# -- trace -------------------------------------------------------------------


@dataclass
class SimulationTrace:
    """Per-tick record of one run.

    Vector channels are 2D arrays with one row per tick. ``flow`` holds one
    (h, w, 2) snapshot per camera frame, taken at ``flow_t``.
    """

    cfg: ScenarioConfig
    t: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    cmd: np.ndarray
    ik: np.ndarray
    vor: np.ndarray
    okr: np.ndarray
    gyro_true: np.ndarray
    gyro_aff: np.ndarray
    gyro_reaf: np.ndarray
    gyro_exaf: np.ndarray
    slip_true: np.ndarray
    slip_aff: np.ndarray
    slip_reaf: np.ndarray
    slip_exaf: np.ndarray
    gyro_emit: np.ndarray
    cam_emit: np.ndarray
    flow: np.ndarray
    flow_t: np.ndarray
    flow_frame: np.ndarray
    velocity_clamps: np.ndarray
    position_clamps: np.ndarray
    singular_ticks: int = 0
    faults: int = 0
    backend: str = ""

    @property
    def n_ticks(self) -> int:
        return len(self.t)

    def index(self) -> StabilizationIndex:
        return stabilization_index(self)

    def clamp_count(self) -> int:
        return int(self.velocity_clamps.sum() + self.position_clamps.sum())

    def columns(self) -> tuple[list[str], np.ndarray]:
        names = list(self.cfg.chain.names)
        ctrl = [names[i] for i in self.cfg.chain.controllable]
        blocks = [
            (["t"], self.t[:, None]),
            ([f"q_{n}" for n in names], self.q),
            ([f"qdot_{n}" for n in names], self.qdot),
            ([f"cmd_{n}" for n in ctrl], self.cmd),
            ([f"ik_{n}" for n in ctrl], self.ik),
            (["vor_yaw", "vor_pitch"], self.vor),
            (["okr_yaw", "okr_pitch"], self.okr),
        ]
        for prefix, arr, comps in (
            ("gyro_true", self.gyro_true, "xyz"),
            ("gyro_aff", self.gyro_aff, "xyz"),
            ("gyro_reaf", self.gyro_reaf, "xyz"),
            ("gyro_exaf", self.gyro_exaf, "xyz"),
            ("slip_true", self.slip_true, "uv"),
            ("slip_aff", self.slip_aff, "uv"),
            ("slip_reaf", self.slip_reaf, "uv"),
            ("slip_exaf", self.slip_exaf, "uv"),
        ):
            blocks.append(([f"{prefix}_{c}" for c in comps], arr))
        blocks.append((["gyro_emit", "cam_emit"], np.stack([self.gyro_emit, self.cam_emit], axis=1)))
        header = [h for hs, _ in blocks for h in hs]
        data = np.hstack([np.asarray(a, dtype=float).reshape(len(self.t), -1) for _, a in blocks])
        return header, data

    def write_csv(self, path, channels: list[str] | None = None) -> Path:
        """Columnar dump, one row per tick, with a ``#`` schema comment line."""
        path = Path(path)
        header, data = self.columns()
        if channels:
            keep = [i for i, h in enumerate(header) if h == "t" or any(h.startswith(c) for c in channels)]
            if len(keep) == 1 and channels:
                raise ValueError(f"no trace column matches {channels}")
            header = [header[i] for i in keep]
            data = data[:, keep]
        with path.open("w", newline="") as fh:
            fh.write(f"# schema: {TRACE_SCHEMA}; scenario={self.cfg.kind.value}; controller={self.cfg.label}\n")
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in data:
                writer.writerow([repr(float(x)) for x in row])
        return path

    def write_flow(self, path) -> Path:
        """Flow snapshots keyed by camera frame index."""
        path = Path(path)
        np.savez_compressed(
            path,
            schema=np.array(FLOW_SCHEMA),
            frame=self.flow_frame,
            t=self.flow_t,
            flow=self.flow,
        )
        return path


def read_trace_csv(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    with path.open() as fh:
        first = fh.readline()
        if not first.startswith("# schema: gazestab-trace/"):
            raise ValueError(f"{path} is not a gazestab trace")
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(x) for x in row] for row in reader])
    return header, data


def run(cfg: ScenarioConfig, backend: str | None = None) -> SimulationTrace:
    """Run one closed-loop simulation; deterministic for a given config and seed."""
    from . import _backend

    plan = build_plan(cfg)
    return _backend.simulate(plan, backend)

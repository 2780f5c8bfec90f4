"""Multimodal gaze stabilization for a redundant robot head.

VOR, OKR and inverse-kinematics stabilizers, a kinematic forward model that
separates self-induced from external sensory input, and a closed-loop
simulator scored with a windowed optical-flow index.
"""

from .controllers import EyeCommand, GazeTask, IkConfig, JointCommand, ik_feedforward, ik_step, okr_step, vor_step
from .fusion import (
    CombinerKind,
    Exafference,
    Reafference,
    combine,
    compute_exafference,
    predict_flow_reafference,
    predict_gyro_reafference,
)
from .kinematics import (
    HeadState,
    JointSpec,
    KinematicChain,
    RigidTransform,
    canonical_chain,
    forward_kinematics,
    frame_rotation,
    geometric_jacobian,
)
from .metrics import FlowField, StabilizationIndex, phi_rmse, stabilization_index
from .scenarios import ScenarioConfig, ScenarioKind, SimulationTrace, perturbation_signal, run
from .sensors import (
    GyroReading,
    RetinalSlip,
    SceneTarget,
    SensorConfig,
    dense_flow_field,
    sample_gyro,
    sample_retinal_slip,
    true_gyro,
    true_retinal_slip,
)

__version__ = "0.1.0"

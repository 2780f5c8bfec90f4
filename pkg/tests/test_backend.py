import os
import subprocess
import sys

import numpy as np
import pytest

from gazestab import _backend
from gazestab.scenarios import ScenarioConfig, run

pytestmark = pytest.mark.skipif("c" not in _backend.available(), reason="compiled loop not built")

CHANNELS = ("q", "qdot", "cmd", "ik", "vor", "okr", "gyro_aff", "gyro_exaf", "slip_aff", "slip_exaf", "flow")


def short(kind, controller, **kw):
    return ScenarioConfig.reference(kind, controller=controller, frequency=1.0, duration=2.0, **kw)


@pytest.mark.parametrize(
    "cfg",
    [
        short("SelfRobot", "sum", control_rate=400.0),
        short("ExternalRobot", "reafference", control_rate=400.0),
        short("ExternalTarget", "mean", control_rate=400.0, voluntary_eye_rate=(0.05, -0.02)),
        short("SelfRobot", "reafference"),
    ],
    ids=lambda c: f"{c.kind.value}-{c.label}-{c.control_rate:g}",
)
def test_compiled_and_python_loops_agree(cfg):
    c = run(cfg, backend="c")
    p = run(cfg, backend="python")
    assert (c.backend, p.backend) == ("c", "python")
    for name in CHANNELS:
        np.testing.assert_allclose(getattr(c, name), getattr(p, name), rtol=0, atol=1e-8, err_msg=name)
    np.testing.assert_array_equal(c.velocity_clamps, p.velocity_clamps)
    np.testing.assert_array_equal(c.position_clamps, p.position_clamps)
    assert c.index().value == pytest.approx(p.index().value, abs=1e-10)


def test_compiled_and_python_loops_agree_on_saturation():
    cfg = ScenarioConfig(amplitude=0.0, frequency=1.0, duration=2.0, control_rate=400.0,
                         controller="none", voluntary_eye_rate=(0.3, 9.0))
    c, p = run(cfg, backend="c"), run(cfg, backend="python")
    np.testing.assert_array_equal(c.velocity_clamps, p.velocity_clamps)
    np.testing.assert_array_equal(c.position_clamps, p.position_clamps)
    assert c.clamp_count() > 0
    np.testing.assert_allclose(c.q, p.q, atol=1e-12)


def test_unknown_backend():
    with pytest.raises(ValueError):
        run(short("SelfRobot", "none"), backend="fortran")


def test_environment_forces_python_loop():
    env = dict(os.environ, GAZESTAB_PURE_PYTHON="1")
    code = "from gazestab import _backend; print(_backend.DEFAULT, _backend.available())"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout
    assert out.split()[0] == "python"
    assert _backend.DEFAULT == "c"

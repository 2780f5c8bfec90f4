"""Selects the compiled simulation loop when available.

Set ``GAZESTAB_PURE_PYTHON=1`` to force the pure-Python reference loop.
"""

from __future__ import annotations

import logging
import os

from . import _pysim

log = logging.getLogger(__name__)

try:
    if os.environ.get("GAZESTAB_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-Python backend forced by GAZESTAB_PURE_PYTHON")
    from . import _csim
except ImportError as exc:  # pragma: no cover - depends on the build
    _csim = None
    log.debug("compiled loop unavailable (%s); using the Python loop", exc)

DEFAULT = "c" if _csim is not None else "python"


def available() -> tuple[str, ...]:
    return ("c", "python") if _csim is not None else ("python",)


def simulate(plan, backend: str | None = None):
    backend = backend or DEFAULT
    if backend == "python":
        return _pysim.simulate(plan)
    if backend == "c":
        if _csim is None:
            raise RuntimeError("compiled backend not built; reinstall with Cython available")
        return _csim.simulate(plan)
    raise ValueError(f"unknown backend {backend!r}")

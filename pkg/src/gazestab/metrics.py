"""Optical-flow stabilization index.

The per-frame score is the root mean square of the flow magnitude over a
centred window spanning half the image width and height; the run score is
the time average of that quantity, reported in deg/s.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class FlowField:
    """Dense apparent-velocity field, ``grid`` has shape (h, w, 2) in rad/s."""

    grid: np.ndarray
    frame_time: float = 0.0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.grid.ndim != 3 or self.grid.shape[2] != 2:
            raise ValueError("flow grid must have shape (h, w, 2)")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape[0], self.grid.shape[1]


@dataclass
class StabilizationIndex:
    value: float
    per_frame: np.ndarray = field(default_factory=lambda: np.zeros(0))


def window_bounds(size: int) -> tuple[int, int]:
    """Half-open index range of the centred window along one axis.

    Keeps pixels whose offset from the image centre is at most ``size / 4``;
    for odd sizes the bound is rounded toward zero and the centre pixel is
    always included.
    """
    if size < 2:
        raise ValueError("flow field must be at least 2 pixels along each axis")
    centre = (size - 1) / 2.0
    half = size / 4.0
    idx = [i for i in range(size) if abs(i - centre) <= half]
    if not idx:
        raise ValueError("empty stabilization window")
    return idx[0], idx[-1] + 1


def phi_rmse(field: FlowField | np.ndarray) -> float:
    """Windowed RMS of the flow magnitude (same units as the field)."""
    grid = field.grid if isinstance(field, FlowField) else np.asarray(field, dtype=float)
    h, w = grid.shape[:2]
    r0, r1 = window_bounds(h)
    c0, c1 = window_bounds(w)
    win = grid[r0:r1, c0:c1]
    return float(np.sqrt(np.mean(np.sum(win * win, axis=-1))))


def phi_rmse_series(grids: np.ndarray) -> np.ndarray:
    """``phi_rmse`` of a stack of fields with shape (frames, h, w, 2)."""
    grids = np.asarray(grids, dtype=float)
    if grids.ndim != 4:
        raise ValueError("expected a (frames, h, w, 2) stack")
    r0, r1 = window_bounds(grids.shape[1])
    c0, c1 = window_bounds(grids.shape[2])
    win = grids[:, r0:r1, c0:c1]
    return np.sqrt(np.mean(np.sum(win * win, axis=-1), axis=(1, 2)))


def stabilization_index(flows) -> StabilizationIndex:
    """Mean windowed RMS flow over all frames, converted to deg/s.

    ``flows`` may be a SimulationTrace (anything with a ``flow`` stack), a
    (frames, h, w, 2) array, or an iterable of FlowField.
    """
    if hasattr(flows, "flow"):
        grids = flows.flow
    elif isinstance(flows, np.ndarray):
        grids = flows
    else:
        grids = np.stack([f.grid for f in flows])
    if len(grids) == 0:
        raise ValueError("need at least one flow snapshot")
    per_frame = np.degrees(phi_rmse_series(grids))
    return StabilizationIndex(float(np.mean(per_frame)), per_frame)


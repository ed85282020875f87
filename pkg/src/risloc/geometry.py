"""Geometric kernel: rotations, local directions, angles, spatial frequencies
and propagation delays.

Positions are plain ``(3,)`` float arrays in meters. Delays are returned in
seconds; the clock offset ``B`` is always expressed in meters.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

SPEED_OF_LIGHT = 299792458.0


class AnglePair(NamedTuple):
    azimuth: float
    elevation: float


class SpatialFreq(NamedTuple):
    xi: float
    zeta: float


class GeometryError(ValueError):
    """Raised for degenerate geometry (coincident points, zero-length segments)."""


def euler_to_rotation(o) -> np.ndarray:
    """Rotation matrix for intrinsic Z-Y-X Euler angles ``[yaw, pitch, roll]``.

    ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``; columns are the local axes expressed
    in the global frame.
    """
    yaw, pitch, roll = (float(a) for a in o)
    cz, sz = np.cos(yaw), np.sin(yaw)
    cy, sy = np.cos(pitch), np.sin(pitch)
    cx, sx = np.cos(roll), np.sin(roll)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    return rz @ ry @ rx


def local_direction(target, anchor_pos, anchor_rot) -> np.ndarray:
    """Unit vector from ``anchor_pos`` towards ``target`` in the anchor frame."""
    diff = np.asarray(target, dtype=float) - np.asarray(anchor_pos, dtype=float)
    dist = np.linalg.norm(diff)
    if dist == 0.0:
        raise GeometryError("target coincides with the anchor position")
    return np.asarray(anchor_rot).T @ (diff / dist)


def direction_to_angles(t) -> AnglePair:
    t = np.asarray(t, dtype=float)
    # atan2(0, 0) is 0 in numpy, which is the pole convention used here
    az = float(np.arctan2(t[1], t[0]))
    el = float(np.arcsin(np.clip(t[2], -1.0, 1.0)))
    if az == -np.pi:
        az = np.pi
    return AnglePair(az, el)


def angles_to_direction(a) -> np.ndarray:
    az, el = a
    return np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])


def spatial_frequencies(aoa, aod) -> SpatialFreq:
    """Spatial frequencies of a RIS bounce from its arrival/departure angles."""
    xi = np.sin(aoa[0]) * np.cos(aoa[1]) + np.sin(aod[0]) * np.cos(aod[1])
    zeta = np.sin(aoa[1]) + np.sin(aod[1])
    return SpatialFreq(float(xi), float(zeta))


def spatial_frequencies_from_positions(p_t, p_r, anchor_pos, anchor_rot) -> SpatialFreq:
    t = local_direction(p_t, anchor_pos, anchor_rot) + local_direction(p_r, anchor_pos, anchor_rot)
    return SpatialFreq(float(t[1]), float(t[2]))


def path_length(points) -> float:
    """Sum of segment lengths along a polyline of 3D points."""
    pts = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(seg == 0.0):
        raise GeometryError("path has a zero-length segment")
    return float(seg.sum())


def path_delay(points, clock_offset: float = 0.0) -> float:
    """Propagation delay in seconds of the polyline ``points`` plus clock offset.

    ``points`` is the ordered vertex list, e.g. ``[p_T, p_R]`` for the LOS path,
    ``[p_T, p_l, p_R]`` for a RIS bounce or ``[p_T, p_sp, p_l, p_R]`` for a
    scatterer-then-RIS bounce.
    """
    return (path_length(points) + clock_offset) / SPEED_OF_LIGHT

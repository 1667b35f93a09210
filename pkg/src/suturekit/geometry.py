"""Rigid poses, pinhole cameras and the stereo rig.

All lengths are meters and all angles radians; degrees/mm appear only at
file/CLI boundaries. Rotations are stored as 3x3 matrices; quaternions are
used only for trajectory interpolation (see planning).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-8


class GeometryError(Exception):
    pass


class NonPositiveDepth(GeometryError):
    """Point is at or behind the camera's principal plane."""


def _as_array(x, shape):
    a = np.asarray(x, dtype=float)
    if a.shape != shape:
        raise ValueError(f"expected shape {shape}, got {a.shape}")
    return a


@dataclass(frozen=True)
class RigidPose:
    """SE(3) transform: p_out = rotation @ p_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _as_array(self.rotation, (3, 3))
        t = _as_array(self.translation, (3,))
        if not np.allclose(R.T @ R, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a 3-vector or an (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidPose") -> "RigidPose":
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidPose":
        Rt = self.rotation.T
        return RigidPose(Rt, -Rt @ self.translation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @staticmethod
    def from_matrix(T: np.ndarray) -> "RigidPose":
        T = _as_array(T, (4, 4))
        return RigidPose(T[:3, :3], T[:3, 3])


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    return a.compose(b)


def invert(a: RigidPose) -> RigidPose:
    return a.inverse()


def rotation_geodesic(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotation matrices, radians in [0, pi].

    Uses the chordal (arcsin) form for small angles, where arccos of the
    trace loses ~1e-8 of precision.
    """
    f = np.linalg.norm(Ra - Rb) / (2.0 * np.sqrt(2.0))  # sin(theta / 2)
    if f < 0.7:
        return float(2.0 * np.arcsin(min(f, 1.0)))
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose_world_from_camera: RigidPose = field(default_factory=RigidPose.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.pose_world_from_camera.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return self.pose_world_from_camera.inverse().apply(points)

    def project(self, point_world: np.ndarray) -> np.ndarray:
        """Project a world point to pixel coordinates.

        Raises NonPositiveDepth for points at or behind the camera. The
        result may lie outside the image bounds; callers clip.
        """
        X, Y, Z = self.world_to_camera(np.asarray(point_world, dtype=float))
        if Z <= 1e-12:
            raise NonPositiveDepth(f"depth {Z} <= 1e-12")
        return np.array([self.cx + self.fx * X / Z, self.cy + self.fy * Y / Z])

    def project_many(self, points_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized projection of (N, 3) points.

        Returns (pixels (N, 2), valid (N,) bool); invalid rows (depth <=
        1e-12) contain NaN.
        """
        pc = self.world_to_camera(np.asarray(points_world, dtype=float))
        Z = pc[:, 2]
        valid = Z > 1e-12
        px = np.full((len(pc), 2), np.nan)
        with np.errstate(invalid="ignore", divide="ignore"):
            px[valid, 0] = self.cx + self.fx * pc[valid, 0] / Z[valid]
            px[valid, 1] = self.cy + self.fy * pc[valid, 1] / Z[valid]
        return px, valid

    def backproject_ray(self, pixel: np.ndarray) -> np.ndarray:
        """Unit ray direction in world frame through the given pixel."""
        u, v = np.asarray(pixel, dtype=float)
        d_cam = np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
        d_world = self.pose_world_from_camera.rotation @ d_cam
        return d_world / np.linalg.norm(d_world)

    def in_bounds(self, pixel: np.ndarray, margin: float = 0.0) -> bool:
        u, v = pixel
        return (margin <= u < self.width - margin) and (margin <= v < self.height - margin)


def project(camera: PinholeCamera, point_world: np.ndarray) -> np.ndarray:
    return camera.project(point_world)


def backproject_ray(camera: PinholeCamera, pixel: np.ndarray) -> np.ndarray:
    return camera.backproject_ray(pixel)


@dataclass(frozen=True)
class StereoRig:
    left: PinholeCamera
    right: PinholeCamera

    def __post_init__(self):
        if np.linalg.norm(self.left.center - self.right.center) <= 0:
            raise ValueError("stereo baseline must be positive")

    @property
    def cameras(self) -> tuple[PinholeCamera, PinholeCamera]:
        return (self.left, self.right)


# --- JSON (de)serialization -------------------------------------------------

def pose_to_dict(pose: RigidPose) -> dict:
    return {
        "rotation": [float(x) for x in pose.rotation.reshape(-1)],
        "translation": [float(x) for x in pose.translation],
    }


def pose_from_dict(d: dict) -> RigidPose:
    return RigidPose(
        np.asarray(d["rotation"], dtype=float).reshape(3, 3),
        np.asarray(d["translation"], dtype=float),
    )


def camera_to_dict(cam: PinholeCamera) -> dict:
    return {
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "pose": pose_to_dict(cam.pose_world_from_camera),
    }


def camera_from_dict(d: dict) -> PinholeCamera:
    return PinholeCamera(
        fx=float(d["fx"]),
        fy=float(d["fy"]),
        cx=float(d["cx"]),
        cy=float(d["cy"]),
        width=int(d["width"]),
        height=int(d["height"]),
        pose_world_from_camera=pose_from_dict(d["pose"]) if "pose" in d else RigidPose.identity(),
    )


def rig_to_dict(rig: StereoRig) -> dict:
    return {"left": camera_to_dict(rig.left), "right": camera_to_dict(rig.right)}


def rig_from_dict(d: dict) -> StereoRig:
    return StereoRig(camera_from_dict(d["left"]), camera_from_dict(d["right"]))


def load_rig(path) -> StereoRig:
    with open(path) as f:
        return rig_from_dict(json.load(f))


def load_camera(path) -> PinholeCamera:
    with open(path) as f:
        return camera_from_dict(json.load(f))

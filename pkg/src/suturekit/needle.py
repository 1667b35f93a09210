"""Circular-arc needle geometry and its disentangled 6-DOF parameterization.

The needle is a circular arc of configurable radius and arc angle
(semicircular by default). Its pose is encoded either as a RigidPose or as
the 6-vector [theta1, theta2, kp_st(2), kp_ed(2)]: four pixel coordinates of
the arc endpoints in an anchor camera plus two angles placed relative to the
plane formed by the two back-projected keypoint rays.

Needle body frame: origin at the arc-circle center, x-axis from the center
toward the arc midpoint, y-axis along the chord from start to end, z-axis
the arc-plane normal (x cross y).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import PinholeCamera, RigidPose, StereoRig, pose_from_dict, pose_to_dict

_MIN_RAY_ANGLE = 1e-6


class NeedleError(Exception):
    pass


class DegenerateRays(NeedleError):
    """Keypoint back-projection rays are (near) parallel."""


class ThetaOutOfRange(NeedleError):
    pass


@dataclass(frozen=True)
class NeedleShape:
    """Circular-arc needle: radius in meters, arc angle in radians."""

    radius: float
    arc_angle: float = np.pi

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not (0 < self.arc_angle <= 2 * np.pi - 1e-6):
            raise ValueError("arc_angle must lie in (0, 2*pi - 1e-6]")

    @property
    def chord_length(self) -> float:
        return 2.0 * self.radius * np.sin(self.arc_angle / 2.0)

    def endpoints_body(self) -> tuple[np.ndarray, np.ndarray]:
        """Start/end arc endpoints in the needle body frame."""
        half = self.arc_angle / 2.0
        r = self.radius
        st = np.array([r * np.cos(half), -r * np.sin(half), 0.0])
        ed = np.array([r * np.cos(half), r * np.sin(half), 0.0])
        return st, ed

    def arc_points_body(self, params: np.ndarray) -> np.ndarray:
        """Arc points for parameters in [0, arc_angle], shape (N, 3)."""
        s = np.asarray(params, dtype=float) - self.arc_angle / 2.0
        return self.radius * np.stack([np.cos(s), np.sin(s), np.zeros_like(s)], axis=-1)


@dataclass(frozen=True)
class NeedleParams:
    """The 6-DOF needle encoding [theta1, theta2, kp_st, kp_ed]."""

    theta1: float
    theta2: float
    kp_st: np.ndarray
    kp_ed: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "kp_st", np.asarray(self.kp_st, dtype=float))
        object.__setattr__(self, "kp_ed", np.asarray(self.kp_ed, dtype=float))

    def as_vector(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2, *self.kp_st, *self.kp_ed])

    @staticmethod
    def from_vector(v: np.ndarray) -> "NeedleParams":
        v = np.asarray(v, dtype=float)
        return NeedleParams(float(v[0]), float(v[1]), v[2:4].copy(), v[4:6].copy())


@dataclass(frozen=True)
class BinaryMask:
    """Foreground pixel set of one view; coordinates are (u, v) integers."""

    width: int
    height: int
    foreground: np.ndarray  # (N, 2) int

    def __post_init__(self):
        fg = np.asarray(self.foreground, dtype=int).reshape(-1, 2)
        if fg.size:
            if fg[:, 0].min() < 0 or fg[:, 0].max() >= self.width:
                raise ValueError("foreground u out of bounds")
            if fg[:, 1].min() < 0 or fg[:, 1].max() >= self.height:
                raise ValueError("foreground v out of bounds")
            if len(np.unique(fg[:, 0] * self.height + fg[:, 1])) != len(fg):
                raise ValueError("duplicate foreground pixels")
        object.__setattr__(self, "foreground", fg)

    def __len__(self) -> int:
        return len(self.foreground)


# --- ray-plane construction -------------------------------------------------

def _ray_basis(anchor: PinholeCamera, kp_st, kp_ed):
    """Rays, inter-ray angle and the rays-plane reference frame for theta2."""
    d_st = anchor.backproject_ray(kp_st)
    d_ed = anchor.backproject_ray(kp_ed)
    alpha = float(np.arccos(np.clip(d_st @ d_ed, -1.0, 1.0)))
    if alpha <= _MIN_RAY_ANGLE:
        raise DegenerateRays(f"inter-ray angle {alpha} <= {_MIN_RAY_ANGLE}")
    n_rays = np.cross(d_st, d_ed)
    n_rays /= np.linalg.norm(n_rays)
    return d_st, d_ed, alpha, n_rays


def inter_ray_angle(anchor: PinholeCamera, x: NeedleParams) -> float:
    return _ray_basis(anchor, x.kp_st, x.kp_ed)[2]


def params_to_pose(x: NeedleParams, shape: NeedleShape, anchor: PinholeCamera) -> RigidPose:
    """Realize the 6-vector as the needle's rigid pose.

    Triangle construction: the two keypoint rays and the chord form a
    triangle with interior angle theta1 at the start endpoint; theta2 is the
    dihedral rotation of the arc plane about the chord, measured from the
    rays plane.
    """
    d_st, d_ed, alpha, n_rays = _ray_basis(anchor, x.kp_st, x.kp_ed)
    if not (0.0 < x.theta1 < np.pi - alpha):
        raise ThetaOutOfRange(f"theta1={x.theta1} outside (0, pi - {alpha})")
    C = anchor.center
    L = shape.chord_length
    t_ed = L * np.sin(x.theta1) / np.sin(alpha)
    t_st = L * np.sin(alpha + x.theta1) / np.sin(alpha)
    p_st = C + t_st * d_st
    p_ed = C + t_ed * d_ed

    u = (p_ed - p_st) / np.linalg.norm(p_ed - p_st)
    w_ref = np.cross(n_rays, u)
    w_ref /= np.linalg.norm(w_ref)
    e1 = np.cos(x.theta2) * w_ref + np.sin(x.theta2) * np.cross(u, w_ref)

    mid = 0.5 * (p_st + p_ed)
    center = mid - shape.radius * np.cos(shape.arc_angle / 2.0) * e1
    R = np.column_stack([e1, u, np.cross(e1, u)])
    return RigidPose(R, center)


def pose_to_params(T: RigidPose, shape: NeedleShape, anchor: PinholeCamera) -> NeedleParams:
    """Invert params_to_pose: recover [theta1, theta2, kp_st, kp_ed]."""
    st_b, ed_b = shape.endpoints_body()
    p_st = T.apply(st_b)
    p_ed = T.apply(ed_b)
    kp_st = anchor.project(p_st)  # raises NonPositiveDepth if behind
    kp_ed = anchor.project(p_ed)

    C = anchor.center
    v_c = C - p_st
    v_e = p_ed - p_st
    theta1 = float(
        np.arccos(np.clip(v_c @ v_e / (np.linalg.norm(v_c) * np.linalg.norm(v_e)), -1.0, 1.0))
    )

    _, _, _, n_rays = _ray_basis(anchor, kp_st, kp_ed)
    u = v_e / np.linalg.norm(v_e)
    w_ref = np.cross(n_rays, u)
    w_ref /= np.linalg.norm(w_ref)
    mid = 0.5 * (p_st + p_ed)
    arc_mid = T.apply(np.array([shape.radius, 0.0, 0.0]))
    e1 = arc_mid - mid
    e1 /= np.linalg.norm(e1)
    theta2 = float(np.arctan2(e1 @ np.cross(u, w_ref), e1 @ w_ref)) % (2.0 * np.pi)
    return NeedleParams(theta1, theta2, kp_st, kp_ed)


# --- sampling, reprojection, rasterization ---------------------------------

def _arc_parameters(shape: NeedleShape, count: int, occlusion=None) -> np.ndarray:
    params = np.linspace(0.0, shape.arc_angle, count)
    if occlusion is not None:
        lo, hi = occlusion
        frac = params / shape.arc_angle
        params = params[(frac < lo) | (frac > hi)]
    return params


def sample_axis_points(
    T: RigidPose, shape: NeedleShape, count: int, occlusion=None
) -> np.ndarray:
    """Uniformly spaced world points on the needle arc, shape (N, 3).

    occlusion, when given, is an (lo, hi) arc-fraction interval whose
    samples are excluded.
    """
    if count < 2:
        raise ValueError("count must be >= 2")
    params = _arc_parameters(shape, count, occlusion)
    return T.apply(shape.arc_points_body(params))


def reproject(
    T: RigidPose, shape: NeedleShape, rig: StereoRig, count: int, occlusion=None
) -> tuple[np.ndarray, np.ndarray]:
    """Per-view pixel sets of the reprojected needle axis points.

    Points behind a camera are dropped per view; each returned array has
    shape (Nk, 2).
    """
    pts = sample_axis_points(T, shape, count, occlusion)
    out = []
    for cam in rig.cameras:
        px, valid = cam.project_many(pts)
        out.append(px[valid])
    return tuple(out)


def rasterize(
    T: RigidPose,
    shape: NeedleShape,
    camera: PinholeCamera,
    line_width: float = 1.0,
    occlusion=None,
) -> BinaryMask:
    """Synthetic fine-mask stand-in: stamp the projected arc into a mask.

    The arc is sampled at ~4 samples per pixel of projected arc length and
    every integer pixel within line_width/2 of a sample is set.
    """
    if line_width < 1:
        raise ValueError("line_width must be >= 1")
    # coarse pass to estimate projected arc length
    coarse = sample_axis_points(T, shape, 257, occlusion)
    px, valid = camera.project_many(coarse)
    px = px[valid]
    if len(px) < 2:
        return BinaryMask(camera.width, camera.height, np.empty((0, 2), dtype=int))
    arc_px_len = float(np.sum(np.linalg.norm(np.diff(px, axis=0), axis=1)))
    n = max(2, int(np.ceil(4.0 * arc_px_len)))
    dense = sample_axis_points(T, shape, n, occlusion)
    px, valid = camera.project_many(dense)
    px = px[valid]

    radius = line_width / 2.0
    r_int = int(np.ceil(radius))
    offs = np.array(
        [(du, dv) for du in range(-r_int, r_int + 1) for dv in range(-r_int, r_int + 1)]
    )
    pixels: set[tuple[int, int]] = set()
    for u, v in px:
        base = np.array([round(u), round(v)])
        cand = base + offs
        d = np.hypot(cand[:, 0] - u, cand[:, 1] - v)
        for cu, cv in cand[d <= radius]:
            if 0 <= cu < camera.width and 0 <= cv < camera.height:
                pixels.add((int(cu), int(cv)))
    fg = np.array(sorted(pixels), dtype=int).reshape(-1, 2)
    return BinaryMask(camera.width, camera.height, fg)


# --- serialization ----------------------------------------------------------

def write_pgm(mask: BinaryMask, path) -> None:
    """Portable graymap (P5, maxval 255), foreground=255."""
    img = np.zeros((mask.height, mask.width), dtype=np.uint8)
    if len(mask):
        img[mask.foreground[:, 1], mask.foreground[:, 0]] = 255
    with open(path, "wb") as f:
        f.write(f"P5\n{mask.width} {mask.height}\n255\n".encode())
        f.write(img.tobytes())


def read_pgm(path) -> BinaryMask:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError("not a P5 portable graymap")
        w, h = map(int, f.readline().split())
        f.readline()  # maxval
        img = np.frombuffer(f.read(w * h), dtype=np.uint8).reshape(h, w)
    vs, us = np.nonzero(img)
    return BinaryMask(w, h, np.column_stack([us, vs]))


def scene_to_dict(T: RigidPose, shape: NeedleShape, occlusion=None) -> dict:
    return {
        "needle_pose": pose_to_dict(T),
        "shape": {"radius": shape.radius, "arc_angle": shape.arc_angle},
        "occlusion": list(occlusion) if occlusion is not None else None,
    }


def scene_from_dict(d: dict):
    T = pose_from_dict(d["needle_pose"])
    shape = NeedleShape(d["shape"]["radius"], d["shape"]["arc_angle"])
    occ = tuple(d["occlusion"]) if d.get("occlusion") else None
    return T, shape, occ


def load_scene(path):
    with open(path) as f:
        return scene_from_dict(json.load(f))

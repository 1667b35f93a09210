"""Suture trajectory generation.

Insertion/extraction waypoints lie on a needle-radius circle through the
entry and exit ports, in the plane spanned by the port chord and the tissue
normal; the needle slides along its own circle, so every waypoint keeps the
needle centered on the circle with its tip tangent to the travel direction.
Free motions use linear position interpolation with shortest-path rotation
interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .geometry import RigidPose, rotation_geodesic
from .needle import NeedleShape


class PlanningError(Exception):
    pass


class ChordTooLong(PlanningError):
    pass


class DegenerateNormal(PlanningError):
    pass


@dataclass(frozen=True)
class SuturePorts:
    entry: np.ndarray
    exit: np.ndarray
    tissue_normal: np.ndarray

    def __post_init__(self):
        entry = np.asarray(self.entry, dtype=float)
        exit_ = np.asarray(self.exit, dtype=float)
        n = np.asarray(self.tissue_normal, dtype=float)
        if np.linalg.norm(entry - exit_) <= 1e-6:
            raise ValueError("entry and exit ports coincide")
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("tissue normal must be unit length")
        chord = (exit_ - entry) / np.linalg.norm(exit_ - entry)
        if np.linalg.norm(np.cross(chord, n)) <= 1e-9:
            raise DegenerateNormal("tissue normal is parallel to the port chord")
        object.__setattr__(self, "entry", entry)
        object.__setattr__(self, "exit", exit_)
        object.__setattr__(self, "tissue_normal", n)


@dataclass(frozen=True)
class Waypoint:
    pose: RigidPose
    arc_param: float  # circle angle (rad) or path fraction for linear moves
    frame: str = "needle"  # "needle" or "tool"
    tool_pose: RigidPose | None = None


@dataclass(frozen=True)
class SutureCircle:
    """The insertion circle and its sweep interval."""

    center: np.ndarray
    in_plane_x: np.ndarray  # unit, along the chord (entry -> exit)
    in_plane_y: np.ndarray  # unit, out of tissue
    radius: float
    theta_entry: float
    theta_exit: float  # theta_entry < theta_exit, sweep goes under tissue

    def point(self, theta) -> np.ndarray:
        th = np.asarray(theta, dtype=float)
        return (
            self.center
            + self.radius * np.multiply.outer(np.cos(th), self.in_plane_x)
            + self.radius * np.multiply.outer(np.sin(th), self.in_plane_y)
        )

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.in_plane_x, self.in_plane_y)

    @property
    def sweep(self) -> float:
        return self.theta_exit - self.theta_entry

    @property
    def theta_deepest(self) -> float:
        return 1.5 * np.pi


def suture_circle(ports: SuturePorts, shape: NeedleShape) -> SutureCircle:
    """Needle-radius circle through both ports, center under the tissue."""
    r = shape.radius
    chord_vec = ports.exit - ports.entry
    L = float(np.linalg.norm(chord_vec))
    if L > 2.0 * r - 1e-9:
        raise ChordTooLong(f"port distance {L} exceeds needle diameter {2 * r}")
    c_hat = chord_vec / L
    up = ports.tissue_normal - (ports.tissue_normal @ c_hat) * c_hat
    up /= np.linalg.norm(up)
    h = np.sqrt(r * r - (L / 2.0) ** 2)
    mid = 0.5 * (ports.entry + ports.exit)
    center = mid - h * up
    # entry at angle pi - theta_x, exit reached at 2*pi + theta_x going
    # through the deepest point at 3*pi/2
    theta_x = float(np.arctan2(h, L / 2.0))
    return SutureCircle(
        center=center,
        in_plane_x=c_hat,
        in_plane_y=up,
        radius=r,
        theta_entry=np.pi - theta_x,
        theta_exit=2.0 * np.pi + theta_x,
    )


def _needle_pose_at(circle: SutureCircle, shape: NeedleShape, theta: float) -> RigidPose:
    """Needle pose whose tip sits at circle angle theta, tangent to travel."""
    half = shape.arc_angle / 2.0
    a = theta - half  # in-plane angle of the needle frame x axis
    x_n = np.cos(a) * circle.in_plane_x + np.sin(a) * circle.in_plane_y
    y_n = -np.sin(a) * circle.in_plane_x + np.cos(a) * circle.in_plane_y
    R = np.column_stack([x_n, y_n, circle.normal])
    return RigidPose(R, circle.center)


def circular_trajectory(
    ports: SuturePorts,
    shape: NeedleShape,
    waypoint_count: int,
    grasp_offset: RigidPose | None = None,
    theta_start: float | None = None,
    theta_end: float | None = None,
) -> list[Waypoint]:
    """Needle waypoints sweeping the under-tissue arc from entry to exit.

    When grasp_offset is given, each waypoint also carries the tool pose
    (needle pose composed with the offset).
    """
    if waypoint_count < 2:
        raise ValueError("waypoint_count must be >= 2")
    circle = suture_circle(ports, shape)
    t0 = circle.theta_entry if theta_start is None else theta_start
    t1 = circle.theta_exit if theta_end is None else theta_end
    wps = []
    for theta in np.linspace(t0, t1, waypoint_count):
        pose = _needle_pose_at(circle, shape, float(theta))
        tool = pose.compose(grasp_offset) if grasp_offset is not None else None
        wps.append(Waypoint(pose, float(theta), "needle", tool))
    return wps


def needle_tip_body(shape: NeedleShape) -> np.ndarray:
    """The leading (end) arc endpoint in the needle body frame."""
    return shape.endpoints_body()[1]


def linear_trajectory(
    start: RigidPose,
    goal: RigidPose,
    max_step_pos: float,
    max_step_rot: float,
) -> list[Waypoint]:
    """Straight-line position and shortest-path rotation interpolation."""
    if max_step_pos <= 0 or max_step_rot <= 0:
        raise ValueError("step limits must be positive")
    pos_dist = float(np.linalg.norm(goal.translation - start.translation))
    rot_dist = rotation_geodesic(start.rotation, goal.rotation)
    if pos_dist == 0.0 and rot_dist == 0.0:
        return [Waypoint(start, 0.0, "tool")]
    n = int(np.ceil(max(pos_dist / max_step_pos, rot_dist / max_step_rot))) + 1
    fractions = np.linspace(0.0, 1.0, n)
    rots = Rotation.from_matrix(np.stack([start.rotation, goal.rotation]))
    slerp = Slerp([0.0, 1.0], rots)
    interp = slerp(fractions).as_matrix()
    wps = []
    for f, R in zip(fractions, interp):
        t = (1.0 - f) * start.translation + f * goal.translation
        wps.append(Waypoint(RigidPose(R, t), float(f), "tool"))
    # endpoints exact
    wps[0] = Waypoint(start, 0.0, "tool")
    wps[-1] = Waypoint(goal, 1.0, "tool")
    return wps


@dataclass(frozen=True)
class TrajectorySegment:
    label: str  # approach | insertion | extraction | retreat
    waypoints: list[Waypoint]


@dataclass(frozen=True)
class PlanConfig:
    circle_waypoints: int = 64
    max_step_pos: float = 0.005
    max_step_rot: float = 0.1
    retreat_distance: float = 0.02


def plan_suture_pass(
    grasp_pose: RigidPose,
    ports: SuturePorts,
    shape: NeedleShape,
    grasp_offset: RigidPose,
    config: PlanConfig = PlanConfig(),
) -> list[TrajectorySegment]:
    """Approach, circular insertion to the deepest point, circular
    extraction to the exit, and linear retreat; all segment junctions are
    pose-continuous."""
    circle = suture_circle(ports, shape)
    frac_deep = (circle.theta_deepest - circle.theta_entry) / circle.sweep
    n_ins = max(2, int(round(frac_deep * config.circle_waypoints)))
    n_ext = max(2, config.circle_waypoints - n_ins + 1)
    insertion = circular_trajectory(
        ports, shape, n_ins, grasp_offset,
        theta_start=circle.theta_entry, theta_end=circle.theta_deepest,
    )
    extraction = circular_trajectory(
        ports, shape, n_ext, grasp_offset,
        theta_start=circle.theta_deepest, theta_end=circle.theta_exit,
    )
    approach = linear_trajectory(
        grasp_pose, insertion[0].tool_pose, config.max_step_pos, config.max_step_rot
    )
    last_tool = extraction[-1].tool_pose
    lifted = RigidPose(
        last_tool.rotation,
        last_tool.translation + config.retreat_distance * ports.tissue_normal,
    )
    retreat = linear_trajectory(last_tool, lifted, config.max_step_pos, config.max_step_rot)
    return [
        TrajectorySegment("approach", approach),
        TrajectorySegment("insertion", insertion),
        TrajectorySegment("extraction", extraction),
        TrajectorySegment("retreat", retreat),
    ]

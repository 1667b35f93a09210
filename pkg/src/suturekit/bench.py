"""Synthetic scenes, default hardware configs and experiment runners.

Everything here is deterministic under a fixed seed: per-scene rng streams
derive from (seed, scene index) so results are independent of execution
order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .calibration import (
    DEFAULT_QMSR_REGION,
    FeatureModel,
    calibrate_direct,
    detect_features,
)
from .control import NotConverged, PiGains, PlantModel, servo_to
from .geometry import PinholeCamera, RigidPose, StereoRig, rotation_geodesic
from .needle import NeedleShape, pose_to_params, rasterize
from .planning import (
    PlanConfig,
    SuturePorts,
    needle_tip_body,
    plan_suture_pass,
    suture_circle,
)
from .pose_estimator import (
    EstimatorConfig,
    KeypointHints,
    NoConvergence,
    estimate,
)
from .psm_kinematics import KinematicModel, fk, ik


DEFAULT_SHAPE = NeedleShape(radius=0.010, arc_angle=np.pi)


def default_rig(baseline: float = 0.02) -> StereoRig:
    """Stereo rig with parallel optical axes along +z, left camera at the
    world origin."""
    left = PinholeCamera(1000.0, 1000.0, 320.0, 240.0, 640, 480)
    right = PinholeCamera(
        1000.0, 1000.0, 320.0, 240.0, 640, 480,
        pose_world_from_camera=RigidPose(np.eye(3), np.array([baseline, 0.0, 0.0])),
    )
    return StereoRig(left, right)


def default_mono_camera(standoff: float = 0.08) -> PinholeCamera:
    """Monocular calibration camera aimed at the nominal tool tip.

    Pixel sensitivity to rotations of the marker out of the image plane
    scales with (marker size / standoff)^2, so a short standoff is what makes
    the z-axis joints (base yaw, shaft roll, jaw yaw) resolvable per joint.
    At 8 cm the full offset range keeps the marker comfortably in frame.
    """
    tip = fk(KinematicModel(), DEFAULT_QMSR_REGION.center).translation
    d = np.array([1.0, 0.3, 0.5])
    d /= np.linalg.norm(d)
    z = -d  # optical axis points at the tip
    x = np.cross(np.array([0.0, 0.0, 1.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    pose = RigidPose(np.column_stack([x, y, z]), tip + standoff * d)
    return PinholeCamera(1200.0, 1200.0, 640.0, 480.0, 1280, 960, pose)


@dataclass(frozen=True)
class PoseBenchScene:
    needle_pose: RigidPose
    occlusion: tuple | None


def random_needle_pose(
    rng: np.random.Generator,
    rig: StereoRig,
    shape: NeedleShape,
    depth_range=(0.08, 0.2),
    margin_px: float = 12.0,
    min_view_angle: float = 0.3,
    max_tries: int = 500,
) -> RigidPose:
    """Rejection-sample a needle pose fully visible in both views.

    min_view_angle keeps the arc plane away from edge-on viewing, where the
    projection degenerates to a line segment.
    """
    cam = rig.left
    for _ in range(max_tries):
        Z = rng.uniform(*depth_range)
        u = rng.uniform(0.25 * cam.width, 0.75 * cam.width)
        v = rng.uniform(0.25 * cam.height, 0.75 * cam.height)
        center = cam.backproject_ray((u, v)) * Z + cam.center
        quat = rng.normal(size=4)
        R = Rotation.from_quat(quat / np.linalg.norm(quat)).as_matrix()
        T = RigidPose(R, center)
        view_dir = center - cam.center
        view_dir /= np.linalg.norm(view_dir)
        if abs(R[:, 2] @ view_dir) < np.sin(min_view_angle):
            continue
        pts = T.apply(shape.arc_points_body(np.linspace(0, shape.arc_angle, 64)))
        ok = True
        for c in rig.cameras:
            px, valid = c.project_many(pts)
            if not valid.all() or not all(c.in_bounds(p, margin_px) for p in px):
                ok = False
                break
        if ok:
            return T
    raise RuntimeError("could not sample an in-view needle pose")


@dataclass(frozen=True)
class PoseBenchConfig:
    scenes: int = 100
    rng_seed: int = 0
    occlusion_fractions: tuple = (0.0,)
    line_width: float = 1.0  # thin masks keep the chamfer evaluation cheap
    shape: NeedleShape = DEFAULT_SHAPE
    estimator: EstimatorConfig = EstimatorConfig()
    baseline: float = 0.02
    depth_range: tuple = (0.08, 0.2)
    min_view_angle: float = 0.3


@dataclass
class PoseBenchRow:
    scene_id: int
    pos_err_m: float
    ang_err_rad: float
    J_final: float
    steps: int
    occlusion_frac: float
    seed: int
    converged: bool = True


def run_pose_scene(
    scene_id: int, occlusion_frac: float, cfg: PoseBenchConfig, rig: StereoRig
) -> PoseBenchRow:
    rng = np.random.default_rng([cfg.rng_seed, scene_id])
    shape = cfg.shape
    T_true = random_needle_pose(
        rng, rig, shape, cfg.depth_range, min_view_angle=cfg.min_view_angle
    )
    occ = None
    if occlusion_frac > 0:
        start = rng.uniform(0.0, 1.0 - occlusion_frac)
        occ = (start, start + occlusion_frac)
    masks = tuple(
        rasterize(T_true, shape, cam, cfg.line_width, occ) for cam in rig.cameras
    )
    x_true_l = pose_to_params(T_true, shape, rig.left)
    x_true_r = pose_to_params(T_true, shape, rig.right)
    hints = KeypointHints(
        left_start=x_true_l.kp_st, left_end=x_true_l.kp_ed,
        right_start=x_true_r.kp_st, right_end=x_true_r.kp_ed,
    )
    converged = True
    try:
        pose, report, steps = estimate(masks, hints, shape, rig, cfg.estimator)
    except NoConvergence as e:
        pose, report, steps = e.result
        converged = False
    pos_err = float(np.linalg.norm(pose.translation - T_true.translation))
    ang_err = rotation_geodesic(pose.rotation, T_true.rotation)
    return PoseBenchRow(
        scene_id, pos_err, ang_err, report.value, steps,
        occlusion_frac, cfg.rng_seed, converged,
    )


def run_pose_bench(cfg: PoseBenchConfig) -> list[PoseBenchRow]:
    rig = default_rig(cfg.baseline)
    rows = []
    for occ in cfg.occlusion_fractions:
        for i in range(cfg.scenes):
            rows.append(run_pose_scene(i, occ, cfg, rig))
    return rows


def aggregate_rows(rows: list[PoseBenchRow]) -> dict:
    """Per-occlusion-level mean/std of the error metrics."""
    out = {}
    for occ in sorted({r.occlusion_frac for r in rows}):
        sel = [r for r in rows if r.occlusion_frac == occ]
        pos = np.array([r.pos_err_m for r in sel])
        ang = np.array([r.ang_err_rad for r in sel])
        out[f"{occ:.2f}"] = {
            "scenes": len(sel),
            "pos_err_mm_mean": float(pos.mean() * 1e3),
            "pos_err_mm_std": float(pos.std() * 1e3),
            "ang_err_deg_mean": float(np.degrees(ang.mean())),
            "ang_err_deg_std": float(np.degrees(ang.std())),
            "converged_fraction": float(np.mean([r.converged for r in sel])),
        }
    return out


# --- end-to-end suture run --------------------------------------------------

@dataclass(frozen=True)
class SutureRunConfig:
    rng_seed: int = 0
    shape: NeedleShape = DEFAULT_SHAPE
    estimator: EstimatorConfig = EstimatorConfig()
    plan: PlanConfig = PlanConfig()
    line_width: float = 1.0
    injected_bias_deg: float = 0.0  # per revolute joint, alternating sign
    compensate: bool = True
    servo_tol: float = 1e-6
    servo_max_steps: int = 300
    calib_bound: float = np.radians(10.0)


@dataclass
class SutureRunReport:
    pose_est_pos_err_m: float
    pose_est_ang_err_rad: float
    dq_hat_err_rad: float
    max_circle_dev_m: float
    exit_miss_m: float
    waypoints_executed: int
    servo_converged: bool


def _injected_bias(deg: float) -> np.ndarray:
    signs = np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0])
    dq = np.radians(deg) * signs
    dq[2] = signs[2] * deg * 1e-4  # prismatic bias in meters: 0.1 mm per degree
    return dq


def run_suture(cfg: SutureRunConfig) -> SutureRunReport:
    """Full pipeline on one synthetic scene: perception, needle pose
    estimation, joint calibration, planning and servoed execution."""
    rng = np.random.default_rng([cfg.rng_seed, 0])
    shape = cfg.shape
    rig = default_rig()
    model = KinematicModel()
    fm = FeatureModel()
    mono = default_mono_camera()

    # --- scene: ports on a tilted tissue patch -----------------------------
    # the suture-circle normal is aligned with the instrument shaft so the
    # long needle sweep maps onto the roll joint, whose range covers it
    q_yaw, q_pitch = 0.1, 0.35
    shaft_dir = np.array(
        [
            np.sin(q_yaw) * np.sin(q_pitch),
            -np.cos(q_yaw) * np.sin(q_pitch),
            np.cos(q_pitch),
        ]
    )
    chord_dir = np.cross(np.array([0.0, 0.0, 1.0]), shaft_dir)
    chord_dir /= np.linalg.norm(chord_dir)
    up = np.cross(shaft_dir, chord_dir)  # tissue normal, chord x up = shaft
    chord = 1.2 * shape.radius
    h = float(np.sqrt(shape.radius**2 - (chord / 2.0) ** 2))
    port_center = 0.135 * shaft_dir + h * up  # circle center on the shaft axis
    ports = SuturePorts(
        port_center - 0.5 * chord * chord_dir,
        port_center + 0.5 * chord * chord_dir,
        up,
    )

    # --- plant with hidden bias ------------------------------------------
    delta_q = _injected_bias(cfg.injected_bias_deg)
    plant = PlantModel(delta_q=delta_q)
    gains = PiGains()

    # --- perception + needle pose estimation ----------------------------
    T_needle = random_needle_pose(rng, rig, shape)
    masks = tuple(rasterize(T_needle, shape, cam, cfg.line_width) for cam in rig.cameras)
    x_l = pose_to_params(T_needle, shape, rig.left)
    x_r = pose_to_params(T_needle, shape, rig.right)
    hints = KeypointHints(
        left_start=x_l.kp_st, left_end=x_l.kp_ed,
        right_start=x_r.kp_st, right_end=x_r.kp_ed,
    )
    T_est, _, _ = estimate(masks, hints, shape, rig, cfg.estimator)
    est_pos_err = float(np.linalg.norm(T_est.translation - T_needle.translation))
    est_ang_err = rotation_geodesic(T_est.rotation, T_needle.rotation)

    # --- joint calibration (monocular, noiseless features) ---------------
    if cfg.compensate:
        q_msr_cal = DEFAULT_QMSR_REGION.center
        jaw_true = fk(model, q_msr_cal + delta_q)
        px = detect_features(mono, jaw_true, fm, noise_px=0.0)
        dq_hat = calibrate_direct(model, mono, fm, q_msr_cal, px, cfg.calib_bound)
    else:
        dq_hat = np.zeros(6)
    dq_err = float(np.max(np.abs(dq_hat - delta_q)))

    # --- plan ------------------------------------------------------------
    # tool grasps the needle with a slight wrist pitch so the sweep stays
    # clear of the q5 = 0 singularity
    cp, sp = np.cos(0.15), np.sin(0.15)
    grasp_offset = RigidPose(
        np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]]),
        np.array([0.0, 0.0, 0.004]),
    )
    q_start = np.array([0.1, 0.05, 0.1, 0.2, 0.4, 0.1])
    grasp_pose = fk(model, q_start)
    segments = plan_suture_pass(grasp_pose, ports, shape, grasp_offset, cfg.plan)

    # --- execute the circular segments under servo control ---------------
    circle = suture_circle(ports, shape)
    tip_b = needle_tip_body(shape)
    grasp_inv = grasp_offset.inverse()
    q_act = q_start + delta_q  # plant starts at the actual grasp config
    deviations = []
    executed = 0
    converged = True
    exit_tip = None
    for seg in segments:
        if seg.label not in ("insertion", "extraction"):
            continue
        for wp in seg.waypoints:
            q_msr_now = q_act - delta_q
            sols = ik(model, wp.tool_pose, q4_hint=float(q_msr_now[3]))
            if not sols:
                raise RuntimeError(f"waypoint in segment {seg.label} unreachable")
            q_des = min(sols, key=lambda s: model.joint_distance(s.q, q_msr_now)).q
            try:
                trace = servo_to(
                    plant, gains, dq_hat, q_des, q_act0=q_act,
                    max_steps=cfg.servo_max_steps, tol=cfg.servo_tol,
                )
            except NotConverged as e:
                trace = e.trace
                converged = False
            q_act = trace.steps[-1]["q_act"]
            tool_real = fk(model, q_act)
            needle_real = tool_real.compose(grasp_inv)
            tip = needle_real.apply(tip_b)
            rel = tip - circle.center
            in_x = rel @ circle.in_plane_x
            in_y = rel @ circle.in_plane_y
            off_plane = rel @ circle.normal
            deviations.append(
                float(np.hypot(np.hypot(in_x, in_y) - circle.radius, off_plane))
            )
            executed += 1
            exit_tip = tip
    exit_miss = float(np.linalg.norm(exit_tip - ports.exit))
    return SutureRunReport(
        pose_est_pos_err_m=est_pos_err,
        pose_est_ang_err_rad=est_ang_err,
        dq_hat_err_rad=dq_err,
        max_circle_dev_m=float(np.max(deviations)),
        exit_miss_m=exit_miss,
        waypoints_executed=executed,
        servo_converged=converged,
    )

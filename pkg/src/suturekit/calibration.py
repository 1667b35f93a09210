"""Joint-offset identification from monocular images of jaw feature points.

Two routes to the offset between actual and measured joint positions:
  * direct: Gauss-Newton pose fit of the jaw from feature pixels, then the
    constrained-IK branch nearest the measured configuration;
  * learned: a from-scratch MLP regressing the offset from measured joints
    plus feature pixels, trained on a synthetically generated dataset.

The synthetic feature detector stands in for a learned keypoint tracker.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import NonPositiveDepth, PinholeCamera, RigidPose
from .psm_kinematics import (
    JointVector,
    KinematicModel,
    PRISMATIC_INDEX,
    REVOLUTE,
    constrained_ik,
    fk,
    verify_unique,
)


class CalibrationError(Exception):
    pass


class FeatureBehindCamera(CalibrationError):
    pass


class GaussNewtonDiverged(CalibrationError):
    pass


class NoSolution(CalibrationError):
    pass


class AmbiguousSolution(CalibrationError):
    pass


class RegionNotUnique(CalibrationError):
    pass


class NonFiniteLoss(CalibrationError):
    pass


_DEFAULT_BODY_POINTS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.009, 0.0, 0.0],
        [0.0, 0.009, 0.0],
        [0.0, 0.003, 0.009],
    ]
)


@dataclass(frozen=True)
class FeatureModel:
    """Trackable feature points fixed in the jaw frame."""

    body_points: np.ndarray = field(default_factory=lambda: _DEFAULT_BODY_POINTS.copy())

    def __post_init__(self):
        pts = np.asarray(self.body_points, dtype=float).reshape(-1, 3)
        if len(pts) < 3:
            raise ValueError("need at least 3 feature points")
        centered = pts - pts.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[1] <= 1e-9:
            raise ValueError("feature points are colinear")
        object.__setattr__(self, "body_points", pts)

    def __len__(self):
        return len(self.body_points)


@dataclass(frozen=True)
class CalibSample:
    q_msr: JointVector
    pixels: np.ndarray  # (N, 2)
    delta_q: JointVector


def detect_features(
    camera: PinholeCamera,
    jaw_pose: RigidPose,
    fm: FeatureModel,
    noise_px: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Feature pixel positions with isotropic Gaussian pixel noise."""
    pts = jaw_pose.apply(fm.body_points)
    try:
        px = np.array([camera.project(p) for p in pts])
    except NonPositiveDepth as e:
        raise FeatureBehindCamera(str(e)) from e
    if noise_px > 0:
        if rng is None:
            raise ValueError("rng required when noise_px > 0")
        px = px + rng.normal(0.0, noise_px, px.shape)
    return px


@dataclass(frozen=True)
class PoseFit:
    pose: RigidPose
    residual: float  # summed squared pixel error
    iterations: int


def pose_from_pixels(
    camera: PinholeCamera,
    fm: FeatureModel,
    pixels: np.ndarray,
    initial: RigidPose,
    max_iterations: int = 100,
    step_tol: float = 1e-10,
) -> PoseFit:
    """Gauss-Newton pose refinement of the jaw from feature pixels.

    Minimizes summed squared reprojection error over SE(3) with a
    left-multiplied twist parameterization.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(len(fm), 2)
    cam_inv = camera.pose_world_from_camera.inverse()
    T = initial
    grow_streak = 0
    prev_cost = np.inf
    for it in range(max_iterations):
        pw = T.apply(fm.body_points)
        pc = cam_inv.apply(pw)
        Z = pc[:, 2]
        if np.any(Z <= 1e-12):
            raise FeatureBehindCamera("feature depth went non-positive during fit")
        proj = np.column_stack(
            [camera.cx + camera.fx * pc[:, 0] / Z, camera.cy + camera.fy * pc[:, 1] / Z]
        )
        r = (proj - pixels).reshape(-1)
        cost = float(r @ r)
        if cost >= prev_cost:
            grow_streak += 1
            if grow_streak >= 10:
                raise GaussNewtonDiverged(f"residual grew for {grow_streak} iterations")
        else:
            grow_streak = 0
        prev_cost = cost

        J = np.zeros((2 * len(fm), 6))
        Rc = cam_inv.rotation
        for i, p in enumerate(pw):
            dpx_dpc = np.array(
                [
                    [camera.fx / Z[i], 0.0, -camera.fx * pc[i, 0] / Z[i] ** 2],
                    [0.0, camera.fy / Z[i], -camera.fy * pc[i, 1] / Z[i] ** 2],
                ]
            )
            skew = np.array(
                [[0, -p[2], p[1]], [p[2], 0, -p[0]], [-p[1], p[0], 0]]
            )
            dpw = np.hstack([-skew, np.eye(3)])  # d p_w / d (omega, t)
            J[2 * i : 2 * i + 2] = dpx_dpc @ Rc @ dpw
        try:
            delta = np.linalg.solve(J.T @ J, -J.T @ r)
        except np.linalg.LinAlgError as e:
            raise GaussNewtonDiverged(f"normal equations singular: {e}") from e
        dR = Rotation.from_rotvec(delta[:3]).as_matrix()
        T = RigidPose(dR @ T.rotation, dR @ T.translation + delta[3:])
        if np.linalg.norm(delta) < step_tol:
            break
    pw = T.apply(fm.body_points)
    r = np.array([camera.project(p) for p in pw]) - pixels
    return PoseFit(T, float(np.sum(r * r)), it + 1)


def calibrate_direct(
    model: KinematicModel,
    camera: PinholeCamera,
    fm: FeatureModel,
    q_msr: JointVector,
    pixels: np.ndarray,
    bound: float,
) -> JointVector:
    """Offset estimate via pose fit and the unique constrained-IK branch."""
    q_msr = np.asarray(q_msr, dtype=float)
    fit = pose_from_pixels(camera, fm, pixels, initial=fk(model, q_msr))
    sols = constrained_ik(model, fit.pose, q_msr, bound)
    if not sols:
        raise NoSolution("constrained solution set is empty")
    if len(sols) > 1:
        raise AmbiguousSolution(f"{len(sols)} solutions in the constrained set")
    return sols[0].q - q_msr


# --- dataset ----------------------------------------------------------------

@dataclass(frozen=True)
class QmsrRegion:
    """Axis-aligned box of measured configurations used for sampling."""

    center: np.ndarray
    half_width: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "half_width", np.asarray(self.half_width, dtype=float))

    def sample(self, rng: np.random.Generator) -> JointVector:
        return self.center + rng.uniform(-1.0, 1.0, 6) * self.half_width


DEFAULT_QMSR_REGION = QmsrRegion(
    center=np.array([0.15, 0.1, 0.12, 0.3, 0.5, 0.2]),
    half_width=np.array([0.15, 0.15, 0.02, 0.2, 0.25, 0.2]),
)

# Training default: the encoder readout is held at one nominal configuration
# so every pixel of variation in the dataset is attributable to the offset.
# With q_msr varying, the configuration-induced pixel motion swamps the tiny
# out-of-image-plane signature of the three z-axis joints (base yaw, shaft
# roll, jaw yaw) and the regressor cannot separate them per joint.
DEFAULT_TRAIN_REGION = QmsrRegion(
    center=DEFAULT_QMSR_REGION.center,
    half_width=np.zeros(6),
)


def validate_region(
    model: KinematicModel,
    region: QmsrRegion,
    bound: float,
    rng_seed: int = 0,
    probe_count: int = 20,
    trials_per_probe: int = 50,
) -> None:
    """Check the single-solution property across the region; raises
    RegionNotUnique on any failure."""
    rng = np.random.default_rng(rng_seed)
    for i in range(probe_count):
        q = region.sample(rng)
        frac = verify_unique(model, q, bound, trials_per_probe, rng_seed=rng_seed + i + 1)
        if frac < 1.0:
            raise RegionNotUnique(
                f"probe {i} at q_msr={q} has unique fraction {frac} < 1"
            )


def generate_dataset(
    model: KinematicModel,
    camera: PinholeCamera,
    fm: FeatureModel,
    count: int = 10000,
    delta_range: float = np.radians(5.0),
    noise_px: float = 0.0,
    rng_seed: int = 0,
    region: QmsrRegion = DEFAULT_TRAIN_REGION,
    bound: float = np.radians(10.0),
    validate: bool = True,
) -> list[CalibSample]:
    """Synthetic calibration dataset: measured joints, feature pixels and
    the injected offset label.

    Per-sample rng streams derive from (rng_seed, index), so generation is
    order-independent and reproducible.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if validate:
        validate_region(model, region, bound, rng_seed=rng_seed)
    samples = []
    for i in range(count):
        rng = np.random.default_rng([rng_seed, i])
        q_msr = region.sample(rng)
        dq = rng.uniform(-delta_range, delta_range, 6)
        dq[PRISMATIC_INDEX] /= model.prismatic_scale
        jaw = fk(model, q_msr + dq)
        px = detect_features(camera, jaw, fm, noise_px, rng)
        samples.append(CalibSample(q_msr, px, dq))
    return samples


def dataset_to_arrays(samples: list[CalibSample]) -> tuple[np.ndarray, np.ndarray]:
    """(inputs (n, 6 + 2N), labels (n, 6)) in internal units."""
    X = np.array([np.concatenate([s.q_msr, s.pixels.reshape(-1)]) for s in samples])
    Y = np.array([s.delta_q for s in samples])
    return X, Y


def write_dataset_csv(samples: list[CalibSample], path, header_comment: str = "") -> None:
    """Degrees/mm at the file boundary; pixels stay in pixels."""
    n_feat = len(samples[0].pixels)
    cols = (
        [f"qm{i+1}" for i in range(6)]
        + [f"px{i+1}{ax}" for i in range(n_feat) for ax in ("x", "y")]
        + [f"dq{i+1}" for i in range(6)]
    )
    with open(path, "w", newline="") as f:
        if header_comment:
            f.write(header_comment + "\n")
        w = csv.writer(f)
        w.writerow(cols)
        for s in samples:
            qm = _to_deg_mm(s.q_msr)
            dq = _to_deg_mm(s.delta_q)
            w.writerow(
                [f"{v:.12g}" for v in qm]
                + [f"{v:.12g}" for v in s.pixels.reshape(-1)]
                + [f"{v:.12g}" for v in dq]
            )


def read_dataset_csv(path) -> list[CalibSample]:
    with open(path) as f:
        first = f.readline()
        if not first.startswith("#"):
            f.seek(0)
        rows = list(csv.reader(f))
    header, rows = rows[0], rows[1:]
    n_feat = sum(1 for c in header if c.startswith("px") and c.endswith("x"))
    samples = []
    for row in rows:
        vals = np.array([float(v) for v in row])
        qm = _from_deg_mm(vals[:6])
        px = vals[6 : 6 + 2 * n_feat].reshape(n_feat, 2)
        dq = _from_deg_mm(vals[6 + 2 * n_feat :])
        samples.append(CalibSample(qm, px, dq))
    return samples


def _to_deg_mm(q: JointVector) -> np.ndarray:
    out = np.asarray(q, dtype=float).copy()
    out[REVOLUTE] = np.degrees(out[REVOLUTE])
    out[PRISMATIC_INDEX] *= 1000.0
    return out


def _from_deg_mm(q: np.ndarray) -> JointVector:
    out = np.asarray(q, dtype=float).copy()
    out[REVOLUTE] = np.radians(out[REVOLUTE])
    out[PRISMATIC_INDEX] /= 1000.0
    return out


# --- scalers and MLP --------------------------------------------------------

@dataclass(frozen=True)
class Scaler:
    """Per-dimension z-score standardization."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float)
        s = np.asarray(self.std, dtype=float)
        if np.any(s <= 1e-12):
            raise ValueError("scaler std must exceed 1e-12 per dimension")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "std", s)

    @staticmethod
    def fit(data: np.ndarray) -> "Scaler":
        std = data.std(axis=0)
        return Scaler(data.mean(axis=0), np.maximum(std, 1e-9))

    def scale(self, v: np.ndarray) -> np.ndarray:
        return (v - self.mean) / self.std

    def unscale(self, v: np.ndarray) -> np.ndarray:
        return v * self.std + self.mean


class MlpModel:
    """Fully connected rectifier network with input/output standardization."""

    def __init__(self, weights, biases, input_scaler: Scaler, output_scaler: Scaler):
        self.weights = [np.asarray(W, dtype=float) for W in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.input_scaler = input_scaler
        self.output_scaler = output_scaler
        for W, b in zip(self.weights, self.biases):
            if W.shape[1] != b.shape[0]:
                raise ValueError("inconsistent layer shapes")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError("non-finite parameters")
        for Wa, Wb in zip(self.weights, self.weights[1:]):
            if Wa.shape[1] != Wb.shape[0]:
                raise ValueError("inconsistent layer shapes")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Predict offsets for one input vector or a batch."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = self.input_scaler.scale(np.atleast_2d(x))
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ W + b, 0.0)
        out = self.output_scaler.unscale(h @ self.weights[-1] + self.biases[-1])
        return out[0] if single else out

    def _forward_scaled(self, xs: np.ndarray):
        """Forward in scaled space keeping pre-activations for backprop."""
        acts = [xs]
        h = xs
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ W + b, 0.0)
            acts.append(h)
        return acts, acts[-1] @ self.weights[-1] + self.biases[-1]


def mlp_forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    return model.forward(x)


def mlp_init(
    layer_sizes: list[int],
    input_scaler: Scaler,
    output_scaler: Scaler,
    rng: np.random.Generator,
) -> MlpModel:
    """He-style initialization."""
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes, layer_sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_out)))
        biases.append(np.zeros(n_out))
    return MlpModel(weights, biases, input_scaler, output_scaler)


def mlp_backprop(model: MlpModel, xs: np.ndarray, ys: np.ndarray):
    """Mean-squared-error loss and parameter gradients, scaled space."""
    n = len(xs)
    acts, out = model._forward_scaled(xs)
    err = out - ys
    loss = float(np.mean(err * err))
    dW = [None] * len(model.weights)
    db = [None] * len(model.biases)
    # d loss / d out; mean over batch and output dims
    g = 2.0 * err / err.size
    for li in range(len(model.weights) - 1, -1, -1):
        dW[li] = acts[li].T @ g
        db[li] = g.sum(axis=0)
        if li > 0:
            g = (g @ model.weights[li].T) * (acts[li] > 0)
    return loss, dW, db


@dataclass(frozen=True)
class TrainConfig:
    hidden_sizes: tuple[int, ...] = (400, 300, 200)
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    lr_final_fraction: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.1
    rng_seed: int = 0


@dataclass
class TrainResult:
    model: MlpModel
    train_loss: list[float]  # per-epoch mean training loss, scaled space
    val_loss: list[float]


def mlp_train(samples: list[CalibSample], config: TrainConfig = TrainConfig()) -> TrainResult:
    """Train the offset regressor with Adam on mini-batch MSE."""
    X, Y = dataset_to_arrays(samples)
    if len(X) < config.batch_size:
        raise ValueError("dataset smaller than batch size")
    rng = np.random.default_rng(config.rng_seed)
    perm = rng.permutation(len(X))
    n_val = int(round(config.val_fraction * len(X)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    in_scaler = Scaler.fit(X[train_idx])
    out_scaler = Scaler.fit(Y[train_idx])
    Xs, Ys = in_scaler.scale(X), out_scaler.scale(Y)

    sizes = [X.shape[1], *config.hidden_sizes, Y.shape[1]]
    model = mlp_init(sizes, in_scaler, out_scaler, rng)
    mW = [np.zeros_like(W) for W in model.weights]
    vW = [np.zeros_like(W) for W in model.weights]
    mb = [np.zeros_like(b) for b in model.biases]
    vb = [np.zeros_like(b) for b in model.biases]
    t = 0
    decay = config.lr_final_fraction ** (1.0 / max(1, config.epochs))
    lr = config.learning_rate
    train_curve, val_curve = [], []
    for epoch in range(config.epochs):
        order = rng.permutation(train_idx)
        epoch_losses = []
        for start in range(0, len(order) - config.batch_size + 1, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, dW, db = mlp_backprop(model, Xs[idx], Ys[idx])
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss non-finite at epoch {epoch}")
            epoch_losses.append(loss)
            t += 1
            c1 = 1.0 - config.beta1 ** t
            c2 = 1.0 - config.beta2 ** t
            for li in range(len(model.weights)):
                mW[li] = config.beta1 * mW[li] + (1 - config.beta1) * dW[li]
                vW[li] = config.beta2 * vW[li] + (1 - config.beta2) * dW[li] ** 2
                model.weights[li] -= lr * (mW[li] / c1) / (np.sqrt(vW[li] / c2) + config.eps)
                mb[li] = config.beta1 * mb[li] + (1 - config.beta1) * db[li]
                vb[li] = config.beta2 * vb[li] + (1 - config.beta2) * db[li] ** 2
                model.biases[li] -= lr * (mb[li] / c1) / (np.sqrt(vb[li] / c2) + config.eps)
        lr *= decay
        train_curve.append(float(np.mean(epoch_losses)))
        if len(val_idx):
            _, out = model._forward_scaled(Xs[val_idx])
            val_curve.append(float(np.mean((out - Ys[val_idx]) ** 2)))
    return TrainResult(model, train_curve, val_curve)


def evaluate_calibration(model: MlpModel, test_set: list[CalibSample]) -> np.ndarray:
    """Per-joint (mean, std) of absolute offset error, shape (6, 2), in
    internal units (rad / m)."""
    X, Y = dataset_to_arrays(test_set)
    err = np.abs(model.forward(X) - Y)
    return np.column_stack([err.mean(axis=0), err.std(axis=0)])


# --- model (de)serialization ------------------------------------------------

def model_to_json(model: MlpModel) -> dict:
    return {
        "layer_sizes": model.layer_sizes,
        "input_scaler": {"mean": model.input_scaler.mean.tolist(),
                         "std": model.input_scaler.std.tolist()},
        "output_scaler": {"mean": model.output_scaler.mean.tolist(),
                          "std": model.output_scaler.std.tolist()},
        "weights": [W.reshape(-1).tolist() for W in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }


def model_from_json(d: dict) -> MlpModel:
    sizes = d["layer_sizes"]
    weights = [
        np.asarray(w, dtype=float).reshape(n_in, n_out)
        for w, n_in, n_out in zip(d["weights"], sizes, sizes[1:])
    ]
    biases = [np.asarray(b, dtype=float) for b in d["biases"]]
    return MlpModel(
        weights,
        biases,
        Scaler(d["input_scaler"]["mean"], d["input_scaler"]["std"]),
        Scaler(d["output_scaler"]["mean"], d["output_scaler"]["std"]),
    )


def save_model(model: MlpModel, path) -> None:
    with open(path, "w") as f:
        json.dump(model_to_json(model), f)


def load_mlp(path) -> MlpModel:
    with open(path) as f:
        return model_from_json(json.load(f))

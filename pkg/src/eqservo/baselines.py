"""Classical image-based visual servoing with oracle correspondences, and a
direct relative-pose-regression (RPR) baseline.

IBVS maps point-feature error to a camera velocity screw through the damped
pseudo-inverse of the stacked interaction matrix evaluated at one constant
depth.  Correspondences come from projecting known model vertices (no image
feature matching), which preserves the baseline's characteristic wide-baseline
failure mode, the local linearization, while removing the matching subsystem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as model_mod
from .autodiff import AdamConfig, Tensor
from .geom import RelTransform, RigidTransform, UnitQuaternion, geodesic_angle
from .imaging import Camera, Image, SceneObject
from .model import EncoderConfig, Model, TrainingData, _extractor_forward, _tensors


class RankDeficientError(RuntimeError):
    """Stacked interaction matrix too close to singular to invert."""


@dataclass(frozen=True)
class IBVSConfig:
    gain: float = 0.5  # lambda_e
    z_star: float = 0.5  # constant depth used in the interaction matrix
    dt: float = 1.0  # integration step for the commanded twist
    feature_tol: float = 1e-4  # convergence threshold on ||e||
    max_steps: int = 200

    def __post_init__(self):
        if self.gain <= 0 or self.z_star <= 0 or self.dt <= 0:
            raise ValueError("gain, z_star and dt must be positive")


def interaction_matrix(x: float, y: float, Z: float) -> np.ndarray:
    """2x6 point-feature interaction matrix at normalized coords (x, y), depth Z."""
    if Z <= 0:
        raise ValueError("depth must be positive")
    return np.array(
        [
            [-1.0 / Z, 0.0, x / Z, x * y, -(1.0 + x * x), y],
            [0.0, -1.0 / Z, y / Z, 1.0 + y * y, -x * y, -x],
        ]
    )


def ibvs_step(current: np.ndarray, target: np.ndarray, cfg: IBVSConfig) -> np.ndarray:
    """Velocity twist (v, w) = -gain * pinv(L) * (current - target).

    current/target are (N, 2) normalized image coordinates matched by index.
    """
    current = np.asarray(current, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if current.shape != target.shape or current.ndim != 2 or current.shape[1] != 2:
        raise ValueError("current and target must be matching (N, 2) arrays")
    if len(current) < 3:
        raise ValueError("need at least three point features")
    L = np.vstack([interaction_matrix(x, y, cfg.z_star) for x, y in current])
    sv = np.linalg.svd(L, compute_uv=False)
    if sv[-1] < 1e-8:
        raise RankDeficientError(f"interaction matrix near singular (sigma_min={sv[-1]:.2e})")
    # Damped (Tikhonov) pseudo-inverse.
    e = (current - target).reshape(-1)
    pinv = np.linalg.solve(L.T @ L + 1e-8 * np.eye(6), L.T)
    return -cfg.gain * (pinv @ e)


def _hat(w):
    return np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])


def apply_twist(pose: RigidTransform, v, w, dt: float) -> RigidTransform:
    """Integrate a camera-frame velocity screw over dt (exact SE(3) step).

    With X_cam = R X_world + t and the camera moving at (v, w) in its own
    frame, dR/dt = -[w] R and dt/dt = -v - [w] t.
    """
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w)) * dt
    what = _hat(-w * dt)
    if theta < 1e-12:
        E = np.eye(3)
        V = np.eye(3) * dt
    else:
        k = _hat(-w / np.linalg.norm(w))
        s, c = math.sin(theta), math.cos(theta)
        E = np.eye(3) + s * k + (1 - c) * (k @ k)
        V = dt * (np.eye(3) + ((1 - c) / theta) * k + ((theta - s) / theta) * (k @ k))
    return RigidTransform(E @ pose.R, E @ pose.t - V @ v)


def oracle_points(scene: SceneObject, count: int = 8) -> np.ndarray:
    """Deterministic well-spread model vertices (greedy farthest point)."""
    verts = scene.vertices
    chosen = [0]
    dist = np.linalg.norm(verts - verts[0], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(verts - verts[nxt], axis=1))
    pts = verts[chosen]
    if np.linalg.matrix_rank(pts - pts.mean(axis=0), tol=1e-9) < 3:
        raise ValueError("oracle points are coplanar; need a 3-d point spread")
    return pts


def project_points(points, camera: Camera, image_size) -> np.ndarray:
    """Normalized coordinates ((u-cx)/fx, (v-cy)/fy); None if any point leaves
    the image or passes behind the camera."""
    cam_pts = camera.pose.apply(points)
    if np.any(cam_pts[:, 2] <= 1e-6):
        return None
    K = camera.intrinsics
    u = K.fx * cam_pts[:, 0] / cam_pts[:, 2] + K.cx
    v = K.fy * cam_pts[:, 1] / cam_pts[:, 2] + K.cy
    w, h = image_size
    if np.any(u < 0) or np.any(u > w - 1) or np.any(v < 0) or np.any(v > h - 1):
        return None
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy], axis=1)


@dataclass
class IBVSStep:
    iteration: int
    camera: RigidTransform
    residual: float  # feature error norm
    commanded_angle: float
    angle_to_goal: float


@dataclass
class IBVSResult:
    outcome: str  # "converged" | "not-converged" | "diverged"
    steps: list
    final_camera: RigidTransform


def ibvs_servo(
    scene: SceneObject,
    start_camera: Camera,
    goal_camera: Camera,
    cfg: IBVSConfig,
    image_size=(64, 64),
    n_points: int = 8,
) -> IBVSResult:
    """Iterate IBVS on projected oracle model points until the feature error
    vanishes, a point leaves the image (divergence), or the step cap."""
    pts = oracle_points(scene, n_points)
    target = project_points(pts, goal_camera, image_size)
    if target is None:
        raise ValueError("oracle points not visible in the goal view")
    pose = start_camera.pose
    goal_q = UnitQuaternion.from_matrix(goal_camera.pose.R)
    steps: list = []
    outcome = "not-converged"
    for it in range(cfg.max_steps):
        current = project_points(pts, Camera(start_camera.intrinsics, pose), image_size)
        if current is None:
            outcome = "diverged"
            break
        err = float(np.linalg.norm(current - target))
        angle_err = geodesic_angle(UnitQuaternion.from_matrix(pose.R), goal_q)
        if err < cfg.feature_tol:
            steps.append(IBVSStep(it, pose, err, 0.0, angle_err))
            outcome = "converged"
            break
        try:
            twist = ibvs_step(current, target, cfg)
        except RankDeficientError:
            steps.append(IBVSStep(it, pose, err, 0.0, angle_err))
            outcome = "diverged"
            break
        steps.append(IBVSStep(it, pose, err, float(np.linalg.norm(twist[3:]) * cfg.dt), angle_err))
        pose = apply_twist(pose, twist[:3], twist[3:], cfg.dt)
    return IBVSResult(outcome, steps, pose)


def ibvs_pose_error(result: IBVSResult, goal_camera: Camera):
    ang = geodesic_angle(
        UnitQuaternion.from_matrix(result.final_camera.R),
        UnitQuaternion.from_matrix(goal_camera.pose.R),
    )
    pos = float(
        np.linalg.norm(result.final_camera.camera_center() - goal_camera.pose.camera_center())
    )
    return ang, pos


# ------------------------------------------------------------------ RPR model


_QUAT_SELECT = np.zeros((7, 4), dtype=np.float32)
for _i in range(4):
    _QUAT_SELECT[3 + _i, _i] = 1.0


@dataclass
class RPRModel:
    """Shared encoder + regression head mapping two views to a 7-vector."""

    config: EncoderConfig
    params: dict


def init_rpr(config: EncoderConfig, seed: int) -> RPRModel:
    rng = np.random.default_rng(seed)
    base = model_mod.init_model(config, seed)
    p = {k: v for k, v in base.params.items() if k.startswith("f.")}
    n = config.feature_dim
    widths = (2 * n,) + tuple(config.transformer_widths) + (7,)
    for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        scale = np.sqrt(2.0 / w_in)
        p[f"r.fc{i}_w"] = (rng.standard_normal((w_in, w_out)) * scale).astype(np.float32)
        p[f"r.fc{i}_b"] = np.zeros(w_out, dtype=np.float32)
    # Bias toward the identity quaternion so early predictions are valid.
    p[f"r.fc{len(widths) - 1}_b"][3] = 1.0
    return RPRModel(config, p)


def _rpr_head(t: dict, z_src: Tensor, z_tar: Tensor) -> Tensor:
    n_layers = sum(1 for k in t if k.startswith("r.fc") and k.endswith("_w"))
    h = ad.concat([z_src, z_tar], axis=1)
    for i in range(1, n_layers + 1):
        h = ad.add(ad.matmul(h, t[f"r.fc{i}_w"]), t[f"r.fc{i}_b"])
        if i < n_layers:
            h = ad.relu(h)
    return h


def rpr_quat_loss(pred7: Tensor, quats: np.ndarray) -> Tensor:
    """Mean chordal distance min(||q - qh||^2, ||q + qh||^2) = 2 - 2|<q, qh>|."""
    q_raw = ad.matmul(pred7, Tensor(_QUAT_SELECT))
    sumsq = ad.reduce_sum(ad.mul(q_raw, q_raw), axis=1, keepdims=True)
    inv_norm = ad.reciprocal(ad.sqrt(sumsq))
    q_hat = ad.mul(q_raw, inv_norm)
    dots = ad.reduce_sum(ad.mul(q_hat, Tensor(quats.astype(np.float32))), axis=1)
    mean_absdot = ad.scale(ad.reduce_sum(ad.absolute(dots)), 1.0 / len(quats))
    return ad.add(ad.scale(mean_absdot, -2.0), Tensor(np.float32(2.0)))


def rpr_train(
    rpr: RPRModel,
    dataset: TrainingData,
    epochs: int,
    optimizer_config=None,
    seed: int = 0,
    batch_size: int = 32,
    pairs_per_epoch: int | None = None,
) -> list:
    """Fit the regression head (and encoder) on reduced transforms."""
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    opt = optimizer_config or AdamConfig(lr=1e-3)
    state = ad.init_optimizer_state(rpr.params, opt)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        if pairs_per_epoch is not None:
            order = order[:pairs_per_epoch]
        total, n_b = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            if len(idx) == 0:
                continue
            batch = dataset.batch(idx)
            t = _tensors(rpr.params, requires_grad=True)
            z_src = _extractor_forward(t, Tensor(batch.src), rpr.config)
            z_tar = _extractor_forward(t, Tensor(batch.tar), rpr.config)
            pred = _rpr_head(t, z_src, z_tar)
            loss = rpr_quat_loss(pred, batch.pose[:, 3:])
            grads = ad.gradients(loss, t)
            ad.optimizer_step(rpr.params, grads, state, opt)
            total += loss.item()
            n_b += 1
        history.append(total / max(n_b, 1))
    return history


def rpr_predict(rpr: RPRModel, img_src: Image, img_tar: Image) -> RelTransform:
    """Predicted reduced transform; the quaternion is renormalized."""
    z_src = model_mod.extract_batch(
        RPRStub(rpr), model_mod.image_to_input(img_src)[None]
    )
    z_tar = model_mod.extract_batch(
        RPRStub(rpr), model_mod.image_to_input(img_tar)[None]
    )
    return rpr_predict_from_features(rpr, z_src[0], z_tar[0])


def rpr_predict_from_features(rpr: RPRModel, z_src: np.ndarray, z_tar: np.ndarray) -> RelTransform:
    t = _tensors(rpr.params, requires_grad=False)
    pred = _rpr_head(t, Tensor(z_src.reshape(1, -1)), Tensor(z_tar.reshape(1, -1))).data[0]
    v = pred.astype(np.float64)
    n = float(np.linalg.norm(v[3:]))
    if n < 1e-12:
        raise RuntimeError("RPR predicted a zero quaternion")
    q = UnitQuaternion(v[3] / n, v[4] / n, v[5] / n, v[6] / n)
    return RelTransform(q, np.zeros(3), reduced=True)


class RPRStub:
    """Adapter so the shared extractor code can run on RPR parameters."""

    def __init__(self, rpr: RPRModel):
        self.config = rpr.config
        self.params = rpr.params

"""Relative-pose inference by gradient descent in feature space, the closed
servo loop on the view sphere, and view-sphere cost maps.

Inference minimizes  e(p) = || f(I_tar) - h(f(I_src), p) ||^2  over the
7-vector pose encoding.  Both image features are computed once; the gradient
flows only through the feature transformer.  Each step updates the raw
7-vector and then projects it back: quaternion renormalized with w >= 0, and
translation zeroed in reduced mode.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import model as model_mod
from .autodiff import Tensor
from .geom import (
    RelTransform,
    RigidTransform,
    UnitQuaternion,
    apply_relative,
    camera_to_hemisphere,
    depth_change,
    geodesic_angle,
    random_rotation,
    relative_pose,
)
from .imaging import Camera, Image, SceneObject, quantize8, render, render_centered
from .model import Model


@dataclass(frozen=True)
class InferenceConfig:
    step_size: float = 0.05
    max_iters: int = 200
    restarts: int = 8
    backtrack_factor: float = 0.5
    max_backtracks: int = 8
    tol: float = 1e-10
    reduced: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.restarts < 1:
            raise ValueError("need at least one restart")
        if not (0.0 < self.backtrack_factor < 1.0):
            raise ValueError("backtracking factor must lie in (0, 1)")


@dataclass
class InferenceResult:
    transform: RelTransform
    residual: float
    trace: np.ndarray  # residuals of accepted iterates, non-increasing
    restart_index: int


def project_pose_vec(v: np.ndarray, reduced: bool) -> np.ndarray:
    """Back onto the valid set: unit quaternion, w >= 0, t = 0 when reduced."""
    v = np.asarray(v, dtype=np.float64).copy()
    q = v[3:]
    n = float(np.linalg.norm(q))
    if n < 1e-12:
        raise ValueError("quaternion collapsed to zero during optimization")
    q /= n
    if q[0] < 0:
        q *= -1
    v[3:] = q
    if reduced:
        v[:3] = 0.0
    return v


def _objective(model: Model, z_src: np.ndarray, z_tar: np.ndarray, v: np.ndarray):
    """Residual e(v) and its gradient with respect to the 7-vector."""
    pose = Tensor(v.astype(np.float32).reshape(1, 7), requires_grad=True)
    t = model_mod._tensors(model.params, requires_grad=False)
    pred = model_mod._transformer_forward(t, Tensor(z_src.reshape(1, -1)), pose)
    diff = ad.sub(Tensor(z_tar.reshape(1, -1)), pred)
    e = ad.reduce_sum(ad.mul(diff, diff))
    grads = ad.gradients(e, {"pose": pose})
    return e.item(), grads["pose"].reshape(7).astype(np.float64)


def _eval_residual(model: Model, z_src, z_tar, v) -> float:
    pose = Tensor(v.astype(np.float32).reshape(1, 7))
    t = model_mod._tensors(model.params, requires_grad=False)
    pred = model_mod._transformer_forward(t, Tensor(z_src.reshape(1, -1)), pose)
    return float(((z_tar.reshape(1, -1) - pred.data) ** 2).sum())


def _descend(model: Model, z_src, z_tar, v0: np.ndarray, cfg: InferenceConfig):
    v = project_pose_vec(v0, cfg.reduced)
    e, g = _objective(model, z_src, z_tar, v)
    if not math.isfinite(e):
        raise RuntimeError("non-finite residual at iteration 0")
    trace = [e]
    for it in range(cfg.max_iters):
        step = cfg.step_size
        accepted = None
        for _ in range(cfg.max_backtracks + 1):
            cand = project_pose_vec(v - step * g, cfg.reduced)
            e_cand = _eval_residual(model, z_src, z_tar, cand)
            if not math.isfinite(e_cand):
                raise RuntimeError(f"non-finite residual at iteration {it + 1}")
            if e_cand <= e:
                accepted = (cand, e_cand)
                break
            step *= cfg.backtrack_factor
        if accepted is None:
            break  # no non-increasing step available: local minimum
        v, e_new = accepted
        trace.append(e_new)
        converged = abs(e - e_new) < cfg.tol
        e = e_new
        _, g = _objective(model, z_src, z_tar, v)
        if converged:
            break
    return v, e, np.asarray(trace)


def infer_relative_pose(model: Model, img_src: Image, img_tar: Image, cfg: InferenceConfig) -> InferenceResult:
    """Best-of-restarts descent; identity init plus random rotation restarts."""
    z_src = model_mod.extract(model, img_src)
    z_tar = model_mod.extract(model, img_tar)
    return infer_from_features(model, z_src, z_tar, cfg)


def infer_from_features(model: Model, z_src: np.ndarray, z_tar: np.ndarray, cfg: InferenceConfig) -> InferenceResult:
    rng = np.random.default_rng(cfg.seed)
    inits = [model_mod.pose_to_vec(RelTransform.identity(cfg.reduced))]
    for _ in range(cfg.restarts - 1):
        q = random_rotation(rng)
        inits.append(model_mod.pose_to_vec(RelTransform(q, np.zeros(3), cfg.reduced)))
    best = None
    for idx, v0 in enumerate(inits):
        v, e, trace = _descend(model, z_src, z_tar, v0, cfg)
        if best is None or e < best[1]:
            best = (v, e, trace, idx)
    v, e, trace, idx = best
    return InferenceResult(model_mod.vec_to_pose(v, cfg.reduced), e, trace, idx)


# ------------------------------------------------------------------ servo loop


@dataclass(frozen=True)
class ServoConfig:
    max_iters: int = 50
    angle_tol: float = math.radians(10.0)
    add_tol: float | None = None
    beta: float = 1.0
    # Restarts for loop iterations after the first: once the camera is moving
    # toward the goal the remaining transform is small, so identity-seeded
    # descent suffices and the loop runs an order of magnitude faster.
    warm_restarts: int = 1

    def __post_init__(self):
        if self.angle_tol <= 0:
            raise ValueError("angle tolerance must be positive")
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError("damping beta must lie in [0, 1]")
        if self.warm_restarts < 1:
            raise ValueError("warm_restarts must be at least 1")


@dataclass
class ServoStep:
    iteration: int
    camera: RigidTransform
    residual: float
    commanded_angle: float
    angle_to_goal: float


@dataclass
class ServoResult:
    outcome: str  # "converged" | "not-converged"
    steps: list
    final_camera: RigidTransform

    def final_angle_to_goal(self) -> float:
        return self.steps[-1].angle_to_goal if self.steps else float("nan")


def _centered_view(scene, intrinsics, cam_rot, depth, size, target_size_px):
    pose = RigidTransform(cam_rot, np.array([0.0, 0.0, depth]))
    hp = camera_to_hemisphere(pose)
    img, ct = render_centered(scene, hp, intrinsics, size, target_size_px)
    return quantize8(img), ct


def closed_loop_servo(
    model: Model,
    scene: SceneObject,
    start_camera: Camera,
    target_image: Image,
    servo_cfg: ServoConfig,
    infer_cfg: InferenceConfig,
    target_size_px: float,
    goal_pose: RigidTransform | None = None,
) -> ServoResult:
    """Drive the camera on the view sphere until it matches the target image.

    Per iteration: render the centered current view, infer the relative
    transform to the target, move by the damped rotation about the object
    center, and correct depth by the centering scale.  The camera always
    looks at the object center; the loop state is (rotation, depth).

    Convergence is judged against goal_pose when given (true angle error),
    otherwise against the magnitude of the inferred transform.
    """
    K = start_camera.intrinsics
    size = (target_image.width, target_image.height)
    cam_rot = np.asarray(start_camera.pose.R)
    depth = float(np.linalg.norm(start_camera.pose.camera_center()))
    z_tar = model_mod.extract(model, target_image)
    goal_q = UnitQuaternion.from_matrix(goal_pose.R) if goal_pose is not None else None

    steps: list = []
    outcome = "not-converged"
    warm_cfg = replace(infer_cfg, restarts=min(infer_cfg.restarts, servo_cfg.warm_restarts))
    for it in range(servo_cfg.max_iters):
        img_cur, ct = _centered_view(scene, K, cam_rot, depth, size, target_size_px)
        z_src = model_mod.extract(model, img_cur)
        inferred = infer_from_features(model, z_src, z_tar, infer_cfg if it == 0 else warm_cfg)
        p = inferred.transform
        if goal_q is not None:
            angle_err = geodesic_angle(UnitQuaternion.from_matrix(cam_rot), goal_q)
        else:
            angle_err = p.angle()
        steps.append(
            ServoStep(it, RigidTransform(cam_rot, np.array([0.0, 0.0, depth])), inferred.residual, p.angle(), angle_err)
        )
        done = angle_err < servo_cfg.angle_tol
        if done and servo_cfg.add_tol is not None and goal_pose is not None:
            from .metrics import add_metric

            done = (
                add_metric(scene.vertices, goal_pose, RigidTransform(cam_rot, np.array([0.0, 0.0, depth])))
                < servo_cfg.add_tol
            )
        if done:
            outcome = "converged"
            break
        moved = apply_relative(RigidTransform(cam_rot, np.array([0.0, 0.0, depth])), p, servo_cfg.beta)
        cam_rot = np.asarray(moved.R)
        depth += servo_cfg.beta * depth_change(ct.s, depth)

    final = RigidTransform(cam_rot, np.array([0.0, 0.0, depth]))
    return ServoResult(outcome, steps, final)


def servo_free_motion(
    model: Model,
    scene: SceneObject,
    start_camera: Camera,
    target_image: Image,
    servo_cfg: ServoConfig,
    infer_cfg: InferenceConfig,
    goal_pose: RigidTransform | None = None,
) -> ServoResult:
    """Servo variant for models trained without centering: plain renders and
    full 6-DoF camera updates (used by the centering ablation)."""
    K = start_camera.intrinsics
    size = (target_image.width, target_image.height)
    cam = start_camera.pose
    z_tar = model_mod.extract(model, target_image)
    goal_q = UnitQuaternion.from_matrix(goal_pose.R) if goal_pose is not None else None

    steps: list = []
    outcome = "not-converged"
    warm_cfg = replace(infer_cfg, restarts=min(infer_cfg.restarts, servo_cfg.warm_restarts))
    for it in range(servo_cfg.max_iters):
        img_cur = quantize8(render(scene, Camera(K, cam), size))
        z_src = model_mod.extract(model, img_cur)
        inferred = infer_from_features(model, z_src, z_tar, infer_cfg if it == 0 else warm_cfg)
        p = inferred.transform
        if goal_q is not None:
            angle_err = geodesic_angle(UnitQuaternion.from_matrix(cam.R), goal_q)
        else:
            angle_err = p.angle()
        steps.append(ServoStep(it, cam, inferred.residual, p.angle(), angle_err))
        if angle_err < servo_cfg.angle_tol:
            outcome = "converged"
            break
        cam = apply_relative(cam, p, servo_cfg.beta)

    return ServoResult(outcome, steps, cam)


# -------------------------------------------------------------------- cost map


@dataclass
class CostMap:
    values: np.ndarray  # (n_elevation, n_azimuth) feature distances
    azimuths: np.ndarray
    elevations: np.ndarray
    roll_policy: float = 0.0


def cost_map(
    model: Model,
    src_pose,
    scene: SceneObject,
    grid_res: int,
    intrinsics,
    target_size_px: float,
    elevation_range=(0.2, 1.35),
) -> CostMap:
    """Feature distance from the source view over an (azimuth, elevation) grid.

    All grid views are rendered at the source radius with a fixed roll of 0;
    the source view itself is rendered through the same pipeline, so a grid
    cell that coincides with the source pose has exactly zero cost.
    """
    if grid_res < 4:
        raise ValueError("grid resolution must be at least 4")
    from .geom import HemispherePose

    size = (model.config.image_size, model.config.image_size)
    src_img, _ = render_centered(scene, src_pose, intrinsics, size, target_size_px)
    z_src = model_mod.extract(model, quantize8(src_img))

    azimuths = np.linspace(0.0, 2.0 * math.pi, grid_res, endpoint=False)
    elevations = np.linspace(elevation_range[0], elevation_range[1], grid_res)
    values = np.zeros((grid_res, grid_res))
    for i, el in enumerate(elevations):
        for j, az in enumerate(azimuths):
            hp = HemispherePose(az, el, 0.0, src_pose.radius)
            img, _ = render_centered(scene, hp, intrinsics, size, target_size_px)
            z = model_mod.extract(model, quantize8(img))
            values[i, j] = float(np.linalg.norm(z - z_src))
    return CostMap(values, azimuths, elevations)


# ------------------------------------------------------------------ csv export

TRAJECTORY_FIELDS = ("iteration", "azimuth", "elevation", "roll", "residual", "angle_to_goal")


def write_trajectory_csv(steps, path, config_digest: str = "") -> None:
    """Shared trajectory schema for the learned servo and the baselines."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        if config_digest:
            f.write(f"# config_digest={config_digest}\n")
        writer = csv.writer(f)
        writer.writerow(TRAJECTORY_FIELDS)
        for s in steps:
            hp = camera_to_hemisphere(s.camera)
            writer.writerow(
                [
                    s.iteration,
                    f"{hp.azimuth:.9f}",
                    f"{hp.elevation:.9f}",
                    f"{hp.roll:.9f}",
                    f"{s.residual:.9g}",
                    f"{s.angle_to_goal:.9f}",
                ]
            )


def write_cost_map_csv(cmap: CostMap, path, config_digest: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        if config_digest:
            f.write(f"# config_digest={config_digest}\n")
        writer = csv.writer(f)
        for row in cmap.values:
            writer.writerow([f"{v:.9g}" for v in row])


def cost_map_png(cmap: CostMap, path) -> None:
    from PIL import Image as PILImage

    v = cmap.values
    rng = v.max() - v.min()
    norm = (v - v.min()) / (rng if rng > 0 else 1.0)
    PILImage.fromarray(np.round(norm * 255).astype(np.uint8), mode="L").save(path)

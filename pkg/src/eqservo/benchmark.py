"""Benchmark orchestration: closed-loop trials for each method from sampled
wide-baseline starts, ADD/PCS aggregation, and the object-centering ablation.

Trial start/goal poses derive from (seed, trial index) only, so per-trial
results for one method never depend on which other methods run.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import baselines as bl
from . import servo as servo_mod
from .dataset import ViewConfig
from .geom import (
    HemispherePose,
    RigidTransform,
    UnitQuaternion,
    camera_to_hemisphere,
    geodesic_angle,
    random_rotation,
    rotation_from_axis_angle,
    sample_hemisphere,
)
from .imaging import Camera, SceneObject, quantize8, render, render_centered
from .metrics import add_metric, pcs
from .model import Model
from .servo import InferenceConfig, ServoConfig

METHODS = ("ours", "ibvs", "rpr")
DEFAULT_EPS_FRACTIONS = (0.02, 0.05, 0.1, 0.2)
DEFAULT_START_ANGLE_RANGE = (math.radians(60.0), math.radians(150.0))


class ConfigurationError(ValueError):
    pass


@dataclass
class EvalResult:
    method: str
    object_name: str
    trials: int
    add_values: list
    pcs_at: dict  # epsilon (meters) -> fraction

    def mean_add(self) -> float:
        return float(np.mean(self.add_values))


@dataclass
class TrialSetup:
    goal_pose: HemispherePose
    start_pose: HemispherePose
    start_angle: float


def sample_trial(rng: np.random.Generator, view: ViewConfig, angle_range) -> TrialSetup:
    """Goal on the hemisphere plus a start rotated a wide-baseline angle away.

    The start camera stays inside the training elevation band (rejection
    sampling) so every method sees in-distribution views.
    """
    lo, hi = angle_range
    goal = sample_hemisphere(rng, view.radius_range, view.elevation_range)
    goal_cam = goal.camera_pose()
    for _ in range(200):
        angle = float(rng.uniform(lo, hi))
        axis = random_rotation(rng).rotate([0.0, 0.0, 1.0])
        R_step = rotation_from_axis_angle(axis, angle)
        start_cam = RigidTransform(R_step @ goal_cam.R, R_step @ goal_cam.t)
        hp = camera_to_hemisphere(start_cam)
        e_lo, e_hi = view.elevation_range
        if e_lo <= hp.elevation <= e_hi:
            return TrialSetup(goal, hp, angle)
    raise RuntimeError("could not sample a start pose inside the elevation band")


def _trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng((seed, trial))


def run_ours_trial(model, scene, view, setup, servo_cfg, infer_cfg):
    size = (view.image_size, view.image_size)
    target_img, _ = render_centered(scene, setup.goal_pose, view.intrinsics, size, view.target_size_px)
    target_img = quantize8(target_img)
    start_cam = Camera(view.intrinsics, setup.start_pose.camera_pose())
    return servo_mod.closed_loop_servo(
        model,
        scene,
        start_cam,
        target_img,
        servo_cfg,
        infer_cfg,
        view.target_size_px,
        goal_pose=setup.goal_pose.camera_pose(),
    )


def run_rpr_trial(rpr, scene, view, setup, servo_cfg):
    """RPR drives the same centered loop; only the predictor differs."""
    from . import model as model_mod

    size = (view.image_size, view.image_size)
    target_img, _ = render_centered(scene, setup.goal_pose, view.intrinsics, size, view.target_size_px)
    target_img = quantize8(target_img)
    stub = bl.RPRStub(rpr)
    z_tar = model_mod.extract_batch(stub, model_mod.image_to_input(target_img)[None])[0]
    goal_pose = setup.goal_pose.camera_pose()
    goal_q = UnitQuaternion.from_matrix(goal_pose.R)

    cam_rot = np.asarray(setup.start_pose.camera_pose().R)
    depth = setup.start_pose.radius
    steps = []
    outcome = "not-converged"
    for it in range(servo_cfg.max_iters):
        img_cur, ct = servo_mod._centered_view(
            scene, view.intrinsics, cam_rot, depth, size, view.target_size_px
        )
        z_src = model_mod.extract_batch(stub, model_mod.image_to_input(img_cur)[None])[0]
        p = bl.rpr_predict_from_features(rpr, z_src, z_tar)
        angle_err = geodesic_angle(UnitQuaternion.from_matrix(cam_rot), goal_q)
        steps.append(
            servo_mod.ServoStep(
                it, RigidTransform(cam_rot, np.array([0.0, 0.0, depth])), 0.0, p.angle(), angle_err
            )
        )
        if angle_err < servo_cfg.angle_tol:
            outcome = "converged"
            break
        from .geom import apply_relative, depth_change

        moved = apply_relative(RigidTransform(cam_rot, np.array([0.0, 0.0, depth])), p, servo_cfg.beta)
        cam_rot = np.asarray(moved.R)
        depth += servo_cfg.beta * depth_change(ct.s, depth)
    final = RigidTransform(cam_rot, np.array([0.0, 0.0, depth]))
    return servo_mod.ServoResult(outcome, steps, final)


def run_ibvs_trial(scene, view, setup, ibvs_cfg):
    size = (view.image_size, view.image_size)
    start_cam = Camera(view.intrinsics, setup.start_pose.camera_pose())
    goal_cam = Camera(view.intrinsics, setup.goal_pose.camera_pose())
    cfg = bl.IBVSConfig(
        gain=ibvs_cfg.gain,
        z_star=setup.goal_pose.radius,  # true object-center depth at the goal
        dt=ibvs_cfg.dt,
        feature_tol=ibvs_cfg.feature_tol,
        max_steps=ibvs_cfg.max_steps,
    )
    return bl.ibvs_servo(scene, start_cam, goal_cam, cfg, image_size=size)


def run_benchmark(
    methods,
    scene: SceneObject,
    view: ViewConfig,
    models: dict,
    eps_fractions=DEFAULT_EPS_FRACTIONS,
    trials: int = 50,
    seed: int = 0,
    servo_cfg: ServoConfig | None = None,
    infer_cfg: InferenceConfig | None = None,
    ibvs_cfg: bl.IBVSConfig | None = None,
    angle_range=DEFAULT_START_ANGLE_RANGE,
    out_dir: str | None = None,
    object_name: str = "object",
):
    """Closed-loop trials per method with final-pose ADD against the goal.

    `models` must hold "ours" (Model) and/or "rpr" (RPRModel) for those
    methods.  Returns a list of EvalResult and writes a report plus one
    PCS-vs-epsilon curve per method when out_dir is given.
    """
    methods = list(methods)
    if trials < 1:
        raise ValueError("need at least one trial")
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; valid methods: {', '.join(METHODS)}")
    if "ours" in methods and models.get("ours") is None:
        raise ConfigurationError("method 'ours' requires a trained model checkpoint")
    if "rpr" in methods and models.get("rpr") is None:
        raise ConfigurationError("method 'rpr' requires a trained RPR checkpoint")
    servo_cfg = servo_cfg or ServoConfig()
    infer_cfg = infer_cfg or InferenceConfig()
    ibvs_cfg = ibvs_cfg or bl.IBVSConfig()
    eps_values = [f * scene.diameter for f in eps_fractions]

    setups = [sample_trial(_trial_rng(seed, t), view, angle_range) for t in range(trials)]
    results = []
    for method in methods:
        adds = []
        for setup in setups:
            goal_pose = setup.goal_pose.camera_pose()
            if method == "ours":
                res = run_ours_trial(models["ours"], scene, view, setup, servo_cfg, infer_cfg)
                final = res.final_camera
            elif method == "rpr":
                res = run_rpr_trial(models["rpr"], scene, view, setup, servo_cfg)
                final = res.final_camera
            else:
                res = run_ibvs_trial(scene, view, setup, ibvs_cfg)
                final = res.final_camera
            adds.append(add_metric(scene.vertices, goal_pose, final))
        results.append(
            EvalResult(
                method=method,
                object_name=object_name,
                trials=trials,
                add_values=adds,
                pcs_at={eps: pcs(adds, eps) for eps in eps_values},
            )
        )
    if out_dir is not None:
        write_report(results, eps_values, out_dir, scene.diameter)
    return results


def write_report(results, eps_values, out_dir, diameter: float, digest: str = "") -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "report.csv")
    with open(path, "w", newline="", encoding="utf-8") as f:
        if digest:
            f.write(f"# config_digest={digest}\n")
        writer = csv.writer(f)
        header = ["object", "method", "trials", "mean_add"] + [f"pcs@{e:.6g}" for e in eps_values]
        writer.writerow(header)
        for r in results:
            writer.writerow(
                [r.object_name, r.method, r.trials, f"{r.mean_add():.9g}"]
                + [f"{r.pcs_at[e]:.6f}" for e in eps_values]
            )
    for r in results:
        curve = os.path.join(out_dir, f"pcs_curve_{r.method}.csv")
        with open(curve, "w", newline="", encoding="utf-8") as f:
            if digest:
                f.write(f"# config_digest={digest}\n")
            writer = csv.writer(f)
            writer.writerow(["epsilon", "pcs"])
            for frac in np.linspace(0.01, 0.3, 30):
                eps = frac * diameter
                writer.writerow([f"{eps:.9g}", f"{pcs(r.add_values, eps):.6f}"])
    return path


@dataclass
class AblationRow:
    object_name: str
    mean_add_without: float
    mean_add_with: float

    def reduction_percent(self) -> float:
        if self.mean_add_without == 0:
            return 0.0
        return 100.0 * (self.mean_add_with - self.mean_add_without) / self.mean_add_without


def ablation_centering(
    model_with: Model,
    model_without: Model,
    scene: SceneObject,
    view_with: ViewConfig,
    view_without: ViewConfig,
    trials: int = 25,
    seed: int = 0,
    servo_cfg: ServoConfig | None = None,
    infer_cfg_with: InferenceConfig | None = None,
    infer_cfg_without: InferenceConfig | None = None,
    angle_range=DEFAULT_START_ANGLE_RANGE,
    object_name: str = "object",
) -> AblationRow:
    """Mean final ADD with the centering pipeline vs direct 6-DoF servoing."""
    servo_cfg = servo_cfg or ServoConfig()
    infer_cfg_with = infer_cfg_with or InferenceConfig()
    infer_cfg_without = infer_cfg_without or InferenceConfig(reduced=False)
    adds_with, adds_without = [], []
    for t in range(trials):
        setup = sample_trial(_trial_rng(seed, t), view_with, angle_range)
        goal_pose = setup.goal_pose.camera_pose()

        res = run_ours_trial(model_with, scene, view_with, setup, servo_cfg, infer_cfg_with)
        adds_with.append(add_metric(scene.vertices, goal_pose, res.final_camera))

        size = (view_without.image_size, view_without.image_size)
        target_img = quantize8(render(scene, Camera(view_without.intrinsics, goal_pose), size))
        start_cam = Camera(view_without.intrinsics, setup.start_pose.camera_pose())
        res_wo = servo_mod.servo_free_motion(
            model_without, scene, start_cam, target_img, servo_cfg, infer_cfg_without, goal_pose=goal_pose
        )
        adds_without.append(add_metric(scene.vertices, goal_pose, res_wo.final_camera))
    return AblationRow(object_name, float(np.mean(adds_without)), float(np.mean(adds_with)))


def write_ablation_csv(rows, path, digest: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        if digest:
            f.write(f"# config_digest={digest}\n")
        writer = csv.writer(f)
        writer.writerow(["object", "mean_add_without_centering", "mean_add_with_centering", "reduction_percent"])
        for r in rows:
            writer.writerow(
                [
                    r.object_name,
                    f"{r.mean_add_without:.9g}",
                    f"{r.mean_add_with:.9g}",
                    f"{r.reduction_percent():.2f}",
                ]
            )

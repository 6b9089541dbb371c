"""Acceptance suite: one test per criterion, each printing a PASS line with
the measured numbers (run with `pytest tests/test_acceptance.py -v -s`).

The seeded toy world is defined in conftest.RECIPE: one textured object,
8,000 training pairs, minutes-scale CPU training.
"""

import math
import time

import numpy as np
import pytest

from eqservo import autodiff as ad
from eqservo import baselines as bl
from eqservo import benchmark as bench
from eqservo import dataset as ds
from eqservo import geom
from eqservo import model as model_mod
from eqservo import servo as servo_mod
from eqservo.geom import CameraIntrinsics, RelTransform, UnitQuaternion
from eqservo.imaging import procedural_object, render_centered
from eqservo.metrics import add_metric, pcs

from conftest import RECIPE


def report(n, name, detail):
    print(f"\nACCEPTANCE {n} ({name}): PASS - {detail}")


# ---------------------------------------------------------------- criterion 1


def test_c1_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)

    # Every autodiff op kind in one randomized graph.
    def all_ops(t):
        x, w, img, filt = t["x"], t["w"], t["img"], t["filt"]
        m = ad.matmul(x, w)
        cat = ad.concat([ad.relu(m), ad.absolute(m)], axis=1)
        flat = ad.reshape(cat, (cat.shape[0] * cat.shape[1],))
        conv = ad.conv2d(img, filt, stride=2, padding=1)
        conv_term = ad.reduce_sum(ad.sqrt(ad.add(ad.mul(conv, conv), ad.Tensor(np.float64(0.1)))))
        recip = ad.reduce_sum(ad.reciprocal(ad.add(ad.mul(flat, flat), ad.Tensor(np.float64(1.0)))))
        mse_term = ad.mse(m, ad.Tensor(np.ones_like(m.data) * 0.25))
        return ad.add(ad.add(ad.scale(conv_term, 0.5), recip), ad.add(mse_term, ad.reduce_sum(ad.sub(flat, ad.Tensor(np.float64(0.1))))))

    params = {
        "x": rng.normal(size=(3, 4)) + 0.3,
        "w": rng.normal(size=(4, 2)) + 0.2,
        "img": rng.normal(size=(2, 3, 6, 6)),
        "filt": rng.normal(size=(2, 3, 3, 3)) * 0.5,
    }
    err_ops = ad.finite_diff_check(all_ops, params, eps=1e-6)
    assert err_ops < 1e-4

    # Full total_loss graph over every model parameter at a micro scale.
    cfg = model_mod.EncoderConfig(
        image_size=8,
        conv_channels=(3, 4, 5),
        head_widths=(12, 10),
        feature_dim=8,
        transformer_widths=(10,),
    )
    model = model_mod.init_model(cfg, 5)
    model.params["h.fc2_w"] = rng.normal(size=model.params["h.fc2_w"].shape).astype(np.float32) * 0.2
    src = rng.uniform(0, 1, size=(2, 3, 8, 8))
    tar = rng.uniform(0, 1, size=(2, 3, 8, 8))
    pose = np.stack(
        [
            model_mod.pose_to_vec(RelTransform(UnitQuaternion.from_axis_angle([0, 1, 0], a)))
            for a in (0.4, 1.1)
        ]
    )
    batch = model_mod.TrainBatch(src, tar, pose, np.array([0.4, 1.1]))

    def full_loss(t):
        total, _, _ = model_mod._loss_graph(
            t, batch, model_mod.LossWeights(lam=0.3, c=1.0), cfg
        )
        return total

    params64 = {k: v.astype(np.float64) for k, v in model.params.items()}
    err_loss = ad.finite_diff_check(full_loss, params64, eps=1e-6)
    assert err_loss < 1e-4

    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0
    report(1, "gradient correctness", f"op-graph err {err_ops:.2e}, total-loss err {err_loss:.2e}, {elapsed:.0f}s")


# ---------------------------------------------------------------- criterion 2


def test_c2_centering_geometry():
    scene = procedural_object(RECIPE["object_kind"], RECIPE["object_seed"])
    view = ds.ViewConfig.default(32, scene.diameter)
    K = view.intrinsics
    rng = np.random.default_rng(22)
    worst = 0.0
    for _ in range(100):
        pose = geom.sample_hemisphere(rng, view.radius_range, view.elevation_range)
        _, ct = render_centered(scene, pose, K, (32, 32), view.target_size_px)
        cam = pose.camera_pose()
        uv = K.project(cam.apply(scene.centroid()))
        mapped = ct.H @ np.array([uv[0], uv[1], 1.0])
        mapped = mapped[:2] / mapped[2]
        worst = max(worst, float(np.abs(mapped - [K.cx, K.cy]).max()))
    assert worst <= 0.5

    ident_err = 0.0
    for f in (25.0, 77.0, 240.0):
        Kx = CameraIntrinsics(f, f * 1.1, 31.5, 30.0)
        ct = geom.centering_homography(Kx, np.eye(3), 1.0)
        ident_err = max(ident_err, float(np.abs(ct.H - np.eye(3)).max()))
    assert ident_err < 1e-9
    report(2, "centering geometry", f"worst centroid error {worst:.2e} px, identity error {ident_err:.1e}")


# ---------------------------------------------------------------- criterion 3


def test_c3_metric_oracles():
    rng = np.random.default_rng(33)
    worst_add = 0.0
    for _ in range(1000):
        pts = rng.normal(size=(rng.integers(1, 12), 3))
        gt = geom.RigidTransform(geom.random_rotation(rng).to_matrix(), rng.normal(size=3))
        est = geom.RigidTransform(geom.random_rotation(rng).to_matrix(), rng.normal(size=3))
        brute = np.mean(
            [np.sqrt((((gt.R @ x + gt.t) - (est.R @ x + est.t)) ** 2).sum()) for x in pts]
        )
        worst_add = max(worst_add, abs(add_metric(pts, gt, est) - brute))
    assert worst_add < 1e-12

    # Pure translation: ADD equals ||t|| exactly.
    for _ in range(50):
        pts = rng.normal(size=(5, 3))
        gt = geom.RigidTransform(geom.random_rotation(rng).to_matrix(), rng.normal(size=3))
        t = rng.normal(size=3)
        est = geom.RigidTransform(gt.R, gt.t + t)
        assert add_metric(pts, gt, est) == pytest.approx(float(np.linalg.norm(t)), abs=1e-12)

    worst_pcs = 0.0
    for _ in range(1000):
        vals = rng.uniform(0, 0.2, size=rng.integers(1, 40))
        eps = float(rng.uniform(0.01, 0.15))
        brute = sum(1 for v in vals if v < eps) / len(vals)
        worst_pcs = max(worst_pcs, abs(pcs(vals, eps) - brute))
    assert worst_pcs < 1e-12
    report(3, "metric oracles", f"ADD worst dev {worst_add:.1e}, PCS worst dev {worst_pcs:.1e}")


# ---------------------------------------------------------------- criterion 4


def test_c4_representation_quality(accept_dataset, toy_model):
    data_dir, manifest = accept_dataset
    model, info = toy_model
    ratio = info["final_loss"] / info["initial_loss"]
    assert info["train_seconds"] < 900.0, "training exceeded the 15 minute budget"
    assert ratio <= 0.1

    held = ds.load_training_arrays(data_dir, "test", manifest)
    feats = model_mod.extract_batch(model, held.images)
    d = np.linalg.norm(
        feats[held.pair_indices[:, 1]] - feats[held.pair_indices[:, 0]], axis=1
    )
    pearson = float(np.corrcoef(d, held.norms)[0, 1])
    assert pearson >= 0.8
    # Feature map must be non-constant (no trivial-solution collapse).
    assert float(feats.var(axis=0).sum()) > 0.0
    report(
        4,
        "representation quality",
        f"loss ratio {ratio:.3f} (train {info['train_seconds']:.0f}s), held-out Pearson {pearson:.3f}",
    )


# ---------------------------------------------------------------- criterion 5


def test_c5_inference(accept_dataset, toy_model):
    data_dir, manifest = accept_dataset
    model, _ = toy_model
    held = ds.load_training_arrays(data_dir, "test", manifest)
    eligible = [k for k in range(len(held)) if held.norms[k] <= math.pi / 2]
    assert len(eligible) >= 100
    cfg = servo_mod.InferenceConfig()
    feats = model_mod.extract_batch(model, held.images)
    hits, monotone, errs = 0, 0, []
    for k in eligible[:100]:
        i, j = held.pair_indices[k]
        res = servo_mod.infer_from_features(model, feats[i], feats[j], cfg)
        true_q = UnitQuaternion(*held.pose_vecs[k][3:])
        err = math.degrees(geom.geodesic_angle(res.transform.q, true_q))
        errs.append(err)
        hits += err < 10.0
        monotone += bool(np.all(np.diff(res.trace) <= 0))
    assert monotone == 100, "every accepted-step trace must be non-increasing"
    assert hits >= 80
    report(
        5,
        "gradient-descent inference",
        f"{hits}/100 within 10 deg (median {np.median(errs):.1f} deg), monotone {monotone}/100",
    )


# ---------------------------------------------------------------- criterion 6


@pytest.fixture(scope="session")
def servo_trials(accept_dataset, toy_model):
    _, manifest = accept_dataset
    model, _ = toy_model
    scene = manifest.scene()
    view = manifest.view
    servo_cfg = servo_mod.ServoConfig(max_iters=50, angle_tol=math.radians(10.0))
    infer_cfg = servo_mod.InferenceConfig()
    results = []
    for t in range(50):
        setup = bench.sample_trial(bench._trial_rng(1000, t), view, bench.DEFAULT_START_ANGLE_RANGE)
        res = bench.run_ours_trial(model, scene, view, setup, servo_cfg, infer_cfg)
        results.append((setup, res))
    return results


def test_c6_closed_loop_servoing(servo_trials):
    final_angles = []
    per_iter_angles = []
    for setup, res in servo_trials:
        final_angles.append(math.degrees(res.final_angle_to_goal()))
        per_iter_angles.append([s.angle_to_goal for s in res.steps])
    success = sum(1 for a in final_angles if a < 10.0)
    assert success >= 40  # 80% of 50

    # Median angle-to-goal strictly decreases over the first five iterations.
    medians = []
    for it in range(5):
        vals = [seq[it] for seq in per_iter_angles if len(seq) > it]
        medians.append(float(np.median(vals)))
    assert all(medians[i + 1] < medians[i] for i in range(4))
    report(
        6,
        "closed-loop servoing",
        f"{success}/50 reached <10 deg within 50 iters; median start {np.median([a[0] for a in per_iter_angles]):.2f} rad",
    )


# ---------------------------------------------------------------- criterion 7


def test_c7_baseline_ordering(accept_dataset, toy_model, rpr_model, tmp_path):
    _, manifest = accept_dataset
    model, _ = toy_model
    scene = manifest.scene()
    view = manifest.view
    results = bench.run_benchmark(
        ["ours", "ibvs", "rpr"],
        scene,
        view,
        {"ours": model, "rpr": rpr_model},
        trials=50,
        seed=2000,
        servo_cfg=servo_mod.ServoConfig(max_iters=50),
        infer_cfg=servo_mod.InferenceConfig(),
        out_dir=str(tmp_path / "bench"),
        object_name=manifest.object_kind,
    )
    by_method = {r.method: r for r in results}
    mid_eps = 0.05 * scene.diameter
    ours, ibvs, rpr = (by_method[m].pcs_at[mid_eps] for m in ("ours", "ibvs", "rpr"))
    assert ours > ibvs
    assert ours > rpr

    # IBVS converges from narrow baselines but fails at least half of the wide ones.
    narrow_ok = 0
    for t in range(10):
        rng = bench._trial_rng(3000, t)
        setup = bench.sample_trial(rng, view, (math.radians(5.0), math.radians(10.0)))
        res = bench.run_ibvs_trial(scene, view, setup, bl.IBVSConfig(max_steps=200))
        ang = geom.geodesic_angle(
            UnitQuaternion.from_matrix(res.final_camera.R),
            UnitQuaternion.from_matrix(setup.goal_pose.camera_pose().R),
        )
        narrow_ok += math.degrees(ang) < 1.0
    wide_fail = 0
    for t in range(20):
        rng = bench._trial_rng(4000, t)
        setup = bench.sample_trial(rng, view, (math.radians(90.0), math.radians(150.0)))
        res = bench.run_ibvs_trial(scene, view, setup, bl.IBVSConfig(max_steps=200))
        ang = geom.geodesic_angle(
            UnitQuaternion.from_matrix(res.final_camera.R),
            UnitQuaternion.from_matrix(setup.goal_pose.camera_pose().R),
        )
        wide_fail += (res.outcome != "converged") or (math.degrees(ang) >= 10.0)
    assert narrow_ok >= 8
    assert wide_fail >= 10
    report(
        7,
        "baseline ordering",
        f"PCS@mid: ours {ours:.2f} > ibvs {ibvs:.2f}, rpr {rpr:.2f}; "
        f"IBVS narrow ok {narrow_ok}/10, wide fail {wide_fail}/20",
    )


# ---------------------------------------------------------------- criterion 8


def test_c8_ablation_direction(accept_dataset, accept_plain_dataset, toy_model, nocenter_model):
    _, manifest = accept_dataset
    _, manifest_plain = accept_plain_dataset
    model, _ = toy_model
    row = bench.ablation_centering(
        model,
        nocenter_model,
        manifest.scene(),
        manifest.view,
        manifest_plain.view,
        trials=20,
        seed=5000,
        servo_cfg=servo_mod.ServoConfig(max_iters=30),
        object_name=manifest.object_kind,
    )
    assert row.mean_add_with <= 0.75 * row.mean_add_without
    report(
        8,
        "ablation direction",
        f"mean ADD with centering {row.mean_add_with:.4f} m vs without {row.mean_add_without:.4f} m "
        f"({row.reduction_percent():.0f}%)",
    )


# ---------------------------------------------------------------- criterion 9


def test_c9_determinism(tmp_path):
    import hashlib
    import subprocess
    import sys

    def run(*args):
        proc = subprocess.run(
            [sys.executable, "-m", "eqservo.cli", *args], capture_output=True, text=True
        )
        assert proc.returncode == 0, proc.stderr
        return proc

    def sha(path):
        return hashlib.sha256(open(path, "rb").read()).hexdigest()

    pairs = []
    for tag in ("one", "two"):
        data = str(tmp_path / f"data-{tag}")
        run(
            "gen-data", "--object", "cylinder", "--views", "8", "--pairs", "16",
            "--image-size", "16", "--seed", "11", "--out", data, "--threads", "1",
        )
        train = str(tmp_path / f"train-{tag}")
        run(
            "train", "--data", data, "--schedule", "2e-3:2", "--feature-dim", "16",
            "--conv-channels", "4,6,8", "--head-widths", "32,24",
            "--transformer-widths", "24,24", "--geodesic-extras", "0",
            "--seed", "3", "--out", train, "--threads", "1",
        )
        cmap = str(tmp_path / f"cmap-{tag}")
        run(
            "costmap", "--data", data, "--ckpt", f"{train}/model.ckpt", "--grid", "4",
            "--seed", "5", "--out", cmap, "--threads", "1",
        )
        pairs.append(
            {
                "manifest": sha(f"{data}/manifest.json"),
                "image": sha(f"{data}/images/000000.png"),
                "ckpt": sha(f"{train}/model.ckpt"),
                "stats": sha(f"{train}/stats.csv"),
                "costmap": sha(f"{cmap}/costmap.csv"),
            }
        )
    assert pairs[0] == pairs[1]
    report(9, "determinism", "gen-data, train and costmap reruns byte-identical")

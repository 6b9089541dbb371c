"""Scratch experiment: factor sweep for the representation training recipe."""
import sys
import time

import numpy as np

from eqservo import autodiff as ad
from eqservo import geom, imaging
from eqservo import model as M
from eqservo.autodiff import Tensor


def build_views(seed, n_views, size, target_frac, radius=None, fxs=1.1, kind="textured-cube"):
    scene = imaging.procedural_object(kind, 5)
    K = geom.CameraIntrinsics(fxs * size, fxs * size, (size - 1) / 2, (size - 1) / 2)
    if radius is None:
        r_ref = K.fx * scene.diameter / (target_frac * size)
        radius = (0.85 * r_ref, 1.25 * r_ref)
    rng = np.random.default_rng(seed)
    views, frames = [], []
    for _ in range(n_views):
        hp = geom.sample_hemisphere(rng, radius_range=radius)
        img, ct = imaging.render_centered(scene, hp, K, (size, size), target_frac * size)
        views.append(M.image_to_input(imaging.quantize8(img)))
        cam = hp.camera_pose()
        frames.append(geom.RigidTransform(ct.R @ cam.R, ct.R @ cam.t))
    return np.stack(views), frames


def build_pairs(frames, n_pairs, seed):
    rng = np.random.default_rng(seed)
    n = len(frames)
    pairs, poses, norms = [], [], []
    while len(pairs) < n_pairs:
        i, j = rng.integers(0, n, size=2)
        if i == j:
            continue
        p = geom.relative_pose(frames[i], frames[j], reduced=True)
        pairs.append((i, j))
        poses.append(M.pose_to_vec(p))
        norms.append(p.angle())
    return np.array(pairs), np.stack(poses), np.array(norms)


def run(
    n_views=800,
    n_pairs=8000,
    size=32,
    n=32,
    th=(192, 192),
    gain=None,
    lam=1.0,
    c=1.0,
    lr=2e-3,
    schedule=((2e-3, 40), (7e-4, 30)),
    ppe=4000,
    target_frac=0.55,
    seed=0,
    geodesic_extras=0,
    augment=False,
    aug_from_phase=0,
    kind="textured-cube",
):
    t0 = time.perf_counter()
    views, frames = build_views(42, n_views, size, target_frac, kind=kind)
    tr = build_pairs(frames, n_pairs, 1)
    ho = build_pairs(frames, 1000, 2)
    K = np.array([1.1 * size, 1.1 * size, (size - 1) / 2, (size - 1) / 2])
    data = M.TrainingData(views, *tr, intrinsics=K)
    cfg = M.EncoderConfig(
        image_size=size,
        conv_channels=(12, 24, 48),
        head_widths=(192, 96),
        feature_dim=n,
        transformer_widths=tuple(th),
    )
    model = M.init_model(cfg, seed)
    # Calibrate initial feature spread to the geodesic scale.
    zs = M.extract_batch(model, views[:100])
    d = np.linalg.norm(zs[None] - zs[:, None], axis=2)
    spread = float(d[np.triu_indices(100, 1)].mean())
    target_spread = c * tr[2].mean()
    g = gain if gain is not None else target_spread / spread
    model.params["f.fc3_w"] = model.params["f.fc3_w"] * g
    model.params["f.fc3_b"] = model.params["f.fc3_b"] * g
    print(f"init spread {spread:.2f} -> gain {g:.2f}")
    w = M.LossWeights(lam=lam, c=c)

    def diag(tag):
        zs = M.extract_batch(model, views)
        for name, (pp, po, nn) in (("train", tr), ("hold", ho)):
            featd = np.linalg.norm(zs[pp[:, 1]] - zs[pp[:, 0]], axis=1)
            t = M._tensors(model.params, False)
            pred = M._transformer_forward(
                t, Tensor(zs[pp[:, 0]].astype(np.float32)), Tensor(po.astype(np.float32))
            ).data
            equiRMS = np.sqrt(((zs[pp[:, 1]] - pred) ** 2).sum(axis=1).mean())
            print(
                f"  {tag} {name}: corr={np.corrcoef(featd, nn)[0, 1]:.3f} "
                f"equiRMS={equiRMS:.3f} meand={featd.mean():.2f} ({time.perf_counter()-t0:.0f}s)"
            )

    ep_done = 0
    for phase, (lr_i, n_ep) in enumerate(schedule):
        on = phase >= aug_from_phase
        M.train(
            model,
            data,
            epochs=n_ep,
            weights=w,
            optimizer_config=ad.AdamConfig(lr=lr_i),
            seed=ep_done,
            batch_size=32,
            pairs_per_epoch=ppe,
            geodesic_extras=geodesic_extras if on else 0,
            augment=augment and on,
        )
        ep_done += n_ep
        diag(f"ep{ep_done}")
    return model


if __name__ == "__main__":
    import ast

    kwargs = {}
    for arg in sys.argv[1:]:
        k, v = arg.split("=", 1)
        kwargs[k] = ast.literal_eval(v)
    print(kwargs)
    run(**kwargs)

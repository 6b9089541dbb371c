"""Scratch experiment: evaluate a saved checkpoint on correlation, inference
accuracy, landscape sanity and a few servo trials."""
import json
import math
import sys
import time

import numpy as np

import exp_train as E
from eqservo import autodiff as ad
from eqservo import benchmark as bench
from eqservo import geom
from eqservo import model as M
from eqservo import servo as S
from eqservo.dataset import ViewConfig
from eqservo.geom import CameraIntrinsics


def main(name, n_servo=12, kind="textured-cube"):
    params, _ = ad.load_checkpoint(f"/tmp/model_{name}.ckpt")
    cfg = M.EncoderConfig.from_dict(json.loads(open(f"/tmp/model_{name}_cfg.json").read()))
    model = M.Model(cfg, params)
    size = cfg.image_size

    views, frames = E.build_views(4242, 120, size, 0.55, kind=kind)
    rng = np.random.default_rng(9)
    feats = M.extract_batch(model, views)

    # held-out corr over fresh views
    pairs = []
    while len(pairs) < 400:
        i, j = rng.integers(0, len(views), size=2)
        if i == j:
            continue
        p = geom.relative_pose(frames[i], frames[j], reduced=True)
        pairs.append((i, j, p))
    d = [np.linalg.norm(feats[i] - feats[j]) for i, j, _ in pairs]
    a = [p.angle() for _, _, p in pairs]
    print(f"[{name}] fresh-view corr: {np.corrcoef(d, a)[0,1]:.3f}")

    # inference on <=90 deg pairs
    icfg = S.InferenceConfig()
    sub = [t for t in pairs if t[2].angle() <= math.pi / 2][:100]
    errs = []
    t0 = time.perf_counter()
    for i, j, p_true in sub:
        res = S.infer_from_features(model, feats[i], feats[j], icfg)
        errs.append(math.degrees(geom.geodesic_angle(res.transform.q, p_true.q)))
    errs = np.array(errs)
    print(
        f"[{name}] inference: median {np.median(errs):.1f} deg, <10deg {(errs<10).mean()*100:.0f}%"
        f" ({(time.perf_counter()-t0)/len(sub)*1000:.0f} ms each)"
    )

    # servo trials
    K = CameraIntrinsics(1.1 * size, 1.1 * size, (size - 1) / 2, (size - 1) / 2)
    view = ViewConfig(
        intrinsics=K,
        image_size=size,
        target_size_px=0.55 * size,
        radius_range=(0.42, 0.52),
    )
    from eqservo.imaging import procedural_object

    scene = procedural_object(kind, 5)
    servo_cfg = S.ServoConfig(max_iters=50)
    ok = 0
    finals = []
    t0 = time.perf_counter()
    for t in range(n_servo):
        setup = bench.sample_trial(bench._trial_rng(1000, t), view, bench.DEFAULT_START_ANGLE_RANGE)
        res = bench.run_ours_trial(model, scene, view, setup, servo_cfg, icfg)
        deg = math.degrees(res.final_angle_to_goal())
        finals.append(deg)
        ok += deg < 10.0
    print(
        f"[{name}] servo: {ok}/{n_servo} <10deg; finals {np.round(finals,1)}"
        f" ({(time.perf_counter()-t0)/n_servo:.1f} s/trial)"
    )


if __name__ == "__main__":
    main(sys.argv[1], int(sys.argv[2]) if len(sys.argv) > 2 else 12, sys.argv[3] if len(sys.argv) > 3 else "textured-cube")

"""Command-line surface: dataset generation, training, servoing, evaluation,
the centering ablation, and cost maps.

Every subcommand resolves its flags into one config dict, stamps the config
digest into each artifact it writes, and stores a copy as config.json in the
output directory.  Downstream subcommands refuse checkpoints whose recorded
dataset digest does not match the dataset they are given.  --threads 1 (the
default) pins the BLAS pools before numpy loads, which makes reruns
bit-identical.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time


def _pin_threads_from_argv() -> None:
    n = "1"
    argv = sys.argv
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, n)


_pin_threads_from_argv()

import numpy as np  # noqa: E402  (after thread pinning)

from . import autodiff as ad  # noqa: E402
from . import baselines as bl  # noqa: E402
from . import benchmark as bench  # noqa: E402
from . import dataset as ds  # noqa: E402
from . import model as model_mod  # noqa: E402
from . import servo as servo_mod  # noqa: E402
from .imaging import OBJECT_KINDS  # noqa: E402


class CommandError(RuntimeError):
    """Runtime/configuration failure: exit code 1, message on stderr."""


def resolve_out(args, name: str) -> str:
    if getattr(args, "out", None):
        out = args.out
    else:
        root = os.environ.get("EQSERVO_OUT_ROOT", "runs")
        out = os.path.join(root, f"{name}-{time.strftime('%Y%m%d-%H%M%S')}")
    os.makedirs(out, exist_ok=True)
    return out


def write_config(out_dir: str, config: dict) -> str:
    digest = ds.config_digest(config)
    doc = dict(config)
    doc["config_digest"] = digest
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    return digest


def _parse_int_tuple(text: str):
    return tuple(int(x) for x in text.split(",") if x)


def _encoder_config(manifest, args) -> model_mod.EncoderConfig:
    return model_mod.EncoderConfig(
        image_size=manifest.view.image_size,
        conv_channels=_parse_int_tuple(args.conv_channels),
        head_widths=_parse_int_tuple(args.head_widths),
        feature_dim=args.feature_dim,
        transformer_widths=_parse_int_tuple(args.transformer_widths),
    )


def _parse_schedule(args):
    """[(lr, epochs), ...] from --schedule 'lr:epochs,...' or --lr/--epochs."""
    if args.schedule:
        phases = []
        for part in args.schedule.split(","):
            lr, ep = part.split(":")
            phases.append((float(lr), int(ep)))
        return phases
    return [(args.lr, args.epochs)]


def _load_model_checkpoint(path: str, expect_variant: str, manifest) -> tuple:
    if not os.path.exists(path):
        raise CommandError(f"missing checkpoint {path}")
    params, meta = ad.load_checkpoint(path)
    if meta.get("variant", "equivariant") != expect_variant:
        raise CommandError(
            f"{path}: checkpoint variant {meta.get('variant')!r}, expected {expect_variant!r}"
        )
    if manifest is not None and meta.get("data_digest") not in ("", None):
        if meta["data_digest"] != manifest.config_digest_value:
            raise CommandError(
                f"{path}: checkpoint was trained on dataset {meta['data_digest']}, "
                f"but this dataset has digest {manifest.config_digest_value}"
            )
    cfg = model_mod.EncoderConfig.from_dict(json.loads(meta["encoder"]))
    return params, meta, cfg


# ------------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    config = {
        "command": "gen-data",
        "object": args.object,
        "object_seed": args.object_seed,
        "views": args.views,
        "pairs": args.pairs,
        "max_angle_deg": args.max_angle,
        "seed": args.seed,
        "image_size": args.image_size,
        "image_format": args.image_format,
        "centered": not args.no_centering,
        "target_frac": args.target_frac,
    }
    out = args.out
    os.makedirs(out, exist_ok=True)
    digest = write_config(out, config)
    manifest = ds.generate_dataset(
        args.object,
        args.object_seed,
        views=args.views,
        pairs=args.pairs,
        max_angle=math.radians(args.max_angle),
        seed=args.seed,
        out_dir=out,
        image_size=args.image_size,
        image_format=args.image_format,
        centered=not args.no_centering,
        target_frac=args.target_frac,
        digest=digest,
    )
    splits = {s: sum(1 for p in manifest.pairs if p.split == s) for s in ds.SPLITS}
    print(f"wrote {len(manifest.samples)} samples, {len(manifest.pairs)} pairs to {out}")
    print(f"splits: train={splits['train']} val={splits['val']} test={splits['test']}")
    return 0


# ---------------------------------------------------------------------- train


def cmd_train(args) -> int:
    manifest = ds.read_manifest(args.data)
    schedule = _parse_schedule(args)
    config = {
        "command": "train",
        "data_digest": manifest.config_digest_value,
        "variant": args.variant,
        "schedule": [[lr, ep] for lr, ep in schedule],
        "lambda": args.lam,
        "c": args.c,
        "seed": args.seed,
        "batch_size": args.batch_size,
        "pairs_per_epoch": args.pairs_per_epoch,
        "geodesic_extras": args.geodesic_extras,
        "feature_dim": args.feature_dim,
        "conv_channels": args.conv_channels,
        "head_widths": args.head_widths,
        "transformer_widths": args.transformer_widths,
    }
    out = resolve_out(args, "train")
    digest = write_config(out, config)
    data = ds.load_training_arrays(args.data, "train", manifest)
    enc = _encoder_config(manifest, args)
    weights = model_mod.LossWeights(lam=args.lam, c=args.c)

    stats_path = os.path.join(out, "stats.csv")
    ckpt_path = os.path.join(out, "model.ckpt")
    meta = {
        "config_digest": digest,
        "data_digest": manifest.config_digest_value,
        "encoder": json.dumps(enc.to_dict(), sort_keys=True),
        "variant": args.variant,
    }

    if args.variant == "rpr":
        rpr = bl.init_rpr(enc, args.seed)
        history = []
        for lr, epochs in schedule:
            history += bl.rpr_train(
                rpr,
                data,
                epochs,
                optimizer_config=ad.AdamConfig(lr=lr),
                seed=args.seed + len(history),
                batch_size=args.batch_size,
                pairs_per_epoch=args.pairs_per_epoch,
            )
        with open(stats_path, "w", encoding="utf-8") as f:
            f.write(f"# config_digest={digest}\n")
            f.write("epoch,loss\n")
            for i, loss in enumerate(history):
                f.write(f"{i},{loss:.9g}\n")
        ad.save_checkpoint(ckpt_path, rpr.params, meta)
        final = history[-1] if history else float("nan")
        print(f"final loss {final:.6g}; checkpoint {ckpt_path}")
        return 0

    model = model_mod.init_model(enc, args.seed)
    model_mod.calibrate_feature_scale(model, data.images, args.c * float(data.norms.mean()))
    all_stats = []
    for lr, epochs in schedule:
        all_stats += model_mod.train(
            model,
            data,
            epochs,
            weights,
            optimizer_config=ad.AdamConfig(lr=lr),
            seed=args.seed + len(all_stats),
            batch_size=args.batch_size,
            pairs_per_epoch=args.pairs_per_epoch,
            geodesic_extras=args.geodesic_extras,
        )
    with open(stats_path, "w", encoding="utf-8") as f:
        f.write(f"# config_digest={digest}\n")
        f.write("epoch,loss_equi,loss_geo,loss_total\n")
        for i, s in enumerate(all_stats):
            f.write(f"{i},{s.loss_equi:.9g},{s.loss_geo:.9g},{s.loss_total:.9g}\n")
    ad.save_checkpoint(ckpt_path, model.params, meta)
    final = all_stats[-1].loss_total if all_stats else float("nan")
    print(f"final loss {final:.6g}; checkpoint {ckpt_path}")
    return 0


# ---------------------------------------------------------------------- servo


def cmd_servo(args) -> int:
    manifest = ds.read_manifest(args.data)
    params, meta, enc = _load_model_checkpoint(args.ckpt, "equivariant", manifest)
    config = {
        "command": "servo",
        "data_digest": manifest.config_digest_value,
        "ckpt_digest": meta.get("config_digest", ""),
        "start_angle_deg": args.start_angle,
        "seed": args.seed,
        "beta": args.beta,
        "max_iters": args.max_iters,
        "angle_tol_deg": args.angle_tol,
        "restarts": args.restarts,
    }
    out = resolve_out(args, "servo")
    digest = write_config(out, config)

    model = model_mod.Model(enc, params)
    scene = manifest.scene()
    view = manifest.view
    rng = np.random.default_rng(args.seed)
    ang = math.radians(args.start_angle)
    setup = bench.sample_trial(rng, view, (ang, ang))
    servo_cfg = servo_mod.ServoConfig(
        max_iters=args.max_iters, angle_tol=math.radians(args.angle_tol), beta=args.beta
    )
    infer_cfg = servo_mod.InferenceConfig(restarts=args.restarts)
    result = bench.run_ours_trial(model, scene, view, setup, servo_cfg, infer_cfg)
    servo_mod.write_trajectory_csv(result.steps, os.path.join(out, "trajectory.csv"), digest)
    final_deg = math.degrees(result.final_angle_to_goal())
    print(f"{result.outcome}; final angle error {final_deg:.2f} deg; trajectory in {out}")
    return 0


# ----------------------------------------------------------------------- eval


def cmd_eval(args, parser) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in bench.METHODS:
            parser.error(f"unknown method {m!r}; valid methods: {', '.join(bench.METHODS)}")
    manifest = ds.read_manifest(args.data)
    models = {}
    if "ours" in methods:
        if not args.ckpt:
            raise CommandError("method 'ours' needs --ckpt")
        params, _, enc = _load_model_checkpoint(args.ckpt, "equivariant", manifest)
        models["ours"] = model_mod.Model(enc, params)
    if "rpr" in methods:
        if not args.ckpt_rpr:
            raise CommandError("method 'rpr' needs --ckpt-rpr")
        params, _, enc = _load_model_checkpoint(args.ckpt_rpr, "rpr", manifest)
        models["rpr"] = bl.RPRModel(enc, params)
    config = {
        "command": "eval",
        "data_digest": manifest.config_digest_value,
        "methods": methods,
        "trials": args.trials,
        "seed": args.seed,
        "eps_fractions": [float(x) for x in args.eps.split(",")],
        "start_lo_deg": args.start_lo,
        "start_hi_deg": args.start_hi,
        "max_iters": args.max_iters,
        "restarts": args.restarts,
    }
    out = resolve_out(args, "eval")
    digest = write_config(out, config)
    results = bench.run_benchmark(
        methods,
        manifest.scene(),
        manifest.view,
        models,
        eps_fractions=config["eps_fractions"],
        trials=args.trials,
        seed=args.seed,
        servo_cfg=servo_mod.ServoConfig(max_iters=args.max_iters),
        infer_cfg=servo_mod.InferenceConfig(restarts=args.restarts),
        angle_range=(math.radians(args.start_lo), math.radians(args.start_hi)),
        object_name=manifest.object_kind,
    )
    eps_values = [f * manifest.diameter for f in config["eps_fractions"]]
    bench.write_report(results, eps_values, out, manifest.diameter, digest)
    for r in results:
        mid = eps_values[len(eps_values) // 2 - 1] if len(eps_values) > 1 else eps_values[0]
        print(
            f"{r.method}: mean ADD {r.mean_add():.5f} m, "
            f"PCS@{mid:.4g} = {r.pcs_at[mid]:.2f} over {r.trials} trials"
        )
    print(f"report in {out}")
    return 0


# --------------------------------------------------------------------- ablate


def cmd_ablate(args) -> int:
    man_c = ds.read_manifest(args.data_centered)
    man_p = ds.read_manifest(args.data_plain)
    if man_p.centered:
        raise CommandError(f"{args.data_plain} is a centered dataset; need --no-centering data")
    params_c, _, enc_c = _load_model_checkpoint(args.ckpt_centered, "equivariant", man_c)
    params_p, _, enc_p = _load_model_checkpoint(args.ckpt_plain, "equivariant", man_p)
    config = {
        "command": "ablate",
        "data_centered": man_c.config_digest_value,
        "data_plain": man_p.config_digest_value,
        "trials": args.trials,
        "seed": args.seed,
        "max_iters": args.max_iters,
    }
    out = resolve_out(args, "ablate")
    digest = write_config(out, config)
    row = bench.ablation_centering(
        model_mod.Model(enc_c, params_c),
        model_mod.Model(enc_p, params_p),
        man_c.scene(),
        man_c.view,
        man_p.view,
        trials=args.trials,
        seed=args.seed,
        servo_cfg=servo_mod.ServoConfig(max_iters=args.max_iters),
        object_name=man_c.object_kind,
    )
    bench.write_ablation_csv([row], os.path.join(out, "ablation.csv"), digest)
    print(
        f"mean ADD with centering {row.mean_add_with:.5f} m, "
        f"without {row.mean_add_without:.5f} m ({row.reduction_percent():.1f}%)"
    )
    return 0


# -------------------------------------------------------------------- costmap


def cmd_costmap(args) -> int:
    manifest = ds.read_manifest(args.data)
    params, meta, enc = _load_model_checkpoint(args.ckpt, "equivariant", manifest)
    config = {
        "command": "costmap",
        "data_digest": manifest.config_digest_value,
        "grid": args.grid,
        "seed": args.seed,
    }
    out = resolve_out(args, "costmap")
    digest = write_config(out, config)
    model = model_mod.Model(enc, params)
    scene = manifest.scene()
    view = manifest.view
    rng = np.random.default_rng(args.seed)
    from .geom import sample_hemisphere

    src = sample_hemisphere(rng, view.radius_range, view.elevation_range)
    cmap = servo_mod.cost_map(
        model, src, scene, args.grid, view.intrinsics, view.target_size_px, view.elevation_range
    )
    servo_mod.write_cost_map_csv(cmap, os.path.join(out, "costmap.csv"), digest)
    if args.png:
        servo_mod.cost_map_png(cmap, os.path.join(out, "costmap.png"))
    print(f"{args.grid}x{args.grid} cost map in {out}")
    return 0


# ----------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eqservo",
        description="Equivariant-feature visual servoing in a simulated camera world",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1, help="1 guarantees bit-determinism")

    g = sub.add_parser("gen-data", help="generate a view/pair dataset")
    g.add_argument("--object", choices=OBJECT_KINDS, default="textured-cube")
    g.add_argument("--object-seed", type=int, default=5)
    g.add_argument("--views", type=int, default=800)
    g.add_argument("--pairs", type=int, default=8000)
    g.add_argument("--max-angle", type=float, default=180.0, help="degrees")
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--image-format", choices=("png", "f32"), default="png")
    g.add_argument("--no-centering", action="store_true")
    g.add_argument("--target-frac", type=float, default=0.55)
    g.add_argument("--out", required=True)
    common(g)

    t = sub.add_parser("train", help="train the representation (or the RPR baseline)")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=60)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--schedule", default="", help="lr:epochs[,lr:epochs...] overrides --lr/--epochs")
    t.add_argument("--lambda", dest="lam", type=float, default=1.0)
    t.add_argument("--c", type=float, default=1.0)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--pairs-per-epoch", type=int, default=None)
    t.add_argument("--geodesic-extras", type=int, default=32)
    t.add_argument("--feature-dim", type=int, default=64)
    t.add_argument("--conv-channels", default="16,32,64")
    t.add_argument("--head-widths", default="256,128")
    t.add_argument("--transformer-widths", default="192,192")
    t.add_argument("--variant", choices=("equivariant", "rpr"), default="equivariant")
    t.add_argument("--out")
    common(t)

    s = sub.add_parser("servo", help="one closed-loop servo run")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--start-angle", type=float, default=90.0, help="degrees from goal")
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--max-iters", type=int, default=50)
    s.add_argument("--angle-tol", type=float, default=10.0, help="degrees")
    s.add_argument("--restarts", type=int, default=8)
    s.add_argument("--out")
    common(s)

    e = sub.add_parser("eval", help="benchmark methods over seeded trials")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--ckpt-rpr")
    e.add_argument("--methods", default="ours,ibvs,rpr")
    e.add_argument("--trials", type=int, default=50)
    e.add_argument("--eps", default="0.02,0.05,0.1,0.2", help="fractions of object diameter")
    e.add_argument("--start-lo", type=float, default=60.0)
    e.add_argument("--start-hi", type=float, default=150.0)
    e.add_argument("--max-iters", type=int, default=50)
    e.add_argument("--restarts", type=int, default=8)
    e.add_argument("--out")
    common(e)

    a = sub.add_parser("ablate", help="centering vs no-centering comparison")
    a.add_argument("--data-centered", required=True)
    a.add_argument("--data-plain", required=True)
    a.add_argument("--ckpt-centered", required=True)
    a.add_argument("--ckpt-plain", required=True)
    a.add_argument("--trials", type=int, default=25)
    a.add_argument("--max-iters", type=int, default=30)
    a.add_argument("--out")
    common(a)

    c = sub.add_parser("costmap", help="feature-distance map over the view sphere")
    c.add_argument("--data", required=True)
    c.add_argument("--ckpt", required=True)
    c.add_argument("--grid", type=int, default=16)
    c.add_argument("--png", action="store_true")
    c.add_argument("--out")
    common(c)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "servo":
            return cmd_servo(args)
        if args.command == "eval":
            return cmd_eval(args, parser)
        if args.command == "ablate":
            return cmd_ablate(args)
        if args.command == "costmap":
            return cmd_costmap(args)
        parser.error(f"unknown command {args.command!r}")
    except (CommandError, ds.ManifestError, ad.CheckpointError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

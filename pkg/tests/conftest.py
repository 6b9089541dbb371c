"""Session fixtures for the acceptance suite: one toy dataset plus the three
trained models it needs (equivariant, RPR baseline, no-centering variant).

Training is deterministic, so fixtures can optionally cache checkpoints in
EQSERVO_TEST_CACHE (keyed by the full recipe digest); without the variable
every pytest session trains from scratch.
"""

import json
import math
import os

import numpy as np
import pytest

from eqservo import autodiff as ad
from eqservo import baselines as bl
from eqservo import dataset as ds
from eqservo import model as model_mod

# The desk-scale acceptance recipe: one object, 8,000 pairs, minutes-scale
# training.  Every criterion that needs a trained model uses these settings.
RECIPE = {
    "object_kind": "textured-cube",
    "object_seed": 5,
    "views": 400,
    "pairs": 8000,
    "image_size": 24,
    "max_angle_deg": 180.0,
    "target_frac": 0.55,
    "encoder": {
        "conv_channels": (12, 24, 48),
        "head_widths": (192, 96),
        "feature_dim": 32,
        "transformer_widths": (192, 192),
    },
    "lam": 1.0,
    "c": 1.0,
    "schedule": ((3e-3, 40), (1.5e-3, 60), (7e-4, 60)),
    "batch_size": 32,
    "pairs_per_epoch": 4000,
    "geodesic_extras": 8,
    "augment": True,
    "seed": 7,
}

RPR_SCHEDULE = ((2e-3, 30), (7e-4, 20))


def encoder_config():
    e = RECIPE["encoder"]
    return model_mod.EncoderConfig(
        image_size=RECIPE["image_size"],
        conv_channels=e["conv_channels"],
        head_widths=e["head_widths"],
        feature_dim=e["feature_dim"],
        transformer_widths=e["transformer_widths"],
    )


def _cache_path(tag: str) -> str | None:
    root = os.environ.get("EQSERVO_TEST_CACHE")
    if not root:
        return None
    os.makedirs(root, exist_ok=True)
    digest = ds.config_digest({"recipe": _jsonable(RECIPE), "tag": tag})
    return os.path.join(root, f"{tag}-{digest}.ckpt")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (tuple, list)):
        return [_jsonable(v) for v in obj]
    return obj


@pytest.fixture(scope="session")
def accept_dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("accept_data"))
    manifest = ds.generate_dataset(
        RECIPE["object_kind"],
        RECIPE["object_seed"],
        views=RECIPE["views"],
        pairs=RECIPE["pairs"],
        max_angle=math.radians(RECIPE["max_angle_deg"]),
        seed=RECIPE["seed"],
        out_dir=out,
        image_size=RECIPE["image_size"],
        target_frac=RECIPE["target_frac"],
        digest=ds.config_digest(_jsonable(RECIPE)),
    )
    return out, manifest


@pytest.fixture(scope="session")
def accept_plain_dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("accept_plain"))
    manifest = ds.generate_dataset(
        RECIPE["object_kind"],
        RECIPE["object_seed"],
        views=RECIPE["views"],
        pairs=RECIPE["pairs"],
        max_angle=math.radians(RECIPE["max_angle_deg"]),
        seed=RECIPE["seed"] + 1,
        out_dir=out,
        image_size=RECIPE["image_size"],
        target_frac=RECIPE["target_frac"],
        centered=False,
        digest=ds.config_digest({**_jsonable(RECIPE), "centered": False}),
    )
    return out, manifest


def _training_arrays(data_dir, manifest):
    td = ds.load_training_arrays(data_dir, "train", manifest)
    K = manifest.view.intrinsics
    td.intrinsics = np.array([K.fx, K.fy, K.cx, K.cy])
    return td


def train_equivariant(data_dir, manifest, seed):
    data = _training_arrays(data_dir, manifest)
    model = model_mod.init_model(encoder_config(), seed)
    weights = model_mod.LossWeights(lam=RECIPE["lam"], c=RECIPE["c"])
    model_mod.calibrate_feature_scale(model, data.images, weights.c * float(data.norms.mean()))
    done = 0
    for lr, epochs in RECIPE["schedule"]:
        model_mod.train(
            model,
            data,
            epochs,
            weights,
            optimizer_config=ad.AdamConfig(lr=lr),
            seed=seed + done,
            batch_size=RECIPE["batch_size"],
            pairs_per_epoch=RECIPE["pairs_per_epoch"],
            geodesic_extras=RECIPE["geodesic_extras"],
            augment=RECIPE["augment"],
        )
        done += epochs
    return model


def eval_total_loss(model, data, n=512):
    idx = np.arange(min(len(data), n))
    weights = model_mod.LossWeights(lam=RECIPE["lam"], c=RECIPE["c"])
    return model_mod.total_loss(model, data.batch(idx), weights)


@pytest.fixture(scope="session")
def toy_model(accept_dataset):
    """(model, info) with info = {initial_loss, final_loss, train_seconds}."""
    import time

    data_dir, manifest = accept_dataset
    cache = _cache_path("toy")
    if cache and os.path.exists(cache):
        params, meta = ad.load_checkpoint(cache)
        model = model_mod.Model(encoder_config(), params)
        info = json.loads(meta["info"])
    else:
        data = _training_arrays(data_dir, manifest)
        model = model_mod.init_model(encoder_config(), RECIPE["seed"])
        weights = model_mod.LossWeights(lam=RECIPE["lam"], c=RECIPE["c"])
        model_mod.calibrate_feature_scale(
            model, data.images, weights.c * float(data.norms.mean())
        )
        initial = eval_total_loss(model, data)
        t0 = time.perf_counter()
        done = 0
        for lr, epochs in RECIPE["schedule"]:
            model_mod.train(
                model,
                data,
                epochs,
                weights,
                optimizer_config=ad.AdamConfig(lr=lr),
                seed=RECIPE["seed"] + done,
                batch_size=RECIPE["batch_size"],
                pairs_per_epoch=RECIPE["pairs_per_epoch"],
                geodesic_extras=RECIPE["geodesic_extras"],
                augment=RECIPE["augment"],
            )
            done += epochs
        info = {
            "initial_loss": initial,
            "final_loss": eval_total_loss(model, data),
            "train_seconds": time.perf_counter() - t0,
        }
        if cache:
            ad.save_checkpoint(cache, model.params, {"info": json.dumps(info)})
    return model, info


@pytest.fixture(scope="session")
def rpr_model(accept_dataset):
    data_dir, manifest = accept_dataset
    cache = _cache_path("rpr")
    if cache and os.path.exists(cache):
        params, _ = ad.load_checkpoint(cache)
        return bl.RPRModel(encoder_config(), params)
    data = _training_arrays(data_dir, manifest)
    rpr = bl.init_rpr(encoder_config(), RECIPE["seed"])
    done = 0
    for lr, epochs in RPR_SCHEDULE:
        bl.rpr_train(
            rpr,
            data,
            epochs,
            optimizer_config=ad.AdamConfig(lr=lr),
            seed=RECIPE["seed"] + done,
            batch_size=RECIPE["batch_size"],
            pairs_per_epoch=RECIPE["pairs_per_epoch"],
        )
        done += epochs
    if cache:
        ad.save_checkpoint(cache, rpr.params, {})
    return rpr


@pytest.fixture(scope="session")
def nocenter_model(accept_plain_dataset):
    data_dir, manifest = accept_plain_dataset
    cache = _cache_path("nocenter")
    if cache and os.path.exists(cache):
        params, _ = ad.load_checkpoint(cache)
        return model_mod.Model(encoder_config(), params)
    model = train_equivariant(data_dir, manifest, RECIPE["seed"] + 3)
    if cache:
        ad.save_checkpoint(cache, model.params, {})
    return model

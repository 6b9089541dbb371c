import json
import math
import os

import numpy as np
import pytest

from eqservo import dataset as D
from eqservo.dataset import (
    ManifestChecksumError,
    ManifestValidationError,
    ManifestVersionError,
    ViewConfig,
    generate_dataset,
    generate_views,
    make_pairs,
    read_manifest,
    split_sizes,
    write_manifest,
)
from eqservo.geom import geodesic_angle
from eqservo.imaging import procedural_object


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    manifest = generate_dataset(
        "textured-cube",
        5,
        views=14,
        pairs=40,
        max_angle=math.pi,
        seed=3,
        out_dir=str(out),
        image_size=24,
    )
    return str(out), manifest


def test_generate_views_rejects_zero_count(tmp_path):
    scene = procedural_object("textured-cube", 1)
    view = ViewConfig.default(24, scene.diameter)
    with pytest.raises(ValueError):
        generate_views(scene, 0, view, 0, str(tmp_path))


def test_generate_dataset_deterministic(tmp_path):
    kwargs = dict(views=6, pairs=10, max_angle=math.pi, seed=7, image_size=24)
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    generate_dataset("cylinder", 2, out_dir=str(a_dir), **kwargs)
    generate_dataset("cylinder", 2, out_dir=str(b_dir), **kwargs)
    a = (a_dir / "manifest.json").read_bytes()
    b = (b_dir / "manifest.json").read_bytes()
    assert a == b
    img = "images/000000.png"
    assert (a_dir / img).read_bytes() == (b_dir / img).read_bytes()


def test_generated_views_center_the_object(small_dataset):
    out, manifest = small_dataset
    scene = manifest.scene()
    K = manifest.view.intrinsics
    for s in manifest.samples:
        cam = s.pose.camera_pose()
        uv = K.project(cam.apply(scene.centroid()))
        mapped = (
            K.matrix()
            @ np.diag([s.centering_s, s.centering_s, 1.0])
            @ s.centering_q.to_matrix()
            @ K.inverse()
            @ np.array([uv[0], uv[1], 1.0])
        )
        mapped = mapped[:2] / mapped[2]
        assert np.abs(mapped - [K.cx, K.cy]).max() < 0.5


def test_pairs_respect_max_angle(tmp_path):
    scene = procedural_object("textured-cube", 5)
    view = ViewConfig.default(24, scene.diameter)
    samples = generate_views(scene, 12, view, 0, str(tmp_path))
    pairs = make_pairs(samples, 30, max_angle=math.pi / 6, seed=1)
    for p in pairs:
        assert p.p.angle() <= math.pi / 6 + 1e-12


def test_pairs_unsatisfiable_max_angle_fails(tmp_path):
    scene = procedural_object("textured-cube", 5)
    view = ViewConfig.default(24, scene.diameter)
    samples = generate_views(scene, 4, view, 0, str(tmp_path))
    with pytest.raises(RuntimeError):
        make_pairs(samples, 10, max_angle=1e-6, seed=1)


def test_two_samples_single_pair(tmp_path):
    scene = procedural_object("textured-cube", 5)
    view = ViewConfig.default(24, scene.diameter)
    samples = generate_views(scene, 2, view, 11, str(tmp_path))
    pairs = make_pairs(samples, 1, max_angle=math.pi, seed=0, split_fractions=(1.0, 0.0, 0.0))
    assert len(pairs) == 1
    p = pairs[0]
    expected = D.pair_transform(samples[p.src], samples[p.tar], centered=True)
    assert geodesic_angle(expected.q, p.p.q) < 1e-12


def test_split_sizes_exact():
    assert split_sizes(1000, (0.8, 0.1, 0.1)) == [800, 100, 100]
    assert sum(split_sizes(97, (0.7, 0.2, 0.1))) == 97


def test_pair_transform_consistency(small_dataset):
    out, manifest = small_dataset
    by_id = manifest.sample_by_id()
    for pair in manifest.pairs:
        expected = D.pair_transform(by_id[pair.src], by_id[pair.tar], manifest.centered)
        assert geodesic_angle(expected.q, pair.p.q) < 1e-9
        assert np.abs(expected.t - pair.p.t).max() < 1e-9


def test_manifest_round_trip(small_dataset):
    out, manifest = small_dataset
    loaded = read_manifest(out)
    assert loaded.object_kind == manifest.object_kind
    assert len(loaded.samples) == len(manifest.samples)
    assert len(loaded.pairs) == len(manifest.pairs)
    for a, b in zip(loaded.samples, manifest.samples):
        assert a == b
    for a, b in zip(loaded.pairs, manifest.pairs):
        assert a.src == b.src and a.tar == b.tar and a.split == b.split
        assert np.array_equal(a.p.t, b.p.t)
        assert a.p.q == b.p.q


def test_manifest_rejects_future_version(small_dataset, tmp_path):
    out, _ = small_dataset
    doc = json.loads(open(os.path.join(out, "manifest.json")).read())
    doc["format_version"] = 2
    alt = tmp_path / "future"
    alt.mkdir()
    (alt / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(ManifestVersionError):
        read_manifest(str(alt))


def test_manifest_detects_tampered_image(tmp_path):
    generate_dataset(
        "textured-cube", 5, views=4, pairs=6, max_angle=math.pi, seed=2,
        out_dir=str(tmp_path), image_size=24,
    )
    victim = tmp_path / "images" / "000001.png"
    data = bytearray(victim.read_bytes())
    data[-1] ^= 0xFF
    victim.write_bytes(bytes(data))
    with pytest.raises(ManifestChecksumError) as exc:
        read_manifest(str(tmp_path))
    assert "000001" in str(exc.value)


def test_manifest_detects_dangling_pair(tmp_path):
    generate_dataset(
        "textured-cube", 5, views=4, pairs=6, max_angle=math.pi, seed=2,
        out_dir=str(tmp_path), image_size=24,
    )
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["pairs"][0]["src"] = 999
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(ManifestValidationError) as exc:
        read_manifest(str(tmp_path))
    assert "999" in str(exc.value)


def test_manifest_detects_missing_image(tmp_path):
    generate_dataset(
        "textured-cube", 5, views=4, pairs=6, max_angle=math.pi, seed=2,
        out_dir=str(tmp_path), image_size=24,
    )
    (tmp_path / "images" / "000002.png").unlink()
    with pytest.raises(ManifestValidationError):
        read_manifest(str(tmp_path))


def test_splits_are_disjoint(small_dataset):
    out, manifest = small_dataset
    seen = {}
    for idx, pair in enumerate(manifest.pairs):
        assert idx not in seen
        seen[idx] = pair.split
    counts = {s: list(seen.values()).count(s) for s in D.SPLITS}
    assert counts["train"] == 32 and counts["val"] == 4 and counts["test"] == 4


def test_load_training_arrays(small_dataset):
    out, manifest = small_dataset
    td = D.load_training_arrays(out, "train", manifest)
    assert td.images.shape == (14, 3, 24, 24)
    assert td.images.dtype == np.float32
    assert len(td) == 32
    assert td.pose_vecs.shape == (32, 7)
    # reduced pairs: translations zero, norms equal quaternion angle
    assert np.abs(td.pose_vecs[:, :3]).max() == 0.0
    w = np.clip(td.pose_vecs[:, 3], -1, 1)
    assert np.abs(2 * np.arccos(w) - td.norms).max() < 1e-6


def test_f32_image_format_round_trip(tmp_path):
    manifest = generate_dataset(
        "cylinder", 3, views=4, pairs=6, max_angle=math.pi, seed=4,
        out_dir=str(tmp_path), image_size=24, image_format="f32",
    )
    loaded = read_manifest(str(tmp_path))
    td = D.load_training_arrays(str(tmp_path), "train", loaded)
    assert td.images.shape[2:] == (24, 24)
    assert td.images.min() >= 0.0 and td.images.max() <= 1.0


def test_strict_splits_share_no_sample(tmp_path):
    scene = procedural_object("textured-cube", 5)
    view = ViewConfig.default(24, scene.diameter)
    samples = generate_views(scene, 20, view, 0, str(tmp_path))
    pairs = make_pairs(samples, 60, math.pi, (0.6, 0.2, 0.2), seed=2, strict_splits=True)
    used = {s: set() for s in D.SPLITS}
    for p in pairs:
        used[p.split].add(p.src)
        used[p.split].add(p.tar)
    assert not (used["train"] & used["val"])
    assert not (used["train"] & used["test"])
    assert not (used["val"] & used["test"])


def test_uncentered_dataset_has_full_transforms(tmp_path):
    manifest = generate_dataset(
        "textured-cube", 5, views=6, pairs=10, max_angle=math.pi, seed=6,
        out_dir=str(tmp_path), image_size=24, centered=False,
    )
    assert not manifest.centered
    translations = np.stack([p.p.t for p in manifest.pairs])
    assert np.linalg.norm(translations, axis=1).max() > 0.01
    for p in manifest.pairs:
        assert not p.p.reduced

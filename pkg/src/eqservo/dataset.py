"""Dataset generation and persistence: hemisphere views, centered renders,
pair sampling with relative transforms, and a checksummed JSON manifest.

Directory layout:
    <dir>/manifest.json
    <dir>/images/<id>.png   (8-bit) or <id>.f32 (raw little-endian float32)

Sample poses and centering factors are stored in the manifest so every pair
transform can be recomputed and validated against the recorded camera frames.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

from . import model as model_mod
from .geom import (
    CameraIntrinsics,
    HemispherePose,
    RelTransform,
    RigidTransform,
    UnitQuaternion,
    geodesic_angle,
    relative_pose,
    sample_hemisphere,
    transform_norm,
)
from .imaging import Camera, Image, SceneObject, procedural_object, render, render_centered

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


class ManifestVersionError(ManifestError):
    pass


class ManifestChecksumError(ManifestError):
    pass


class ManifestValidationError(ManifestError):
    pass


def config_digest(obj) -> str:
    """Stable short hash of a JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class ViewConfig:
    """Rendering geometry shared by dataset generation and evaluation."""

    intrinsics: CameraIntrinsics
    image_size: int
    target_size_px: float
    radius_range: tuple
    elevation_range: tuple = (0.2, 1.35)

    @staticmethod
    def default(image_size: int, diameter: float, target_frac: float = 0.55) -> "ViewConfig":
        """Focal length ~1.1x the image width; radius set so the object
        apparent size sits near the centering target."""
        f = 1.1 * image_size
        c = (image_size - 1) / 2
        target = target_frac * image_size
        r_ref = f * diameter / target
        return ViewConfig(
            intrinsics=CameraIntrinsics(f, f, c, c),
            image_size=image_size,
            target_size_px=target,
            radius_range=(0.85 * r_ref, 1.25 * r_ref),
        )

    def to_dict(self) -> dict:
        K = self.intrinsics
        return {
            "intrinsics": [K.fx, K.fy, K.cx, K.cy],
            "image_size": self.image_size,
            "target_size_px": self.target_size_px,
            "radius_range": list(self.radius_range),
            "elevation_range": list(self.elevation_range),
        }

    @staticmethod
    def from_dict(d: dict) -> "ViewConfig":
        return ViewConfig(
            intrinsics=CameraIntrinsics(*d["intrinsics"]),
            image_size=int(d["image_size"]),
            target_size_px=float(d["target_size_px"]),
            radius_range=tuple(d["radius_range"]),
            elevation_range=tuple(d["elevation_range"]),
        )


@dataclass(frozen=True)
class SampleRecord:
    id: int
    image: str  # path relative to the dataset directory
    pose: HemispherePose
    centering_q: UnitQuaternion
    centering_s: float

    def centered_frame(self) -> RigidTransform:
        """World-to-camera frame of the virtual centered camera."""
        cam = self.pose.camera_pose()
        R = self.centering_q.to_matrix()
        return RigidTransform(R @ cam.R, R @ cam.t)


@dataclass(frozen=True)
class PairRecord:
    src: int
    tar: int
    p: RelTransform
    split: str


@dataclass
class DatasetManifest:
    object_kind: str
    object_seed: int
    centered: bool
    image_format: str
    view: ViewConfig
    samples: list
    pairs: list
    diameter: float
    config_digest_value: str = ""
    checksums: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def scene(self) -> SceneObject:
        return procedural_object(self.object_kind, self.object_seed)

    def sample_by_id(self) -> dict:
        return {s.id: s for s in self.samples}


def _save_image(img: Image, path: str, image_format: str) -> None:
    if image_format == "png":
        PILImage.fromarray(np.round(img.data * 255.0).astype(np.uint8)).save(path)
    elif image_format == "f32":
        np.ascontiguousarray(img.data, dtype="<f4").tofile(path)
    else:
        raise ValueError(f"unknown image format {image_format!r}")


def _load_image(path: str, image_format: str, size: int) -> np.ndarray:
    if image_format == "png":
        arr = np.asarray(PILImage.open(path), dtype=np.float32) / 255.0
    else:
        arr = np.fromfile(path, dtype="<f4").reshape(size, size, 3).astype(np.float32)
    if arr.shape != (size, size, 3):
        raise ManifestValidationError(f"{path}: unexpected image shape {arr.shape}")
    return arr


def generate_views(
    scene: SceneObject,
    count: int,
    view: ViewConfig,
    seed: int,
    out_dir: str,
    image_format: str = "png",
    centered: bool = True,
) -> list:
    """Render `count` hemisphere views (centered by default) into out_dir/images."""
    if count < 1:
        raise ValueError("view count must be at least 1")
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    size = (view.image_size, view.image_size)
    records = []
    for i in range(count):
        pose = sample_hemisphere(rng, view.radius_range, view.elevation_range)
        try:
            if centered:
                img, ct = render_centered(
                    scene, pose, view.intrinsics, size, view.target_size_px
                )
                q, s = UnitQuaternion.from_matrix(ct.R), ct.s
            else:
                img = render(scene, Camera(view.intrinsics, pose.camera_pose()), size)
                q, s = UnitQuaternion.identity(), 1.0
        except ValueError as exc:
            raise RuntimeError(f"rendering sample {i} failed: {exc}") from exc
        rel = f"images/{i:06d}.{image_format}"
        _save_image(img, os.path.join(out_dir, rel), image_format)
        records.append(SampleRecord(i, rel, pose, q, s))
    return records


def pair_transform(a: SampleRecord, b: SampleRecord, centered: bool) -> RelTransform:
    """Relative transform from view a to view b.

    Centered datasets use the virtual centered camera frames and the reduced
    (rotation-only) space; plain datasets keep the full camera-frame motion.
    """
    if centered:
        return relative_pose(a.centered_frame(), b.centered_frame(), reduced=True)
    return relative_pose(a.pose.camera_pose(), b.pose.camera_pose(), reduced=False)


def split_sizes(total: int, fractions) -> list:
    """Largest-remainder split so sizes are exact for round fractions."""
    if len(fractions) != 3:
        raise ValueError("expected (train, val, test) fractions")
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError("split fractions must be non-negative and sum to 1")
    sizes = [int(math.floor(f * total)) for f in fractions]
    remainders = [f * total - s for f, s in zip(fractions, sizes)]
    for _ in range(total - sum(sizes)):
        k = int(np.argmax(remainders))
        sizes[k] += 1
        remainders[k] = -1
    return sizes


def make_pairs(
    samples: list,
    pair_count: int,
    max_angle: float,
    split_fractions=(0.8, 0.1, 0.1),
    seed: int = 0,
    centered: bool = True,
    strict_splits: bool = False,
) -> list:
    """Uniform ordered view pairs with relative rotation angle <= max_angle.

    Split assignment is by pair; with strict_splits the views themselves are
    partitioned first and every pair stays inside its view partition, so no
    sample id crosses a split boundary.
    """
    if len(samples) < 2:
        raise ValueError("need at least two samples to build pairs")
    if not (0.0 < max_angle <= math.pi + 1e-12):
        raise ValueError("max_angle must lie in (0, pi]")
    rng = np.random.default_rng(seed)

    if strict_splits:
        view_order = rng.permutation(len(samples))
        view_sizes = split_sizes(len(samples), split_fractions)
        pools, pos = [], 0
        for n in view_sizes:
            pools.append([samples[k] for k in view_order[pos : pos + n]])
            pos += n
        if any(len(pool) < 2 and size > 0 for pool, size in zip(pools, split_sizes(pair_count, split_fractions))):
            raise ValueError("strict splits need at least two samples per non-empty split")
        records = []
        for name, pool, n_pairs in zip(SPLITS, pools, split_sizes(pair_count, split_fractions)):
            for s, t, p in _draw_pairs(pool, n_pairs, max_angle, centered, rng):
                records.append(PairRecord(s, t, p, name))
        return records

    chosen = _draw_pairs(samples, pair_count, max_angle, centered, rng)
    sizes = split_sizes(pair_count, split_fractions)
    order = rng.permutation(pair_count)
    split_of = {}
    pos = 0
    for name, n in zip(SPLITS, sizes):
        for k in order[pos : pos + n]:
            split_of[int(k)] = name
        pos += n
    return [PairRecord(s, t, p, split_of[k]) for k, (s, t, p) in enumerate(chosen)]


def _draw_pairs(samples, pair_count, max_angle, centered, rng):
    chosen = []
    attempts = 0
    limit = max(10_000, 1_000 * pair_count)
    while len(chosen) < pair_count:
        attempts += 1
        if attempts > limit:
            raise RuntimeError(
                f"could not draw {pair_count} pairs under max_angle={max_angle:.3f} "
                f"after {attempts} attempts"
            )
        i, j = rng.integers(0, len(samples), size=2)
        if i == j:
            continue
        p = pair_transform(samples[i], samples[j], centered)
        if p.angle() > max_angle:
            continue
        chosen.append((int(samples[i].id), int(samples[j].id), p))
    return chosen


# ------------------------------------------------------------------- manifest


def _pose_to_list(pose: HemispherePose) -> list:
    return [pose.azimuth, pose.elevation, pose.roll, pose.radius]


def _sample_to_dict(s: SampleRecord) -> dict:
    return {
        "id": s.id,
        "image": s.image,
        "pose": _pose_to_list(s.pose),
        "centering_q": list(s.centering_q.as_array()),
        "centering_s": s.centering_s,
    }


def _sample_from_dict(d: dict) -> SampleRecord:
    return SampleRecord(
        id=int(d["id"]),
        image=d["image"],
        pose=HemispherePose(*d["pose"]),
        centering_q=UnitQuaternion(*d["centering_q"]),
        centering_s=float(d["centering_s"]),
    )


def _pair_to_dict(p: PairRecord) -> dict:
    vec = np.concatenate([p.p.t, p.p.q.as_array()])
    return {"src": p.src, "tar": p.tar, "p": [float(x) for x in vec], "reduced": p.p.reduced, "split": p.split}


def _pair_from_dict(d: dict) -> PairRecord:
    v = d["p"]
    q = UnitQuaternion(v[3], v[4], v[5], v[6])
    return PairRecord(int(d["src"]), int(d["tar"]), RelTransform(q, v[:3], bool(d["reduced"])), d["split"])


def write_manifest(manifest: DatasetManifest, out_dir: str) -> str:
    """Write manifest.json (images must already exist under out_dir)."""
    checksums = {}
    for s in manifest.samples:
        path = os.path.join(out_dir, s.image)
        if not os.path.exists(path):
            raise ManifestValidationError(f"missing image file {s.image}")
        checksums[s.image] = _file_sha256(path)
    manifest.checksums = checksums
    doc = {
        "format_version": manifest.format_version,
        "object": {"kind": manifest.object_kind, "seed": manifest.object_seed},
        "diameter": manifest.diameter,
        "centered": manifest.centered,
        "image_format": manifest.image_format,
        "view": manifest.view.to_dict(),
        "config_digest": manifest.config_digest_value,
        "samples": [_sample_to_dict(s) for s in manifest.samples],
        "pairs": [_pair_to_dict(p) for p in manifest.pairs],
        "checksums": checksums,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    return path


def read_manifest(in_dir: str, verify_checksums: bool = True) -> DatasetManifest:
    """Load and validate a dataset directory."""
    path = os.path.join(in_dir, "manifest.json")
    if not os.path.exists(path):
        raise ManifestValidationError(f"{in_dir}: no manifest.json")
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ManifestVersionError(
            f"manifest version {doc.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    samples = [_sample_from_dict(d) for d in doc["samples"]]
    pairs = [_pair_from_dict(d) for d in doc["pairs"]]
    manifest = DatasetManifest(
        object_kind=doc["object"]["kind"],
        object_seed=int(doc["object"]["seed"]),
        centered=bool(doc["centered"]),
        image_format=doc["image_format"],
        view=ViewConfig.from_dict(doc["view"]),
        samples=samples,
        pairs=pairs,
        diameter=float(doc["diameter"]),
        config_digest_value=doc.get("config_digest", ""),
        checksums=doc.get("checksums", {}),
    )
    validate_manifest(manifest, in_dir, verify_checksums=verify_checksums)
    return manifest


def validate_manifest(manifest: DatasetManifest, in_dir: str, verify_checksums: bool = True) -> None:
    ids = [s.id for s in manifest.samples]
    if len(set(ids)) != len(ids):
        raise ManifestValidationError("duplicate sample ids")
    by_id = manifest.sample_by_id()
    for pair in manifest.pairs:
        for ref in (pair.src, pair.tar):
            if ref not in by_id:
                raise ManifestValidationError(f"pair references unknown sample id {ref}")
        if pair.src == pair.tar:
            raise ManifestValidationError(f"degenerate pair ({pair.src}, {pair.tar})")
        if pair.split not in SPLITS:
            raise ManifestValidationError(f"unknown split {pair.split!r}")
        expected = pair_transform(by_id[pair.src], by_id[pair.tar], manifest.centered)
        if (
            geodesic_angle(expected.q, pair.p.q) > 1e-9
            or np.abs(expected.t - pair.p.t).max() > 1e-9
        ):
            raise ManifestValidationError(
                f"pair ({pair.src}, {pair.tar}) transform inconsistent with recorded poses"
            )
    for s in manifest.samples:
        path = os.path.join(in_dir, s.image)
        if not os.path.exists(path):
            raise ManifestValidationError(f"missing image file {s.image}")
        if verify_checksums:
            recorded = manifest.checksums.get(s.image)
            if recorded is None:
                raise ManifestChecksumError(f"no checksum recorded for {s.image}")
            actual = _file_sha256(path)
            if actual != recorded:
                raise ManifestChecksumError(f"checksum mismatch for {s.image}")


def generate_dataset(
    object_kind: str,
    object_seed: int,
    views: int,
    pairs: int,
    max_angle: float,
    seed: int,
    out_dir: str,
    image_size: int = 64,
    image_format: str = "png",
    centered: bool = True,
    split_fractions=(0.8, 0.1, 0.1),
    target_frac: float = 0.55,
    digest: str = "",
) -> DatasetManifest:
    """End-to-end dataset build: views + pairs + manifest on disk."""
    scene = procedural_object(object_kind, object_seed)
    view = ViewConfig.default(image_size, scene.diameter, target_frac)
    samples = generate_views(scene, views, view, seed, out_dir, image_format, centered)
    pair_records = make_pairs(samples, pairs, max_angle, split_fractions, seed + 1, centered)
    manifest = DatasetManifest(
        object_kind=object_kind,
        object_seed=object_seed,
        centered=centered,
        image_format=image_format,
        view=view,
        samples=samples,
        pairs=pair_records,
        diameter=scene.diameter,
        config_digest_value=digest,
    )
    write_manifest(manifest, out_dir)
    return manifest


def load_training_arrays(in_dir: str, split: str = "train", manifest: DatasetManifest | None = None):
    """Materialize a split as in-memory training arrays."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    m = manifest if manifest is not None else read_manifest(in_dir)
    size = m.view.image_size
    id_to_row = {s.id: i for i, s in enumerate(m.samples)}
    images = np.stack(
        [
            _load_image(os.path.join(in_dir, s.image), m.image_format, size).transpose(2, 0, 1)
            for s in m.samples
        ]
    ).astype(np.float32)
    sel = [p for p in m.pairs if p.split == split]
    if not sel:
        raise ValueError(f"split {split!r} holds no pairs")
    idx = np.array([[id_to_row[p.src], id_to_row[p.tar]] for p in sel])
    pose = np.stack([model_mod.pose_to_vec(p.p) for p in sel])
    norms = np.array([transform_norm(p.p) for p in sel])
    return model_mod.TrainingData(images, idx, pose, norms)

"""Synthetic scene rendering and homography image warping.

Images are float arrays of shape (H, W, 3) with values in [0, 1].  The
renderer is a deterministic z-buffered triangle rasterizer with flat
Lambertian shading under one fixed directional light and a constant mid-gray
background.  Triangles with any vertex closer than the near plane are
dropped (objects here always sit well in front of the camera).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import (
    CameraIntrinsics,
    CenteringTransform,
    HemispherePose,
    RigidTransform,
    centering_homography,
    centering_params,
)

BACKGROUND = 0.5
AMBIENT = 0.3
# Fixed directional light in world coordinates.
LIGHT_DIR = np.array([0.35, -0.25, 0.9]) / np.linalg.norm([0.35, -0.25, 0.9])
NEAR_PLANE = 1e-3

OBJECT_KINDS = ("textured-cube", "cylinder", "asymmetric-composite")


@dataclass(frozen=True)
class Image:
    """W x H x 3 intensity grid in [0, 1] (stored row-major as (H, W, 3))."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3 or d.shape[2] != 3 or d.shape[0] < 1 or d.shape[1] < 1:
            raise ValueError(f"image data must be (H, W, 3), got {d.shape}")
        if np.isnan(d).any() or d.min() < 0.0 or d.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


def quantize8(img: Image) -> Image:
    """Round to the 8-bit grid used when images are persisted as PNG."""
    return Image(np.round(img.data * 255.0) / 255.0)


@dataclass(frozen=True)
class SceneObject:
    """Triangle mesh with per-face albedo; vertices double as the ADD point set."""

    vertices: np.ndarray  # (V, 3) meters
    faces: np.ndarray  # (F, 3) vertex indices
    albedo: np.ndarray  # (F, 3) rgb in [0, 1]
    diameter: float
    kind: str = "custom"
    seed: int = 0

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        a = np.asarray(self.albedo, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] == 0:
            raise ValueError("vertices must be a non-empty (V, 3) array")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError("faces must be (F, 3)")
        if a.shape != (f.shape[0], 3):
            raise ValueError("albedo must be (F, 3)")
        if not self.diameter > 0:
            raise ValueError("diameter must be positive")
        for arr in (v, f, a):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "albedo", a)

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    pose: RigidTransform  # world -> camera


def max_pairwise_distance(points: np.ndarray) -> float:
    d = points[:, None, :] - points[None, :, :]
    return float(np.sqrt((d**2).sum(axis=2)).max())


def render(scene: SceneObject, camera: Camera, size) -> Image:
    """Rasterize the scene; `size` is (width, height)."""
    w, h = int(size[0]), int(size[1])
    if w <= 0 or h <= 0:
        raise ValueError("image size must be positive")
    img = np.full((h, w, 3), BACKGROUND, dtype=np.float64)
    zbuf = np.full((h, w), np.inf)

    verts_cam = camera.pose.apply(scene.vertices)
    K = camera.intrinsics

    # Flat shading with the light fixed in the world frame; both triangle
    # sides are lit so winding order does not matter.
    v0 = scene.vertices[scene.faces[:, 0]]
    v1 = scene.vertices[scene.faces[:, 1]]
    v2 = scene.vertices[scene.faces[:, 2]]
    normals = np.cross(v1 - v0, v2 - v0)
    norm_len = np.linalg.norm(normals, axis=1)
    shade = AMBIENT + (1.0 - AMBIENT) * np.abs(
        np.divide(normals @ LIGHT_DIR, norm_len, out=np.zeros_like(norm_len), where=norm_len > 1e-15)
    )
    colors = np.clip(scene.albedo * shade[:, None], 0.0, 1.0)

    zs = verts_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        us = K.fx * verts_cam[:, 0] / zs + K.cx
        vs = K.fy * verts_cam[:, 1] / zs + K.cy

    for fi, (i0, i1, i2) in enumerate(scene.faces):
        if zs[i0] <= NEAR_PLANE or zs[i1] <= NEAR_PLANE or zs[i2] <= NEAR_PLANE:
            continue
        xs = np.array([us[i0], us[i1], us[i2]])
        ys = np.array([vs[i0], vs[i1], vs[i2]])
        x_lo = max(int(math.ceil(xs.min())), 0)
        x_hi = min(int(math.floor(xs.max())), w - 1)
        y_lo = max(int(math.ceil(ys.min())), 0)
        y_hi = min(int(math.floor(ys.max())), h - 1)
        if x_lo > x_hi or y_lo > y_hi:
            continue
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if abs(area) < 1e-12:
            continue
        gx, gy = np.meshgrid(np.arange(x_lo, x_hi + 1), np.arange(y_lo, y_hi + 1))
        w0 = (xs[1] - gx) * (ys[2] - gy) - (xs[2] - gx) * (ys[1] - gy)
        w1 = (xs[2] - gx) * (ys[0] - gy) - (xs[0] - gx) * (ys[2] - gy)
        w2 = area - w0 - w1
        inside = (
            ((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) if area > 0 else ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))
        )
        if not inside.any():
            continue
        l0, l1, l2 = w0 / area, w1 / area, w2 / area
        inv_z = l0 / zs[i0] + l1 / zs[i1] + l2 / zs[i2]
        depth = 1.0 / inv_z
        tile = zbuf[y_lo : y_hi + 1, x_lo : x_hi + 1]
        better = inside & (depth < tile)
        if better.any():
            tile[better] = depth[better]
            img[y_lo : y_hi + 1, x_lo : x_hi + 1][better] = colors[fi]

    return Image(img)


def warp(img: Image, H) -> Image:
    """Apply a pixel-space homography (source -> output) by inverse sampling.

    Output pixels map back through H^-1 and are bilinearly interpolated;
    samples falling outside the source are filled with the background color.
    """
    H = np.asarray(H, dtype=np.float64).reshape(3, 3)
    if abs(np.linalg.det(H)) < 1e-12:
        raise ValueError("homography is singular")
    h, w = img.height, img.width
    Hinv = np.linalg.inv(H)
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    denom = Hinv[2, 0] * gx + Hinv[2, 1] * gy + Hinv[2, 2]
    sx = (Hinv[0, 0] * gx + Hinv[0, 1] * gy + Hinv[0, 2]) / denom
    sy = (Hinv[1, 0] * gx + Hinv[1, 1] * gy + Hinv[1, 2]) / denom
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1) & (denom != 0)

    x0 = np.clip(np.floor(sx).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, h - 2)
    fx = np.clip(sx - x0, 0.0, 1.0)[..., None]
    fy = np.clip(sy - y0, 0.0, 1.0)[..., None]
    src = img.data.astype(np.float64)
    out = (
        src[y0, x0] * (1 - fx) * (1 - fy)
        + src[y0, x0 + 1] * fx * (1 - fy)
        + src[y0 + 1, x0] * (1 - fx) * fy
        + src[y0 + 1, x0 + 1] * fx * fy
    )
    out[~valid] = BACKGROUND
    return Image(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------- procedural objects


def _quad(vertices, faces, albedo, corners, color):
    base = len(vertices)
    vertices.extend(corners)
    faces.append((base, base + 1, base + 2))
    faces.append((base, base + 2, base + 3))
    albedo.append(color)
    albedo.append(color)


def _box(vertices, faces, albedo, center, half, rng, grid=1):
    cx, cy, cz = center
    hx, hy, hz = half
    axes = [
        ((1, 2), 0, +hx),
        ((1, 2), 0, -hx),
        ((0, 2), 1, +hy),
        ((0, 2), 1, -hy),
        ((0, 1), 2, +hz),
        ((0, 1), 2, -hz),
    ]
    c = np.array([cx, cy, cz], dtype=np.float64)
    h = np.array([hx, hy, hz], dtype=np.float64)
    for (a, b), fixed, offset in axes:
        for i in range(grid):
            for j in range(grid):
                color = rng.uniform(0.08, 0.95, size=3)
                lo_a = -h[a] + 2 * h[a] * i / grid
                hi_a = -h[a] + 2 * h[a] * (i + 1) / grid
                lo_b = -h[b] + 2 * h[b] * j / grid
                hi_b = -h[b] + 2 * h[b] * (j + 1) / grid
                corners = []
                for pa, pb in ((lo_a, lo_b), (hi_a, lo_b), (hi_a, hi_b), (lo_a, hi_b)):
                    p = c.copy()
                    p[a] += pa
                    p[b] += pb
                    p[fixed] += offset
                    corners.append(tuple(p))
                _quad(vertices, faces, albedo, corners, color)


def procedural_object(kind: str, seed: int) -> SceneObject:
    """Deterministic desk-scale object with randomized face albedo."""
    if kind not in OBJECT_KINDS:
        raise ValueError(f"unknown object kind {kind!r}; choose from {OBJECT_KINDS}")
    rng = np.random.default_rng(seed)
    vertices: list = []
    faces: list = []
    albedo: list = []

    if kind == "textured-cube":
        _box(vertices, faces, albedo, (0, 0, 0), (0.06, 0.06, 0.06), rng, grid=3)
    elif kind == "cylinder":
        n, r, hh = 20, 0.045, 0.07
        for i in range(n):
            a0 = 2 * math.pi * i / n
            a1 = 2 * math.pi * (i + 1) / n
            p00 = (r * math.cos(a0), r * math.sin(a0), -hh)
            p10 = (r * math.cos(a1), r * math.sin(a1), -hh)
            p11 = (r * math.cos(a1), r * math.sin(a1), hh)
            p01 = (r * math.cos(a0), r * math.sin(a0), hh)
            _quad(vertices, faces, albedo, [p00, p10, p11, p01], rng.uniform(0.08, 0.95, size=3))
            for z, flip in ((-hh, True), (hh, False)):
                base = len(vertices)
                vertices.extend([(0.0, 0.0, z), p00[:2] + (z,), p10[:2] + (z,)])
                tri = (base, base + 2, base + 1) if flip else (base, base + 1, base + 2)
                faces.append(tri)
                albedo.append(rng.uniform(0.08, 0.95, size=3))
    else:  # asymmetric-composite: box + offset cube + fin, no rotational symmetry
        _box(vertices, faces, albedo, (0, 0, 0), (0.055, 0.04, 0.03), rng, grid=2)
        _box(vertices, faces, albedo, (0.035, 0.025, 0.05), (0.02, 0.02, 0.02), rng, grid=1)
        fin = [(-0.055, -0.04, 0.03), (-0.055, 0.04, 0.03), (-0.055, 0.0, 0.085)]
        base = len(vertices)
        vertices.extend(fin)
        faces.append((base, base + 1, base + 2))
        albedo.append(rng.uniform(0.08, 0.95, size=3))

    verts = np.asarray(vertices, dtype=np.float64)
    verts = verts - verts.mean(axis=0)
    return SceneObject(
        vertices=verts,
        faces=np.asarray(faces, dtype=np.int64),
        albedo=np.asarray(albedo, dtype=np.float64),
        diameter=max_pairwise_distance(verts),
        kind=kind,
        seed=seed,
    )


def save_trimesh(scene: SceneObject, path) -> None:
    """Minimal triangle-list text format: `v x y z` and `f i j k r g b` lines."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("trimesh 1\n")
        for v in scene.vertices:
            f.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for face, alb in zip(scene.faces, scene.albedo):
            f.write(
                f"f {int(face[0])} {int(face[1])} {int(face[2])} "
                f"{float(alb[0])!r} {float(alb[1])!r} {float(alb[2])!r}\n"
            )


def load_trimesh(path) -> SceneObject:
    vertices, faces, albedo = [], [], []
    with open(path, encoding="utf-8") as f:
        header = f.readline().split()
        if header != ["trimesh", "1"]:
            raise ValueError(f"{path}: not a trimesh v1 file")
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x) for x in parts[1:4]])
                albedo.append([float(x) for x in parts[4:7]])
            else:
                raise ValueError(f"{path}: unknown record {parts[0]!r}")
    verts = np.asarray(vertices, dtype=np.float64)
    return SceneObject(
        vertices=verts,
        faces=np.asarray(faces, dtype=np.int64),
        albedo=np.asarray(albedo, dtype=np.float64),
        diameter=max_pairwise_distance(verts),
    )


# ----------------------------------------------------------- centered renders


def apparent_size_px(scene: SceneObject, camera: Camera) -> float:
    """Object size on the image: max pairwise distance of vertex projections."""
    verts_cam = camera.pose.apply(scene.vertices)
    if np.any(verts_cam[:, 2] <= NEAR_PLANE):
        raise ValueError("object extends behind the camera")
    uv = camera.intrinsics.project(verts_cam)
    return max_pairwise_distance(np.column_stack([uv[:, 0], uv[:, 1], np.zeros(len(uv))]))


def render_centered(
    scene: SceneObject,
    pose: HemispherePose,
    K: CameraIntrinsics,
    size,
    target_size_px: float,
):
    """Render a view and warp it so the object is centered at a fixed size.

    Returns (image, CenteringTransform).  The centering rotation puts the
    bearing of the object centroid on the optical axis; the scale factor
    normalizes the apparent size measured in the source view.
    """
    cam = Camera(K, pose.camera_pose())
    raw = render(scene, cam, size)
    center_cam = cam.pose.apply(scene.centroid())
    apparent = apparent_size_px(scene, cam)
    R, s = centering_params(K, center_cam, apparent, target_size_px)
    ct = centering_homography(K, R, s)
    return warp(raw, ct.H), ct

"""Rotations, camera intrinsics, hemisphere view sampling and the
object-centering homography.

Frame conventions (right handed, standard computer vision):
  world:  z up, the observed object sits at the origin
  camera: x right, y down, z forward along the optical axis; extrinsics are
          stored as the world-to-camera map  X_cam = R @ X_world + t

A relative transform p between camera frames a and b maps a-coordinates to
b-coordinates.  In "reduced" mode p carries rotation only (translation is
pinned to zero); this is the transform space left after object centering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_UNIT_TOL = 1e-6


def _wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class UnitQuaternion:
    """Unit quaternion (w, x, y, z) with the sign canonicalized to w >= 0.

    Construction rejects inputs more than 1e-6 away from unit norm and
    renormalizes the rest, so instances always satisfy ||q|| = 1 within 1e-9.
    """

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)
        if abs(n - 1.0) > _UNIT_TOL:
            raise ValueError(f"quaternion norm {n:.8f} is not unit")
        if abs(n - 1.0) > 1e-13:
            w, x, y, z = float(self.w / n), float(self.x / n), float(self.y / n), float(self.z / n)
        else:
            # Unit within a few ulp already: keep bits so round trips are exact.
            w, x, y, z = float(self.w), float(self.x), float(self.y), float(self.z)
        if w < 0.0 or (w == 0.0 and (x, y, z) < (0.0, 0.0, 0.0)):
            w, x, y, z = -w, -x, -y, -z
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    @staticmethod
    def identity() -> "UnitQuaternion":
        return UnitQuaternion(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_axis_angle(axis, angle: float) -> "UnitQuaternion":
        axis = np.asarray(axis, dtype=float)
        n = float(np.linalg.norm(axis))
        if n < 1e-12:
            raise ValueError("rotation axis must be nonzero")
        half = 0.5 * angle
        s = math.sin(half) / n
        return UnitQuaternion(math.cos(half), axis[0] * s, axis[1] * s, axis[2] * s)

    @staticmethod
    def from_matrix(m) -> "UnitQuaternion":
        m = np.asarray(m, dtype=float)
        # Shepperd's method: pick the largest diagonal combination for stability.
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0.0:
            s = math.sqrt(tr + 1.0) * 2.0
            w = 0.25 * s
            x = (m[2, 1] - m[1, 2]) / s
            y = (m[0, 2] - m[2, 0]) / s
            z = (m[1, 0] - m[0, 1]) / s
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            w = (m[2, 1] - m[1, 2]) / s
            x = 0.25 * s
            y = (m[0, 1] + m[1, 0]) / s
            z = (m[0, 2] + m[2, 0]) / s
        elif m[1, 1] >= m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            w = (m[0, 2] - m[2, 0]) / s
            x = (m[0, 1] + m[1, 0]) / s
            y = 0.25 * s
            z = (m[1, 2] + m[2, 1]) / s
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            w = (m[1, 0] - m[0, 1]) / s
            x = (m[0, 2] + m[2, 0]) / s
            y = (m[1, 2] + m[2, 1]) / s
            z = 0.25 * s
        return UnitQuaternion(w, x, y, z)

    def to_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
            ]
        )

    def __mul__(self, other: "UnitQuaternion") -> "UnitQuaternion":
        a, b = self, other
        return UnitQuaternion(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )

    def conjugate(self) -> "UnitQuaternion":
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    def rotate(self, vec) -> np.ndarray:
        return self.to_matrix() @ np.asarray(vec, dtype=float)

    def angle(self) -> float:
        """Rotation angle in [0, pi]; atan2 form stays accurate near 0."""
        v = math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
        return 2.0 * math.atan2(v, abs(self.w))

    def axis_angle(self):
        """(unit axis, angle in [0, pi]); axis is +z for the identity."""
        ang = self.angle()
        v = np.array([self.x, self.y, self.z])
        n = float(np.linalg.norm(v))
        if n < 1e-12:
            return np.array([0.0, 0.0, 1.0]), 0.0
        return v / n, ang

    def power(self, alpha: float) -> "UnitQuaternion":
        """Fractional rotation: same axis, angle scaled by alpha."""
        axis, ang = self.axis_angle()
        return UnitQuaternion.from_axis_angle(axis, alpha * ang)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])


def geodesic_angle(q1: UnitQuaternion, q2: UnitQuaternion) -> float:
    """Angle in [0, pi] of the relative rotation between q1 and q2."""
    for q in (q1, q2):
        n = math.sqrt(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z)
        if abs(n - 1.0) > _UNIT_TOL:
            raise ValueError(f"quaternion norm {n:.8f} is not unit")
    return (q1.conjugate() * q2).angle()


def is_rotation(m, tol: float = 1e-9) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        return False
    return (
        np.abs(m.T @ m - np.eye(3)).max() <= tol
        and abs(float(np.linalg.det(m)) - 1.0) <= tol
    )


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    return UnitQuaternion.from_axis_angle(axis, angle).to_matrix()


def random_rotation(rng: np.random.Generator) -> UnitQuaternion:
    """Uniform random rotation (Shoemake's subgroup method)."""
    u1, u2, u3 = rng.uniform(size=3)
    a, b = math.sqrt(1.0 - u1), math.sqrt(u1)
    return UnitQuaternion(
        a * math.sin(2 * math.pi * u2),
        a * math.cos(2 * math.pi * u2),
        b * math.sin(2 * math.pi * u3),
        b * math.cos(2 * math.pi * u3),
    )


@dataclass(frozen=True)
class RelTransform:
    """Relative transform between camera frames: rotation q plus translation t.

    reduced=True pins t to zero (rotation-only space after object centering).
    """

    q: UnitQuaternion
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    reduced: bool = True

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(3).copy()
        if self.reduced:
            t = np.zeros(3)
        t.setflags(write=False)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity(reduced: bool = True) -> "RelTransform":
        return RelTransform(UnitQuaternion.identity(), np.zeros(3), reduced)

    def angle(self) -> float:
        return self.q.angle()


def transform_norm(p: RelTransform, translation_weight: float = 1.0) -> float:
    """Magnitude of a relative transform.

    Reduced transforms: the rotation geodesic angle in radians.  Full
    transforms: angle + translation_weight * ||t||  (radians-per-meter weight,
    used only by the no-centering ablation path).
    """
    ang = p.q.angle()
    if p.reduced:
        return ang
    return ang + translation_weight * float(np.linalg.norm(p.t))


def compose_transforms(p_ab: RelTransform, p_bc: RelTransform) -> RelTransform:
    """Chain frames a -> b -> c."""
    q = p_bc.q * p_ab.q
    reduced = p_ab.reduced and p_bc.reduced
    t = p_bc.q.to_matrix() @ p_ab.t + p_bc.t
    return RelTransform(q, t, reduced)


@dataclass(frozen=True)
class RigidTransform:
    """Rigid map X' = R @ X + t; used for camera extrinsics (world-to-camera)."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3).copy()
        t = np.asarray(self.t, dtype=float).reshape(3).copy()
        if not is_rotation(R, tol=1e-8):
            raise ValueError("R is not a rotation matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.R.T + self.t

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other:  (self ∘ other)(X) = self(other(X))."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.t


def relative_pose(cam_a: RigidTransform, cam_b: RigidTransform, reduced: bool = False) -> RelTransform:
    """Transform mapping frame-a coordinates to frame-b coordinates."""
    R = cam_b.R @ cam_a.R.T
    t = cam_b.t - R @ cam_a.t
    return RelTransform(UnitQuaternion.from_matrix(R), t, reduced)


def apply_relative(cam: RigidTransform, p: RelTransform, beta: float = 1.0) -> RigidTransform:
    """Move a camera by the (optionally damped) relative transform p."""
    step_q = p.q.power(beta)
    R = step_q.to_matrix()
    return RigidTransform(R @ cam.R, R @ cam.t + beta * p.t)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with zero skew; fx, fy, cx, cy in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def inverse(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def project(self, points_cam) -> np.ndarray:
        """Project camera-frame points (positive depth) to pixel coordinates."""
        pts = np.asarray(points_cam, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        if np.any(pts[:, 2] <= 0):
            raise ValueError("point behind camera")
        u = self.fx * pts[:, 0] / pts[:, 2] + self.cx
        v = self.fy * pts[:, 1] / pts[:, 2] + self.cy
        uv = np.stack([u, v], axis=1)
        return uv[0] if single else uv


def look_at_rotation(position, target=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Zero-roll world-to-camera rotation for a camera at `position` looking
    at `target`; camera y points as far down (world -z) as possible."""
    position = np.asarray(position, dtype=float)
    fwd = np.asarray(target, dtype=float) - position
    n = float(np.linalg.norm(fwd))
    if n < 1e-12:
        raise ValueError("camera position coincides with target")
    fwd = fwd / n
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(fwd, up)
    nx = float(np.linalg.norm(x))
    if nx < 1e-9:
        # Looking straight up/down: pick a fixed horizontal reference.
        x = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nx = float(np.linalg.norm(x))
    x = x / nx
    y = np.cross(fwd, x)
    return np.stack([x, y, fwd], axis=0)


@dataclass(frozen=True)
class HemispherePose:
    """Camera viewpoint on the upper view hemisphere around the object.

    azimuth in [0, 2pi), elevation in (0, pi/2] measured up from the world
    xy-plane, roll in [-pi, pi] about the optical axis, radius in meters.
    The optical axis always points at the hemisphere center (world origin).
    """

    azimuth: float
    elevation: float
    roll: float
    radius: float

    def __post_init__(self):
        if not (self.radius > 0):
            raise ValueError("radius must be positive")
        if not (0.0 < self.elevation <= math.pi / 2 + 1e-12):
            raise ValueError("elevation must lie in (0, pi/2]")

    def camera_position(self) -> np.ndarray:
        ce = math.cos(self.elevation)
        return self.radius * np.array(
            [ce * math.cos(self.azimuth), ce * math.sin(self.azimuth), math.sin(self.elevation)]
        )

    def camera_pose(self) -> RigidTransform:
        pos = self.camera_position()
        R0 = look_at_rotation(pos)
        c, s = math.cos(self.roll), math.sin(self.roll)
        Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        R = Rz @ R0
        return RigidTransform(R, -R @ pos)


def camera_to_hemisphere(pose: RigidTransform) -> HemispherePose:
    """Recover (azimuth, elevation, roll, radius) for an object-facing camera.

    Inverse of HemispherePose.camera_pose for cameras whose optical axis hits
    the origin; used for trajectory logging, where servoed cameras may also
    sit below the equator (elevation is then reported negative).
    """
    c = pose.camera_center()
    radius = float(np.linalg.norm(c))
    if radius < 1e-12:
        raise ValueError("camera at the hemisphere center")
    elevation = math.asin(max(-1.0, min(1.0, c[2] / radius)))
    azimuth = math.atan2(c[1], c[0]) % (2.0 * math.pi)
    R0 = look_at_rotation(c)
    Rz = pose.R @ R0.T
    roll = math.atan2(Rz[1, 0], Rz[0, 0])
    hp = object.__new__(HemispherePose)
    object.__setattr__(hp, "azimuth", azimuth)
    object.__setattr__(hp, "elevation", elevation)
    object.__setattr__(hp, "roll", roll)
    object.__setattr__(hp, "radius", radius)
    return hp


def sample_hemisphere(
    rng: np.random.Generator,
    radius_range=(0.4, 0.6),
    elevation_range=(0.2, 1.35),
) -> HemispherePose:
    """Draw a viewpoint area-uniform on the spherical band, roll uniform.

    Area uniformity on the cap means sin(elevation) is uniform between the
    band limits.  Draw order is fixed (azimuth, elevation, roll, radius) so a
    seeded generator reproduces the exact sequence.
    """
    r_lo, r_hi = radius_range
    e_lo, e_hi = elevation_range
    if r_lo > r_hi or e_lo > e_hi:
        raise ValueError("empty sampling range")
    if r_lo <= 0:
        raise ValueError("radius must be positive")
    if not (0.0 < e_lo and e_hi <= math.pi / 2 + 1e-12):
        raise ValueError("elevation range must lie in (0, pi/2]")
    azimuth = float(rng.uniform(0.0, 2.0 * math.pi))
    elevation = math.asin(float(rng.uniform(math.sin(e_lo), math.sin(e_hi))))
    elevation = min(max(elevation, e_lo), e_hi)
    roll = float(rng.uniform(-math.pi, math.pi))
    radius = float(rng.uniform(r_lo, r_hi))
    return HemispherePose(azimuth, elevation, roll, radius)


def centering_params(
    K: CameraIntrinsics,
    object_center_cam,
    apparent_size_px: float,
    target_size_px: float,
):
    """Rotation and scale that center an object and normalize its size.

    Returns (R, s): R is the minimal rotation taking the bearing of the object
    center onto the optical axis (no roll about the axis), s scales the
    apparent size to the target.
    """
    c = np.asarray(object_center_cam, dtype=float).reshape(3)
    if c[2] <= 0:
        raise ValueError("object center must be in front of the camera")
    if apparent_size_px <= 0 or target_size_px <= 0:
        raise ValueError("sizes must be positive")
    b = c / np.linalg.norm(c)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(b, z)
    n = float(np.linalg.norm(axis))
    if n < 1e-12:
        R = np.eye(3)
    else:
        angle = math.acos(max(-1.0, min(1.0, float(b @ z))))
        R = rotation_from_axis_angle(axis / n, angle)
    return R, float(target_size_px) / float(apparent_size_px)


@dataclass(frozen=True)
class CenteringTransform:
    """Pixel-space centering homography together with its (R, s) factors.

    H maps source-view pixels to centered-view pixels:
        H = K @ diag(s, s, 1) @ R @ K^-1
    (rays are unprojected, rotated onto the axis, scaled, reprojected).
    """

    H: np.ndarray
    R: np.ndarray
    s: float

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float).reshape(3, 3).copy()
        R = np.asarray(self.R, dtype=float).reshape(3, 3).copy()
        if abs(np.linalg.det(H)) < 1e-12:
            raise ValueError("centering homography is singular")
        H.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "R", R)


def centering_homography(K: CameraIntrinsics, R, s: float) -> CenteringTransform:
    """Build the centering homography from its rotation and scale factors."""
    if s <= 0:
        raise ValueError("scale factor must be positive")
    R = np.asarray(R, dtype=float).reshape(3, 3)
    S = np.diag([s, s, 1.0])
    H = K.matrix() @ S @ R @ K.inverse()
    return CenteringTransform(H, R, float(s))


def depth_change(s: float, z: float) -> float:
    """Depth move that realizes a scale-s apparent size change: (1/s - 1) z."""
    if s <= 0:
        raise ValueError("scale factor must be positive")
    return (1.0 / s - 1.0) * z

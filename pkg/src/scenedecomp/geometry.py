"""Frames, object extrinsics and the pinhole camera.

Conventions: world up is +z with the ground plane at z = 0.  The camera frame
has x to the right, y down and z along the viewing direction, so a point at
depth ``d`` on the ray through normalized coordinate ``u`` is ``(d*u_x, d*u_y, d)``.
Object extrinsics map world points to object coordinates by
``x_obj = R^T (x - p) / s`` with ``R`` a rotation about +z by
``theta = atan2(z_sin, z_cos)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class GeometryError(ValueError):
    pass


def angle_from_two_param(z_cos: float, z_sin: float) -> float:
    """Angle in (-pi, pi] encoded by an unnormalized (cos, sin) pair."""
    if z_cos == 0 and z_sin == 0:
        raise GeometryError("degenerate rotation pair (0, 0)")
    return math.atan2(z_sin, z_cos)


def squash_scale(raw, s_min: float, s_max: float):
    """Map an unbounded value into [s_min, s_max] with a logistic squash."""
    if not s_min < s_max:
        raise GeometryError(f"scale bounds out of order: {s_min} >= {s_max}")
    return s_min + (s_max - s_min) * ad.logistic(raw)


def unsquash_scale(s: float, s_min: float, s_max: float) -> float:
    t = (s - s_min) / (s_max - s_min)
    if not 0 < t < 1:
        raise GeometryError(f"scale {s} outside open interval ({s_min}, {s_max})")
    return math.log(t / (1 - t))


def rotation_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class ObjectExtrinsics:
    position: np.ndarray
    z_cos: float = 1.0
    z_sin: float = 0.0
    raw_scale: float = 0.0
    s_min: float = 0.625
    s_max: float = 1.25

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        if not self.s_min < self.s_max:
            raise GeometryError("s_min must be below s_max")
        if self.z_cos == 0 and self.z_sin == 0:
            raise GeometryError("degenerate rotation pair (0, 0)")

    @classmethod
    def from_pose(cls, position, theta: float, scale: float, s_min: float = 0.625, s_max: float = 1.25):
        return cls(position, math.cos(theta), math.sin(theta), unsquash_scale(scale, s_min, s_max), s_min, s_max)

    @property
    def theta(self) -> float:
        return angle_from_two_param(self.z_cos, self.z_sin)

    @property
    def scale(self) -> float:
        return float(squash_scale(self.raw_scale, self.s_min, self.s_max))

    def rotation(self) -> np.ndarray:
        return rotation_z(self.theta)


def world_to_object_affine(position, z_cos, z_sin, scale):
    """``(A, b)`` with ``x_obj = A @ x + b``; arguments may be tape values.

    ``position`` is a length-3 vector (array or tape value).
    """
    r = ad.sqrt(z_cos * z_cos + z_sin * z_sin)
    c = z_cos / r
    s = z_sin / r
    inv = 1.0 / scale
    ci, si = c * inv, s * inv
    zero = 0.0 * inv
    a = ad.stack([ad.stack([ci, si, zero]),
                  ad.stack([-si, ci, zero]),
                  ad.stack([zero, zero, inv])])
    b = -ad.matmul(a, position)
    return a, b


def extrinsics_to_world_to_object(e: ObjectExtrinsics) -> np.ndarray:
    a, b = world_to_object_affine(e.position, e.z_cos, e.z_sin, e.scale)
    t = np.eye(4)
    t[:3, :3] = a
    t[:3, 3] = b
    return t


def invert_rigid_scaled(t: np.ndarray) -> np.ndarray:
    """Inverse of a 4x4 of the form [c*R, b; 0, 1] with R orthonormal."""
    a = t[:3, :3]
    c2 = float(np.mean(np.sum(a * a, axis=0)))
    ainv = a.T / c2
    out = np.eye(4)
    out[:3, :3] = ainv
    out[:3, 3] = -ainv @ t[:3, 3]
    return out


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world transform for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, float)
    fwd = np.asarray(target, float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, float))
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise GeometryError("up vector parallel to viewing direction")
    right /= n
    down = np.cross(fwd, right)
    t = np.eye(4)
    t[:3, 0], t[:3, 1], t[:3, 2], t[:3, 3] = right, down, fwd, eye
    return t


@dataclass
class CameraModel:
    cam_to_world: np.ndarray = field(default_factory=lambda: look_at((0.0, -8.0, 6.0), (0.0, 0.0, 0.0)))
    width: int = 64
    height: int = 64
    fov: float = math.radians(30.0)

    def __post_init__(self):
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64)
        if self.cam_to_world.shape != (4, 4):
            raise GeometryError("camera transform must be 4x4")
        if self.width < 1 or self.height < 1:
            raise GeometryError("image size must be positive")
        if not 0 < self.fov < math.pi:
            raise GeometryError("fov must lie in (0, pi)")

    @property
    def focal(self) -> float:
        """Focal length in pixels (vertical fov)."""
        return 0.5 * self.height / math.tan(0.5 * self.fov)

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]

    def world_to_cam(self) -> np.ndarray:
        return invert_rigid_scaled(self.cam_to_world)

    def pixel_coords(self) -> np.ndarray:
        """Normalized coordinates of all pixel centers, shape (H, W, 2)."""
        xs = (np.arange(self.width) + 0.5 - 0.5 * self.width) / self.focal
        ys = (np.arange(self.height) + 0.5 - 0.5 * self.height) / self.focal
        ux, uy = np.meshgrid(xs, ys)
        return np.stack([ux, uy], axis=-1)

    def project(self, world_pts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Continuous pixel coordinates and camera depth of world points (..., 3)."""
        p = np.asarray(world_pts, float)
        cam = (p - self.center) @ self.rotation
        z = cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = self.focal * cam[..., 0] / z + 0.5 * self.width
            py = self.focal * cam[..., 1] / z + 0.5 * self.height
        return px, py, z


def pixel_to_ray(cam: CameraModel, px) -> np.ndarray:
    """Normalized coordinate ``u`` of continuous pixel position ``(x, y)``.

    Pixel ``(row i, col j)`` has its center at ``(j + 0.5, i + 0.5)``.
    """
    x, y = float(px[0]), float(px[1])
    if not (0 <= x <= cam.width and 0 <= y <= cam.height):
        raise GeometryError(f"pixel {px} outside {cam.width}x{cam.height} image")
    return np.array([(x - 0.5 * cam.width) / cam.focal, (y - 0.5 * cam.height) / cam.focal])


def ray_point(u, depth: float) -> np.ndarray:
    return np.array([depth * u[0], depth * u[1], depth])


def camera_to_object(e: ObjectExtrinsics, cam: CameraModel) -> np.ndarray:
    return extrinsics_to_world_to_object(e) @ cam.cam_to_world


def apply(t: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, float)
    return pts @ t[:3, :3].T + t[:3, 3]


@dataclass(frozen=True)
class GroundPlane:
    """The plane z = 0 with +z up."""

    def depth_image(self, cam: CameraModel, far: float) -> np.ndarray:
        """Camera-frame depth where each pixel ray meets the plane, clipped at ``far``."""
        u = cam.pixel_coords()
        dirs = np.concatenate([u, np.ones(u.shape[:2] + (1,))], axis=-1) @ cam.rotation.T
        wz = dirs[..., 2]
        cz = cam.center[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(wz < 0, -cz / np.where(wz < 0, wz, -1.0), far)
        d = np.where(d > 0, d, far)
        return np.minimum(d, far)

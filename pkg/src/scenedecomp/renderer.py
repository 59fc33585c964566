"""Per-object SDF raycasting and z-buffered scene composition.

Rays are sampled at ``steps`` equidistant depths over the object's bounding-box
depth interval.  The first sample pair with ``phi_j > 0 >= phi_{j+1}`` brackets
the surface, whose depth is then found by linear interpolation of the two SDF
values.  The bracket search is a discrete choice made on plain values; the
interpolation is recomputed on the tape so gradients flow through the SDF values
at the bracketing samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .geometry import CameraModel, GroundPlane, ObjectExtrinsics, squash_scale, world_to_object_affine


@dataclass
class RayMarchConfig:
    steps: int = 12
    far: float = 12.0
    near: float = 0.1
    use_bbox: bool = True
    bbox_margin: float = 0.05
    snap: float = 0.125

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("ray marching needs at least 2 steps")
        if self.far <= 0 or not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")


@dataclass
class ObjectLatent:
    """One object's latent state; numeric fields may be tape values."""

    shape_code: Any
    texture_code: Any
    position: Any
    z_cos: Any = 1.0
    z_sin: Any = 0.0
    raw_scale: Any = 0.0
    s_min: float = 0.625
    s_max: float = 1.25

    @classmethod
    def from_extrinsics(cls, e: ObjectExtrinsics, shape_code=(), texture_code=()) -> "ObjectLatent":
        return cls(np.asarray(shape_code, float), np.asarray(texture_code, float), e.position.copy(),
                   e.z_cos, e.z_sin, e.raw_scale, e.s_min, e.s_max)

    @property
    def scale(self):
        return squash_scale(self.raw_scale, self.s_min, self.s_max)

    def extrinsics(self) -> ObjectExtrinsics:
        v = ad.value_of
        return ObjectExtrinsics(np.asarray(v(self.position), float), float(v(self.z_cos)), float(v(self.z_sin)),
                                float(v(self.raw_scale)), self.s_min, self.s_max)

    def plain(self) -> "ObjectLatent":
        v = ad.value_of
        return ObjectLatent(v(self.shape_code), v(self.texture_code), v(self.position), v(self.z_cos),
                            v(self.z_sin), v(self.raw_scale), self.s_min, self.s_max)

    def camera_to_object(self, cam: CameraModel):
        """``(M, c)`` with ``x_obj = M @ x_cam + c``."""
        a, b = world_to_object_affine(self.position, self.z_cos, self.z_sin, self.scale)
        m = ad.matmul(a, cam.rotation)
        c = ad.matmul(a, cam.center) + b
        return m, c


@dataclass
class Roi:
    rows: slice
    cols: slice
    t_near: float
    t_far: float

    @property
    def empty(self) -> bool:
        return self.rows.stop <= self.rows.start or self.cols.stop <= self.cols.start

    @property
    def n_pixels(self) -> int:
        return 0 if self.empty else (self.rows.stop - self.rows.start) * (self.cols.stop - self.cols.start)


EMPTY_ROI = Roi(slice(0, 0), slice(0, 0), 0.0, 0.0)


def bbox_corners_world(obj: ObjectLatent, half_extent) -> np.ndarray:
    e = obj.extrinsics()
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
    local = signs * np.asarray(half_extent, float)
    return e.scale * local @ e.rotation().T + e.position


def project_bbox_roi(obj: ObjectLatent, cam: CameraModel, half_extent, cfg: RayMarchConfig) -> Roi:
    """Pixel rectangle and depth interval covering the posed bounding box."""
    corners = bbox_corners_world(obj, np.asarray(half_extent) * (1.0 + cfg.bbox_margin))
    px, py, depth = cam.project(corners)
    if np.all(depth <= cfg.near):
        return EMPTY_ROI
    if np.any(depth <= cfg.near):
        rows, cols = slice(0, cam.height), slice(0, cam.width)
        t_near = cfg.near
    else:
        c0 = max(0, math.floor(px.min() - 0.5))
        c1 = min(cam.width, math.ceil(px.max() + 0.5))
        r0 = max(0, math.floor(py.min() - 0.5))
        r1 = min(cam.height, math.ceil(py.max() + 0.5))
        if c1 <= c0 or r1 <= r0:
            return EMPTY_ROI
        rows, cols = slice(r0, r1), slice(c0, c1)
        t_near = max(cfg.near, math.floor(depth.min() / cfg.snap) * cfg.snap)
    t_far = min(cfg.far, math.ceil(depth.max() / cfg.snap) * cfg.snap)
    if t_near >= t_far:
        return EMPTY_ROI
    return Roi(rows, cols, float(t_near), float(t_far))


def full_roi(cam: CameraModel, cfg: RayMarchConfig) -> Roi:
    return Roi(slice(0, cam.height), slice(0, cam.width), cfg.near, cfg.far)


@dataclass
class MarchResult:
    hit: np.ndarray           # bool (P,)
    depth: Any                # (P,) with far at misses; tape value when differentiable
    bracket: np.ndarray       # int (P,), -1 for miss, N for immediate hit


def _directions(m, ux: np.ndarray, uy: np.ndarray):
    return tuple(m[i, 0] * ux + m[i, 1] * uy + m[i, 2] for i in range(3))


def _points(v, c, d):
    return tuple(v[i] * d + c[i] for i in range(3))


def ray_march_zero_crossing(sdf, m, c, u: np.ndarray, t_near: float, t_far: float,
                            cfg: RayMarchConfig) -> MarchResult:
    """March rays ``x = (d u, d)`` (camera frame) through ``sdf`` (object frame).

    ``sdf(pts)`` evaluates object-frame points; ``(m, c)`` maps camera to object
    coordinates and may hold tape values.  Returns per-ray depth (``far`` on miss).
    """
    n = cfg.steps
    ux, uy = u[:, 0], u[:, 1]
    d = t_near + (t_far - t_near) * np.arange(n) / (n - 1)
    step = (t_far - t_near) / (n - 1)
    mv, cv = ad.value_of(m), ad.value_of(c)
    v_plain = _directions(mv, ux[:, None], uy[:, None])
    phi = np.asarray(ad.value_of(sdf(_points(v_plain, cv, d[None, :]), plain=True)))

    pair = (phi[:, :-1] > 0) & (phi[:, 1:] <= 0)
    has = pair.any(axis=1)
    first = np.argmax(pair, axis=1)
    immediate = phi[:, 0] <= 0
    bracketed = has & ~immediate
    hit = immediate | has
    bracket = np.where(immediate, n, np.where(has, first, -1))

    tape = ad.tape_of(m, c)
    if tape is not None:
        tape.record_decision("bracket", bracket)

    depth = np.full(len(u), cfg.far)
    sel = np.flatnonzero(bracketed)
    if sel.size:
        da = d[first[sel]]
        db = d[first[sel] + 1]
        dpair = np.stack([da, db], axis=1)
        v = _directions(m, ux[sel][:, None], uy[sel][:, None])
        pts = _points(v, c, dpair)
        phi2 = sdf(pts, plain=False)
        pa, pb = phi2[:, 0], phi2[:, 1]
        gap = ad.value_of(pa) - ad.value_of(pb)
        if np.any(gap <= 0):
            raise RuntimeError("bracket lost its sign change between passes")
        dstar = da + step * pa / (pa - pb)
        imm = np.flatnonzero(immediate)
        idx = np.concatenate([sel, imm])
        vals = ad.concatenate([dstar, np.full(imm.size, t_near)]) if imm.size else dstar
        depth = ad.scatter(depth, idx, vals)
    else:
        depth[immediate] = t_near
    return MarchResult(hit, depth, bracket)


@dataclass
class ObjectRender:
    color: Any        # (H, W, 3)
    depth: Any        # (H, W); far where mask is 0
    mask: np.ndarray  # bool (H, W)
    roi: Roi

    @property
    def color_value(self) -> np.ndarray:
        return np.asarray(ad.value_of(self.color))

    @property
    def depth_value(self) -> np.ndarray:
        return np.asarray(ad.value_of(self.depth))


def empty_render(cam: CameraModel, cfg: RayMarchConfig) -> ObjectRender:
    return ObjectRender(np.zeros((cam.height, cam.width, 3)), np.full((cam.height, cam.width), cfg.far),
                        np.zeros((cam.height, cam.width), bool), EMPTY_ROI)


def render_object(obj: ObjectLatent, cam: CameraModel, cfg: RayMarchConfig, shape_field, texture_field,
                  roi: Roi | None = None) -> ObjectRender:
    """Raycast one object: depth, occlusion mask and color at every pixel."""
    code = obj.shape_code
    if len(np.atleast_1d(ad.value_of(code))) != shape_field.code_dim and shape_field.code_dim:
        raise ValueError(f"shape code has wrong length for field (expected {shape_field.code_dim})")
    if roi is None:
        roi = project_bbox_roi(obj, cam, shape_field.half_extent(ad.value_of(code)), cfg) if cfg.use_bbox \
            else full_roi(cam, cfg)
    tape = ad.tape_of(obj.position, obj.z_cos, obj.z_sin, obj.raw_scale, obj.shape_code, obj.texture_code)
    if tape is not None:
        tape.record_decision("roi", [roi.rows.start, roi.rows.stop, roi.cols.start, roi.cols.stop,
                                     roi.t_near, roi.t_far])
    if roi.empty:
        return empty_render(cam, cfg)

    H, W = cam.height, cam.width
    uv = cam.pixel_coords()[roi.rows, roi.cols].reshape(-1, 2)
    rr, cc = np.meshgrid(np.arange(roi.rows.start, roi.rows.stop), np.arange(roi.cols.start, roi.cols.stop),
                         indexing="ij")
    flat_idx = (rr * W + cc).ravel()

    m, c = obj.camera_to_object(cam)
    plain_code = ad.value_of(code)

    def sdf(pts, plain):
        return shape_field.sdf(plain_code if plain else code, pts)

    res = ray_march_zero_crossing(sdf, m, c, uv, roi.t_near, roi.t_far, cfg)
    mask = np.zeros(H * W, bool)
    mask[flat_idx[res.hit]] = True
    mask = mask.reshape(H, W)

    depth_full = ad.scatter(np.full(H * W, cfg.far), flat_idx, res.depth)
    depth_img = ad.reshape(depth_full, (H, W))

    color_img = np.zeros((H, W, 3))
    hit_idx = np.flatnonzero(res.hit)
    if hit_idx.size:
        dhit = res.depth[hit_idx]
        v = _directions(m, uv[hit_idx, 0], uv[hit_idx, 1])
        pts = _points(v, c, dhit)
        rgb = texture_field.rgb(obj.texture_code, pts)
        color_flat = ad.scatter(np.zeros((H * W, 3)), flat_idx[hit_idx], rgb)
        color_img = ad.reshape(color_flat, (H, W, 3))
    return ObjectRender(color_img, depth_img, mask, roi)


@dataclass
class SceneRender:
    color: Any                 # (H, W, 3)
    depth: Any                 # (H, W)
    masks: list                # per object bool (H, W), visible ownership only
    background_mask: np.ndarray
    provenance: np.ndarray     # int (H, W): winning object index, -1 for background

    @property
    def color_value(self) -> np.ndarray:
        return np.asarray(ad.value_of(self.color))

    @property
    def depth_value(self) -> np.ndarray:
        return np.asarray(ad.value_of(self.depth))

    def instance_ids(self) -> np.ndarray:
        """uint8 raster: 0 background, k+1 for object k."""
        return (self.provenance + 1).astype(np.uint8)


def compose_scene(renders: Sequence[ObjectRender], background, cam: CameraModel,
                  ground: GroundPlane = GroundPlane(), far: float = 12.0) -> SceneRender:
    """Z-buffer object renders over the ground plane (lowest index wins ties)."""
    H, W = cam.height, cam.width
    for r in renders:
        if r.depth_value.shape != (H, W) or r.color_value.shape != (H, W, 3):
            raise ValueError("render dimensions do not match the camera")
    plane = ground.depth_image(cam, far)
    k = len(renders)
    bg = ad.reshape(background, (1, 1, 3)) * np.ones((H, W, 1))
    if k:
        depths = np.stack([r.depth_value for r in renders])
        best = np.argmin(depths, axis=0)
        best_d = np.take_along_axis(depths, best[None], axis=0)[0]
        winner = np.where(best_d < plane, best, k)
    else:
        winner = np.full((H, W), 0)
    depth = ad.choose(winner, [r.depth for r in renders] + [plane])
    color = ad.choose(winner, [r.color for r in renders] + [bg])
    masks = [winner == i for i in range(k)]
    provenance = np.where(winner == k, -1, winner)
    return SceneRender(color, depth, masks, winner == k, provenance)


def render_scene(objects: Sequence[ObjectLatent], background, cam: CameraModel, cfg: RayMarchConfig,
                 shape_fields: Sequence, texture_fields: Sequence,
                 ground: GroundPlane = GroundPlane()) -> tuple[SceneRender, list[ObjectRender]]:
    renders = [render_object(o, cam, cfg, sf, tf) for o, sf, tf in zip(objects, shape_fields, texture_fields)]
    return compose_scene(renders, background, cam, ground, cfg.far), renders

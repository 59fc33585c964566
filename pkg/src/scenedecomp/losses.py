"""Reconstruction and regularization objectives for scene fitting."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .geometry import CameraModel
from .renderer import ObjectLatent, RayMarchConfig, render_scene


@dataclass
class LossWeights:
    image: float = 1.0
    depth: float = 0.1
    ground: float = 0.01
    shape_start: float = 0.025
    shape_end: float = 0.0025
    shape_steps: int = 500_000
    in_view: float = 0.005
    intersection: float = 0.001

    def __post_init__(self):
        vals = (self.image, self.depth, self.ground, self.shape_start, self.shape_end, self.in_view,
                self.intersection)
        if min(vals) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.shape_steps < 1:
            raise ValueError("shape weight schedule needs a positive step budget")

    def shape(self, step: int) -> float:
        """Shape-regularizer weight: linear from start to end, then held."""
        f = min(max(step, 0) / self.shape_steps, 1.0)
        return (1.0 - f) * self.shape_start + f * self.shape_end

    @classmethod
    def shapenet(cls, **kw) -> "LossWeights":
        base = dict(depth=0.05, shape_start=0.1, shape_end=0.01)
        base.update(kw)
        return cls(**base)


@dataclass
class BlurSchedule:
    length: int = 16
    sigma_start: float = 16 / 3
    sigma_end: float = 0.5
    steps: int = 250_000

    def sigma(self, step: int) -> float:
        f = min(max(step, 0) / self.steps, 1.0)
        return (1.0 - f) * self.sigma_start + f * self.sigma_end


def gaussian_kernel(sigma: float, length: int = 16) -> np.ndarray:
    """Normalized sampled Gaussian; even lengths are centered between samples."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if length < 1:
        raise ValueError("kernel length must be positive")
    x = np.arange(length) - (length - 1) / 2
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


@lru_cache(maxsize=256)
def blur_matrix(n: int, sigma: float, length: int = 16) -> np.ndarray:
    """Dense (n, n) operator of a 1-d blur with replicate padding.

    Output sample i reads inputs ``i + k - length // 2`` for kernel tap k.
    """
    w = gaussian_kernel(sigma, length)
    b = np.zeros((n, n))
    rows = np.arange(n)
    for k, wk in enumerate(w):
        cols = np.clip(rows + k - length // 2, 0, n - 1)
        np.add.at(b, (rows, cols), wk)
    b.flags.writeable = False
    return b


def gaussian_blur(image, sigma: float, length: int = 16):
    """Separable blur of an (H, W) or (H, W, C) image (plain or tape value)."""
    shape = ad.value_of(image).shape
    bh = blur_matrix(shape[0], float(sigma), length)
    bw = blur_matrix(shape[1], float(sigma), length)
    return ad.linear(image, lambda x: _separable(x, bh, bw), lambda g: _separable(g, bh.T, bw.T))


def _separable(x: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """``rows @ x @ cols.T`` applied per channel."""
    if x.ndim == 2:
        return rows @ x @ cols.T
    h, w, c = x.shape
    y = (rows @ x.reshape(h, w * c)).reshape(h, w, c)
    return np.matmul(cols, y)


def _check_same(a, b):
    sa, sb = ad.value_of(a).shape, np.shape(ad.value_of(b))
    if sa != sb:
        raise ValueError(f"shape mismatch {sa} vs {sb}")


def loss_image(pred, target, sigma: float, length: int = 16):
    _check_same(pred, target)
    diff = gaussian_blur(pred, sigma, length) - gaussian_blur(np.asarray(ad.value_of(target)), sigma, length)
    h, w = np.shape(ad.value_of(pred))[:2]
    return ad.sum(diff * diff) / float(h * w)


def loss_depth(pred, target, sigma: float, length: int = 16):
    _check_same(pred, target)
    diff = gaussian_blur(pred, sigma, length) - gaussian_blur(np.asarray(ad.value_of(target)), sigma, length)
    return ad.mean(ad.abs(diff))


def object_sdf_world(obj: ObjectLatent, shape_field, pts_world):
    """World-unit signed distance of ``obj`` at world points ``(x, y, z)``."""
    from .geometry import world_to_object_affine

    scale = obj.scale
    a, b = world_to_object_affine(obj.position, obj.z_cos, obj.z_sin, scale)
    x, y, z = pts_world
    local = tuple(a[i, 0] * x + a[i, 1] * y + a[i, 2] * z + b[i] for i in range(3))
    return scale * shape_field.sdf(obj.shape_code, local)


def loss_ground(objects: Sequence[ObjectLatent], shape_fields: Sequence):
    total = 0.0
    for obj, sf in zip(objects, shape_fields):
        pz = obj.position[2]
        foot = (obj.position[0], obj.position[1], 0.0 * pz)
        phi = object_sdf_world(obj, sf, foot)
        total = total + ad.maximum(0.0, -pz) + ad.maximum(0.0, -phi)
    return total


def loss_shape_reg(objects: Sequence[ObjectLatent]):
    total = 0.0
    for obj in objects:
        code = obj.shape_code
        if np.size(ad.value_of(code)):
            total = total + ad.sum(code * code)
    return total


def loss_in_view(objects: Sequence[ObjectLatent], cam: CameraModel, width: float | None = None,
                 height: float | None = None, use_y: bool = True, near: float = 1e-6):
    """Hinge on projected object centers leaving the image (behind camera: full width)."""
    w = float(cam.width if width is None else width)
    h = float(cam.height if height is None else height)
    rot = cam.rotation
    total = 0.0
    for obj in objects:
        rel = obj.position - cam.center
        xc, yc, zc = (ad.sum(rel * rot[:, i]) for i in range(3))
        if float(ad.value_of(zc)) <= near:
            total = total + (w + h if use_y else w)
            continue
        px = cam.focal * xc / zc + 0.5 * cam.width
        total = total + ad.maximum(-ad.minimum(px, w - px), 0.0)
        if use_y:
            py = cam.focal * yc / zc + 0.5 * cam.height
            total = total + ad.maximum(-ad.minimum(py, h - py), 0.0)
    return total


def _order_key(obj: ObjectLatent) -> tuple:
    parts = (obj.position, obj.z_cos, obj.z_sin, obj.raw_scale, obj.shape_code)
    return tuple(np.concatenate([np.ravel(ad.value_of(v)) for v in parts]).tolist())


def loss_intersection(objects: Sequence[ObjectLatent], shape_fields: Sequence, k: int = 10):
    """Penalize negative SDF sums at ``k`` points strictly between object centers.

    Pairs are oriented and summed in a canonical order of the latents, so the
    value is bitwise independent of the object order.
    """
    if k < 1:
        raise ValueError("need at least one sample point")
    t = np.arange(1, k + 1) / (k + 1)
    keys = [_order_key(o) for o in objects]
    pairs = []
    for i in range(len(objects)):
        for j in range(i):
            a, b = (i, j) if keys[i] <= keys[j] else (j, i)
            pairs.append((keys[a], keys[b], a, b))
    total = 0.0
    for _, _, a, b in sorted(pairs, key=lambda p: (p[0], p[1])):
        pa, pb = objects[a].position, objects[b].position
        pts = tuple(pa[c] + t * (pb[c] - pa[c]) for c in range(3))
        s = object_sdf_world(objects[a], shape_fields[a], pts) + object_sdf_world(objects[b], shape_fields[b], pts)
        total = total + ad.mean(ad.maximum(-s, 0.0))
    return total


TERMS = ("image", "depth", "ground", "shape", "in_view", "intersection")


@dataclass
class LossReport:
    step: int
    terms: dict
    total: float
    gradient: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    weights: dict = field(default_factory=dict)

    def to_json(self) -> str:
        rec = {"step": self.step, **{k: float(v) for k, v in self.terms.items()}, "total": float(self.total)}
        return json.dumps(rec, sort_keys=True)


def scene_loss(objects, background, target_rgb, target_depth, cam: CameraModel, cfg: RayMarchConfig,
               weights: LossWeights, step: int, shape_fields, texture_fields, blur: BlurSchedule,
               enabled: Sequence[str] = TERMS):
    """Weighted objective on whatever tape the latents live on; returns (total, terms, render)."""
    render, _ = render_scene(objects, background, cam, cfg, shape_fields, texture_fields)
    sigma = blur.sigma(step)
    lam = {"image": weights.image, "depth": weights.depth, "ground": weights.ground,
           "shape": weights.shape(step), "in_view": weights.in_view, "intersection": weights.intersection}
    terms = {}
    if "image" in enabled:
        terms["image"] = loss_image(render.color, target_rgb, sigma, blur.length)
    if "depth" in enabled:
        terms["depth"] = loss_depth(render.depth, target_depth, sigma, blur.length)
    if "ground" in enabled:
        terms["ground"] = loss_ground(objects, shape_fields)
    if "shape" in enabled:
        terms["shape"] = loss_shape_reg(objects)
    if "in_view" in enabled:
        terms["in_view"] = loss_in_view(objects, cam)
    if "intersection" in enabled:
        terms["intersection"] = loss_intersection(objects, shape_fields)
    total = 0.0
    for name, val in terms.items():
        total = total + lam[name] * val
    return total, terms, render, lam


def total_loss(latent, target_rgb, target_depth, cfg: RayMarchConfig, weights: LossWeights, step: int,
               blur: BlurSchedule | None = None, enabled: Sequence[str] = TERMS) -> LossReport:
    """Render ``latent`` on a fresh tape and return every term plus the gradient.

    ``latent`` is a :class:`~scenedecomp.scene.SceneLatent`; the gradient is with
    respect to its flat parameter vector (``latent.to_vector()``).
    """
    blur = blur or BlurSchedule()
    tape = ad.Tape()
    leaf = tape.variable(latent.to_vector())
    objects, background, sfs, tfs = latent.unpack(leaf)
    total, terms, _, lam = scene_loss(objects, background, target_rgb, target_depth, latent.camera, cfg, weights,
                                      step, sfs, tfs, blur, enabled)
    if isinstance(total, ad.DiffValue):
        grad = ad.gradient_of(total, [leaf])
    else:
        grad = np.zeros(leaf.value.size)
    return LossReport(step, {k: float(ad.value_of(v)) for k, v in terms.items()}, float(ad.value_of(total)),
                      grad, lam)

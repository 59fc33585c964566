"""Shared builders for the test suite."""
from __future__ import annotations

import itertools

import numpy as np

from scenedecomp.datagen import GeneratorConfig, render_ground_truth, sample_scene
from scenedecomp.geometry import CameraModel, GroundPlane, ObjectExtrinsics
from scenedecomp.losses import gaussian_kernel
from scenedecomp.metrics import iou
from scenedecomp.scene import SceneLatent, SceneObject
from scenedecomp.shapes import AnalyticShape


def generated(count: int, seed: int, size: int = 64, salt: int = 2024):
    """A generator scene with its ground-truth rasters: ``(scene, cfg, rgb, depth, ids)``."""
    cfg = GeneratorConfig(width=size, height=size)
    scene = sample_scene(count, np.random.default_rng([salt, count, seed]), cfg)
    rgb, depth, ids = render_ground_truth(scene, cfg)
    return scene, cfg, rgb, depth, ids


def sphere_scene(positions, radius_scale: float = 1.0, colors=None, cam: CameraModel | None = None) -> SceneLatent:
    """Unit spheres (radius 0.4 * scale) at the given world positions."""
    objs = []
    for k, p in enumerate(positions):
        color = colors[k] if colors is not None else (0.2 + 0.1 * k, 0.5, 0.8 - 0.1 * k)
        ext = ObjectExtrinsics.from_pose(p, 0.0, radius_scale)
        objs.append(SceneObject(AnalyticShape("sphere"), tuple(color), ext))
    return SceneLatent.with_background(objs, (0.6, 0.6, 0.6), camera=cam or CameraModel())


def box(r0, r1, c0, c1, shape=(40, 40)) -> np.ndarray:
    m = np.zeros(shape, bool)
    m[r0:r1, c0:c1] = True
    return m


def dense_blur_oracle(img, sigma, length=16):
    """Direct 2-d convolution over an explicitly replicate-padded image."""
    w = gaussian_kernel(sigma, length)
    k2 = np.outer(w, w)
    lo, hi = length // 2, length - 1 - length // 2
    pad = [(lo, hi), (lo, hi)] + [(0, 0)] * (img.ndim - 2)
    p = np.pad(img, pad, mode="edge")
    out = np.zeros_like(img, dtype=float)
    h, wd = img.shape[:2]
    for a in range(length):
        for b in range(length):
            out += k2[a, b] * p[a:a + h, b:b + wd]
    return out


def brute_force_ids(per_object, cam, far=12.0):
    """Winner per pixel by direct argmin over per-object depths and the plane (0 = background)."""
    plane = GroundPlane().depth_image(cam, far)
    ids = np.zeros(plane.shape, np.uint8)
    best = plane.copy()
    for k, r in enumerate(per_object):
        d = np.where(r.mask, r.depth_value, np.inf)
        closer = d < best
        ids[closer] = k + 1
        best = np.where(closer, d, best)
    return ids


def brute_force_tp(pred, gt, tau):
    """Largest one-to-one assignment with IoU >= tau; also returns the IoU table."""
    table = np.array([[iou(p, g) for g in gt] for p in pred]).reshape(len(pred), len(gt))
    best = 0
    n = max(len(pred), len(gt))
    for perm in itertools.permutations(range(n), len(pred)):
        best = max(best, sum(1 for i, j in enumerate(perm) if j < len(gt) and table[i, j] >= tau))
    return best, table


def ssim_direct(a, b, win=7, k1=0.01, k2=0.03):
    """Window-by-window SSIM (unit data range, sample statistics)."""
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            x = a[i:i + win, j:j + win].ravel()
            y = b[i:i + win, j:j + win].ravel()
            mx, my = x.mean(), y.mean()
            vx, vy = x.var(ddof=1), y.var(ddof=1)
            cxy = np.cov(x, y, ddof=1)[0, 1]
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))

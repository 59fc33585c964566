"""Analysis-by-synthesis scene fitting, latent editing and collision-checked pose sampling.

Scenes are explained one slot at a time: each new slot is seeded at the peak of
the blurred residual between the target and the current render, then all active
latents are refined jointly with Adam.  A final joint refinement is followed by
pruning of slots that do not reduce the loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .geometry import CameraModel, ObjectExtrinsics, pixel_to_ray
from .losses import TERMS, BlurSchedule, LossReport, LossWeights, gaussian_blur, total_loss
from .renderer import RayMarchConfig, SceneRender
from .scene import SceneLatent, SceneObject, ground_penalty, object_half_extent, pair_clear, pair_intersection
from .shapes import HALF, AnalyticShape


class FullyExplained(Exception):
    """Raised when no pixel is left for a new slot to explain."""


class PoseRejected(Exception):
    """Raised when no collision-free pose was found within the attempt budget."""


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float | np.ndarray = 1e-4     # scalar or per-coordinate
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)

    def step(self, params, grads) -> np.ndarray:
        return adam_step(self, params, grads)


def adam_step(state: AdamState, params, grads) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state`` and returns new params."""
    params = np.asarray(params, float)
    grads = np.asarray(grads, float)
    if params.shape != state.m.shape or grads.shape != state.m.shape:
        raise ValueError(f"dimension mismatch: state {state.m.shape}, params {params.shape}, grads {grads.shape}")
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class FitConfig:
    slots: int = 3
    steps_per_slot: int = 150
    final_steps: int = 250
    lr: float = 1e-2
    shape_lr_factor: float = 0.1
    seed: int = 0
    init_color: str = "target"          # "target" or "neutral"
    residual_sigma: float = 1.0
    residual_threshold: float = 0.05
    prune: bool = True
    merge_steps: int = 60               # refit budget when testing whether a slot is redundant (0 disables)
    blur_mode: str = "global"           # "global": one ramp over the fit; "phase": restart per slot
    blur_steps: int | None = None       # global ramp length; defaults to the slot phases
    render: RayMarchConfig = field(default_factory=RayMarchConfig)
    weights: LossWeights | None = None
    blur: BlurSchedule | None = None
    terms: tuple = TERMS

    def __post_init__(self):
        if self.slots < 1:
            raise ValueError("need at least one slot")
        if self.merge_steps < 0:
            raise ValueError("merge_steps must be non-negative")
        if self.steps_per_slot < 1 or self.final_steps < 1:
            raise ValueError("step budgets must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.blur_steps is not None and self.blur_steps < 1:
            raise ValueError("blur_steps must be positive")
        if self.blur_mode not in ("global", "phase"):
            raise ValueError(f"unknown blur_mode {self.blur_mode!r}")
        if self.init_color not in ("target", "neutral"):
            raise ValueError(f"unknown init_color {self.init_color!r}")

    @property
    def total_steps(self) -> int:
        return self.slots * self.steps_per_slot + self.final_steps

    def schedules(self) -> tuple[LossWeights, BlurSchedule]:
        """Weights and blur with their ramps rescaled to this fit's budget."""
        w = self.weights or LossWeights()
        b = self.blur or BlurSchedule()
        if self.blur_mode == "phase":
            ramp = self.steps_per_slot
        else:
            ramp = self.blur_steps if self.blur_steps is not None else self.slots * self.steps_per_slot
        return replace(w, shape_steps=self.total_steps), replace(b, steps=ramp)


# ---------------------------------------------------------------------------
# slot initialization
# ---------------------------------------------------------------------------

def residual_map(target_rgb, target_depth, current: SceneRender, sigma: float = 1.0) -> np.ndarray:
    """Blurred color residual norm plus blurred absolute depth residual."""
    dc = np.linalg.norm(np.asarray(target_rgb, float) - current.color_value, axis=-1)
    dd = np.abs(np.asarray(target_depth, float) - current.depth_value)
    return gaussian_blur(dc, sigma) + gaussian_blur(dd, sigma)


def init_next_slot(target_rgb, target_depth, current: SceneRender, cam: CameraModel, threshold: float = 0.05,
                   sigma: float = 1.0, s_min: float = 0.625, s_max: float = 1.25) -> tuple[ObjectExtrinsics, tuple]:
    """Seed extrinsics at the strongest unexplained pixel.

    Returns ``(extrinsics, (row, col))``.  The pixel is back-projected with the
    target depth and the seed sits on the ground projection of that point,
    lifted to the resting height of a neutral shape at mid-range scale.
    """
    r = residual_map(target_rgb, target_depth, current, sigma)
    i, j = np.unravel_index(int(np.argmax(r)), r.shape)
    if r[i, j] <= threshold:
        raise FullyExplained(f"largest residual {r[i, j]:.4g} is below {threshold}")
    u = pixel_to_ray(cam, (j + 0.5, i + 0.5))
    d = float(np.asarray(target_depth)[i, j])
    world = cam.rotation @ np.array([d * u[0], d * u[1], d]) + cam.center
    scale = 0.5 * (s_min + s_max)
    seed = np.array([world[0], world[1], HALF * scale])
    return ObjectExtrinsics(seed, 1.0, 0.0, 0.0, s_min, s_max), (int(i), int(j))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    scene: SceneLatent
    history: list
    best_loss: float
    init_loss: float


def _new_slot(scene: SceneLatent, ext: ObjectExtrinsics, color) -> SceneObject:
    shape = np.zeros(scene.shape_space.code_dim)
    if color is None:
        tex = np.zeros(scene.texture_space.code_dim)
    else:
        tex = scene.texture_space.encode(color)
    return SceneObject(shape, tex, ext)


def _final_loss(scene, rgb, depth, cfg: FitConfig, weights, blur) -> float:
    step = cfg.total_steps
    return total_loss(scene, rgb, depth, cfg.render, weights, step, blur, cfg.terms).total


def _optimize(scene: SceneLatent, rgb, depth, cfg: FitConfig, weights, blur, steps: int, step0: int,
              blur_step: Callable[[int], int], history: list, log=None):
    vec = scene.to_vector()
    lr = np.where(scene.group_mask("shape"), cfg.lr * cfg.shape_lr_factor, cfg.lr)
    opt = AdamState.zeros(vec.size, lr=lr)
    best_vec, best = vec.copy(), math.inf
    for k in range(steps):
        step = step0 + k
        rep = total_loss(scene, rgb, depth, cfg.render, weights, step, _shift(blur, step, blur_step(k)), cfg.terms)
        rep.step = step
        history.append(rep)
        if log is not None:
            log(rep)
        if rep.total < best and blur_step(k) >= blur.steps:
            # only losses at the final sigma are comparable
            best, best_vec = rep.total, vec.copy()
        vec = opt.step(vec, rep.gradient)
        scene = scene.from_vector(vec)
    return scene, best_vec, best


def _shift(blur: BlurSchedule, step: int, local: int) -> BlurSchedule:
    """Blur schedule that reports the sigma of ``local`` at global ``step``."""
    sigma = blur.sigma(local)
    return BlurSchedule(blur.length, sigma, sigma, 1)


def fit_scene(target_rgb, target_depth, cam: CameraModel, cfg: FitConfig | None = None, shape_space=None,
              texture_space=None, log=None) -> FitResult:
    """Fit ``cfg.slots`` object latents plus a background color to a target RGB-D image.

    The blur sigma ramps from coarse to fine over ``blur_steps`` global steps
    (or restarts in every slot phase with ``blur_mode="phase"``) and then holds
    at the end sigma; the shape weight ramps over the whole budget.  Returns the
    latents with the lowest final-phase loss.
    """
    cfg = cfg or FitConfig()
    rgb = np.asarray(target_rgb, float)
    depth = np.asarray(target_depth, float)
    if rgb.shape != (cam.height, cam.width, 3) or depth.shape != (cam.height, cam.width):
        raise ValueError("target dimensions do not match the camera")
    depth = np.minimum(depth, cfg.render.far)
    weights, blur = cfg.schedules()
    kw = {}
    if shape_space is not None:
        kw["shape_space"] = shape_space
    if texture_space is not None:
        kw["texture_space"] = texture_space
    bg = np.median(rgb.reshape(-1, 3), axis=0)
    scene = SceneLatent.with_background([], bg, camera=cam, **kw)
    init_loss = _final_loss(scene, rgb, depth, cfg, weights, blur)
    history: list[LossReport] = []
    step = 0
    for _ in range(cfg.slots):
        current, _ = scene.render(cfg.render)
        try:
            ext, (i, j) = init_next_slot(rgb, depth, current, cam, cfg.residual_threshold, cfg.residual_sigma)
        except FullyExplained:
            break
        color = rgb[i, j] if cfg.init_color == "target" else None
        scene = replace(scene, objects=scene.objects + [_new_slot(scene, ext, color)])
        start = step if cfg.blur_mode == "global" else 0
        scene, _, _ = _optimize(scene, rgb, depth, cfg, weights, blur, cfg.steps_per_slot, step,
                                lambda k: start + k, history, log)
        step += cfg.steps_per_slot
    if cfg.prune and cfg.merge_steps and len(scene.active) > 1:
        scene, _ = merge_slots(scene, rgb, depth, cfg, weights, blur,
                               _final_loss(scene, rgb, depth, cfg, weights, blur))
    if cfg.blur_mode == "global":
        final_blur = lambda k: min(step + k, blur.steps)  # noqa: E731
    else:
        final_blur = lambda k: blur.steps  # noqa: E731
    scene, best_vec, best = _optimize(scene, rgb, depth, cfg, weights, blur, cfg.final_steps, step, final_blur,
                                      history, log)
    scene = scene.from_vector(best_vec)
    if cfg.prune:
        scene, best = prune_slots(scene, rgb, depth, cfg, weights, blur, best)
    if best > init_loss:
        # never worse than the background-only starting point
        scene, best = SceneLatent.with_background([], bg, camera=cam, **kw), init_loss
    return FitResult(scene, history, best, init_loss)


def prune_slots(scene: SceneLatent, rgb, depth, cfg: FitConfig, weights, blur, loss: float):
    """Disable slots whose removal does not increase the final-schedule loss."""
    for idx in range(len(scene.objects)):
        if not scene.objects[idx].enabled:
            continue
        objs = list(scene.objects)
        objs[idx] = replace(objs[idx], enabled=False)
        trial = replace(scene, objects=objs)
        val = _final_loss(trial, rgb, depth, cfg, weights, blur)
        if val <= loss:
            scene, loss = trial, val
    return scene, loss


def _footprint(scene: SceneLatent, i: int):
    e = scene.objects[i].extrinsics
    h = object_half_extent(scene, i)
    return e.position[:2], e.scale * math.hypot(h[0], h[1])


def _crowded(scene: SceneLatent, i: int, margin: float = 1.25) -> bool:
    """Whether slot ``i``'s ground circle overlaps another active slot's, with slack."""
    ci, ri = _footprint(scene, i)
    for j, o in enumerate(scene.objects):
        if j != i and o.enabled:
            cj, rj = _footprint(scene, j)
            if np.linalg.norm(ci - cj) < margin * (ri + rj):
                return True
    return False


def merge_slots(scene: SceneLatent, rgb, depth, cfg: FitConfig, weights, blur, loss: float):
    """Disable a slot when a short refit of the others does at least as well.

    This catches two slots that split one object between them, which plain
    pruning keeps because removing either half alone leaves a hole.  Only
    slots whose footprint overlaps another active slot are tried; a slot
    standing apart from the rest cannot be half of a shared object.
    """
    for idx in range(len(scene.objects)):
        if not scene.objects[idx].enabled or len(scene.active) < 2 or not _crowded(scene, idx):
            continue
        objs = list(scene.objects)
        objs[idx] = replace(objs[idx], enabled=False)
        trial = replace(scene, objects=objs)
        _, vec, val = _optimize(trial, rgb, depth, cfg, weights, blur, cfg.merge_steps, cfg.total_steps,
                                lambda k: blur.steps, [])
        if val <= loss:
            scene, loss = trial.from_vector(vec), val
    return scene, loss


def pad_slots(scene: SceneLatent, n: int) -> SceneLatent:
    """Append disabled neutral slots so the scene has ``n`` slots."""
    objs = list(scene.objects)
    while len(objs) < n:
        ext = ObjectExtrinsics(np.array([0.0, 0.0, HALF]), 1.0, 0.0, 0.0)
        objs.append(replace(_new_slot(scene, ext, None), enabled=False))
    return replace(scene, objects=objs)


# ---------------------------------------------------------------------------
# editing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SwapPositions:
    a: int
    b: int


@dataclass(frozen=True)
class RemoveObject:
    index: int


@dataclass(frozen=True)
class SetShape:
    index: int
    shape: object      # latent code or AnalyticShape


@dataclass(frozen=True)
class SetTexture:
    index: int
    texture: object    # latent code or RGB color


@dataclass(frozen=True)
class SetPose:
    index: int
    extrinsics: ObjectExtrinsics


def _check_index(scene: SceneLatent, i: int):
    if not 0 <= i < len(scene.objects):
        raise IndexError(f"slot {i} out of range for {len(scene.objects)} slots")


def apply_edit(scene: SceneLatent, edit) -> SceneLatent:
    """Return an edited copy of ``scene``; the input is left untouched.

    Swapping exchanges the ground-plane (x, y) coordinates only, so every object
    keeps its own resting height.
    """
    out = scene.copy()
    objs = out.objects
    if isinstance(edit, SwapPositions):
        _check_index(scene, edit.a)
        _check_index(scene, edit.b)
        ea, eb = objs[edit.a].extrinsics, objs[edit.b].extrinsics
        pa, pb = ea.position.copy(), eb.position.copy()
        pa[:2], pb[:2] = eb.position[:2], ea.position[:2]
        objs[edit.a] = replace(objs[edit.a], extrinsics=replace(ea, position=pa))
        objs[edit.b] = replace(objs[edit.b], extrinsics=replace(eb, position=pb))
    elif isinstance(edit, RemoveObject):
        _check_index(scene, edit.index)
        del objs[edit.index]
    elif isinstance(edit, SetShape):
        _check_index(scene, edit.index)
        shape = edit.shape if isinstance(edit.shape, AnalyticShape) else np.array(edit.shape, float)
        if not isinstance(shape, AnalyticShape) and shape.shape != (scene.shape_space.code_dim,):
            raise ValueError(f"shape code must have {scene.shape_space.code_dim} entries")
        objs[edit.index] = replace(objs[edit.index], shape=shape)
    elif isinstance(edit, SetTexture):
        _check_index(scene, edit.index)
        tex = np.array(edit.texture, float)
        if objs[edit.index].has_texture_code or len(tex) != 3:
            if tex.shape != (scene.texture_space.code_dim,):
                raise ValueError(f"texture code must have {scene.texture_space.code_dim} entries")
        else:
            tex = tuple(float(c) for c in tex)
        objs[edit.index] = replace(objs[edit.index], texture=tex)
    elif isinstance(edit, SetPose):
        _check_index(scene, edit.index)
        objs[edit.index] = replace(objs[edit.index], extrinsics=edit.extrinsics)
    else:
        raise TypeError(f"unknown edit {edit!r}")
    return replace(out, objects=objs)


def pose_is_valid(scene: SceneLatent, slot: int) -> bool:
    """Slot rests without ground penetration and clears every other enabled slot."""
    if ground_penalty(scene, slot) > 0:
        return False
    for j, o in enumerate(scene.objects):
        if j == slot or not o.enabled:
            continue
        if pair_intersection(scene, slot, j, 10) > 0 or pair_intersection(scene, slot, j, 32) > 0:
            return False
        if not pair_clear(scene, slot, j):
            return False
    return True


def sample_valid_pose(scene: SceneLatent, slot: int, rng: np.random.Generator,
                      position_range: Sequence[float] = (-1.5, 1.5), max_attempts: int = 200,
                      y_range: Sequence[float] | None = None) -> ObjectExtrinsics:
    """Rejection-sample (x, y, theta) for ``slot``, keeping its height and scale."""
    _check_index(scene, slot)
    lo, hi = float(position_range[0]), float(position_range[1])
    ylo, yhi = (lo, hi) if y_range is None else (float(y_range[0]), float(y_range[1]))
    if not (-1.5 <= lo <= hi <= 1.5 and -1.5 <= ylo <= yhi <= 1.5):
        raise ValueError("position range must lie within [-1.5, 1.5]")
    base = scene.objects[slot].extrinsics
    for _ in range(max_attempts):
        x, y = rng.uniform(lo, hi), rng.uniform(ylo, yhi)
        theta = rng.uniform(-math.pi, math.pi)
        ext = replace(base, position=np.array([x, y, base.position[2]]), z_cos=math.cos(theta),
                      z_sin=math.sin(theta))
        trial = apply_edit(scene, SetPose(slot, ext))
        if pose_is_valid(trial, slot):
            return ext
    raise PoseRejected(f"no valid pose for slot {slot} after {max_attempts} attempts")

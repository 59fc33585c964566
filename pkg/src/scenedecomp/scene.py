"""Scene description shared by the generator, the fitter and the file format."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from . import autodiff as ad
from .geometry import CameraModel, ObjectExtrinsics
from .renderer import ObjectLatent, RayMarchConfig, render_scene
from .shapes import (AnalyticShape, ConstantTexture, FieldParams, LatentColorTexture, MLPShapeSpace, MLPTexture,
                     PrimitiveShapeSpace)

FORMAT_VERSION = "scenedecomp-scene/1"


class SceneFormatError(ValueError):
    pass


@dataclass
class SceneObject:
    """``shape`` is an AnalyticShape or a latent code; ``texture`` a color or a code."""

    shape: Any
    texture: Any
    extrinsics: ObjectExtrinsics
    enabled: bool = True

    @property
    def has_shape_code(self) -> bool:
        return not isinstance(self.shape, AnalyticShape)

    @property
    def has_texture_code(self) -> bool:
        return isinstance(self.texture, np.ndarray)


def _logit(c):
    c = np.clip(np.asarray(c, float), 1e-6, 1 - 1e-6)
    return np.log(c / (1 - c))


@dataclass
class SceneLatent:
    objects: list
    background_raw: np.ndarray
    camera: CameraModel = field(default_factory=CameraModel)
    shape_space: Any = field(default_factory=PrimitiveShapeSpace)
    texture_space: Any = field(default_factory=LatentColorTexture)

    @classmethod
    def with_background(cls, objects, color, **kw) -> "SceneLatent":
        return cls(objects, _logit(color), **kw)

    @property
    def background_color(self) -> np.ndarray:
        return np.asarray(ad.logistic(self.background_raw))

    @property
    def active(self) -> list:
        return [o for o in self.objects if o.enabled]

    def encoded(self) -> "SceneLatent":
        """Copy with analytic shapes and constant colors replaced by latent codes of this scene's spaces."""
        objs = []
        for o in self.objects:
            shape = self.shape_space.encode(o.shape) if not o.has_shape_code else o.shape.copy()
            tex = self.texture_space.encode(o.texture) if not o.has_texture_code else o.texture.copy()
            objs.append(replace(o, shape=shape, texture=tex))
        return replace(self, objects=objs, background_raw=self.background_raw.copy())

    def copy(self) -> "SceneLatent":
        objs = [replace(o, shape=o.shape.copy() if o.has_shape_code else o.shape,
                        texture=o.texture.copy() if o.has_texture_code else o.texture) for o in self.objects]
        return replace(self, objects=objs, background_raw=self.background_raw.copy())

    # -- flat parameter vector ----------------------------------------------

    def _layout(self):
        out, off = [], 0
        for o in self.objects:
            ns = len(o.shape) if o.has_shape_code else 0
            nt = len(o.texture) if o.has_texture_code else 0
            out.append((off, ns, nt))
            off += ns + nt + 6
        return out, off

    def to_vector(self) -> np.ndarray:
        parts = []
        for o in self.objects:
            if o.has_shape_code:
                parts.append(o.shape)
            if o.has_texture_code:
                parts.append(o.texture)
            e = o.extrinsics
            parts.append(np.concatenate([e.position, [e.z_cos, e.z_sin, e.raw_scale]]))
        parts.append(self.background_raw)
        return np.concatenate(parts).astype(np.float64)

    def from_vector(self, vec) -> "SceneLatent":
        vec = np.asarray(vec, float)
        layout, n = self._layout()
        objs = []
        for o, (off, ns, nt) in zip(self.objects, layout):
            shape = vec[off: off + ns].copy() if ns else o.shape
            tex = vec[off + ns: off + ns + nt].copy() if nt else o.texture
            e = vec[off + ns + nt: off + ns + nt + 6]
            zc, zs = float(e[3]), float(e[4])
            if zc == 0 and zs == 0:
                zc = 1e-12
            ext = ObjectExtrinsics(e[0:3].copy(), zc, zs, float(e[5]), o.extrinsics.s_min, o.extrinsics.s_max)
            objs.append(replace(o, shape=shape, texture=tex, extrinsics=ext))
        return replace(self, objects=objs, background_raw=vec[n: n + 3].copy())

    def fields_for(self, obj: SceneObject):
        sf = self.shape_space if obj.has_shape_code else obj.shape
        if obj.has_texture_code:
            tf = self.texture_space
        else:
            tf = ConstantTexture(tuple(float(c) for c in obj.texture))
        return sf, tf

    def group_mask(self, group: str) -> np.ndarray:
        """Boolean mask over the flat vector: ``shape``, ``texture``, ``pose`` or ``background``."""
        layout, n = self._layout()
        mask = np.zeros(n + 3, bool)
        if group == "background":
            mask[n:] = True
            return mask
        for off, ns, nt in layout:
            if group == "shape":
                mask[off: off + ns] = True
            elif group == "texture":
                mask[off + ns: off + ns + nt] = True
            elif group == "pose":
                mask[off + ns + nt: off + ns + nt + 6] = True
            else:
                raise ValueError(f"unknown parameter group {group!r}")
        return mask

    def unpack(self, vec):
        """Enabled objects as :class:`ObjectLatent` views of ``vec`` (plain or tape).

        Returns ``(objects, background_color, shape_fields, texture_fields)``.
        """
        layout, n = self._layout()
        objs, sfs, tfs = [], [], []
        for o, (off, ns, nt) in zip(self.objects, layout):
            if not o.enabled:
                continue
            shape_code = vec[off: off + ns] if ns else np.zeros(0)
            tex_code = vec[off + ns: off + ns + nt] if nt else np.zeros(0)
            b = off + ns + nt
            objs.append(ObjectLatent(shape_code, tex_code, vec[b: b + 3], vec[b + 3], vec[b + 4], vec[b + 5],
                                     o.extrinsics.s_min, o.extrinsics.s_max))
            sf, tf = self.fields_for(o)
            sfs.append(sf)
            tfs.append(tf)
        return objs, ad.logistic(vec[n: n + 3]), sfs, tfs

    def object_latents(self):
        return self.unpack(self.to_vector())

    def render(self, cfg: RayMarchConfig | None = None):
        cfg = cfg or RayMarchConfig()
        objs, bg, sfs, tfs = self.object_latents()
        return render_scene(objs, bg, self.camera, cfg, sfs, tfs)

    def render_all(self, cfg: RayMarchConfig | None = None):
        """Composite of enabled objects plus per-object renders for every slot (disabled -> None)."""
        from .renderer import render_object

        cfg = cfg or RayMarchConfig()
        scene, _ = self.render(cfg)
        per = []
        for o in self.objects:
            if not o.enabled:
                per.append(None)
                continue
            ol = ObjectLatent.from_extrinsics(o.extrinsics, o.shape if o.has_shape_code else (),
                                              o.texture if o.has_texture_code else ())
            sf, tf = self.fields_for(o)
            per.append(render_object(ol, self.camera, cfg, sf, tf))
        return scene, per


# ---------------------------------------------------------------------------
# structured-text scene files
# ---------------------------------------------------------------------------

def _camera_dict(cam: CameraModel) -> dict:
    return {"cam_to_world": cam.cam_to_world.tolist(), "fov": cam.fov, "width": cam.width, "height": cam.height}


def _space_dict(space, kind: str) -> dict:
    if isinstance(space, PrimitiveShapeSpace):
        return {"type": "primitive", "code_dim": space.code_dim, "gain": space.gain,
                "axis_limit": space.axis_limit}
    if isinstance(space, LatentColorTexture):
        return {"type": "latent_color", "code_dim": space.code_dim}
    if isinstance(space, (MLPShapeSpace, MLPTexture)):
        return {"type": "mlp", "params": getattr(space, "source", None)}
    raise SceneFormatError(f"cannot serialize {kind} space {space!r}")


def scene_to_dict(scene: SceneLatent) -> dict:
    objs = []
    for o in scene.objects:
        e = o.extrinsics
        if o.has_shape_code:
            shape = {"code": [float(v) for v in o.shape]}
        else:
            shape = {"primitive": o.shape.kind, "axes": list(o.shape.axes)}
        if o.has_texture_code:
            tex = {"code": [float(v) for v in o.texture]}
        else:
            tex = {"color": [float(v) for v in o.texture]}
        objs.append({
            "shape": shape,
            "texture": tex,
            "extrinsics": {
                "position": [float(v) for v in e.position],
                "z_cos": e.z_cos, "z_sin": e.z_sin, "raw_scale": e.raw_scale,
                "s_min": e.s_min, "s_max": e.s_max,
                "theta": e.theta, "scale": e.scale,
            },
            "enabled": bool(o.enabled),
        })
    return {
        "version": FORMAT_VERSION,
        "camera": _camera_dict(scene.camera),
        "background": {"raw": [float(v) for v in scene.background_raw],
                       "color": [float(v) for v in scene.background_color]},
        "shape_space": _space_dict(scene.shape_space, "shape"),
        "texture_space": _space_dict(scene.texture_space, "texture"),
        "objects": objs,
    }


def dumps_scene(scene: SceneLatent) -> str:
    return json.dumps(scene_to_dict(scene), indent=1, sort_keys=True) + "\n"


def _need(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise SceneFormatError(f"missing field '{key}' in {where}")
    return d[key]


def _load_space(d: dict, kind: str, base_dir=None):
    t = _need(d, "type", f"{kind}_space")
    if t == "primitive":
        return PrimitiveShapeSpace(int(d.get("code_dim", 8)), float(d.get("gain", 30.0)),
                                   float(d.get("axis_limit", 1.6)))
    if t == "latent_color":
        return LatentColorTexture(int(d.get("code_dim", 7)))
    if t == "mlp":
        path = _need(d, "params", f"{kind}_space")
        if path is None:
            raise SceneFormatError(f"{kind}_space of type mlp needs a params path")
        from pathlib import Path

        p = Path(path) if base_dir is None or Path(path).is_absolute() else Path(base_dir) / path
        params = FieldParams.from_bytes(p.read_bytes())
        space = MLPShapeSpace(params) if kind == "shape" else MLPTexture(params)
        space.source = str(path)
        return space
    raise SceneFormatError(f"unknown {kind}_space type {t!r}")


def scene_from_dict(d: dict, base_dir=None) -> SceneLatent:
    version = _need(d, "version", "scene")
    if version != FORMAT_VERSION:
        raise SceneFormatError(f"unsupported scene version {version!r}")
    c = _need(d, "camera", "scene")
    try:
        cam = CameraModel(np.array(_need(c, "cam_to_world", "camera"), float), int(_need(c, "width", "camera")),
                          int(_need(c, "height", "camera")), float(_need(c, "fov", "camera")))
    except (TypeError, ValueError) as exc:
        raise SceneFormatError(f"bad camera: {exc}") from exc
    bg = _need(d, "background", "scene")
    raw = np.array(_need(bg, "raw", "background"), float)
    if raw.shape != (3,):
        raise SceneFormatError("background.raw must have 3 entries")
    shape_space = _load_space(d.get("shape_space", {"type": "primitive"}), "shape", base_dir)
    texture_space = _load_space(d.get("texture_space", {"type": "latent_color"}), "texture", base_dir)
    objects = []
    for i, od in enumerate(_need(d, "objects", "scene")):
        where = f"objects[{i}]"
        sd = _need(od, "shape", where)
        try:
            if "code" in sd:
                shape = np.array(sd["code"], float)
            else:
                shape = AnalyticShape(_need(sd, "primitive", where + ".shape"), tuple(_need(sd, "axes", where + ".shape")))
            td = _need(od, "texture", where)
            texture = np.array(td["code"], float) if "code" in td else tuple(float(v) for v in _need(td, "color", where + ".texture"))
            ed = _need(od, "extrinsics", where)
            ext = ObjectExtrinsics(np.array(_need(ed, "position", where + ".extrinsics"), float),
                                   float(_need(ed, "z_cos", where + ".extrinsics")),
                                   float(_need(ed, "z_sin", where + ".extrinsics")),
                                   float(_need(ed, "raw_scale", where + ".extrinsics")),
                                   float(ed.get("s_min", 0.625)), float(ed.get("s_max", 1.25)))
        except SceneFormatError:
            raise
        except (TypeError, ValueError) as exc:
            raise SceneFormatError(f"{where}: {exc}") from exc
        objects.append(SceneObject(shape, texture, ext, bool(od.get("enabled", True))))
    return SceneLatent(objects, raw, cam, shape_space, texture_space)


def loads_scene(text: str, base_dir=None) -> SceneLatent:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"line {exc.lineno}: {exc.msg}") from exc
    return scene_from_dict(d, base_dir)


def scenes_equal(a: SceneLatent, b: SceneLatent) -> bool:
    return dumps_scene(a) == dumps_scene(b)


def resting_height(shape: AnalyticShape, scale: float) -> float:
    """Center height that puts the object's lowest point on the ground."""
    return 0.4 * shape.axes[2] * scale


def bounding_radius_xy(shape: AnalyticShape, scale: float) -> float:
    return 0.4 * scale * math.hypot(shape.axes[0], shape.axes[1])


# ---------------------------------------------------------------------------
# collision certification
# ---------------------------------------------------------------------------

def _object_latent(scene: SceneLatent, i: int) -> ObjectLatent:
    o = scene.objects[i]
    return ObjectLatent.from_extrinsics(o.extrinsics, o.shape if o.has_shape_code else (),
                                        o.texture if o.has_texture_code else ())


def object_half_extent(scene: SceneLatent, i: int) -> np.ndarray:
    o = scene.objects[i]
    sf, _ = scene.fields_for(o)
    return np.asarray(sf.half_extent(o.shape if o.has_shape_code else None), float)


def world_sdf(scene: SceneLatent, i: int, pts) -> np.ndarray:
    from .losses import object_sdf_world

    sf, _ = scene.fields_for(scene.objects[i])
    return np.asarray(object_sdf_world(_object_latent(scene, i), sf, pts))


def pair_intersection(scene: SceneLatent, i: int, j: int, k: int = 10) -> float:
    """Intersection penalty of one object pair with ``k`` segment samples."""
    from .losses import loss_intersection

    objs = [_object_latent(scene, i), _object_latent(scene, j)]
    sfs = [scene.fields_for(scene.objects[i])[0], scene.fields_for(scene.objects[j])[0]]
    return float(loss_intersection(objs, sfs, k))


def ground_penalty(scene: SceneLatent, i: int) -> float:
    from .losses import loss_ground

    sf, _ = scene.fields_for(scene.objects[i])
    return float(loss_ground([_object_latent(scene, i)], [sf]))


def _lipschitz_field(scene: SceneLatent, i: int) -> bool:
    sf, _ = scene.fields_for(scene.objects[i])
    return isinstance(sf, (AnalyticShape, PrimitiveShapeSpace))


def pair_clear(scene: SceneLatent, i: int, j: int, grid: int = 24) -> bool:
    """Certify that objects ``i`` and ``j`` do not intersect.

    Disjoint vertical bounding cylinders certify directly.  Otherwise both SDFs
    must be 1-Lipschitz and stay above the grid cell half-diagonal at every grid
    point of the boxes' overlap (no point can then be inside both), and the
    segment penalty must vanish at 10 and 32 samples.
    """
    ei, ej = scene.objects[i].extrinsics, scene.objects[j].extrinsics
    hi, hj = object_half_extent(scene, i), object_half_extent(scene, j)
    ri = ei.scale * math.hypot(hi[0], hi[1])
    rj = ej.scale * math.hypot(hj[0], hj[1])
    if np.linalg.norm(ei.position[:2] - ej.position[:2]) > ri + rj:
        return True
    if not (_lipschitz_field(scene, i) and _lipschitz_field(scene, j)):
        return False
    if pair_intersection(scene, i, j, 32) > 0 or pair_intersection(scene, i, j, 10) > 0:
        return False
    lo_i = ei.position - np.array([ri, ri, ei.scale * hi[2]])
    hi_i = ei.position + np.array([ri, ri, ei.scale * hi[2]])
    lo_j = ej.position - np.array([rj, rj, ej.scale * hj[2]])
    hi_j = ej.position + np.array([rj, rj, ej.scale * hj[2]])
    lo, hi_ = np.maximum(lo_i, lo_j), np.minimum(hi_i, hi_j)
    if np.any(lo >= hi_):
        return True
    axes = [np.linspace(a, b, grid) for a, b in zip(lo, hi_)]
    cell = (hi_ - lo) / (grid - 1)
    half_diag = 0.5 * float(np.linalg.norm(cell))
    g = np.meshgrid(*axes, indexing="ij")
    pts = (g[0].ravel(), g[1].ravel(), g[2].ravel())
    worst = np.maximum(world_sdf(scene, i, pts), world_sdf(scene, j, pts))
    return bool(np.all(worst >= half_diag))

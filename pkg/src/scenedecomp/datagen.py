"""Synthetic tabletop scenes of scaled primitives with RGB, depth and instance masks.

Dataset layout under the output directory::

    manifest.json
    scenes/NNNNNN.scene   ground-truth latents (JSON scene file)
    rgb/NNNNNN.png        8-bit RGB, optionally noised
    depth/NNNNNN.f32      float32 depth raster, clipped at the far distance
    mask/NNNNNN.png       8-bit instance ids, 0 = background, k + 1 = object k

Every scene draws from its own random stream seeded by ``(seed, scene_id)``,
so the output does not depend on generation order or parallelism.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .fitting import pose_is_valid
from .geometry import CameraModel, ObjectExtrinsics
from .renderer import RayMarchConfig
from .scene import SceneLatent, SceneObject, dumps_scene
from .shapes import HALF, KINDS, AnalyticShape

# CLEVR-like material palette
PALETTE = (
    (87, 87, 87), (173, 35, 35), (42, 75, 215), (29, 105, 20),
    (129, 74, 25), (129, 38, 192), (41, 208, 208), (255, 238, 51),
)

GROUND_LIFT = 1e-6   # keeps the lowest point strictly above the plane despite rounding


class SceneSamplingError(RuntimeError):
    pass


@dataclass
class GeneratorConfig:
    position_range: tuple = (-1.5, 1.5)
    scale_range: tuple = (0.7, 1.2)
    scale_bounds: tuple = (0.625, 1.25)
    axis_range: tuple = (0.75, 1.25)
    kinds: tuple = KINDS
    background_range: tuple = (0.55, 0.8)
    width: int = 64
    height: int = 64
    fov_deg: float = 30.0
    march_steps: int = 96
    far: float = 12.0
    object_attempts: int = 200
    scene_attempts: int = 50

    def __post_init__(self):
        lo, hi = self.position_range
        if not -1.5 <= lo < hi <= 1.5:
            raise ValueError("position range must be an interval inside [-1.5, 1.5]")
        smin, smax = self.scale_bounds
        if not smin < self.scale_range[0] <= self.scale_range[1] < smax:
            raise ValueError("scale range must lie strictly inside the scale bounds")
        if not 0 < self.axis_range[0] <= self.axis_range[1]:
            raise ValueError("axis scales must be positive")
        unknown = set(self.kinds) - set(KINDS)
        if unknown or not self.kinds:
            raise ValueError(f"unknown primitive kinds {sorted(unknown)}")

    def camera(self) -> CameraModel:
        return CameraModel(width=self.width, height=self.height, fov=math.radians(self.fov_deg))

    def march(self) -> RayMarchConfig:
        return RayMarchConfig(steps=self.march_steps, far=self.far)


def draw_object(rng: np.random.Generator, cfg: GeneratorConfig) -> SceneObject:
    kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
    axes = tuple(float(a) for a in rng.uniform(*cfg.axis_range, size=3))
    s = float(rng.uniform(*cfg.scale_range))
    theta = float(rng.uniform(-math.pi, math.pi))
    x, y = (float(v) for v in rng.uniform(*cfg.position_range, size=2))
    z = HALF * axes[2] * s + GROUND_LIFT
    color = tuple(c / 255.0 for c in PALETTE[int(rng.integers(len(PALETTE)))])
    ext = ObjectExtrinsics.from_pose((x, y, z), theta, s, *cfg.scale_bounds)
    return SceneObject(AnalyticShape(kind, axes), color, ext)


def _empty_scene(rng: np.random.Generator, cfg: GeneratorConfig) -> SceneLatent:
    bg = float(rng.uniform(*cfg.background_range))
    return SceneLatent.with_background([], (bg, bg, bg), camera=cfg.camera())


def _valid_with(scene: SceneLatent, obj: SceneObject) -> tuple[bool, SceneLatent]:
    trial = replace(scene, objects=scene.objects + [obj])
    return pose_is_valid(trial, len(trial.objects) - 1), trial


def sample_scene(count: int, rng: np.random.Generator, cfg: GeneratorConfig | None = None) -> SceneLatent:
    """Rejection-sample ``count`` mutually non-intersecting resting objects."""
    cfg = cfg or GeneratorConfig()
    if count < 1:
        raise ValueError("object count must be at least 1")
    for _ in range(cfg.scene_attempts):
        scene = _empty_scene(rng, cfg)
        for _ in range(count):
            for _ in range(cfg.object_attempts):
                ok, trial = _valid_with(scene, draw_object(rng, cfg))
                if ok:
                    scene = trial
                    break
            else:
                break
        if len(scene.objects) == count:
            return scene
    raise SceneSamplingError(f"could not place {count} objects within the attempt budget")


def one_shot_scene(count: int, rng: np.random.Generator, cfg: GeneratorConfig | None = None):
    """Draw every object once; the scene if all invariants hold, else None."""
    cfg = cfg or GeneratorConfig()
    scene = _empty_scene(rng, cfg)
    for _ in range(count):
        ok, scene = _valid_with(scene, draw_object(rng, cfg))
        if not ok:
            return None
    return scene


def acceptance_rate(count: int, rng: np.random.Generator, attempts: int = 100,
                    cfg: GeneratorConfig | None = None) -> float:
    return sum(one_shot_scene(count, rng, cfg) is not None for _ in range(attempts)) / attempts


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    splits: dict = field(default_factory=lambda: {"train": 180, "val": 20, "test": 50})
    seed: int = 0
    noise_sigma: float = 0.0
    object_counts: tuple = (2, 3, 4, 5)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    files: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(int(n) < 0 for n in self.splits.values()):
            raise ValueError("split sizes must be non-negative")
        if not self.object_counts or min(self.object_counts) < 1:
            raise ValueError("object counts must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")

    @classmethod
    def full_scale(cls, **kw) -> "DatasetManifest":
        """Split sizes of the full benchmark: 9000 train, 1000 val, 2500 test."""
        return cls(splits={"train": 9000, "val": 1000, "test": 2500}, **kw)

    def scene_ids(self) -> dict:
        """Consecutive, disjoint id ranges per split in declaration order."""
        out, start = {}, 0
        for name, n in self.splits.items():
            out[name] = list(range(start, start + int(n)))
            start += int(n)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["object_counts"] = list(self.object_counts)
        d["generator"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["generator"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        d = dict(d)
        gen = {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("generator", {}).items()}
        if "object_counts" in d:
            d["object_counts"] = tuple(d["object_counts"])
        return cls(generator=GeneratorConfig(**gen), **d)


def scene_rng(seed: int, scene_id: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, scene_id, stream])


def build_scene(manifest: DatasetManifest, scene_id: int) -> SceneLatent:
    rng = scene_rng(manifest.seed, scene_id)
    count = int(manifest.object_counts[int(rng.integers(len(manifest.object_counts)))])
    return sample_scene(count, rng, manifest.generator)


def render_ground_truth(scene: SceneLatent, cfg: GeneratorConfig, noise_sigma: float = 0.0, rng=None):
    """``(rgb, depth, mask)`` ground truth of a scene with the fine march."""
    render, _ = scene.render(cfg.march())
    rgb = render.color_value
    if noise_sigma > 0:
        rgb = np.clip(rgb + rng.normal(0.0, noise_sigma, size=rgb.shape), 0.0, 1.0)
    depth = np.minimum(render.depth_value, cfg.far)
    return rgb, depth, render.instance_ids()


def write_scene(out: Path, manifest: DatasetManifest, scene_id: int) -> str:
    scene = build_scene(manifest, scene_id)
    rgb, depth, mask = render_ground_truth(scene, manifest.generator, manifest.noise_sigma,
                                           scene_rng(manifest.seed, scene_id, 1))
    name = f"{scene_id:06d}"
    (out / "scenes" / f"{name}.scene").write_text(dumps_scene(scene), encoding="utf-8")
    io.write_rgb(out / "rgb" / f"{name}.png", rgb)
    io.write_depth(out / "depth" / f"{name}.f32", depth)
    io.write_mask(out / "mask" / f"{name}.png", mask)
    return name


def _write_one(args):
    out, manifest_dict, scene_id = args
    return write_scene(Path(out), DatasetManifest.from_dict(manifest_dict), scene_id)


def generate_dataset(manifest: DatasetManifest, out_dir, threads: int = 1, progress=None) -> DatasetManifest:
    """Write every scene of every split plus ``manifest.json``; returns the indexed manifest."""
    out = Path(out_dir)
    for sub in ("scenes", "rgb", "depth", "mask"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    ids = manifest.scene_ids()
    todo = [i for split in ids.values() for i in split]
    if threads > 1 and len(todo) > 1:
        md = replace(manifest, files={}).to_dict()
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for name in pool.map(_write_one, [(str(out), md, i) for i in todo]):
                if progress:
                    progress(name)
    else:
        for i in todo:
            name = write_scene(out, manifest, i)
            if progress:
                progress(name)
    indexed = replace(manifest, files={split: [f"{i:06d}" for i in lst] for split, lst in ids.items()})
    (out / "manifest.json").write_text(json.dumps(indexed.to_dict(), indent=1, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return indexed


def load_manifest(root) -> DatasetManifest:
    return DatasetManifest.from_dict(json.loads((Path(root) / "manifest.json").read_text(encoding="utf-8")))


@dataclass
class SceneRecord:
    name: str
    scene: SceneLatent
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray


def load_scene_record(root, name: str) -> SceneRecord:
    from .scene import loads_scene

    root = Path(root)
    scene = loads_scene((root / "scenes" / f"{name}.scene").read_text(encoding="utf-8"), root)
    return SceneRecord(name, scene, io.read_rgb(root / "rgb" / f"{name}.png"),
                       io.read_depth(root / "depth" / f"{name}.f32"), io.read_mask(root / "mask" / f"{name}.png"))


def split_names(root, split: str, manifest: DatasetManifest | None = None) -> Sequence[str]:
    manifest = manifest or load_manifest(root)
    if split not in manifest.files:
        raise KeyError(f"split {split!r} not in manifest (have {sorted(manifest.files)})")
    return manifest.files[split]

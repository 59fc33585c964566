"""Object-level scene decomposition by analysis-by-synthesis with SDF shapes.

Submodules: ``geometry`` (frames and camera), ``shapes`` (shape and texture
spaces), ``autodiff`` (reverse-mode tape), ``renderer`` (ray marching and
z-buffering), ``losses``, ``fitting``, ``datagen``, ``metrics`` and ``cli``.
"""
from .geometry import CameraModel, ObjectExtrinsics
from .renderer import RayMarchConfig
from .scene import SceneLatent, SceneObject, dumps_scene, loads_scene
from .shapes import AnalyticShape, PrimitiveShapeSpace

__all__ = ["AnalyticShape", "CameraModel", "ObjectExtrinsics", "PrimitiveShapeSpace", "RayMarchConfig",
           "SceneLatent", "SceneObject", "dumps_scene", "loads_scene"]
__version__ = "0.1.0"

"""Signed-distance and texture fields in object coordinates.

Points are passed as a tuple ``(x, y, z)`` of equally shaped component arrays
(plain or tape values); SDF results have the same shape.  All shapes are
normalized to the cube [-0.4, 0.4]^3 (the unit cube minus a 0.1 padding) before
per-axis scaling.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

HALF = 0.4
KINDS = ("sphere", "box", "cylinder")


class FieldError(ValueError):
    pass


def _norm(*cs):
    acc = cs[0] * cs[0]
    for c in cs[1:]:
        acc = acc + c * c
    return ad.sqrt(acc)


def unit_sdf(kind: str, x, y, z):
    """SDF of the normalized primitive (half size 0.4, cylinder axis along z)."""
    if kind == "sphere":
        return _norm(x, y, z) - HALF
    if kind == "box":
        qx, qy, qz = ad.abs(x) - HALF, ad.abs(y) - HALF, ad.abs(z) - HALF
        outside = _norm(ad.maximum(qx, 0.0), ad.maximum(qy, 0.0), ad.maximum(qz, 0.0))
        inside = ad.minimum(ad.maximum(qx, ad.maximum(qy, qz)), 0.0)
        return outside + inside
    if kind == "cylinder":
        qr = _norm(x, y) - HALF
        qz = ad.abs(z) - HALF
        outside = _norm(ad.maximum(qr, 0.0), ad.maximum(qz, 0.0))
        inside = ad.minimum(ad.maximum(qr, qz), 0.0)
        return outside + inside
    raise FieldError(f"unknown primitive {kind!r}")


def scaled_sdf(kind: str, axes, pts):
    """Anisotropically scaled primitive.

    ``min(a) * phi(x / a)`` has the exact sign and never overestimates the true
    distance, and it stays 1-Lipschitz.
    """
    ax, ay, az = axes[0], axes[1], axes[2]
    x, y, z = pts
    amin = ad.reduce_min([ax, ay, az])
    return amin * unit_sdf(kind, x / ax, y / ay, z / az)


@dataclass(frozen=True)
class AnalyticShape:
    kind: str
    axes: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FieldError(f"unknown primitive {self.kind!r}")
        axes = tuple(float(a) for a in self.axes)
        if len(axes) != 3 or min(axes) <= 0:
            raise FieldError(f"axis scales must be three positive numbers, got {self.axes}")
        object.__setattr__(self, "axes", axes)

    code_dim = 0

    def sdf(self, code, pts):
        return scaled_sdf(self.kind, self.axes, pts)

    def half_extent(self, code=None) -> np.ndarray:
        return HALF * np.asarray(self.axes)


def eval_analytic_sdf(shape: AnalyticShape, x) -> float:
    x = np.asarray(x, float)
    return float(shape.sdf(None, (x[..., 0], x[..., 1], x[..., 2])))


@dataclass(frozen=True)
class PrimitiveShapeSpace:
    """A cheap latent shape space spanned by the three scaled primitives.

    Code layout: ``gain * code = [log a_x, log a_y, log a_z, l_sphere, l_box, l_cylinder, ...]``;
    the kind logits go through a softmax and the field is the weighted blend of
    the scaled primitive SDFs.  The zero code is an isotropic equal-parts blend.
    Entries past the sixth are unused.  The gain sets how far a unit of code
    moves the shape, and therefore how strongly a squared-norm prior on the
    code constrains it (by a factor ``1 / gain**2``).

    Axis scales saturate smoothly at ``[1 / axis_limit, axis_limit]``: the log
    scale passes through ``L * tanh(. / L)`` with ``L = log(axis_limit)``, which
    is the identity near zero.  Without the bound a single slot can stretch
    over two neighbouring objects during coarse fitting.
    """

    code_dim: int = 8
    gain: float = 30.0
    axis_limit: float = 1.6

    def __post_init__(self):
        if self.code_dim < 6:
            raise FieldError("primitive shape space needs at least 6 code entries")
        if self.gain <= 0:
            raise FieldError("code gain must be positive")
        if self.axis_limit <= 1:
            raise FieldError("axis limit must exceed 1")

    @property
    def _log_limit(self) -> float:
        return math.log(self.axis_limit)

    def _parts(self, code):
        lim = self._log_limit
        axes = ad.exp(lim * ad.tanh(code[0:3] * (self.gain / lim)))
        logits = self.gain * code[3:6]
        shift = float(np.max(ad.value_of(logits)))
        e = ad.exp(logits - shift)
        w = e / ad.sum(e)
        return axes, w

    def sdf(self, code, pts):
        if len(ad.value_of(code)) != self.code_dim:
            raise FieldError(f"shape code must have {self.code_dim} entries")
        axes, w = self._parts(code)
        x, y, z = pts
        ax, ay, az = axes[0], axes[1], axes[2]
        amin = ad.reduce_min([ax, ay, az])
        q = (x / ax, y / ay, z / az)
        blend = None
        for k, kind in enumerate(KINDS):
            term = w[k] * unit_sdf(kind, *q)
            blend = term if blend is None else blend + term
        return amin * blend

    def half_extent(self, code) -> np.ndarray:
        lim = self._log_limit
        return HALF * np.exp(lim * np.tanh(np.asarray(ad.value_of(code), float)[0:3] * (self.gain / lim)))

    def encode(self, shape: AnalyticShape) -> np.ndarray:
        code = np.zeros(self.code_dim)
        lim = self._log_limit
        logs = np.asarray(np.log(shape.axes), float)
        if np.any(np.abs(logs) >= lim):
            raise FieldError(f"axis scales {shape.axes} outside the representable range")
        code[0:3] = lim * np.arctanh(logs / lim) / self.gain
        code[3 + KINDS.index(shape.kind)] = 32.0 / self.gain
        return code

    def kind_of(self, code) -> str:
        return KINDS[int(np.argmax(np.asarray(code)[3:6]))]


# ---------------------------------------------------------------------------
# fully connected fields
# ---------------------------------------------------------------------------

@dataclass
class FieldParams:
    """Weights of a rectifier MLP ``R^in (+ latent) -> R^out``.

    The latent code is concatenated to the input of layer ``concat_index``
    (0 = network input).  ``squash`` applies a logistic to the output.
    """

    weights: list
    biases: list
    latent_dim: int
    concat_index: int
    squash: bool = False

    @property
    def in_dim(self) -> int:
        w0 = self.weights[0]
        return w0.shape[1] - (self.latent_dim if self.concat_index == 0 else 0)

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden(self) -> list[int]:
        return [w.shape[0] for w in self.weights[:-1]]

    @classmethod
    def init(cls, hidden: Sequence[int], latent_dim: int, concat_index: int, out_dim: int = 1,
             in_dim: int = 3, squash: bool = False, rng: np.random.Generator | None = None,
             zero: bool = False) -> "FieldParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        if not 0 <= concat_index <= len(hidden):
            raise FieldError("concat index outside the layer range")
        dims = [in_dim] + list(hidden) + [out_dim]
        weights, biases = [], []
        for k in range(len(dims) - 1):
            fan_in = dims[k] + (latent_dim if k == concat_index else 0)
            if zero:
                w = np.zeros((dims[k + 1], fan_in))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(dims[k + 1], fan_in))
            weights.append(w)
            biases.append(np.zeros(dims[k + 1]))
        if not zero:
            weights[-1] *= 0.1
        return cls(weights, biases, latent_dim, concat_index, squash)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays: Sequence) -> "FieldParams":
        return FieldParams(list(arrays[0::2]), list(arrays[1::2]), self.latent_dim, self.concat_index, self.squash)

    def forward(self, code, inputs, arrays=None):
        """Evaluate on a batch ``inputs`` of shape (M, in_dim); returns (M, out_dim)."""
        arrays = self.arrays() if arrays is None else arrays
        m = ad.value_of(inputs).shape[0]
        if self.latent_dim:
            if code is None or len(ad.value_of(code)) != self.latent_dim:
                raise FieldError(f"latent code must have {self.latent_dim} entries")
            tiled = ad.reshape(code, (1, self.latent_dim)) * np.ones((m, 1))
        h = inputs
        n_layers = len(arrays) // 2
        for k in range(n_layers):
            if k == self.concat_index and self.latent_dim:
                h = ad.concatenate([h, tiled], axis=1)
            w, b = arrays[2 * k], arrays[2 * k + 1]
            if ad.value_of(h).shape[1] != ad.value_of(w).shape[1]:
                raise FieldError("layer shapes are inconsistent")
            h = ad.matmul(h, ad.transpose(w)) + b
            if k < n_layers - 1:
                h = ad.relu(h)
        return ad.logistic(h) if self.squash else h

    # -- binary record -----------------------------------------------------

    MAGIC = b"SDFP"

    def to_bytes(self) -> bytes:
        hidden = self.hidden
        head = struct.pack("<4s7I", self.MAGIC, 1, self.in_dim, self.out_dim, self.latent_dim,
                           self.concat_index, int(self.squash), len(hidden))
        head += struct.pack(f"<{len(hidden)}I", *hidden)
        body = b"".join(np.asarray(a, "<f4").tobytes() for a in self.arrays())
        return head + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "FieldParams":
        magic, version, in_dim, out_dim, latent, concat, squash, n = struct.unpack_from("<4s7I", data, 0)
        if magic != cls.MAGIC or version != 1:
            raise FieldError("not a field parameter record")
        off = struct.calcsize("<4s7I")
        hidden = list(struct.unpack_from(f"<{n}I", data, off))
        off += 4 * n
        dims = [in_dim] + hidden + [out_dim]
        weights, biases = [], []
        for k in range(len(dims) - 1):
            fan_in = dims[k] + (latent if k == concat else 0)
            cnt = dims[k + 1] * fan_in
            weights.append(np.frombuffer(data, "<f4", cnt, off).astype(np.float64).reshape(dims[k + 1], fan_in))
            off += 4 * cnt
            biases.append(np.frombuffer(data, "<f4", dims[k + 1], off).astype(np.float64))
            off += 4 * dims[k + 1]
        if off != len(data):
            raise FieldError("trailing bytes in field parameter record")
        return cls(weights, biases, latent, concat, bool(squash))


def default_sdf_params(latent_dim: int = 8, rng=None) -> FieldParams:
    return FieldParams.init([64, 64, 64, 64], latent_dim, 2, 1, rng=rng)


def default_texture_params(latent_dim: int = 7, rng=None) -> FieldParams:
    return FieldParams.init([64, 64, 64, 64], latent_dim, 0, 3, squash=True, rng=rng)


def _stack_points(pts):
    x, y, z = pts
    shape = ad.value_of(x).shape
    flat = [ad.reshape(c, (-1,)) if isinstance(c, ad.DiffValue) else np.broadcast_to(c, shape).reshape(-1)
            for c in (x, y, z)]
    return ad.stack(flat, axis=1), shape


@dataclass
class MLPShapeSpace:
    """Latent-conditioned SDF network; support is the unit cube."""

    params: FieldParams
    extent: float = 0.5

    @property
    def code_dim(self) -> int:
        return self.params.latent_dim

    def sdf(self, code, pts, arrays=None):
        inputs, shape = _stack_points(pts)
        out = self.params.forward(code, inputs, arrays)
        return ad.reshape(out, shape)

    def half_extent(self, code=None) -> np.ndarray:
        return np.full(3, self.extent)


def eval_mlp_sdf(params: FieldParams, z_sh, x) -> float:
    x = np.asarray(x, float).reshape(-1, 3)
    out = params.forward(np.asarray(z_sh, float), x)
    return out.reshape(-1)[0] if out.size == 1 else out.reshape(-1)


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantTexture:
    color: tuple

    code_dim = 0

    def rgb(self, code, pts):
        shape = ad.value_of(pts[0]).shape
        return np.broadcast_to(np.asarray(self.color, float), shape + (3,))


@dataclass(frozen=True)
class LatentColorTexture:
    """Uniform color ``logistic(z_tex[:3])``; remaining entries unused."""

    code_dim: int = 7

    def rgb(self, code, pts):
        shape = ad.value_of(pts[0]).shape
        c = ad.logistic(code[0:3])
        return ad.reshape(c, (1,) * len(shape) + (3,)) * np.ones(shape + (1,))

    def encode(self, color) -> np.ndarray:
        code = np.zeros(self.code_dim)
        c = np.clip(np.asarray(color, float), 1e-6, 1 - 1e-6)
        code[:3] = np.log(c / (1 - c))
        return code


@dataclass
class MLPTexture:
    params: FieldParams

    @property
    def code_dim(self) -> int:
        return self.params.latent_dim

    def rgb(self, code, pts, arrays=None):
        inputs, shape = _stack_points(pts)
        out = self.params.forward(code, inputs, arrays)
        return ad.reshape(out, shape + (3,))


def eval_texture(texture, z_tex, x) -> np.ndarray:
    if isinstance(texture, (tuple, list, np.ndarray)):
        texture = ConstantTexture(tuple(texture))
    if isinstance(texture, FieldParams):
        texture = MLPTexture(texture)
    x = np.asarray(x, float)
    pts = (x[..., 0], x[..., 1], x[..., 2])
    return np.asarray(texture.rgb(None if z_tex is None else np.asarray(z_tex, float), pts))


# ---------------------------------------------------------------------------
# fitting a latent field to analytic oracles
# ---------------------------------------------------------------------------

@dataclass
class SamplingConfig:
    n_uniform: int = 4000
    n_surface: int = 2000
    bound: float = 0.6
    surface_band: float = 0.05
    clamp: float = 0.1
    batch: int = 512
    steps: int = 2000
    lr: float = 1e-3
    code_lr: float = 1e-3
    seed: int = 0

    def validate(self):
        if self.n_uniform + self.n_surface < 1000:
            raise FieldError("sample budget must be at least 1000 points per shape")
        if self.bound <= 0 or self.clamp <= 0 or self.surface_band <= 0:
            raise FieldError("sampling bounds must be positive")
        if self.batch < 1 or self.steps < 0:
            raise FieldError("batch must be positive and steps non-negative")


@dataclass
class FieldFit:
    params: FieldParams
    codes: list
    loss_history: list = field(default_factory=list)


def sample_oracle(shape: AnalyticShape, cfg: SamplingConfig, rng: np.random.Generator):
    """Uniform samples in the cube plus samples within the surface band."""
    uni = rng.uniform(-cfg.bound, cfg.bound, size=(cfg.n_uniform, 3))
    near = []
    have = 0
    while have < cfg.n_surface:
        cand = rng.uniform(-cfg.bound, cfg.bound, size=(20 * cfg.n_surface, 3))
        d = shape.sdf(None, (cand[:, 0], cand[:, 1], cand[:, 2]))
        keep = cand[np.abs(d) < cfg.surface_band]
        near.append(keep)
        have += len(keep)
    pts = np.concatenate([uni, np.concatenate(near)[: cfg.n_surface]])
    sdf = shape.sdf(None, (pts[:, 0], pts[:, 1], pts[:, 2]))
    return pts, np.asarray(sdf)


def fit_field(oracles: Sequence[tuple], cfg: SamplingConfig | None = None,
              params: FieldParams | None = None) -> FieldFit:
    """Jointly fit an SDF network and one code per oracle shape (auto-decoding).

    ``oracles`` holds ``(AnalyticShape, initial_code)`` pairs.  The objective is
    the mean absolute difference of SDF values clamped to +-clamp.
    """
    from .fitting import AdamState

    cfg = cfg or SamplingConfig()
    cfg.validate()
    if not oracles:
        raise FieldError("at least one oracle shape is required")
    rng = np.random.default_rng(cfg.seed)
    latent_dim = len(oracles[0][1])
    params = params or default_sdf_params(latent_dim, rng)
    samples = [sample_oracle(shape, cfg, rng) for shape, _ in oracles]

    arrays = [a.copy() for a in params.arrays()]
    codes = [np.array(c, dtype=np.float64) for _, c in oracles]
    opt_p = AdamState.zeros(sum(a.size for a in arrays), lr=cfg.lr)
    opt_c = AdamState.zeros(sum(c.size for c in codes), lr=cfg.code_lr)
    history = []
    for _ in range(cfg.steps):
        tape = ad.Tape()
        leaves = [tape.variable(a) for a in arrays]
        code_leaves = [tape.variable(c) for c in codes]
        total = 0.0
        for (pts, sdf), code in zip(samples, code_leaves):
            idx = rng.integers(0, len(pts), size=cfg.batch)
            pred = params.forward(code, pts[idx], leaves)
            pred = ad.minimum(ad.maximum(ad.reshape(pred, (-1,)), -cfg.clamp), cfg.clamp)
            target = np.clip(sdf[idx], -cfg.clamp, cfg.clamp)
            total = total + ad.mean(ad.abs(pred - target))
        loss = total / len(samples)
        grads = ad.gradient_of(loss, leaves + code_leaves)
        history.append(float(loss.value))
        flat = np.concatenate([a.ravel() for a in arrays])
        flat_c = np.concatenate([c.ravel() for c in codes])
        n = flat.size
        flat = opt_p.step(flat, grads[:n])
        flat_c = opt_c.step(flat_c, grads[n:])
        arrays = _unflatten(flat, arrays)
        codes = _unflatten(flat_c, codes)
    return FieldFit(params.with_arrays(arrays), codes, history)


def fit_texture_field(samples: Sequence[tuple], params: FieldParams, steps: int = 500,
                      lr: float = 1e-2, seed: int = 0) -> tuple[FieldParams, list]:
    """Fit texture weights (codes held fixed) to ``(code, points, rgb)`` samples by MSE."""
    from .fitting import AdamState

    arrays = [a.copy() for a in params.arrays()]
    opt = AdamState.zeros(sum(a.size for a in arrays), lr=lr)
    history = []
    for _ in range(steps):
        tape = ad.Tape()
        leaves = [tape.variable(a) for a in arrays]
        total = 0.0
        for code, pts, rgb in samples:
            pred = params.forward(np.asarray(code, float), np.asarray(pts, float), leaves)
            diff = pred - rgb
            total = total + ad.mean(diff * diff)
        grads = ad.gradient_of(total, leaves)
        history.append(float(ad.value_of(total)))
        flat = opt.step(np.concatenate([a.ravel() for a in arrays]), grads)
        arrays = _unflatten(flat, arrays)
    return params.with_arrays(arrays), history


def _unflatten(flat: np.ndarray, like: list) -> list:
    out, off = [], 0
    for a in like:
        out.append(flat[off: off + a.size].reshape(a.shape))
        off += a.size
    return out

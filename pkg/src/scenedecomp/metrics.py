"""Instance, image, depth and pose evaluation.

Conventions:

* Masks with fewer than ``min_pixels`` (25) occupied pixels are ignored on both sides.
* Matching is greedy by descending IoU; ties go to the lower (pred, gt) index pair.
* Empty ratios (0/0) count as 0, including F1 when precision and recall are both 0.
* ``allObj`` counts an image as a success when it has no visible ground-truth object.
* PSNR of identical images is ``inf``.
"""
from __future__ import annotations

import csv
import io as _io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .io import to_uint8
from .renderer import RayMarchConfig

THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
MIN_PIXELS = 25


class MetricError(ValueError):
    pass


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def iou(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return _ratio(float(np.count_nonzero(a & b)), float(np.count_nonzero(a | b)))


def masks_from_ids(ids, count: int | None = None) -> list[np.ndarray]:
    """Split an instance-id raster (0 = background, k + 1 = object k) into masks."""
    ids = np.asarray(ids)
    n = int(ids.max(initial=0)) if count is None else count
    return [ids == k + 1 for k in range(n)]


@dataclass
class MatchResult:
    tau: float
    pairs: list                  # (pred index, gt index, iou) for accepted matches
    pred_ids: list               # predictions that passed the size filter
    gt_ids: list                 # ground truths that passed the size filter

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.pred_ids) - self.tp

    @property
    def fn(self) -> int:
        return len(self.gt_ids) - self.tp

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return _ratio(2 * p * r, p + r)


def _visible(masks, min_pixels: int) -> list[int]:
    return [i for i, m in enumerate(masks) if np.count_nonzero(m) >= min_pixels]


def iou_table(pred: Sequence, gt: Sequence) -> np.ndarray:
    out = np.zeros((len(pred), len(gt)))
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            out[i, j] = iou(p, g)
    return out


def match_instances(pred: Sequence, gt: Sequence, tau: float = 0.5, min_pixels: int = MIN_PIXELS) -> MatchResult:
    shapes = {np.shape(m) for m in list(pred) + list(gt)}
    if len(shapes) > 1:
        raise MetricError(f"masks do not share dimensions: {sorted(shapes)}")
    pi, gi = _visible(pred, min_pixels), _visible(gt, min_pixels)
    table = iou_table([pred[i] for i in pi], [gt[j] for j in gi])
    cands = sorted(((-table[a, b], pi[a], gi[b]) for a in range(len(pi)) for b in range(len(gi))
                    if table[a, b] >= tau))
    used_p, used_g, pairs = set(), set(), []
    for neg, p, g in cands:
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        pairs.append((p, g, -neg))
    return MatchResult(tau, pairs, pi, gi)


def match_all(pred: Sequence, gt: Sequence, thresholds=THRESHOLDS, min_pixels: int = MIN_PIXELS) -> dict:
    return {t: match_instances(pred, gt, t, min_pixels) for t in thresholds}


@dataclass
class InstanceScores:
    mAP: float
    AP50: float
    AR50: float
    F1_50: float
    allObj: float


def instance_metrics(per_image: Sequence[dict]) -> InstanceScores:
    """Aggregate per-image ``{tau: MatchResult}`` dicts (tau = 0.5 must be present)."""
    if not per_image:
        raise MetricError("no images to evaluate")
    taus = sorted(per_image[0])
    if 0.5 not in taus:
        raise MetricError("threshold 0.5 is required")
    n = len(per_image)
    ap = {t: sum(img[t].precision for img in per_image) / n for t in taus}
    m50 = [img[0.5] for img in per_image]
    return InstanceScores(
        mAP=sum(ap.values()) / len(taus),
        AP50=ap[0.5],
        AR50=sum(m.recall for m in m50) / n,
        F1_50=sum(m.f1 for m in m50) / n,
        allObj=sum(m.fn == 0 for m in m50) / n,
    )


# ---------------------------------------------------------------------------
# images and depth
# ---------------------------------------------------------------------------

def mse(pred, gt) -> float:
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise MetricError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    d = pred - gt
    per_pixel = np.sum(d * d, axis=-1) if d.ndim == 3 else d * d
    return float(np.mean(per_pixel))


def psnr_from_mse(m: float, data_range: float = 1.0) -> float:
    if m < 0:
        raise MetricError("negative MSE")
    if m == 0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / m)


def psnr(pred, gt, data_range: float = 1.0) -> float:
    """PSNR on the per-element mean squared error (the scikit-image convention)."""
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise MetricError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    return psnr_from_mse(float(np.mean((pred - gt) ** 2)), data_range)


def _window_stats(x: np.ndarray, win: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(x, (win, win)).mean(axis=(-1, -2))


def ssim_channel(a, b, win: int = 7, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all positions where the uniform window fits inside the image."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if min(a.shape) < win:
        raise MetricError(f"image smaller than the {win}x{win} window")
    n = win * win
    cov = n / (n - 1)
    ua, ub = _window_stats(a, win), _window_stats(b, win)
    vaa = cov * (_window_stats(a * a, win) - ua * ua)
    vbb = cov * (_window_stats(b * b, win) - ub * ub)
    vab = cov * (_window_stats(a * b, win) - ua * ub)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    s = ((2 * ua * ub + c1) * (2 * vab + c2)) / ((ua * ua + ub * ub + c1) * (vaa + vbb + c2))
    return float(s.mean())


def ssim(pred, gt, win: int = 7, data_range: float = 1.0) -> float:
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise MetricError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        return ssim_channel(pred, gt, win, data_range)
    return float(np.mean([ssim_channel(pred[..., c], gt[..., c], win, data_range) for c in range(pred.shape[-1])]))


def image_metrics(pred, gt) -> tuple[float, float, float]:
    """``(RMSE, PSNR, SSIM)`` with RMSE over per-pixel RGB vector norms."""
    return math.sqrt(mse(pred, gt)), psnr(pred, gt), ssim(pred, gt)


def depth_metrics(pred, gt) -> tuple[float, float, float]:
    """``(RMSE, AbsRD, SqRD)`` over all pixels."""
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise MetricError(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    if np.any(gt <= 0):
        raise MetricError("ground-truth depth must be positive")
    d = pred - gt
    return float(np.sqrt(np.mean(d * d))), float(np.mean(np.abs(d) / gt)), float(np.mean(d * d / gt))


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------

def angle_error(pred_theta: float, gt_theta: float, period: float | None = None) -> float:
    """Wrapped absolute angle difference in radians, optionally folded by a symmetry period."""
    d = abs(pred_theta - gt_theta) % (2 * math.pi)
    d = min(d, 2 * math.pi - d)
    if period:
        d = d % period
        d = min(d, period - d)
    return d


def greedy_nearest_pairs(pred_pos: Sequence, gt_pos: Sequence) -> list[tuple[int, int, float]]:
    cands = sorted((float(np.linalg.norm(np.asarray(p) - np.asarray(g))), i, j)
                   for i, p in enumerate(pred_pos) for j, g in enumerate(gt_pos))
    used_p, used_g, out = set(), set(), []
    for d, i, j in cands:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        out.append((i, j, d))
    return out


@dataclass
class PosePairs:
    distances: list = field(default_factory=list)
    angles: list = field(default_factory=list)          # unfolded, radians
    folded: list = field(default_factory=list)          # folded by the period, radians

    def extend(self, other: "PosePairs") -> None:
        self.distances += other.distances
        self.angles += other.angles
        self.folded += other.folded

    def summary(self) -> tuple:
        """``(Err_pos mean, Err_rot median deg, folded median deg)``; None when empty."""
        if not self.distances:
            return None, None, None
        return (float(np.mean(self.distances)), math.degrees(float(np.median(self.angles))),
                math.degrees(float(np.median(self.folded))))


def pose_pairs(pred_poses: Sequence[tuple], gt_poses: Sequence[tuple], match: MatchResult,
               period: float | None = None) -> PosePairs:
    """Pose errors of the true positives in ``match`` (taken at tau = 0.5).

    ``*_poses`` hold ``(position, theta)`` per slot.  Matched predictions are
    re-paired with matched ground truths greedily by 3-d distance.
    """
    preds = [p for p, _, _ in match.pairs]
    gts = [g for _, g, _ in match.pairs]
    out = PosePairs()
    for i, j, d in greedy_nearest_pairs([pred_poses[p][0] for p in preds], [gt_poses[g][0] for g in gts]):
        tp, tg = pred_poses[preds[i]][1], gt_poses[gts[j]][1]
        out.distances.append(d)
        out.angles.append(angle_error(tp, tg))
        out.folded.append(angle_error(tp, tg, period))
    return out


def pose_metrics(pred_poses, gt_poses, match: MatchResult, period: float | None = None) -> tuple:
    return pose_pairs(pred_poses, gt_poses, match, period).summary()


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    images: int
    mAP: float
    AP50: float
    AR50: float
    F1_50: float
    allObj: float
    rgb_rmse: float
    psnr: float
    ssim: float
    depth_rmse: float
    abs_rd: float
    sq_rd: float
    err_pos: float | None
    err_rot: float | None
    err_rot_sym: float | None
    sym_period_deg: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        d = {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in self.to_dict().items()}
        return json.dumps(d, indent=1, sort_keys=True)

    def csv_header(self) -> list[str]:
        return list(self.to_dict())

    def csv_row(self) -> list:
        return ["" if v is None else v for v in self.to_dict().values()]

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        w.writerow(self.csv_row())
        return buf.getvalue()


@dataclass
class ImageEval:
    """Everything needed from one (prediction, ground truth) image pair."""

    matches: dict
    rgb: tuple
    depth: tuple
    poses: PosePairs


def evaluate_image(pred_masks, gt_masks, pred_rgb, gt_rgb, pred_depth, gt_depth, pred_poses=None, gt_poses=None,
                   period: float | None = None, min_pixels: int = MIN_PIXELS) -> ImageEval:
    matches = match_all(pred_masks, gt_masks, THRESHOLDS, min_pixels)
    poses = PosePairs()
    if pred_poses is not None and gt_poses is not None:
        poses = pose_pairs(pred_poses, gt_poses, matches[0.5], period)
    return ImageEval(matches, (mse(pred_rgb, gt_rgb), ssim(pred_rgb, gt_rgb), psnr(pred_rgb, gt_rgb)),
                     depth_metrics(pred_depth, gt_depth), poses)


def aggregate(evals: Sequence[ImageEval], period: float | None = None) -> EvalReport:
    """Dataset report: instance scores per the per-image formulas, image/depth scores averaged."""
    if not evals:
        raise MetricError("no images to evaluate")
    inst = instance_metrics([e.matches for e in evals])
    poses = PosePairs()
    for e in evals:
        poses.extend(e.poses)
    ep, er, ers = poses.summary()
    depth = np.mean([e.depth for e in evals], axis=0)
    return EvalReport(
        images=len(evals), mAP=inst.mAP, AP50=inst.AP50, AR50=inst.AR50, F1_50=inst.F1_50, allObj=inst.allObj,
        rgb_rmse=float(np.mean([math.sqrt(e.rgb[0]) for e in evals])),
        psnr=float(np.mean([e.rgb[2] for e in evals])),
        ssim=float(np.mean([e.rgb[1] for e in evals])),
        depth_rmse=float(depth[0]), abs_rd=float(depth[1]), sq_rd=float(depth[2]),
        err_pos=ep, err_rot=er, err_rot_sym=ers, sym_period_deg=math.degrees(period) if period else None,
    )


def scene_poses(scene) -> list[tuple]:
    """``(position, theta)`` of the enabled objects, in render order."""
    return [(o.extrinsics.position, o.extrinsics.theta) for o in scene.active]


def evaluate_scene(pred_scene, gt_scene, gt_rgb, gt_depth, gt_ids, render_cfg=None, period: float | None = None,
                   min_pixels: int = MIN_PIXELS, quantize: bool = True) -> ImageEval:
    """Render a fitted scene and score it against stored ground truth.

    With ``quantize`` the prediction passes through the dataset storage formats
    (8-bit color, float32 depth clipped at the far distance) so that a scene
    scored against its own files comes out exact.
    """
    render, _ = pred_scene.render(render_cfg)
    color, depth = render.color_value, render.depth_value
    if quantize:
        far = render_cfg.far if render_cfg is not None else RayMarchConfig().far
        color = to_uint8(color) / 255.0
        depth = np.minimum(depth, far).astype(np.float32).astype(np.float64)
    gt_masks = masks_from_ids(gt_ids, len(gt_scene.objects))
    return evaluate_image(render.masks, gt_masks, color, gt_rgb, depth, gt_depth,
                          scene_poses(pred_scene), scene_poses(gt_scene), period, min_pixels)

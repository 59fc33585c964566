"""Acceptance criteria, one test each; see the summary section printed by pytest."""
import math
import time

import numpy as np
import pytest

from scenedecomp import autodiff as ad
from scenedecomp.datagen import DatasetManifest, GeneratorConfig, generate_dataset, load_scene_record, sample_scene
from scenedecomp.fitting import FitConfig, fit_scene
from scenedecomp.geometry import CameraModel, GroundPlane, ObjectExtrinsics
from scenedecomp.losses import (BlurSchedule, LossWeights, loss_depth, loss_ground, loss_image, loss_in_view,
                                loss_intersection, loss_shape_reg, scene_loss)
from scenedecomp.metrics import (iou, masks_from_ids, match_all, match_instances, instance_metrics, pose_pairs,
                                 psnr_from_mse, ssim)
from scenedecomp.renderer import (ObjectLatent, RayMarchConfig, compose_scene, ray_march_zero_crossing,
                                  render_object)
from scenedecomp.scene import ground_penalty, pair_intersection
from scenedecomp.shapes import AnalyticShape, ConstantTexture

from _support import box, brute_force_ids, brute_force_tp, generated, ssim_direct


@pytest.mark.criterion(1, "gradient fidelity")
def test_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    fractions = []
    for seed in range(5):
        scene, _, rgb, depth, _ = generated(2, seed, size=16, salt=11)
        latent = scene.encoded()
        rng = np.random.default_rng(seed)
        x0 = latent.to_vector() + 0.05 * rng.normal(size=latent.to_vector().size)
        w, blur = LossWeights(), BlurSchedule()

        def f(leaf):
            objects, bg, sfs, tfs = latent.unpack(leaf)
            return scene_loss(objects, bg, rgb, depth, latent.camera, RayMarchConfig(), w, 0, sfs, tfs, blur)[0]

        rep = ad.gradcheck(f, x0, h=1e-5, tol=1e-3)
        fractions.append((rep.pass_fraction, rep.checked, int(rep.kink_adjacent.sum())))
    elapsed = time.perf_counter() - t0
    ok = all(fr >= 0.95 and checked > 0 for fr, checked, _ in fractions) and elapsed < 120
    detail = ", ".join(f"{fr:.1%} of {c} ({k} kink)" for fr, c, k in fractions)
    verdict.record(ok, f"{detail}; {elapsed:.1f} s")


@pytest.mark.criterion(2, "renderer analytic accuracy")
def test_renderer_accuracy(verdict):
    cam = CameraModel(cam_to_world=np.eye(4), width=33, height=33)
    sphere = ObjectLatent.from_extrinsics(ObjectExtrinsics.from_pose((0, 0, 5), 0.0, 1.0, 0.5, 2.0))
    r = render_object(sphere, cam, RayMarchConfig(steps=12), AnalyticShape("sphere"), ConstantTexture((1, 0, 0)))
    sphere_err = abs(float(r.depth_value[16, 16]) - 4.6)

    plane_err = 0.0
    rng = np.random.default_rng(0)
    for _ in range(200):
        c, n = rng.uniform(1.5, 11.0), int(rng.integers(2, 40))

        def sdf(pts, plain, c=c):
            return c - pts[2]

        res = ray_march_zero_crossing(sdf, np.eye(3), np.zeros(3), np.zeros((1, 2)), 1.0, 12.0,
                                      RayMarchConfig(steps=n))
        plane_err = max(plane_err, abs(float(res.depth[0]) - c))

    far_away = ObjectLatent.from_extrinsics(ObjectExtrinsics.from_pose((0, 0, 40), 0.0, 1.0, 0.5, 2.0))
    miss = render_object(far_away, cam, RayMarchConfig(), AnalyticShape("sphere"), ConstantTexture((1, 0, 0)))
    off = render_object(ObjectLatent.from_extrinsics(ObjectExtrinsics.from_pose((1.5, 0, 5), 0.0, 1.0, 0.5, 2.0)),
                        cam, RayMarchConfig(), AnalyticShape("sphere"), ConstantTexture((1, 0, 0)))
    miss_ok = (not miss.mask.any() and np.all(miss.depth_value == 12.0) and not off.mask[16, 16]
               and off.depth_value[16, 16] == 12.0)
    ok = sphere_err < 0.01 and plane_err <= 1e-6 and miss_ok
    verdict.record(ok, f"sphere |d-4.6| = {sphere_err:.2e}, plane max error {plane_err:.1e}, misses ok: {miss_ok}")


def _random_renders(rng, cam, n, distinct=True):
    renders = []
    for k in range(n):
        pos = (rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(0.2, 0.8))
        e = ObjectExtrinsics.from_pose(pos, rng.uniform(-math.pi, math.pi), rng.uniform(0.7, 1.2))
        shape = AnalyticShape(str(rng.choice(["sphere", "box", "cylinder"])), tuple(rng.uniform(0.75, 1.25, 3)))
        renders.append(render_object(ObjectLatent.from_extrinsics(e), cam, RayMarchConfig(), shape,
                                     ConstantTexture(tuple(rng.random(3)))))
    return renders


@pytest.mark.criterion(3, "compositor oracle equivalence")
def test_compositor_oracle(verdict):
    cam = CameraModel(width=48, height=48)
    rng = np.random.default_rng(3)
    bg = np.array([0.6, 0.6, 0.6])
    winner_ok = perm_ok = 0
    perm_cases = 0
    for _ in range(100):
        renders = _random_renders(rng, cam, int(rng.integers(1, 6)))
        comp = compose_scene(renders, bg, cam)
        ids = brute_force_ids(renders, cam)
        values_ok = True
        for k, r in enumerate(renders):
            sel = ids == k + 1
            values_ok &= bool(np.array_equal(comp.depth_value[sel], r.depth_value[sel]))
            values_ok &= bool(np.array_equal(comp.color_value[sel], r.color_value[sel]))
        winner_ok += bool(np.array_equal(comp.instance_ids(), ids)) and values_ok
        stack = np.sort(np.stack([np.where(r.mask, r.depth_value, np.inf) for r in renders]), axis=0)
        if len(renders) > 1 and np.any(np.isfinite(stack[1]) & (stack[0] == stack[1])):
            continue  # equal depths are settled by index, which a permutation legitimately changes
        perm_cases += 1
        perm = rng.permutation(len(renders))
        other = compose_scene([renders[p] for p in perm], bg, cam)
        perm_ok += (np.array_equal(comp.color_value, other.color_value)
                    and np.array_equal(comp.depth_value, other.depth_value))
    ok = winner_ok == 100 and perm_ok == perm_cases and perm_cases >= 90
    verdict.record(ok, f"winner matches oracle in {winner_ok}/100 scenes; permutation-invariant in "
                       f"{perm_ok}/{perm_cases} distinct-depth scenes")


@pytest.mark.criterion(4, "metric suite correctness")
def test_metric_suite(verdict):
    agree = checked = 0
    for seed in range(1000):
        rng = np.random.default_rng([4, seed])
        pred = [m for m in masks_from_ids(rng.integers(0, 4, (8, 8)), 3) if m.any()]
        gt = [m for m in masks_from_ids(rng.integers(0, 4, (8, 8)), 3) if m.any()]
        opt, table = brute_force_tp(pred, gt, 0.5)
        vals = table[table > 0]
        if len(np.unique(vals)) != len(vals):
            continue
        checked += 1
        m = match_instances(pred, gt, 0.5, min_pixels=1)
        agree += m.tp == opt and m.fp == len(pred) - opt and m.fn == len(gt) - opt
    psnr_ok = psnr_from_mse(0.01) == 20.0

    rng = np.random.default_rng(44)
    ssim_err = 0.0
    for _ in range(5):
        a = rng.random((16, 16, 3))
        b = np.clip(a + 0.2 * rng.normal(size=a.shape), 0, 1)
        direct = np.mean([ssim_direct(a[..., c], b[..., c]) for c in range(3)])
        ssim_err = max(ssim_err, abs(ssim(a, b) - direct))

    a_gt = [box(0, 10, 0, 10), box(20, 30, 20, 30)]
    a_pred = [box(0, 10, 0, 10), box(20, 30, 23, 33), box(35, 39, 35, 39)]
    s = instance_metrics([match_all(a_pred, a_gt), match_all([box(25, 35, 25, 35)], [box(0, 10, 0, 10)])])
    toy_ok = (s.mAP, s.AP50, s.AR50, s.F1_50, s.allObj) == (0.275, 0.5, 0.5, 0.5, 0.5)
    ok = agree == checked and checked >= 500 and psnr_ok and ssim_err <= 1e-6 and toy_ok
    verdict.record(ok, f"greedy = optimum on {agree}/{checked} distinct-IoU cases; PSNR(0.01) = "
                       f"{psnr_from_mse(0.01)}; SSIM max deviation {ssim_err:.1e}; toy set exact: {toy_ok}")


def _roundtrip_batch(k, n=20):
    t0 = time.perf_counter()
    visible = matched = 0
    dists, folded = [], []
    for seed in range(n):
        scene, _, rgb, depth, ids = generated(k, seed, salt=99)
        res = fit_scene(rgb, depth, scene.camera, FitConfig(slots=k))
        pred, _ = res.scene.render()
        gt_masks = masks_from_ids(ids, k)
        m = match_instances(pred.masks, gt_masks, 0.5)
        visible += len(m.gt_ids)
        matched += m.tp
        pairs = pose_pairs([(o.extrinsics.position, o.extrinsics.theta) for o in res.scene.active],
                           [(o.extrinsics.position, o.extrinsics.theta) for o in scene.objects], m, math.pi / 2)
        dists += pairs.distances
        folded += pairs.folded
    return visible, matched, dists, folded, time.perf_counter() - t0


@pytest.mark.criterion(5, "round-trip fitting")
def test_round_trip(verdict):
    parts, ok = [], True
    for k in (1, 2, 3):
        visible, matched, dists, folded, secs = _roundtrip_batch(k)
        rate = matched / visible
        ok &= rate >= 0.9 and secs <= 600
        part = f"K={k}: {matched}/{visible} matched ({rate:.0%}), {secs / 60:.1f} min"
        if k == 1:
            err_pos = float(np.mean(dists))
            err_rot = math.degrees(float(np.median(folded)))
            ok &= err_pos <= 0.1 and err_rot <= 10.0
            part += f", Err_pos {err_pos:.3f}, folded Err_rot {err_rot:.1f} deg"
        parts.append(part)
    verdict.record(ok, "; ".join(parts))


@pytest.mark.criterion(6, "loss and schedule conformance")
def test_loss_schedule(verdict):
    w, b = LossWeights(), BlurSchedule()
    ends = (w.shape(0), w.shape(w.shape_steps), b.sigma(0), b.sigma(b.steps))
    ends_ok = ends == (0.025, 0.0025, 16 / 3, 0.5) and b.length == 16
    lam_ok = (w.image, w.depth, w.ground) == (1.0, 0.1, 0.01)
    rng = np.random.default_rng(6)
    cam = CameraModel(width=12, height=12)
    worst = math.inf
    for _ in range(1000):
        n = int(rng.integers(1, 4))
        objs, fields = [], []
        for _ in range(n):
            e = ObjectExtrinsics.from_pose(rng.uniform([-3, -3, -1], [3, 3, 2]), rng.uniform(-math.pi, math.pi),
                                           rng.uniform(0.7, 1.2))
            objs.append(ObjectLatent.from_extrinsics(e, shape_code=rng.normal(size=3)))
            fields.append(AnalyticShape(str(rng.choice(["sphere", "box", "cylinder"]))))
        sigma = rng.uniform(0.5, 16 / 3)
        vals = (loss_image(rng.random((12, 12, 3)), rng.random((12, 12, 3)), sigma),
                loss_depth(12 * rng.random((12, 12)), 12 * rng.random((12, 12)), sigma),
                loss_ground(objs, fields), loss_shape_reg(objs), loss_in_view(objs, cam),
                loss_intersection(objs, fields))
        worst = min(worst, min(float(v) for v in vals))
    ok = ends_ok and lam_ok and worst >= 0
    verdict.record(ok, f"endpoints {ends}; lambda defaults ({w.image}, {w.depth}, {w.ground}); "
                       f"smallest term over 1000 draws {worst:.3g}")


@pytest.mark.criterion(7, "dataset validity")
def test_dataset_validity(verdict, tmp_path):
    manifest = DatasetManifest(splits={"test": 100}, seed=7)
    generate_dataset(manifest, tmp_path / "a")
    generate_dataset(manifest, tmp_path / "b")
    names = [f"{i:06d}" for i in range(100)]
    bitwise = all((tmp_path / "a" / sub / f"{n}{ext}").read_bytes() == (tmp_path / "b" / sub / f"{n}{ext}").read_bytes()
                  for n in names for sub, ext in (("scenes", ".scene"), ("rgb", ".png"), ("depth", ".f32"),
                                                  ("mask", ".png")))
    problems = []
    gen = manifest.generator
    plane = GroundPlane().depth_image(gen.camera(), gen.far)
    for n in names:
        rec = load_scene_record(tmp_path / "a", n)
        scene = rec.scene
        for i, o in enumerate(scene.objects):
            x, y, _ = o.extrinsics.position
            if not (-1.5 <= x <= 1.5 and -1.5 <= y <= 1.5) or ground_penalty(scene, i) > 0:
                problems.append(f"{n}: object {i} placement")
            for j in range(i):
                if pair_intersection(scene, i, j, 10) > 0 or pair_intersection(scene, i, j, 32) > 0:
                    problems.append(f"{n}: objects {i},{j} intersect")
        if rec.depth.max() > 12.0:
            problems.append(f"{n}: depth beyond 12")
        _, per = scene.render_all(gen.march())
        if not np.array_equal(rec.mask, brute_force_ids(per, scene.camera, gen.far)):
            problems.append(f"{n}: mask differs from the depth oracle")
        bg = rec.mask == 0
        if not np.array_equal(rec.depth[bg], plane[bg].astype(np.float32)):
            problems.append(f"{n}: background depth")
        expected_rgb = np.empty_like(rec.rgb)
        expected_rgb[:] = scene.background_color
        expected_depth = plane.copy()
        for k, r in enumerate(per):
            sel = rec.mask == k + 1
            expected_rgb[sel] = r.color_value[sel]
            expected_depth[sel] = r.depth_value[sel]
        if not np.array_equal(rec.rgb, np.round(expected_rgb * 255) / 255):
            problems.append(f"{n}: color disagrees with mask")
        if not np.array_equal(rec.depth, np.minimum(expected_depth, 12.0).astype(np.float32)):
            problems.append(f"{n}: depth disagrees with mask")
    ok = bitwise and not problems
    verdict.record(ok, f"100 scenes, regeneration bitwise identical: {bitwise}; "
                       f"{len(problems)} problems{': ' + '; '.join(problems[:3]) if problems else ''}")


@pytest.mark.criterion(8, "hidden-object invariance")
def test_hidden_object(verdict):
    checked = nonempty = 0
    failures = 0
    for seed in range(40):
        scene, cfg, *_ = generated(int(seed % 4) + 1, seed, salt=8)
        march = RayMarchConfig()
        _, per = scene.render_all(march)
        base = compose_scene(per, scene.background_color, scene.camera)
        host = scene.objects[seed % len(scene.objects)]
        e = host.extrinsics
        # a shrunken copy sharing the host's center is enclosed by it; one sunk below the ground is behind the plane
        inner = ObjectExtrinsics.from_pose(e.position, e.theta, 0.65, e.s_min, e.s_max)
        inner_scale = 0.65 / float(e.scale)
        sunk = ObjectExtrinsics.from_pose((e.position[0], e.position[1], -1.0), e.theta, 0.8)
        for ext, shape in ((inner, AnalyticShape(host.shape.kind, tuple(a * inner_scale for a in host.shape.axes))),
                           (sunk, host.shape)):
            hidden = render_object(ObjectLatent.from_extrinsics(ext), scene.camera, march, shape,
                                   ConstantTexture((1.0, 0.0, 1.0)))
            nonempty += bool(hidden.mask.any())
            for pos in range(len(per) + 1):
                renders = per[:pos] + [hidden] + per[pos:]
                comp = compose_scene(renders, scene.background_color, scene.camera)
                checked += 1
                same = (np.array_equal(comp.color_value, base.color_value)
                        and np.array_equal(comp.depth_value, base.depth_value) and not comp.masks[pos].any())
                failures += not same
    ok = failures == 0 and nonempty > 0
    verdict.record(ok, f"{checked} insertions of a fully hidden object ({nonempty} with a nonempty own mask), "
                       f"{failures} changed the composite")

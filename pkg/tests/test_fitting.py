import math
from dataclasses import replace

import numpy as np
import pytest

from scenedecomp.fitting import (AdamState, FitConfig, FullyExplained, PoseRejected, RemoveObject, SetPose,
                                 SetShape, SetTexture, SwapPositions, adam_step, apply_edit, fit_scene,
                                 init_next_slot, merge_slots, pad_slots, pose_is_valid, sample_valid_pose)
from scenedecomp.losses import total_loss
from scenedecomp.metrics import iou
from scenedecomp.renderer import RayMarchConfig
from scenedecomp.scene import SceneLatent, pair_intersection, scenes_equal
from scenedecomp.shapes import AnalyticShape

from _support import generated, sphere_scene


# --- Adam -----------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    st = AdamState.zeros(4, lr=1e-2)
    out = adam_step(st, np.ones(4), np.ones(4))
    np.testing.assert_allclose(1.0 - out, 1e-2 / (1 + 1e-8), rtol=1e-12)
    assert st.t == 1 and np.all(st.v >= 0)


def test_adam_zero_gradient_is_a_no_op():
    st = AdamState.zeros(3, lr=0.1)
    p = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(adam_step(st, p, np.zeros(3)), p)


def test_adam_descends_a_parabola():
    st = AdamState.zeros(1, lr=0.1)
    x = np.array([1.0])
    f = [1.0]
    for _ in range(2):
        x = st.step(x, 2 * x)
        f.append(float(x[0] ** 2))
    assert f[0] > f[1] > f[2]


def test_adam_dimension_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(3), np.zeros(4), np.zeros(4))


def test_fit_config_validation():
    for bad in (dict(slots=0), dict(steps_per_slot=0), dict(final_steps=0), dict(lr=0.0), dict(blur_mode="x"),
                dict(blur_steps=0), dict(init_color="x")):
        with pytest.raises(ValueError):
            FitConfig(**bad)


def test_schedules_rescaled_to_budget():
    cfg = FitConfig(slots=2, steps_per_slot=10, final_steps=5)
    w, b = cfg.schedules()
    assert w.shape(0) == 0.025 and w.shape(cfg.total_steps) == 0.0025
    assert b.sigma(0) == 16 / 3 and b.sigma(20) == 0.5
    assert FitConfig(blur_mode="phase", steps_per_slot=7).schedules()[1].steps == 7


# --- slot initialization ----------------------------------------------------

def _background_render(scene, rgb):
    bg = np.median(rgb.reshape(-1, 3), axis=0)
    render, _ = SceneLatent.with_background([], bg, camera=scene.camera).render()
    return render


def test_seed_lands_near_single_object():
    errs = []
    for seed in range(20):
        scene, _, rgb, depth, _ = generated(1, seed)
        ext, _ = init_next_slot(rgb, depth, _background_render(scene, rgb), scene.camera)
        errs.append(np.linalg.norm(ext.position[:2] - scene.objects[0].extrinsics.position[:2]))
    assert np.percentile(errs, 90) < 0.5


def test_explained_target_signals_done():
    scene, _, rgb, depth, _ = generated(2, 0)
    render, _ = scene.render(RayMarchConfig(steps=96))
    with pytest.raises(FullyExplained):
        init_next_slot(render.color_value, render.depth_value, render, scene.camera)


def test_next_seed_targets_unexplained_object():
    scene = sphere_scene([(-1.0, 0.0, 0.4), (1.0, 0.3, 0.4)])
    target, _ = scene.render()
    partial = replace(scene, objects=scene.objects[:1])
    current, _ = partial.render()
    ext, _ = init_next_slot(target.color_value, target.depth_value, current, scene.camera)
    p = ext.position[:2]
    assert np.linalg.norm(p - [1.0, 0.3]) < np.linalg.norm(p - [-1.0, 0.0])


# --- fitting ----------------------------------------------------------------

def _matched(fit_scene_latent, gt_ids, k):
    render, _ = fit_scene_latent.render()
    gt = gt_ids == k + 1
    scores = [iou(m, gt) for m in render.masks]
    j = int(np.argmax(scores))
    return scores[j], j


def test_single_object_round_trip():
    scene, _, rgb, depth, ids = generated(1, 0)
    cfg = FitConfig(slots=1)
    assert cfg.total_steps <= 2000
    res = fit_scene(rgb, depth, scene.camera, cfg)
    score, j = _matched(res.scene, ids, 0)
    err = np.linalg.norm(res.scene.active[j].extrinsics.position - scene.objects[0].extrinsics.position)
    assert score > 0.9
    assert err < 0.05
    assert res.best_loss <= res.init_loss


def test_fit_is_deterministic():
    scene, _, rgb, depth, _ = generated(1, 4)
    cfg = FitConfig(slots=1, steps_per_slot=20, final_steps=10)
    a = fit_scene(rgb, depth, scene.camera, cfg)
    b = fit_scene(rgb, depth, scene.camera, cfg)
    np.testing.assert_array_equal(a.scene.to_vector(), b.scene.to_vector())
    assert a.best_loss == b.best_loss


def test_fit_rejects_mismatched_target():
    scene, _, rgb, depth, _ = generated(1, 0)
    with pytest.raises(ValueError):
        fit_scene(rgb[:-1], depth[:-1], scene.camera, FitConfig(slots=1, steps_per_slot=1, final_steps=1))


def test_surplus_slot_is_harmless():
    scene, _, rgb, depth, ids = generated(2, 1)
    cfg2, cfg3 = FitConfig(slots=2), FitConfig(slots=3)
    two = fit_scene(rgb, depth, scene.camera, cfg2)
    three = fit_scene(rgb, depth, scene.camera, cfg3)
    full, per = three.scene.render_all()
    for k in range(2):
        assert _matched(three.scene, ids, k)[0] >= 0.5
    # at most two slots may own pixels; any other slot is disabled, hidden or off-image
    assert sum(int(m.any()) for m in full.masks) <= 2
    enabled = [k for k, o in enumerate(three.scene.objects) if o.enabled]
    for mask, k in zip(full.masks, enabled):
        if not mask.any():
            objs = list(three.scene.objects)
            objs[k] = replace(objs[k], enabled=False)
            without, _ = replace(three.scene, objects=objs).render()
            np.testing.assert_array_equal(without.color_value, full.color_value)
            np.testing.assert_array_equal(without.depth_value, full.depth_value)
    w2, b2 = cfg2.schedules()
    w3, b3 = cfg3.schedules()
    r2 = total_loss(two.scene, rgb, depth, cfg2.render, w2, cfg2.total_steps, b2)
    r3 = total_loss(three.scene, rgb, depth, cfg3.render, w3, cfg3.total_steps, b3)
    for term in ("image", "depth"):
        assert abs(r3.terms[term] - r2.terms[term]) <= 0.1 * r2.terms[term], term


def test_merge_drops_slot_that_splits_an_object():
    scene = sphere_scene([(0.0, 0.0, 0.4)]).encoded()
    half = scene.objects[0]
    left = replace(half, extrinsics=replace(half.extrinsics, position=np.array([-0.12, 0.0, 0.4])))
    right = replace(half, extrinsics=replace(half.extrinsics, position=np.array([0.12, 0.0, 0.4])))
    target, _ = scene.render()
    split = replace(scene, objects=[left, right])
    cfg = FitConfig(slots=2)
    w, b = cfg.schedules()
    loss = total_loss(split, target.color_value, target.depth_value, cfg.render, w, cfg.total_steps, b).total
    merged, val = merge_slots(split, target.color_value, target.depth_value, cfg, w, b, loss)
    assert len(merged.active) == 1 and val <= loss


def test_pad_slots_adds_disabled_neutral_slots():
    scene = sphere_scene([(0, 0, 0.4)]).encoded()
    padded = pad_slots(scene, 3)
    assert len(padded.objects) == 3 and [o.enabled for o in padded.objects] == [True, False, False]
    a, _ = scene.render()
    b, _ = padded.render()
    np.testing.assert_array_equal(a.color_value, b.color_value)


# --- editing ----------------------------------------------------------------

def test_swap_twice_restores_scene():
    scene, *_ = generated(3, 2)
    once = apply_edit(scene, SwapPositions(0, 2))
    assert not scenes_equal(once, scene)
    assert scenes_equal(apply_edit(once, SwapPositions(0, 2)), scene)
    assert once.objects[0].extrinsics.position[2] == scene.objects[0].extrinsics.position[2]


def test_remove_drops_mask():
    scene, _, _, _, ids = generated(2, 3)
    out = apply_edit(scene, RemoveObject(1))
    render, _ = out.render()
    assert len(render.masks) == 1 and len(scene.objects) == 2
    with pytest.raises(IndexError):
        apply_edit(scene, RemoveObject(5))


def test_shape_copy_matches_other_slot_render():
    scene = sphere_scene([(-0.8, 0.0, 0.4), (0.8, 0.0, 0.4)]).encoded()
    objs = list(scene.objects)
    objs[1] = replace(objs[1], shape=np.linspace(-0.02, 0.03, scene.shape_space.code_dim))
    scene = replace(scene, objects=objs)
    edited = apply_edit(scene, SetShape(0, scene.objects[1].shape))
    edited = apply_edit(edited, SetPose(0, scene.objects[1].extrinsics))
    edited = apply_edit(edited, SetTexture(0, scene.objects[1].texture))
    _, per = edited.render_all()
    np.testing.assert_array_equal(per[0].color_value, per[1].color_value)
    np.testing.assert_array_equal(per[0].depth_value, per[1].depth_value)
    with pytest.raises(ValueError):
        apply_edit(scene, SetShape(0, np.zeros(3)))


def test_edits_leave_input_untouched():
    scene, *_ = generated(2, 6)
    before = scene.copy()
    apply_edit(scene, SwapPositions(0, 1))
    apply_edit(scene, SetShape(0, AnalyticShape("box")))
    assert scenes_equal(before, scene)


# --- pose sampling ------------------------------------------------------------

def test_sample_pose_in_empty_scene():
    scene = sphere_scene([(0.0, 0.0, 0.4)])
    ext = sample_valid_pose(scene, 0, np.random.default_rng(0), max_attempts=1)
    assert -1.5 <= ext.position[0] <= 1.5 and -1.5 <= ext.position[1] <= 1.5


def test_sample_pose_rejects_blocked_range():
    scene = sphere_scene([(0.0, 0.0, 0.4), (1.0, 1.0, 0.4)], radius_scale=1.2)
    with pytest.raises(PoseRejected):
        sample_valid_pose(scene, 1, np.random.default_rng(0), position_range=(-0.1, 0.1), max_attempts=50)
    with pytest.raises(ValueError):
        sample_valid_pose(scene, 1, np.random.default_rng(0), position_range=(-2.0, 0.0))


def test_sampled_poses_never_intersect():
    scene, *_ = generated(3, 8)
    rng = np.random.default_rng(1)
    for slot in range(3):
        try:
            ext = sample_valid_pose(scene, slot, rng)
        except PoseRejected:
            continue
        trial = apply_edit(scene, SetPose(slot, ext))
        assert pose_is_valid(trial, slot)
        for j in range(3):
            if j != slot:
                assert pair_intersection(trial, slot, j, 10) == 0.0

import math

import numpy as np
import pytest

from scenedecomp.geometry import (CameraModel, GeometryError, GroundPlane, ObjectExtrinsics, angle_from_two_param,
                                  apply, camera_to_object, extrinsics_to_world_to_object, invert_rigid_scaled,
                                  look_at, pixel_to_ray, ray_point, rotation_z, squash_scale, unsquash_scale)


@pytest.mark.parametrize("zc, zs, want", [(1, 0, 0.0), (0, 1, math.pi / 2), (-1, 0, math.pi)])
def test_angle_from_two_param(zc, zs, want):
    assert angle_from_two_param(zc, zs) == pytest.approx(want, abs=1e-15)


def test_angle_degenerate_pair_rejected():
    with pytest.raises(GeometryError):
        angle_from_two_param(0.0, 0.0)
    with pytest.raises(GeometryError):
        ObjectExtrinsics(np.zeros(3), 0.0, 0.0)


def test_squash_scale_examples():
    assert squash_scale(0.0, 0.625, 1.25) == pytest.approx(0.9375, abs=1e-15)
    assert abs(squash_scale(20.0, 0.625, 1.25) - 1.25) < 1e-6
    assert abs(squash_scale(-20.0, 0.625, 1.25) - 0.625) < 1e-6
    with pytest.raises(GeometryError):
        squash_scale(0.0, 1.0, 1.0)


def test_unsquash_inverts_squash():
    for s in (0.63, 0.9, 1.2):
        assert float(squash_scale(unsquash_scale(s, 0.625, 1.25), 0.625, 1.25)) == pytest.approx(s, rel=1e-12)
    with pytest.raises(GeometryError):
        unsquash_scale(1.25, 0.625, 1.25)


def test_identity_extrinsics_give_identity_transform():
    e = ObjectExtrinsics.from_pose((0, 0, 0), 0.0, 1.0, 0.5, 2.0)
    np.testing.assert_allclose(extrinsics_to_world_to_object(e), np.eye(4), atol=1e-15)


def test_translation_maps_position_to_origin():
    e = ObjectExtrinsics.from_pose((1, 2, 0), 0.0, 1.0, 0.5, 2.0)
    np.testing.assert_allclose(apply(extrinsics_to_world_to_object(e), [1, 2, 0]), 0.0, atol=1e-15)


def test_world_to_object_matches_inverse_of_object_to_world_product():
    # independent oracle: invert T(p) @ Rz(theta) @ S(s), multiplied out by hand
    p, theta, s = np.array([0.3, -0.7, 0.2]), math.pi / 2, 2.0
    e = ObjectExtrinsics.from_pose(p, theta, s, 0.5, 4.0)
    translate = np.eye(4)
    translate[:3, 3] = p
    rot = np.eye(4)
    rot[:3, :3] = [[math.cos(theta), -math.sin(theta), 0], [math.sin(theta), math.cos(theta), 0], [0, 0, 1]]
    scale = np.diag([s, s, s, 1.0])
    oracle = np.linalg.inv(translate @ rot @ scale)
    t = extrinsics_to_world_to_object(e)
    np.testing.assert_allclose(t, oracle, atol=1e-12)
    e0 = ObjectExtrinsics.from_pose((0, 0, 0), theta, s, 0.5, 4.0)
    # (1,0,0) rotated by -90 degrees is (0,-1,0), then divided by the scale
    np.testing.assert_allclose(apply(extrinsics_to_world_to_object(e0), [1, 0, 0]), [0, -0.5, 0], atol=1e-12)


def test_transform_is_affine_with_unit_bottom_row():
    e = ObjectExtrinsics((0.1, 0.2, 0.3), 0.3, -0.8, 0.4)
    t = extrinsics_to_world_to_object(e)
    np.testing.assert_array_equal(t[3], [0, 0, 0, 1])
    r = e.rotation()
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(r @ [0, 0, 1], [0, 0, 1], atol=1e-15)


def test_center_pixel_is_principal_ray():
    for w, h in ((64, 64), (33, 17)):
        cam = CameraModel(width=w, height=h)
        np.testing.assert_allclose(pixel_to_ray(cam, (w / 2, h / 2)), [0, 0], atol=1e-15)


def test_top_edge_ray_matches_half_fov():
    cam = CameraModel(width=64, height=64, fov=math.radians(45))
    u = pixel_to_ray(cam, (32.0, 0.0))
    assert u[0] == pytest.approx(0.0, abs=1e-15)
    assert u[1] == pytest.approx(-math.tan(math.radians(22.5)), rel=1e-12)


def test_pixel_out_of_bounds_rejected():
    with pytest.raises(GeometryError):
        pixel_to_ray(CameraModel(), (-1, 3))


def test_point_on_principal_ray():
    np.testing.assert_allclose(ray_point((0.0, 0.0), 5.0), [0, 0, 5])


def test_identity_camera_and_extrinsics_compose_to_identity():
    cam = CameraModel(cam_to_world=np.eye(4))
    e = ObjectExtrinsics.from_pose((0, 0, 0), 0.0, 1.0, 0.5, 2.0)
    np.testing.assert_allclose(camera_to_object(e, cam), np.eye(4), atol=1e-15)


def test_camera_to_object_associativity():
    rng = np.random.default_rng(3)
    for _ in range(20):
        cam = CameraModel(cam_to_world=look_at(rng.uniform(-9, 9, 3) + [0, 0, 12], rng.uniform(-1, 1, 3)))
        e = ObjectExtrinsics(rng.uniform(-2, 2, 3), *rng.normal(size=2), rng.normal())
        x = rng.normal(size=3)
        lhs = apply(camera_to_object(e, cam), x)
        rhs = apply(extrinsics_to_world_to_object(e), apply(cam.cam_to_world, x))
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_default_camera_origin_distance_in_object_frame():
    # camera at (0, -8, 6): the camera origin is 10 world units from an object at the world origin,
    # i.e. 10 / s object units under x_obj = R^T (x - p) / s
    cam = CameraModel()
    np.testing.assert_allclose(cam.center, [0, -8, 6])
    for s in (0.7, 1.0, 1.2):
        e = ObjectExtrinsics.from_pose((0, 0, 0), 0.4, s)
        x = apply(camera_to_object(e, cam), [0, 0, 0])
        assert np.linalg.norm(x) == pytest.approx(10.0 / s, rel=1e-12)


def test_camera_looks_at_origin():
    cam = CameraModel()
    px, py, z = cam.project(np.zeros(3))
    assert px == pytest.approx(32.0) and py == pytest.approx(32.0)
    assert z == pytest.approx(10.0)
    # image y grows downward: a point above the origin projects to a smaller row
    assert cam.project(np.array([0, 0, 1.0]))[1] < 32.0


def test_inverse_recovers_points():
    rng = np.random.default_rng(0)
    for _ in range(10):
        e = ObjectExtrinsics(rng.uniform(-2, 2, 3), *rng.normal(size=2), 0.0, 0.5, 1.5)
        t = extrinsics_to_world_to_object(e)
        pts = rng.normal(size=(5, 3))
        np.testing.assert_allclose(apply(invert_rigid_scaled(t), apply(t, pts)), pts, atol=1e-10)


def test_ground_plane_depth():
    cam = CameraModel()
    d = GroundPlane().depth_image(cam, 12.0)
    assert d.shape == (64, 64)
    assert d.max() <= 12.0
    # center ray hits the origin at distance 10; upper rows look further away
    assert d[31:33, 31:33].mean() == pytest.approx(10.0, abs=0.2)
    assert d[0].mean() > d[-1].mean()


def test_rotation_z_quarter_turn():
    np.testing.assert_allclose(rotation_z(math.pi / 2) @ [1, 0, 0], [0, 1, 0], atol=1e-15)

import math

import numpy as np
import pytest

from normalfusion.geometry import (
    Camera,
    camera_to_world_normals,
    direction_basis,
    look_at,
    pixel_directions,
    pixel_ray,
    ray_sphere_interval,
    rotation_about,
    view_basis_inverses,
    world_to_camera_normals,
)
from normalfusion.grad import grad_dfd

import oracles


def make_camera(eye=(0.0, -3.0, 0.5), w=32, h=24):
    return Camera(100.0, 110.0, w / 2, h / 2, look_at(eye), np.array(eye), w, h)


def test_look_at_is_proper_rotation_facing_target():
    R = look_at((1.0, 2.0, 3.0), target=(0.1, -0.2, 0.0))
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    z = np.array([0.1, -0.2, 0.0]) - np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(R[:, 2], z / np.linalg.norm(z), atol=1e-12)


def test_look_at_straight_down():
    R = look_at((0.0, 0.0, 3.0))
    np.testing.assert_allclose(R[:, 2], [0, 0, -1], atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


@pytest.mark.parametrize("px", [(0, 0), (31, 23), (7, 12)])
def test_pixel_centre_ray_projects_back(px):
    cam = make_camera()
    ray = pixel_ray(cam, px)
    pt = ray.origin + 2.7 * ray.direction
    np.testing.assert_allclose(cam.project(pt[None])[0], [px[0] + 0.5, px[1] + 0.5], atol=1e-9)
    assert np.linalg.norm(ray.direction) == pytest.approx(1.0)


def test_sub_pixel_offset():
    cam = make_camera()
    ray = pixel_ray(cam, (3, 4), sub=(0.0, 0.25))
    np.testing.assert_allclose(cam.project((ray.origin + ray.direction)[None])[0], [3.0, 4.25], atol=1e-9)


@pytest.mark.parametrize("px,sub", [((32, 0), (0.5, 0.5)), ((-1, 0), (0.5, 0.5)), ((0, 0), (1.0, 0.5))])
def test_pixel_ray_rejects_out_of_range(px, sub):
    with pytest.raises(ValueError):
        pixel_ray(make_camera(), px, sub)


def test_camera_validation():
    R = look_at((0, -3, 0))
    with pytest.raises(ValueError):
        Camera(0.0, 1.0, 1, 1, R, np.zeros(3), 4, 4)
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 5, 1, R, np.zeros(3), 4, 4)
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 1, 1, R * 1.01, np.zeros(3), 4, 4)
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 1, 1, R @ np.diag([1, 1, -1]), np.zeros(3), 4, 4)


def test_camera_dict_roundtrip():
    cam = make_camera()
    back = Camera.from_dict(cam.to_dict())
    np.testing.assert_array_equal(back.rotation, cam.rotation)
    assert (back.fx, back.width, back.height) == (cam.fx, cam.width, cam.height)


def test_ray_sphere_interval_against_oracle():
    rng = np.random.default_rng(0)
    o = rng.normal(size=(50, 3)) * 2
    d = rng.normal(size=(50, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t0, t1 = ray_sphere_interval(o, d, 1.0)
    for i in range(50):
        t = oracles.ray_sphere(o[i], d[i], 1.0)
        if np.isnan(t0[i]) or t1[i] <= 0:
            assert t is None
        else:
            assert t == pytest.approx(t0[i] if t0[i] > 0 else t1[i], abs=1e-12)


def test_basis_inverse_recovers_linear_gradient():
    cam = make_camera()
    g = np.array([0.3, -1.2, 0.7])
    Vi = view_basis_inverses(cam)
    vv, uu = np.mgrid[0 : cam.height, 0 : cam.width]
    d = pixel_directions(cam, uu, vv)
    axes = cam.axes
    dd = np.stack([np.full(d.shape[:2], g @ axes[0]), np.full(d.shape[:2], g @ axes[1]), d @ g], axis=-1)
    np.testing.assert_allclose(grad_dfd(dd, Vi), np.broadcast_to(g, dd.shape), atol=1e-12)


def test_direction_basis_rows():
    cam = make_camera()
    ray = pixel_ray(cam, (5, 6))
    b = direction_basis(cam, ray)
    np.testing.assert_allclose(b.V @ b.V_inv, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(b.V[2], ray.direction)
    np.testing.assert_allclose(b.m, cam.rotation[:, 2])


def test_normal_rotation_roundtrip_and_renormalisation():
    cam = make_camera()
    rng = np.random.default_rng(1)
    n = rng.normal(size=(4, 5, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    n[0, 0] *= 1.5
    world, fixed = camera_to_world_normals(cam, n)
    assert fixed == 1
    np.testing.assert_allclose(np.linalg.norm(world, axis=-1), 1.0, atol=1e-12)
    back = world_to_camera_normals(cam, world)
    np.testing.assert_allclose(back[1:], n[1:], atol=1e-12)


def test_rotation_about_matches_rodrigues_oracle():
    axis, ang = np.array([1.0, 2.0, -0.5]), 0.83
    R = rotation_about(axis, ang)
    v = np.array([0.2, -0.4, 0.9])
    np.testing.assert_allclose(R @ v, oracles.rotate(v, axis, ang), atol=1e-12)
    np.testing.assert_allclose(rotation_about([0, 0, 1], math.pi / 2) @ [1, 0, 0], [0, 1, 0], atol=1e-12)

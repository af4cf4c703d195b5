import json
import math

import numpy as np
import pytest

from normalfusion.geometry import pixel_directions, world_to_camera_normals
from normalfusion.scene_io import (
    SceneError,
    SceneMeta,
    load_scene,
    read_pfm,
    validate_scene,
    write_pfm,
    write_scene,
)
from normalfusion.scene_synth import SynthSpec, add_noise, make_shape, perturb_normals, synth_views, turntable_cameras

import oracles

SPEC = dict(n_views=4, height=24, width=24, focal=60.0)


@pytest.fixture(scope="module")
def scene():
    return synth_views(SynthSpec(**SPEC), with_mesh=False)


def test_turntable_cameras_orbit_and_face_origin():
    spec = SynthSpec(n_views=6, second_ring_deg=-30.0)
    cams = turntable_cameras(spec)
    assert len(cams) == 6
    for c in cams:
        assert np.linalg.norm(c.center) == pytest.approx(3.0)
        np.testing.assert_allclose(c.axes[2], -c.center / 3.0, atol=1e-12)
    elev = sorted({round(math.degrees(math.asin(c.center[2] / 3.0)), 6) for c in cams})
    assert elev == [-30.0, 20.0]


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(n_views=1)
    with pytest.raises(ValueError):
        SynthSpec(noise_deg=-1)
    with pytest.raises(ValueError):
        SynthSpec(orbit_radius=0.9)
    with pytest.raises(ValueError):
        make_shape("teapot")


def test_rendered_normals_match_ray_sphere_oracle(scene):
    v = scene.views[1]
    cam = v.camera
    vv, uu = np.mgrid[0:24, 0:24]
    d = pixel_directions(cam, uu, vv)
    for r, c in [(12, 12), (8, 14), (3, 3), (15, 6)]:
        t = oracles.ray_sphere(cam.center, d[r, c], 0.5)
        assert (t is not None) == (v.mask[r, c] > 0.5)
        if t is not None:
            p = cam.center + t * d[r, c]
            np.testing.assert_allclose(v.normals[r, c], p / 0.5, atol=1e-4)


def test_noise_statistics_and_determinism():
    rng = np.random.default_rng(0)
    n = rng.normal(size=(20000, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    out = perturb_normals(n, 5.0, np.random.default_rng(1))
    ang = np.degrees(np.arccos(np.clip((n * out).sum(1), -1, 1)))
    # |N(0, 5)| has mean 5 sqrt(2 / pi)
    assert ang.mean() == pytest.approx(5 * math.sqrt(2 / math.pi), rel=0.03)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0)


def test_add_noise_per_view_streams(scene):
    a = add_noise(scene.views, 2.0, seed=3)
    b = add_noise(scene.views, 2.0, seed=3)
    c = add_noise(scene.views[1:], 2.0, seed=3)
    np.testing.assert_array_equal(a[1].normals, b[1].normals)
    assert not np.array_equal(a[0].normals, a[1].normals)
    # background untouched
    bg = scene.views[0].mask < 0.5
    np.testing.assert_array_equal(a[0].normals[bg], scene.views[0].normals[bg])
    assert c[0].normals.shape == a[1].normals.shape


def test_pfm_roundtrip_and_orientation(tmp_path):
    img = np.arange(12, dtype=np.float32).reshape(3, 4)
    write_pfm(tmp_path / "a.pfm", img)
    data = (tmp_path / "a.pfm").read_bytes()
    assert data.startswith(b"Pf\n4 3\n-1.0\n")
    # first stored row is the bottom image row
    np.testing.assert_array_equal(np.frombuffer(data[-48:-32], "<f4"), img[2])
    np.testing.assert_array_equal(read_pfm(tmp_path / "a.pfm"), img)
    rgb = np.random.default_rng(0).random((5, 2, 3)).astype(np.float32)
    write_pfm(tmp_path / "b.pfm", rgb)
    np.testing.assert_array_equal(read_pfm(tmp_path / "b.pfm"), rgb)


def test_pfm_big_endian_and_errors(tmp_path):
    img = np.array([[1.5, -2.0]], dtype=">f4")
    (tmp_path / "be.pfm").write_bytes(b"Pf\n2 1\n1.0\n" + img.tobytes())
    np.testing.assert_array_equal(read_pfm(tmp_path / "be.pfm"), [[1.5, -2.0]])
    (tmp_path / "short.pfm").write_bytes(b"Pf\n2 2\n-1.0\n" + b"\0" * 8)
    with pytest.raises(SceneError):
        read_pfm(tmp_path / "short.pfm")
    (tmp_path / "junk.pfm").write_bytes(b"P6\n1 1\n255\n\0\0\0")
    with pytest.raises(SceneError):
        read_pfm(tmp_path / "junk.pfm")


def test_scene_roundtrip(tmp_path, scene):
    meta = SceneMeta(analytic=make_shape("sphere").to_dict(), extra={"note": "kept"})
    write_scene(tmp_path / "s", scene.views, meta)
    back = load_scene(tmp_path / "s")
    assert len(back.views) == 4
    assert back.meta.extra == {"note": "kept"}
    assert back.analytic.to_dict() == make_shape("sphere").to_dict()
    np.testing.assert_allclose(back.views[2].normals, scene.views[2].normals, atol=1e-6)
    np.testing.assert_allclose(back.views[2].camera.rotation, scene.views[2].camera.rotation)
    assert validate_scene(tmp_path / "s") == []


def _to_opengl_camera_space(tmp_path, scene):
    out = tmp_path / "gl"
    write_scene(out, scene.views, SceneMeta())
    cams = json.loads((out / "cameras.json").read_text())
    flip = np.diag([1.0, -1.0, -1.0])
    for i, (cd, v) in enumerate(zip(cams["cameras"], scene.views)):
        cd["R"] = (np.asarray(cd["R"]).reshape(3, 3) @ flip).reshape(-1).tolist()
        write_pfm(out / f"normal_{i:03d}.pfm", world_to_camera_normals(v.camera, v.normals) @ flip)
    (out / "cameras.json").write_text(json.dumps(cams))
    meta = json.loads((out / "scene.json").read_text())
    meta.update(axis_convention="opengl", normals_space="camera")
    (out / "scene.json").write_text(json.dumps(meta))
    return out


def test_opengl_camera_space_scene_converts(tmp_path, scene):
    back = load_scene(_to_opengl_camera_space(tmp_path, scene))
    for a, b in zip(back.views, scene.views):
        fg = b.mask > 0.5
        np.testing.assert_allclose(a.normals[fg], b.normals[fg], atol=1e-5)
        np.testing.assert_allclose(a.camera.rotation, b.camera.rotation, atol=1e-12)


def test_load_scene_errors(tmp_path, scene):
    with pytest.raises(SceneError):
        load_scene(tmp_path / "missing")
    p = write_scene(tmp_path / "s", scene.views, SceneMeta())
    (p / "mask_003.pfm").unlink()
    with pytest.raises(SceneError, match="view 3"):
        load_scene(p)
    (p / "scene.json").write_text('{"axis_convention": "directx"}')
    with pytest.raises(SceneError):
        load_scene(p)


def test_validate_reports_problems(tmp_path, scene):
    p = write_scene(tmp_path / "s", scene.views, SceneMeta())
    cams = json.loads((p / "cameras.json").read_text())
    cams["cameras"][0]["R"] = [1.1 * r for r in cams["cameras"][0]["R"]]
    cams["cameras"][1]["t"] = [0.0, 0.2, 0.0]
    (p / "cameras.json").write_text(json.dumps(cams))
    flipped = -scene.views[2].normals
    write_pfm(p / "normal_002.pfm", flipped)
    write_pfm(p / "mask_003.pfm", np.ones((5, 5)))
    found = {(f.view, f.severity): f.message for f in validate_scene(p)}
    assert "orthonormal" in found[(0, "error")]
    assert "inside the scene bound" in found[(1, "warning")]
    assert "point away" in found[(2, "warning")]
    assert (3, "error") in found
    assert validate_scene(tmp_path / "nowhere")[0].severity == "error"


def test_validate_flags_non_unit_normals(tmp_path, scene):
    p = write_scene(tmp_path / "s", scene.views, SceneMeta())
    write_pfm(p / "normal_000.pfm", scene.views[0].normals * 0.5)
    msgs = [str(f) for f in validate_scene(p)]
    assert any("not unit length" in m for m in msgs)

import logging
import math

import numpy as np
import pytest

from normalfusion.field import AnalyticSdf
from normalfusion.geometry import ray_sphere_interval
from normalfusion.sampling import (
    NormalView,
    OccupancyGrid,
    StepSchedule,
    ViewSampler,
    march_rays,
    plane_extend,
    sample_batch,
    update_occupancy,
)

from helpers import camera, full_sampler


def brute_march(o, d, grid, h, off, stop_interior=True):
    t0, t1 = ray_sphere_interval(o[None], d[None], grid.bound)
    if np.isnan(t0[0]):
        return []
    t0, t1 = max(t0[0], 0.0), t1[0]
    out, k = [], 0
    while True:
        t = t0 + (k + off) * h
        if t > t1:
            break
        p = o + t * d
        idx = tuple(min(max(int(math.floor((p[a] + grid.bound) / grid.cell_size)), 0), grid.resolution - 1)
                    for a in range(3))
        if stop_interior and grid.interior[idx]:
            break
        if grid.bits[idx]:
            out.append(t)
        k += 1
    return out


def test_step_schedule_is_geometric():
    s = StepSchedule(1e-2, 1e-4, 100)
    assert s(0) == pytest.approx(1e-2)
    assert s(100) == pytest.approx(1e-4)
    assert s(50) == pytest.approx(1e-3)
    assert s(500) == pytest.approx(1e-4)


def test_band_width():
    g = OccupancyGrid(16)
    assert g.band == pytest.approx(math.log(9) / 80)
    g.opacity_margin = 0.05
    assert g.effective_band == pytest.approx(0.05 + 0.5 * math.sqrt(3) * g.cell_size)


def test_classify_band_and_interior():
    g = OccupancyGrid(16)
    b = g.band
    f = np.array([0.5, b * 0.9, -b * 0.9, -b * 1.1, -0.5])
    occ, interior = g.classify(f)
    assert occ.tolist() == [False, True, True, True, True]
    assert interior.tolist() == [False, False, False, True, True]


def test_literal_rule():
    g = OccupancyGrid(16, rule="literal")
    occ, interior = g.classify(np.array([-0.1, 0.0, 0.1]))
    assert occ.tolist() == [True, False, False]
    assert not interior.any()
    with pytest.raises(ValueError):
        OccupancyGrid(16, rule="fuzzy")


@pytest.mark.parametrize("shape", ["sphere", "torus"])
def test_hierarchical_update_equals_exact(shape):
    field = getattr(AnalyticSdf, shape)()
    a = update_occupancy(OccupancyGrid(64), field, hierarchical=False)
    b = update_occupancy(OccupancyGrid(64), field, hierarchical=True)
    np.testing.assert_array_equal(a.bits, b.bits)
    np.testing.assert_array_equal(a.interior, b.interior)


def test_occupancy_is_conservative_for_sphere():
    g = update_occupancy(OccupancyGrid(64), AnalyticSdf.sphere(0.5))
    # every cell that intersects the surface is occupied
    c = np.linalg.norm(g.cell_centers(), axis=-1)
    touching = np.abs(c - 0.5) <= 0.5 * math.sqrt(3) * g.cell_size
    assert g.bits[touching].all()


@pytest.mark.parametrize("stop", [True, False])
def test_march_matches_brute_force(stop):
    g = update_occupancy(OccupancyGrid(24), AnalyticSdf.torus())
    rng = np.random.default_rng(0)
    o = rng.normal(size=(40, 3))
    o = 3 * o / np.linalg.norm(o, axis=1, keepdims=True)
    d = rng.uniform(-0.3, 0.3, size=(40, 3)) - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    off = rng.random(40)
    t, _, n = march_rays(o, d, g, 0.013, offsets=off, stop_interior=stop)
    for i in range(40):
        np.testing.assert_allclose(t[i, : n[i]], brute_march(o[i], d[i], g, 0.013, off[i], stop), atol=1e-12)


def test_gap_flags_mark_lattice_breaks():
    g = OccupancyGrid(8)
    g.bits[:] = True
    g.bits[4, :, :] = False
    o, d = np.array([[-3.0, 0.01, 0.02]]), np.array([[1.0, 0.0, 0.0]])
    t, gap, n = march_rays(o, d, g, 0.05, stop_interior=False)
    k = np.round((t[0, : n[0]] - 2.0) / 0.05).astype(int)
    want = np.concatenate([[True], np.diff(k) != 1])
    np.testing.assert_array_equal(gap[0, : n[0]], want)
    assert gap[0, : n[0]].sum() == 2


def test_plane_extension_shares_camera_depth():
    cam = camera()
    sampler = full_sampler(cam)
    g = OccupancyGrid(16)
    samples, labels = sampler.build(np.array([[0, 12, 12], [0, 3, 20]]), g, 0.1)
    depth = np.einsum("sija,a->sij", samples.positions - cam.center, cam.rotation[:, 2])
    np.testing.assert_allclose(depth, depth[:, 1:2, 1:2].repeat(3, 1).repeat(3, 2), atol=1e-12)
    ratio = plane_extend(np.array([1.0]), samples.directions[0, 1, 1], samples.directions[0], cam.rotation[:, 2])
    np.testing.assert_allclose(ratio[0], samples.t_grid[1] / samples.t_grid[1, 1, 1], atol=1e-12)
    assert labels.row.tolist() == [11, 2]


def test_plane_extension_rejects_backward_rays():
    with pytest.raises(RuntimeError):
        plane_extend(np.array([1.0]), np.array([0, 0, 1.0]), np.array([[[0, 0, -1.0]]]), np.array([0, 0, 1.0]))


def test_samples_stay_inside_bound_margin():
    sampler = full_sampler()
    g = OccupancyGrid(16)
    samples, _ = sampler.build(sampler.draw(20, np.random.default_rng(0)), g, 0.05, margin=0.05)
    assert np.abs(samples.positions).max() <= 0.95


def test_sample_batch_is_seeded():
    sampler = full_sampler()
    g = OccupancyGrid(16)
    sched = StepSchedule(0.05, 0.01, 10)
    a, _ = sample_batch(sampler, g, sched, 3, 5, np.random.default_rng(7))
    b, _ = sample_batch(sampler, g, sched, 3, 5, np.random.default_rng(7))
    np.testing.assert_array_equal(a.positions, b.positions)


def test_sampler_pools_and_empty_views(caplog):
    cam = camera(size=10)
    mask = np.zeros((10, 10))
    mask[4:6, 4:6] = 1
    views = [NormalView(cam, np.zeros((10, 10, 3)), mask), NormalView(cam, np.zeros((10, 10, 3)), np.zeros((10, 10)))]
    with caplog.at_level(logging.WARNING):
        fg = ViewSampler(views, 3, "foreground")
    assert "view 1" in caplog.text
    assert len(fg.centers) == 4
    touching = ViewSampler(views, 3, "touching")
    assert len(touching.centers) == 16
    # every patch that fits in the 10x10 image; the empty view stays excluded
    assert len(ViewSampler(views, 3).centers) == 64
    with pytest.raises(ValueError):
        ViewSampler(views[1:], 3)
    with pytest.raises(ValueError):
        ViewSampler(views, 3, pool="everything")


def test_dump_run_lengths(tmp_path):
    g = OccupancyGrid(4)
    g.bits[:] = False
    g.bits[0, 0, 1:3] = True
    g.dump(tmp_path / "occ.txt")
    head, runs = (tmp_path / "occ.txt").read_text().splitlines()
    assert head == "occgrid 4 1.0 first=0"
    assert list(map(int, runs.split())) == [1, 2, 61]

import numpy as np
import pytest
import torch

from normalfusion.field import AnalyticSdf
from normalfusion.grad import (
    EvalCounter,
    GradMode,
    directional_derivative_fd,
    grad_axis_fd,
    spatial_gradients,
)

from helpers import LinearField, QuadraticField, full_sampler, open_grid


def centers(n=12, size=24, seed=0):
    rng = np.random.default_rng(seed)
    rc = rng.integers(1, size - 1, size=(n, 2))
    return np.concatenate([np.zeros((n, 1), dtype=np.int64), rc], axis=1)


def build(step=0.05, patch=3, n=12):
    sampler = full_sampler(patch=patch)
    samples, _ = sampler.build(centers(n), open_grid(), step)
    return samples


def test_mode_parsing():
    assert GradMode.parse("AD").kind == "analytic"
    assert GradMode.parse("fd", 1e-3).eps == 1e-3
    assert GradMode.parse("dfd").short == "dfd"
    with pytest.raises(ValueError):
        GradMode.parse("central")
    with pytest.raises(ValueError):
        GradMode("axis_fd", eps=0.0)


def test_directional_fd_rejects_nonpositive_step():
    assert directional_derivative_fd(3.0, 1.0, 0.5) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        directional_derivative_fd(1.0, 0.0, 0.0)


def test_dfd_exact_on_linear_field():
    field = LinearField()
    samples = build()
    f, g, valid = spatial_gradients(field, samples, GradMode("dfd"))
    assert valid.all()
    np.testing.assert_allclose(g.numpy(), np.broadcast_to(field.g.numpy(), g.shape), atol=1e-9)


def test_dfd_exact_on_linear_field_patch_2_and_5():
    field = LinearField(g=(-0.1, 0.2, 0.97))
    for patch in (2, 5):
        sampler = full_sampler(patch=patch)
        samples, _ = sampler.build(sampler.draw(6, np.random.default_rng(patch)), open_grid(), 0.03)
        _, g, valid = spatial_gradients(field, samples, GradMode("dfd"))
        np.testing.assert_allclose(g[valid].numpy(), np.broadcast_to(field.g.numpy(), g[valid].shape), atol=1e-9)


def test_dfd_rejects_single_pixel_patch():
    samples, _ = full_sampler(patch=1).build(centers(3), open_grid(), 0.05)
    with pytest.raises(ValueError):
        spatial_gradients(LinearField(), samples, GradMode("dfd"))


def test_axis_fd_exact_on_quadratic_and_counts_six_extra():
    field = QuadraticField()
    samples = build(step=0.1)
    counter = EvalCounter()
    _, g, valid = spatial_gradients(field, samples, GradMode("axis_fd", 1e-2), counter)
    x = samples.positions
    np.testing.assert_allclose(g.numpy()[valid.numpy()], 2 * x[valid.numpy()], atol=1e-10)
    assert counter.gradient_extra == 6 * samples.n_samples * 9
    assert counter.rendering == samples.n_samples * 9


def test_dfd_and_ad_add_no_extra_evaluations():
    samples = build()
    for kind in ("dfd", "analytic"):
        c = EvalCounter()
        spatial_gradients(LinearField(), samples, GradMode(kind), c)
        assert c.gradient_extra == 0
        assert c.rendering == samples.positions.shape[0] * 9


def test_dfd_error_shrinks_with_step_on_sphere():
    field = AnalyticSdf.sphere(0.5)
    errs = []
    for step in (0.04, 0.02, 0.01):
        samples = build(step=step, n=20)
        _, g, valid = spatial_gradients(field, samples, GradMode("dfd"))
        true = field.numpy_grad(samples.positions.reshape(-1, 3)).reshape(g.shape)
        errs.append(np.abs(g.numpy() - true)[valid.numpy()].max())
    assert errs[2] < errs[1] < errs[0]


def test_dfd_gap_uses_one_sided_difference():
    samples = build(step=0.05, n=4)
    samples.gap_before = samples.gap_before.copy()
    samples.gap_before[5] = True
    field = LinearField()
    _, g, valid = spatial_gradients(field, samples, GradMode("dfd"))
    np.testing.assert_allclose(g[valid].numpy(), np.broadcast_to(field.g.numpy(), g[valid].shape), atol=1e-9)


def test_grad_axis_fd_standalone():
    field = QuadraticField()
    x = torch.tensor([[0.1, 0.2, -0.3], [0.0, 0.5, 0.5]], dtype=torch.float64)
    c = EvalCounter()
    g = grad_axis_fd(field, x, 1e-3, c)
    np.testing.assert_allclose(g.numpy(), 2 * x.numpy(), atol=1e-10)
    assert c.gradient_extra == 12
    with pytest.raises(ValueError):
        grad_axis_fd(field, torch.tensor([[0.9995, 0, 0]], dtype=torch.float64), 1e-3, bound=1.0)


def test_counter_merge():
    a, b = EvalCounter(1, 2, 3), EvalCounter(4, 5, 6, {"occupancy": 7})
    a.merge(b)
    assert (a.rendering, a.gradient_extra, a.culled, a.by_purpose) == (5, 7, 9, {"occupancy": 7})
    assert a.forward_sdf_evals == 12

"""Small shared fixtures for unit tests."""
import numpy as np
import torch

from normalfusion.geometry import Camera, look_at
from normalfusion.sampling import NormalView, OccupancyGrid, ViewSampler


class LinearField:
    """f(x) = g . x + c, with an exact gradient."""

    def __init__(self, g=(0.3, -0.8, 0.52), c=0.1, sharpness=50.0):
        self.g = torch.tensor(g, dtype=torch.float64)
        self.c = c
        self.sharpness = torch.tensor(sharpness, dtype=torch.float64)
        self.dtype = torch.float64

    def sdf(self, x):
        return torch.as_tensor(x, dtype=torch.float64) @ self.g + self.c

    def sdf_and_grad(self, x):
        x = torch.as_tensor(x, dtype=torch.float64)
        return self.sdf(x), self.g.expand(x.shape[0], 3)


class QuadraticField(LinearField):
    """f(x) = |x|^2 - 0.25; central differences are exact on it."""

    def sdf(self, x):
        x = torch.as_tensor(x, dtype=torch.float64)
        return (x * x).sum(-1) - 0.25

    def sdf_and_grad(self, x):
        x = torch.as_tensor(x, dtype=torch.float64)
        return self.sdf(x), 2 * x


def camera(eye=(0.3, -3.0, 0.8), size=24, focal=60.0):
    return Camera(focal, focal, size / 2, size / 2, look_at(eye), np.array(eye), size, size)


def full_sampler(cam=None, patch=3):
    cam = cam or camera()
    view = NormalView(cam, np.zeros((cam.height, cam.width, 3)), np.ones((cam.height, cam.width)))
    return ViewSampler([view], patch)


def open_grid(res=32):
    return OccupancyGrid(res)

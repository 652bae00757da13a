"""Shared oracles used by multiple test modules."""

import numpy as np

from isorec.core import Image2D, RandomSource
from isorec.denoiser import DenoiserModel, TinyDenoiser


def finite_difference_grad_check(model: TinyDenoiser, height=8, width=8, h=1e-4, seed=99):
    """Worst relative error between analytic gradients and central differences.

    Checks every parameter of the model on a single random probe image.
    """
    assert model.dtype == np.float64, "finite differences need a float64 model"
    probe = RandomSource(seed, 0).normal((1, height, width))
    t = np.array([123.0])
    eps = RandomSource(seed + 1, 0).normal((1, height, width))
    _, grads = model.loss_and_grads(probe, t, eps)
    worst = 0.0
    for name, p in model.params.items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = model.loss_and_grads(probe, t, eps)
            flat[i] = orig - h
            lm, _ = model.loss_and_grads(probe, t, eps)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            rel = abs(numeric - g[i]) / max(abs(numeric), abs(g[i]), 1e-8)
            worst = max(worst, rel)
    return worst


class PointMassDenoiser(DenoiserModel):
    """Exact noise predictor for data concentrated at a single image."""

    def __init__(self, point: np.ndarray):
        self.point = np.asarray(point, dtype=np.float64)

    def predict_noise(self, x_t, t, schedule):
        ab = schedule.alpha_bars[t]
        return Image2D((x_t.data - np.sqrt(ab) * self.point) / np.sqrt(1.0 - ab))

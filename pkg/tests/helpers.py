import numpy as np

from core.curve import PolygonalCurve


def regular_polygon(n, radius=1.0, phase=0.0):
    phi = phase + 2 * np.pi * np.arange(n) / n
    return PolygonalCurve(np.column_stack([radius * np.cos(phi), radius * np.sin(phi)]))


def perturbed_circle(n, seed=0, amplitude=0.05):
    rng = np.random.default_rng(seed)
    phi = 2 * np.pi * (np.arange(n) + rng.uniform(-0.2, 0.2, n)) / n
    r = 1.0 + amplitude * rng.standard_normal(n)
    return PolygonalCurve(np.column_stack([r * np.cos(phi), 0.7 * r * np.sin(phi)]))

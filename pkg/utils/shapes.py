"""Initial curves for the flows.

Analytic shapes are sampled at rho_j = j/N, j = 0..N-1. Polygonal shapes
keep their corners as vertices and spread the remaining vertices along the
sides by arc length.
"""

import heapq
import logging

import numpy as np

from core.curve import PolygonalCurve, enclosed_area
from core.errors import SizeMismatch, UnknownShapeError

logger = logging.getLogger(__name__)


def _rho(n):
    return np.arange(n) / n


def ellipse(n, a=4.0, b=1.0, semi=False):
    """Axes a and b are full axes unless `semi` is set"""
    ra, rb = (a, b) if semi else (a / 2, b / 2)
    phi = 2 * np.pi * _rho(n)
    return np.column_stack([ra * np.cos(phi), rb * np.sin(phi)])


def circle(n, r=1.0, cx=0.0, cy=0.0):
    phi = 2 * np.pi * _rho(n)
    return np.column_stack([cx + r * np.cos(phi), cy + r * np.sin(phi)])


def nonconvex(n):
    s = 2 * np.pi * _rho(n)
    x = np.cos(s)
    y = 0.5 * np.sin(s) + np.sin(np.cos(s)) + np.sin(s) * (0.2 + np.sin(s) * np.sin(3 * s) ** 2)
    return np.column_stack([x, y])


def bowtie(n):
    s = 2 * np.pi * _rho(n)
    return np.column_stack([np.cos(s), 2 * np.sin(s) - 1.9 * np.sin(s) ** 3])


def flower(n, petals=6, depth=1.0, radius=2.0):
    s = 2 * np.pi * _rho(n)
    r = radius + depth * np.cos(petals * s)
    return np.column_stack([r * np.cos(s), r * np.sin(s)])


def quadrifolium(n, scale=1.0):
    """Polar rose r = cos 2phi"""
    s = 2 * np.pi * _rho(n)
    r = scale * np.cos(2 * s)
    return np.column_stack([r * np.cos(s), r * np.sin(s)])


def lemniscate(n, a=1.0):
    """Lemniscate of Bernoulli a cos phi / (1 + sin^2 phi) (1, sin phi)"""
    s = 2 * np.pi * _rho(n)
    d = 1.0 + np.sin(s) ** 2
    return np.column_stack([a * np.cos(s) / d, a * np.sin(s) * np.cos(s) / d])


def polyline_curve(corners, n):
    """Closed polyline through `corners` with n vertices, corners included"""
    corners = np.asarray(corners, dtype=float)
    sides = np.roll(corners, -1, axis=0) - corners
    lengths = np.linalg.norm(sides, axis=1)
    if n < len(corners):
        raise SizeMismatch(f"{n} vertices cannot represent {len(corners)} corners")

    counts = np.ones(len(corners), dtype=int)
    heap = [(-lengths[i], i) for i in range(len(corners))]
    heapq.heapify(heap)
    for _ in range(n - len(corners)):
        _, i = heapq.heappop(heap)
        counts[i] += 1
        heapq.heappush(heap, (-lengths[i] / counts[i], i))

    points = []
    for start, side, count in zip(corners, sides, counts):
        fractions = np.arange(count) / count
        points.append(start + fractions[:, None] * side)
    return np.concatenate(points)


def rectangle(n, width=2.0, height=1.0):
    w, h = width / 2, height / 2
    return polyline_curve([(-w, -h), (w, -h), (w, h), (-w, h)], n)


def slit(n, size=2.0, slit_width=0.02, slit_length=1.8):
    """Square with a thin rectangle cut in from the middle of the bottom side"""
    s, d = size / 2, slit_width / 2
    top = -s + slit_length
    corners = [
        (-s, -s), (-d, -s), (-d, top), (d, top), (d, -s), (s, -s), (s, s), (-s, s),
    ]
    return polyline_curve(corners, n)


def thin_film(n, length=5.0, height=1.0):
    """Film of size 2L x height"""
    return rectangle(n, width=2 * length, height=height)


class Generator:
    def __init__(self, build, simple=True, note=None):
        self.build = build
        self.simple = simple
        self.note = note


GENERATORS = {
    "ellipse": Generator(ellipse),
    "circle": Generator(circle),
    "rectangle": Generator(rectangle),
    "nonconvex": Generator(nonconvex),
    "bowtie": Generator(bowtie),
    "flower": Generator(flower),
    "quadrifolium": Generator(quadrifolium, simple=False, note="polar rose r = cos 2phi"),
    "lemniscate": Generator(lemniscate, simple=False, note="a cos phi / (1 + sin^2 phi), a = 1"),
    "slit": Generator(slit, note="2x2 square minus a 0.02x1.8 slit, exact corners"),
    "thin_film": Generator(thin_film, note="2L x 1 rectangle, exact corners"),
}


def generate_initial(shape, params=None, n=128):
    """Build an initial curve.

    Simple shapes are returned counterclockwise; the self-intersecting ones
    (quadrifolium, lemniscate) keep their parametrization order.
    """
    generator = GENERATORS.get(shape)
    if generator is None:
        raise UnknownShapeError(shape)
    if n < 3:
        raise SizeMismatch(f"A closed curve needs at least 3 vertices, got {n}")
    try:
        vertices = generator.build(n, **(params or {}))
    except TypeError as exc:
        raise ValueError(f"Bad parameters for {shape}: {exc}") from None
    curve = PolygonalCurve(vertices)
    if generator.simple and enclosed_area(curve) < 0:
        curve = PolygonalCurve(np.roll(curve.vertices[::-1], 1, axis=0))
    logger.debug("Generated %s with N=%d", shape, n)
    return curve


def is_simple_shape(shape):
    generator = GENERATORS.get(shape)
    if generator is None:
        raise UnknownShapeError(shape)
    return generator.simple

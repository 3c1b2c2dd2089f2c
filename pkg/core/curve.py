"""Closed polygonal curves and the discrete quantities the scheme is built from.

Vertices X_0..X_{N-1} are stored counterclockwise. Edge j runs from X_{j-1}
to X_j (indices mod N), so node i touches edges i and i+1.
"""

import logging

import numpy as np
import shapely
from shapely.errors import GEOSException
from shapely.geometry import Polygon

from core.errors import DegenerateEdge, SelfIntersecting, SizeMismatch

logger = logging.getLogger(__name__)

INTERSECTION_SLACK = 1e-12
SNAP_GRID = 1e-12


def perp(v):
    """(a, b) -> (-b, a) on the last axis"""
    v = np.asarray(v, dtype=float)
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


class PolygonalCurve:
    def __init__(self, vertices):
        vertices = np.array(vertices, dtype=float)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise SizeMismatch(f"Vertices must have shape (N, 2), got {vertices.shape}")
        if len(vertices) < 3:
            raise SizeMismatch(f"A closed curve needs at least 3 vertices, got {len(vertices)}")
        if not np.all(np.isfinite(vertices)):
            raise ValueError("Curve has non-finite vertex coordinates")
        self.vertices = vertices

    @property
    def n(self):
        return len(self.vertices)

    def edges(self):
        """h_j = X_j - X_{j-1}"""
        return self.vertices - np.roll(self.vertices, 1, axis=0)

    def edge_lengths(self):
        return np.linalg.norm(self.edges(), axis=1)

    def length(self):
        return float(np.sum(self.edge_lengths()))

    def translated(self, offset):
        return PolygonalCurve(self.vertices + np.asarray(offset, dtype=float))

    def scaled(self, factor):
        return PolygonalCurve(self.vertices * factor)

    def reversed(self):
        return PolygonalCurve(self.vertices[::-1])

    def copy(self):
        return PolygonalCurve(self.vertices.copy())

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"PolygonalCurve(N={self.n}, area={enclosed_area(self):.6g})"


class EdgeField:
    """Per-edge constant values; both one-sided limits on edge j equal values[j]"""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)

    def __len__(self):
        return len(self.values)

    def __repr__(self):
        return f"EdgeField({self.values!r})"


class EdgeGeometry:
    def __init__(self, edges, lengths, tangents, normals, angles):
        self.edges = edges
        self.lengths = lengths
        self.tangents = tangents
        self.normals = normals
        self.angles = angles


def edge_geometry(curve):
    """Lengths |h_j|, tangents, outward normals n_j = -h_j^perp/|h_j| and
    inclination angles in (-pi, pi]"""
    h = curve.edges()
    lengths = np.linalg.norm(h, axis=1)
    zero = np.flatnonzero(lengths == 0.0)
    if zero.size:
        raise DegenerateEdge(int(zero[0]), 0.0)
    tangents = h / lengths[:, None]
    normals = -perp(h) / lengths[:, None]
    angles = np.arctan2(tangents[:, 1], tangents[:, 0])
    # arctan2 returns -pi for (-1, -0.0)
    angles = np.where(angles == -np.pi, np.pi, angles)
    return EdgeGeometry(h, lengths, tangents, normals, angles)


def _one_sided(field, n):
    """Return (value at the right end rho_j, value at the left end rho_{j-1})
    for every edge j"""
    if isinstance(field, EdgeField):
        values = field.values
        if len(values) != n:
            raise SizeMismatch(f"Edge field has {len(values)} entries for {n} edges")
        return values, values
    values = np.asarray(field, dtype=float)
    if len(values) != n:
        raise SizeMismatch(f"Nodal field has {len(values)} entries for {n} nodes")
    return values, np.roll(values, 1, axis=0)


def _dot(a, b):
    product = a * b
    if product.ndim > 1:
        return product.sum(axis=tuple(range(1, product.ndim)))
    return product


def mass_lumped_inner(curve, u, v):
    """(u, v)^h = sum_j |h_j|/2 (u(rho_j^-) v(rho_j^-) + u(rho_{j-1}^+) v(rho_{j-1}^+))

    Plain arrays are nodal fields, EdgeField instances are edge-constant.
    Vector fields of shape (N, 2) are contracted with the dot product.
    """
    lengths = curve.edge_lengths()
    u_right, u_left = _one_sided(u, curve.n)
    v_right, v_left = _one_sided(v, curve.n)
    return float(np.sum(0.5 * lengths * (_dot(u_right, v_right) + _dot(u_left, v_left))))


def nodal_weights(curve):
    """w_i = (|h_i| + |h_{i+1}|) / 2, the lumped mass at node i"""
    lengths = curve.edge_lengths()
    return 0.5 * (lengths + np.roll(lengths, -1))


def discrete_deriv(curve, f):
    """Edge-wise arc-length derivative (f(rho_j) - f(rho_{j-1})) / |h_j|"""
    lengths = edge_geometry(curve).lengths
    f = np.asarray(f, dtype=float)
    if len(f) != curve.n:
        raise SizeMismatch(f"Nodal field has {len(f)} entries for {curve.n} nodes")
    diff = f - np.roll(f, 1, axis=0)
    if diff.ndim > 1:
        return EdgeField(diff / lengths[:, None])
    return EdgeField(diff / lengths)


def enclosed_area(curve):
    """Signed shoelace area, positive for counterclockwise curves"""
    x, y = curve.vertices[:, 0], curve.vertices[:, 1]
    x_prev, y_prev = np.roll(x, 1), np.roll(y, 1)
    return float(-0.5 * np.sum((x - x_prev) * (y + y_prev)))


def interface_energy(curve, density):
    geom = edge_geometry(curve)
    return float(np.sum(density.gamma(geom.angles) * geom.lengths))


def weighted_mesh_ratio(curve, density):
    geom = edge_geometry(curve)
    weighted = density.gamma(geom.angles) * geom.lengths
    return float(np.max(weighted) / np.min(weighted))


def _segments(curve):
    start = np.roll(curve.vertices, 1, axis=0)
    return shapely.linestrings(np.stack([start, curve.vertices], axis=1))


def self_intersection_check(curve):
    """Return (True, (i, j)) for the first pair of non-adjacent edges closer
    than the slack, (False, None) otherwise"""
    n = curve.n
    segments = _segments(curve)
    tree = shapely.STRtree(segments)
    left, right = tree.query(segments, predicate="dwithin", distance=INTERSECTION_SLACK)
    gap = np.abs(left - right)
    crossing = (left < right) & (gap > 1) & (gap < n - 1)
    if not np.any(crossing):
        return False, None
    pairs = np.stack([left[crossing], right[crossing]], axis=1)
    first = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))[0]]
    return True, (int(first[0]), int(first[1]))


def manifold_distance(c1, c2):
    """Area of the symmetric difference, 2|O1 u O2| - |O1| - |O2|"""
    for curve in (c1, c2):
        crossing, pair = self_intersection_check(curve)
        if crossing:
            raise SelfIntersecting(pair)
    p1, p2 = Polygon(c1.vertices), Polygon(c2.vertices)
    try:
        union = shapely.union(p1, p2)
    except GEOSException:
        logger.debug("Polygon union failed, retrying on a %.0e grid", SNAP_GRID)
        union = shapely.union(p1, p2, grid_size=SNAP_GRID)
    return max(0.0, 2.0 * union.area - p1.area - p2.area)


def interpolate_curves(c1, c2, lam):
    """Vertex-wise (1 - lam) X1 + lam X2"""
    if c1.n != c2.n:
        raise SizeMismatch(f"Cannot interpolate curves with {c1.n} and {c2.n} vertices")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"Interpolation weight must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return c1.copy()
    if lam == 1.0:
        return c2.copy()
    return PolygonalCurve((1.0 - lam) * c1.vertices + lam * c2.vertices)

import numpy as np
import pytest

from core.curve import enclosed_area, self_intersection_check
from core.errors import SizeMismatch, UnknownShapeError
from utils.curve_io import read_curve, write_curve
from utils.shapes import GENERATORS, generate_initial, is_simple_shape, polyline_curve


def test_ellipse_uses_full_axes():
    curve = generate_initial("ellipse", {"a": 4.0, "b": 1.0}, 4096)
    assert enclosed_area(curve) == pytest.approx(np.pi, rel=1e-5)
    assert np.max(curve.vertices[:, 0]) == pytest.approx(2.0)
    semi = generate_initial("ellipse", {"a": 4.0, "b": 1.0, "semi": True}, 4096)
    assert enclosed_area(semi) == pytest.approx(4 * np.pi, rel=1e-5)


def test_first_vertex_is_rho_zero():
    curve = generate_initial("circle", {"r": 3.0}, 10)
    assert np.allclose(curve.vertices[0], [3.0, 0.0])
    assert np.allclose(curve.vertices[1], [3 * np.cos(0.2 * np.pi), 3 * np.sin(0.2 * np.pi)])


@pytest.mark.parametrize("shape", [name for name, gen in GENERATORS.items() if gen.simple])
def test_simple_shapes_are_ccw_and_embedded(shape):
    curve = generate_initial(shape, {}, 288)
    assert curve.n == 288
    assert enclosed_area(curve) > 0
    assert self_intersection_check(curve) == (False, None)


@pytest.mark.parametrize("shape", ["lemniscate", "quadrifolium"])
def test_self_intersecting_shapes(shape):
    curve = generate_initial(shape, {}, 64)
    assert not is_simple_shape(shape)
    assert self_intersection_check(curve)[0]


def test_lemniscate_lobes_cancel():
    assert abs(enclosed_area(generate_initial("lemniscate", {}, 64))) <= 1e-13
    # polar area of the rose, every petal counterclockwise
    assert enclosed_area(generate_initial("quadrifolium", {}, 4096)) == pytest.approx(np.pi / 2, rel=1e-5)


def test_polyline_keeps_corners():
    corners = [(0.0, 0.0), (3.0, 0.0), (3.0, 1.0), (0.0, 1.0)]
    vertices = polyline_curve(corners, 16)
    assert len(vertices) == 16
    for corner in corners:
        assert np.min(np.linalg.norm(vertices - corner, axis=1)) == 0.0
    with pytest.raises(SizeMismatch):
        polyline_curve(corners, 3)


def test_slit_geometry():
    curve = generate_initial("slit", {}, 288)
    # 2x2 square minus the 0.02 x 1.8 slit
    assert enclosed_area(curve) == pytest.approx(4.0 - 0.02 * 1.8)
    assert np.min(np.linalg.norm(curve.vertices - [0.01, 0.8], axis=1)) == pytest.approx(0.0, abs=1e-15)


def test_thin_film_area():
    curve = generate_initial("thin_film", {"length": 5.0}, 200)
    assert enclosed_area(curve) == pytest.approx(10.0)


def test_generator_errors():
    with pytest.raises(UnknownShapeError):
        generate_initial("hexagon", {}, 32)
    with pytest.raises(UnknownShapeError):
        is_simple_shape("hexagon")
    with pytest.raises(SizeMismatch):
        generate_initial("circle", {}, 2)
    with pytest.raises(ValueError):
        generate_initial("circle", {"radius": 2.0}, 16)


def test_curve_csv_file(tmp_path):
    curve = generate_initial("flower", {}, 50)
    path = tmp_path / "flower.csv"
    write_curve(curve, str(path))
    assert path.read_text().splitlines()[0] == "x,y"
    assert np.array_equal(read_curve(str(path)).vertices, curve.vertices)


def test_curve_csv_header_is_checked(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n0,0\n1,0\n0,1\n")
    with pytest.raises(ValueError):
        read_curve(str(path))

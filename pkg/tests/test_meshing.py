import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from torus_macrospec.meshing import DomainError, level_set_mesh, polygon_domain


def _square(half=1.0):
    return np.array([[-half, -half], [half, -half], [half, half], [-half, half]])


def _disk_phi(h, cx=0.0, cy=0.0, r=1.0):
    ax = np.arange(-2.0, 2.0 + h / 2, h)
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    return ax, np.hypot(X - cx, Y - cy) - r


def test_square_mesh_exact():
    dom = polygon_domain(_square(), 1 / 16, center=(0.0, 0.0))
    # corner cells lose at most one triangle each
    assert 4.0 - (1 / 16) ** 2 <= dom.area() <= 4.0
    assert np.all(dom.triangle_areas() > 0)
    on_edge = np.isclose(np.abs(dom.nodes).max(axis=1), 1.0)
    assert np.array_equal(dom.boundary, on_edge)
    assert np.allclose(dom.nodes[dom.origin_node], 0.0)


@given(st.floats(0.3, 3.0), st.integers(3, 12), st.floats(0, 2 * math.pi))
def test_regular_polygon_area(scale, m, phase):
    th = phase + 2 * math.pi * np.arange(m) / m
    verts = scale * np.stack([np.cos(th), np.sin(th)], axis=1)
    exact = 0.5 * m * scale**2 * math.sin(2 * math.pi / m)
    h = scale / 24
    dom = polygon_domain(verts, h, center=(0.0, 0.0))
    assert np.all(dom.triangle_areas() > 0)
    perimeter = m * 2 * scale * math.sin(math.pi / m)
    # staircase boundary error is at most a strip of width h along the boundary
    assert abs(dom.area() - exact) <= perimeter * h


def test_disk_level_set_area():
    areas = []
    for h in (1 / 16, 1 / 32, 1 / 64):
        ax, phi = _disk_phi(h)
        dom = level_set_mesh(ax, ax, phi)
        areas.append(dom.area())
        assert np.all(dom.triangle_areas() > 0)
    assert abs(areas[-1] - math.pi) <= 0.01 * math.pi
    assert abs(areas[2] - math.pi) < abs(areas[0] - math.pi)


def test_boundary_nodes_on_level_set():
    ax, phi = _disk_phi(1 / 32)
    dom = level_set_mesh(ax, ax, phi)
    r = np.linalg.norm(dom.nodes[dom.boundary], axis=1)
    assert np.all(np.abs(r - 1.0) <= 1 / 32)
    assert np.all(np.linalg.norm(dom.nodes[~dom.boundary], axis=1) < 1.0)


def test_disconnected_fragment_dropped():
    h = 1 / 16
    ax = np.arange(-4.0, 4.0 + h / 2, h)
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    phi = np.minimum(np.hypot(X, Y) - 1.0, np.hypot(X - 3.0, Y) - 0.5)
    dom = level_set_mesh(ax, ax, phi)
    assert dom.dropped_components == 1
    assert dom.area() == pytest.approx(math.pi, rel=0.02)


def test_errors():
    ax, phi = _disk_phi(1 / 8)
    with pytest.raises(DomainError):
        level_set_mesh(ax, ax, np.ones_like(phi))
    ax, phi = _disk_phi(1 / 8, cx=1.5, r=0.4)
    with pytest.raises(DomainError, match="origin"):
        level_set_mesh(ax, ax, phi)
    with pytest.raises(DomainError):
        polygon_domain(_square()[::-1], 0.1)
    with pytest.raises(DomainError):
        polygon_domain(_square()[:2], 0.1)


def test_scaled():
    dom = polygon_domain(_square(), 1 / 8, center=(0.0, 0.0))
    big = dom.scaled(3.0)
    assert big.area() == pytest.approx(9 * dom.area())
    assert big.h == pytest.approx(3 / 8)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from pomcrf.geometry import (CameraModel, Cylinder, GroundGrid, build_projection_table, default_rig,
                             project_location, relative_coords)
from pomcrf.benchmark import BenchmarkConfig, build_rig


def reference_rect(grid, cam, i, cyl=Cylinder()):
    """Homogeneous 3x4 projection built from an Euler-angle camera pose."""
    pose = Rotation.from_euler("ZY", [cam.yaw, cam.pitch]).as_matrix()
    body = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])   # rows: right, down, forward
    R = body @ pose.T
    c = np.array([cam.position[0] * grid.cell_size, cam.position[1] * grid.cell_size, cam.elevation])
    K = np.array([[cam.focal, 0, 0.5 * (cam.width - 1)], [0, cam.focal, 0.5 * (cam.height - 1)], [0, 0, 1]])
    P = K @ np.hstack([R, (-R @ c)[:, None]])
    cx = (i % grid.cols + 0.5) * grid.cell_size
    cy = (i // grid.cols + 0.5) * grid.cell_size
    pts = []
    for s in range(cyl.samples):
        a = 2 * math.pi * s / cyl.samples
        for z in (0.0, cyl.height):
            pts.append([cx + 0.5 * cyl.width * math.cos(a), cy + 0.5 * cyl.width * math.sin(a), z, 1.0])
    h = P @ np.array(pts).T
    if np.any(h[2] <= 0.05):
        return None
    u, v = h[0] / h[2], h[1] / h[2]
    tx, ty, bx, by = math.floor(u.min()), math.floor(v.min()), math.ceil(u.max()), math.ceil(v.max())
    if bx <= tx or by <= ty or bx < 0 or by < 0 or tx > cam.width - 1 or ty > cam.height - 1:
        return None
    return (tx, ty, bx, by)


def test_single_cell_facing_camera_footprint():
    grid = GroundGrid(1, 1, 1.0)
    # level camera at person mid-height, 5 m away along -x, looking +x
    cam = CameraModel(0, 101, 101, (0.5 - 5.0, 0.5), 0.875, 0.0, 0.0, 100.0)
    rect = project_location(grid, cam, 0)
    # nearest rim point at depth 4.75 m, farthest at 5.25 m
    half_h = 100 * 0.875 / 4.75
    half_w = 100 * 0.25 / 5.0
    assert rect == (math.floor(50 - half_w), math.floor(50 - half_h), math.ceil(50 + half_w), math.ceil(50 + half_h))


def test_location_behind_camera_is_out_of_view():
    grid = GroundGrid(1, 3, 1.0)
    cam = CameraModel(0, 64, 48, (1.5, 0.5), 1.0, 0.0, 0.0, 40.0)   # looking +x from the middle cell
    assert project_location(grid, cam, 0) is None
    assert project_location(grid, cam, 2) is not None


def test_rig_matches_reference_projector():
    grid, cams, table = build_rig(BenchmarkConfig())
    for c, cam in enumerate(cams):
        for i in range(grid.N):
            ref = reference_rect(grid, cam, i)
            got = project_location(grid, cam, i)
            assert got == ref, (c, i)
            if ref is not None:
                assert tuple(table[c].rects[i]) == ref


def test_single_location_single_camera_coverage():
    grid = GroundGrid(1, 1, 0.5)
    cam = CameraModel.looking_at(0, 20, 16, (-4, 0.5), 1.5, (0.5, 0.5), 12.0, 0.5)
    table = build_projection_table(grid, [cam])
    v = table[0]
    tx, ty, bx, by = v.clipped[0]
    for ky in range(16):
        for kx in range(20):
            L = v.covering((kx, ky))
            inside = tx <= kx <= bx and ty <= ky <= by
            assert list(L) == ([0] if inside else [])


def test_two_locations_on_one_ray_nearer_first():
    grid = GroundGrid(1, 4, 0.5)
    cam = CameraModel.looking_at(0, 32, 24, (-6, 0.5), 1.5, (2.0, 0.5), 20.0, 0.5)
    v = build_projection_table(grid, [cam])[0]
    shared = 0
    for p in range(32 * 24):
        L = v.cover_loc[v.cover_ptr[p]:v.cover_ptr[p + 1]]
        if {0, 3} <= set(L):
            shared += 1
            assert list(L).index(0) < list(L).index(3)
    assert shared > 0


def _random_rig(seed, rows=10, cols=10, ncam=2):
    rng = np.random.default_rng(seed)
    grid = GroundGrid(rows, cols, 0.25)
    cams = []
    for c in range(ncam):
        a = rng.uniform(0, 2 * np.pi)
        pos = (cols / 2 + 12 * np.cos(a), rows / 2 + 12 * np.sin(a))
        target = (rng.uniform(0, cols), rng.uniform(0, rows))
        cams.append(CameraModel.looking_at(c, 24, 18, pos, rng.uniform(1.5, 4), target, rng.uniform(10, 30), 0.25))
    return grid, cams


@pytest.mark.parametrize("seed", range(5))
def test_coverage_equals_rectangle_containment(seed):
    grid, cams = _random_rig(seed)
    table = build_projection_table(grid, cams)
    for v in table.views:
        W, H = v.camera.width, v.camera.height
        for p in range(W * H):
            kx, ky = p % W, p // W
            L = set(v.cover_loc[v.cover_ptr[p]:v.cover_ptr[p + 1]].tolist())
            direct = {i for i in range(grid.N) if v.in_view[i]
                      and v.rects[i][0] <= kx <= v.rects[i][2] and v.rects[i][1] <= ky <= v.rects[i][3]}
            assert L == direct


@pytest.mark.parametrize("seed", range(5))
def test_lines_of_sight_sorted_near_to_far(seed):
    grid, cams = _random_rig(seed)
    for v in build_projection_table(grid, cams).views:
        for p in range(v.camera.width * v.camera.height):
            L = v.cover_loc[v.cover_ptr[p]:v.cover_ptr[p + 1]]
            d = v.distance[L]
            assert np.all(np.diff(d) >= 0)
            ties = np.flatnonzero(np.diff(d) == 0)
            assert np.all(L[ties] < L[ties + 1])


def test_relative_coords_examples():
    assert np.allclose(relative_coords((10, 20, 30, 60), (20, 40)), (0.0, 0.0))
    assert np.allclose(relative_coords((10, 20, 30, 60), (10, 20)), (-0.5, -0.5))
    assert np.allclose(relative_coords((10, 20, 30, 60), (20, 30)), (0.0, -0.25))


def test_relative_coords_degenerate_rect():
    with pytest.raises(ValueError):
        relative_coords((3, 4, 3, 9), (3, 5))


@settings(max_examples=200, deadline=None)
@given(st.integers(-50, 50), st.integers(-50, 50), st.integers(1, 40), st.integers(1, 40),
       st.floats(0, 1), st.floats(0, 1))
def test_relative_coords_inside_unit_square(tx, ty, w, h, fx, fy):
    rect = (tx, ty, tx + w, ty + h)
    k = (tx + round(fx * w), ty + round(fy * h))
    x = relative_coords(rect, k)
    assert np.all(x >= -0.5) and np.all(x <= 0.5)


def test_zero_area_camera_rejected():
    with pytest.raises(ValueError):
        CameraModel(0, 0, 10, (0, 0), 1.0, 0.0, 0.0, 10.0)


def test_grid_index_bijection():
    g = GroundGrid(3, 5)
    assert [g.index(*g.cell(i)) for i in range(g.N)] == list(range(g.N))
    with pytest.raises(ValueError):
        GroundGrid(0, 3)


def test_default_rig_sees_every_location():
    grid, cams, table = build_rig(BenchmarkConfig())
    assert table.covered().all()
    for v in table.views:
        assert np.all(v.distance > 0)

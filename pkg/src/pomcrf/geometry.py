"""Ground grid, camera rig and per-pixel lines of sight.

World coordinates are meters with the ground plane at z = 0.  A ground
location ``i`` is the cell ``(row, col) = divmod(i, cols)``; its center sits
at ``((col + 0.5) * cell_size, (row + 0.5) * cell_size)``.  Cameras are
positioned in cell units on the ground and elevated in meters.

Pixel ``k = (kx, ky)`` has its center at integer image coordinates, ``kx``
along the width and ``ky`` down the height.  Rectangles are inclusive integer
boxes ``(tx, ty, bx, by)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

NEAR_PLANE = 0.05


@dataclass(frozen=True)
class GroundGrid:
    rows: int
    cols: int
    cell_size: float = 0.25

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must have at least one cell, got {self.rows}x{self.cols}")
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")

    @property
    def N(self) -> int:
        return self.rows * self.cols

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def cell(self, i: int) -> tuple[int, int]:
        """(row, col) of location ``i``."""
        if not 0 <= i < self.N:
            raise IndexError(i)
        return divmod(int(i), self.cols)

    def index(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise IndexError((row, col))
        return int(row) * self.cols + int(col)

    def cell_coords(self) -> np.ndarray:
        """(N, 2) array of integer (x, y) = (col, row) cell coordinates."""
        idx = np.arange(self.N)
        return np.stack([idx % self.cols, idx // self.cols], axis=1)

    def centers(self) -> np.ndarray:
        """(N, 2) array of cell centers in meters, as (x, y)."""
        return (self.cell_coords() + 0.5) * self.cell_size


@dataclass(frozen=True)
class Cylinder:
    """Person-sized vertical cylinder standing on a cell center."""

    height: float = 1.75
    width: float = 0.5
    samples: int = 16

    def points(self, center_xy) -> np.ndarray:
        """(2 * samples, 3) points on the bottom and top rims."""
        a = 2.0 * np.pi * np.arange(self.samples) / self.samples
        r = 0.5 * self.width
        x = center_xy[0] + r * np.cos(a)
        y = center_xy[1] + r * np.sin(a)
        bottom = np.stack([x, y, np.zeros_like(x)], axis=1)
        top = np.stack([x, y, np.full_like(x, self.height)], axis=1)
        return np.concatenate([bottom, top])


@dataclass(frozen=True)
class CameraModel:
    """Parametric projector: ground position, heading, downward tilt, focal.

    ``position`` is the camera's ground position in cell units and
    ``elevation`` its height in meters.  ``yaw`` is the heading of the optical
    axis on the ground plane (radians from +x towards +y) and ``pitch`` the
    downward tilt.  The principal point is the image center.
    """

    id: int
    width: int
    height: int
    position: tuple[float, float]
    elevation: float
    yaw: float
    pitch: float
    focal: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"camera {self.id}: zero-area image {self.width}x{self.height}")
        if not self.focal > 0:
            raise ValueError(f"camera {self.id}: focal must be positive")

    @classmethod
    def looking_at(cls, id, width, height, position, elevation, target, focal, cell_size):
        """Camera at ``position`` (cells) aimed at ground point ``target`` (cells)."""
        dx = (target[0] - position[0]) * cell_size
        dy = (target[1] - position[1]) * cell_size
        yaw = math.atan2(dy, dx)
        pitch = math.atan2(elevation, math.hypot(dx, dy))
        return cls(id, int(width), int(height), (float(position[0]), float(position[1])),
                   float(elevation), yaw, pitch, float(focal))

    def center_m(self, cell_size: float) -> np.ndarray:
        return np.array([self.position[0] * cell_size, self.position[1] * cell_size, self.elevation])

    def axes(self):
        """Unit (right, down, forward) vectors of the camera frame."""
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        forward = np.array([cp * cy, cp * sy, -sp])
        right = np.array([sy, -cy, 0.0])
        down = np.cross(forward, right)
        return right, down, forward

    def project(self, points: np.ndarray, cell_size: float):
        """Project world points (meters); returns (uv, depth)."""
        right, down, forward = self.axes()
        d = np.asarray(points, dtype=float) - self.center_m(cell_size)
        depth = d @ forward
        with np.errstate(divide="ignore", invalid="ignore"):
            u = 0.5 * (self.width - 1) + self.focal * (d @ right) / depth
            v = 0.5 * (self.height - 1) + self.focal * (d @ down) / depth
        return np.stack([u, v], axis=-1), depth

    def ground_distance(self, grid: GroundGrid) -> np.ndarray:
        """Ground-plane distance (meters) from camera to every cell center."""
        c = np.asarray(self.position, dtype=float) * grid.cell_size
        return np.hypot(*(grid.centers() - c).T)


def project_location(grid: GroundGrid, cam: CameraModel, i: int, cylinder: Cylinder = Cylinder()):
    """Bounding rectangle ``(tx, ty, bx, by)`` of the cylinder at ``i``, or None.

    The rectangle is the smallest integer box containing the projected rim
    points and is *not* clipped to the image.  None means out of view: some
    point lies behind the near plane, the box is degenerate, or it does not
    intersect the image.
    """
    if not 0 <= i < grid.N:
        raise IndexError(i)
    uv, depth = cam.project(cylinder.points(grid.centers()[i]), grid.cell_size)
    if np.any(depth <= NEAR_PLANE):
        return None
    tx, ty = np.floor(uv.min(axis=0)).astype(int)
    bx, by = np.ceil(uv.max(axis=0)).astype(int)
    if bx <= tx or by <= ty:
        return None
    if bx < 0 or by < 0 or tx > cam.width - 1 or ty > cam.height - 1:
        return None
    return (int(tx), int(ty), int(bx), int(by))


def clip_rect(rect, width: int, height: int):
    tx, ty, bx, by = rect
    return (max(tx, 0), max(ty, 0), min(bx, width - 1), min(by, height - 1))


def relative_coords(rect, k) -> np.ndarray:
    """Displacement of pixel ``k`` from the center of ``rect``, in box units.

    The box center maps to (0, 0) and its corners to (+-0.5, +-0.5).
    ``k`` may be a single (kx, ky) pair or an (n, 2) array.
    """
    tx, ty, bx, by = (np.asarray(v, dtype=float) for v in rect)
    if np.any(bx <= tx) or np.any(by <= ty):
        raise ValueError(f"degenerate rectangle {rect}")
    k = np.asarray(k, dtype=float)
    return np.stack([(k[..., 0] - 0.5 * (tx + bx)) / (bx - tx),
                     (k[..., 1] - 0.5 * (ty + by)) / (by - ty)], axis=-1)


@dataclass
class CameraView:
    """Per-camera slice of the projection table."""

    camera: CameraModel
    rects: np.ndarray        # (N, 4) unclipped boxes, -1 where out of view
    clipped: np.ndarray      # (N, 4) boxes clipped to the image
    in_view: np.ndarray      # (N,) bool
    distance: np.ndarray     # (N,) ground distance to the camera (meters)
    order: np.ndarray        # (N,) depth rank, ties broken by location index
    cover_ptr: np.ndarray    # (H*W + 1,) CSR pointers into cover_loc
    cover_loc: np.ndarray    # covering locations, near to far within each pixel

    @property
    def shape(self) -> tuple[int, int]:
        return (self.camera.height, self.camera.width)

    def covering(self, k) -> np.ndarray:
        """L_k for pixel ``k = (kx, ky)``, sorted near to far."""
        p = int(k[1]) * self.camera.width + int(k[0])
        return self.cover_loc[self.cover_ptr[p]:self.cover_ptr[p + 1]]

    @cached_property
    def pair_pix(self) -> np.ndarray:
        """Flat pixel index of every coverage pair, aligned with ``cover_loc``."""
        counts = np.diff(self.cover_ptr)
        return np.repeat(np.arange(counts.size), counts)

    @cached_property
    def pair_disp(self) -> np.ndarray:
        """(P, 2) relative coordinates of each covered pixel w.r.t. its location."""
        W = self.camera.width
        k = np.stack([self.pair_pix % W, self.pair_pix // W], axis=1)
        r = self.rects[self.cover_loc]
        return relative_coords((r[:, 0], r[:, 1], r[:, 2], r[:, 3]), k)

    def rect_pixels(self, i: int) -> np.ndarray:
        """(n, 2) array of (kx, ky) pixels inside the clipped box of ``i``."""
        tx, ty, bx, by = self.clipped[i]
        ky, kx = np.mgrid[ty:by + 1, tx:bx + 1]
        return np.stack([kx.ravel(), ky.ravel()], axis=1)


@dataclass
class ProjectionTable:
    grid: GroundGrid
    cylinder: Cylinder
    views: list = field(default_factory=list)

    def __len__(self):
        return len(self.views)

    def __getitem__(self, c) -> CameraView:
        return self.views[c]

    def covered(self) -> np.ndarray:
        """(N,) bool, True where at least one camera sees the location."""
        out = np.zeros(self.grid.N, dtype=bool)
        for v in self.views:
            out |= v.in_view
        return out


def build_camera_view(grid: GroundGrid, cam: CameraModel, cylinder: Cylinder = Cylinder()) -> CameraView:
    N = grid.N
    rects = np.full((N, 4), -1, dtype=np.int64)
    clipped = np.full((N, 4), -1, dtype=np.int64)
    in_view = np.zeros(N, dtype=bool)
    for i in range(N):
        r = project_location(grid, cam, i, cylinder)
        if r is not None:
            rects[i] = r
            clipped[i] = clip_rect(r, cam.width, cam.height)
            in_view[i] = True

    distance = cam.ground_distance(grid)
    # lexsort: last key is primary
    ranking = np.lexsort((np.arange(N), distance))
    order = np.empty(N, dtype=np.int64)
    order[ranking] = np.arange(N)

    pix, rank = [], []
    for i in ranking:
        if not in_view[i]:
            continue
        tx, ty, bx, by = clipped[i]
        ky, kx = np.mgrid[ty:by + 1, tx:bx + 1]
        p = (ky * cam.width + kx).ravel()
        pix.append(p)
        rank.append(np.full(p.size, order[i]))
    if pix:
        pix = np.concatenate(pix)
        rank = np.concatenate(rank)
    else:
        pix = np.zeros(0, dtype=np.int64)
        rank = np.zeros(0, dtype=np.int64)
    srt = np.lexsort((rank, pix))
    cover_loc = ranking[rank[srt]].astype(np.int64)
    counts = np.bincount(pix, minlength=cam.width * cam.height)
    cover_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return CameraView(cam, rects, clipped, in_view, distance, order, cover_ptr, cover_loc)


def build_projection_table(grid: GroundGrid, cameras, cylinder: Cylinder = Cylinder()) -> ProjectionTable:
    """Project every location into every camera and index lines of sight."""
    cameras = list(cameras)
    for cam in cameras:
        if cam.width < 1 or cam.height < 1:
            raise ValueError(f"camera {cam.id}: zero-area image")
    return ProjectionTable(grid, cylinder, [build_camera_view(grid, cam, cylinder) for cam in cameras])


def default_rig(rows=20, cols=20, cell_size=0.25, width=64, height=48, focal=None,
                elevation=3.0, standoff=6.0):
    """Four cameras at the corners of the grid, aimed at its center.

    ``standoff`` is the distance, in cells, between each camera's ground
    position and the nearest grid corner along both axes.
    """
    grid = GroundGrid(rows, cols, cell_size)
    cx, cy = 0.5 * cols, 0.5 * rows
    corners = [(-standoff, -standoff), (cols + standoff, -standoff),
               (cols + standoff, rows + standoff), (-standoff, rows + standoff)]
    if focal is None:
        focal = 0.75 * width
    cams = [CameraModel.looking_at(c, width, height, pos, elevation, (cx, cy), focal, cell_size)
            for c, pos in enumerate(corners)]
    return grid, cams

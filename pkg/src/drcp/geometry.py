"""Camera-to-BEV radian division, grid sector sampling and rigid BEV warps.

Raster convention: cell (row 0, col 0) sits at the metric ``origin`` of the
grid spec; +x metric runs along +column and +y metric runs along -row. This
is the y-down raster implied by subtracting ``r sin(theta)`` for the row
coordinate of a ray sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import bilinear_sample, bilinear_scatter, SCATTER_EPS
from .validation import ContractViolation, check_feature_map


def rot_z(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def wrap_angle(a):
    """Normalise to (-pi, pi]."""
    a = math.remainder(float(a), 2 * math.pi)
    return math.pi if a <= -math.pi else a


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    sensor_width: int
    sensor_height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    position_local: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axis_angle_local: float = 0.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.position_local = np.asarray(self.position_local, dtype=np.float64).reshape(3)
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-6):
            raise ContractViolation("camera rotation is not orthonormal")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ContractViolation("camera rotation must have det +1")
        if self.sensor_width <= 0 or self.sensor_height <= 0:
            raise ContractViolation("sensor dims must be positive")

    @classmethod
    def mounted(cls, yaw, x=0.0, y=0.0, z=1.6, fx=400.0, fy=400.0,
                sensor_width=800, sensor_height=600, cx=None, cy=None):
        """Camera at (x, y, z) in the agent frame looking along ``yaw``."""
        cx = sensor_width / 2 if cx is None else cx
        cy = sensor_height / 2 if cy is None else cy
        return cls(fx, fy, cx, cy, sensor_width, sensor_height,
                   rotation=rot_z(yaw), translation=(x, y, z))

    @property
    def horizontal_fov(self):
        left = math.atan((0 - self.cx) / self.fx)
        right = math.atan((self.sensor_width - self.cx) / self.fx)
        return right - left


@dataclass(frozen=True)
class BevGridSpec:
    """Metric raster of the BEV plane; ``origin`` is the centre of cell (0, 0)."""

    height: int
    width: int
    cell_size: float
    origin: tuple

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ContractViolation("cell_size must be positive")
        if self.height <= 0 or self.width <= 0:
            raise ContractViolation("grid dims must be positive")

    @classmethod
    def from_range(cls, x_range=(-102.4, 102.4), y_range=(-51.2, 51.2), height=128, width=256):
        cs_x = (x_range[1] - x_range[0]) / width
        cs_y = (y_range[1] - y_range[0]) / height
        if not math.isclose(cs_x, cs_y, rel_tol=1e-9):
            raise ContractViolation(f"non-square cells: {cs_x} x {cs_y}")
        return cls(height, width, cs_x, (x_range[0] + cs_x / 2, y_range[1] - cs_x / 2))

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def x_range(self):
        return (self.origin[0] - self.cell_size / 2,
                self.origin[0] - self.cell_size / 2 + self.width * self.cell_size)

    @property
    def y_range(self):
        top = self.origin[1] + self.cell_size / 2
        return (top - self.height * self.cell_size, top)

    def metric_to_cell(self, x, y):
        """Metric (x, y) to continuous (col, row)."""
        col = (np.asarray(x, np.float64) - self.origin[0]) / self.cell_size
        row = (self.origin[1] - np.asarray(y, np.float64)) / self.cell_size
        return col, row

    def cell_to_metric(self, col, row):
        x = self.origin[0] + np.asarray(col, np.float64) * self.cell_size
        y = self.origin[1] - np.asarray(row, np.float64) * self.cell_size
        return x, y

    def cell_centers(self):
        """Metric (x, y) of every cell centre, each of shape (H, W)."""
        rows, cols = np.mgrid[0:self.height, 0:self.width]
        return self.cell_to_metric(cols, rows)

    def downscaled(self, factor):
        if self.height % factor or self.width % factor:
            raise ContractViolation(f"grid {self.shape} not divisible by {factor}")
        x0, _ = self.x_range
        _, y1 = self.y_range
        cs = self.cell_size * factor
        return BevGridSpec(self.height // factor, self.width // factor, cs, (x0 + cs / 2, y1 - cs / 2))


@dataclass
class SamplingGrid:
    """Ray samples of one camera: ``coords[n, m] = (x, y)`` in cell units."""

    coords: np.ndarray
    thetas: np.ndarray
    radii: np.ndarray
    origin_cell: tuple = (0.0, 0.0)

    @property
    def columns(self):
        return self.coords.shape[1]

    @property
    def radial_bins(self):
        return self.coords.shape[0]

    def permuted(self, order):
        order = np.asarray(order)
        return SamplingGrid(self.coords[:, order], self.thetas[order], self.radii, self.origin_cell)


@dataclass(frozen=True)
class Pose2D:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))
        if not all(math.isfinite(v) for v in (self.x, self.y, self.yaw)):
            raise ContractViolation("pose must be finite")

    def to_world(self, x, y):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x = np.asarray(x, np.float64)
        y = np.asarray(y, np.float64)
        return self.x + c * x - s * y, self.y + s * x + c * y

    def from_world(self, x, y):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = np.asarray(x, np.float64) - self.x
        dy = np.asarray(y, np.float64) - self.y
        return c * dx + s * dy, -s * dx + c * dy


def camera_axis_in_bev(cam):
    """Camera centre and optical-axis heading in the BEV frame.

    The heading uses atan2 so that the quadrant of the rotated axis survives.
    """
    position = cam.rotation @ cam.position_local + cam.translation
    axis = cam.rotation @ np.array([math.cos(cam.axis_angle_local), math.sin(cam.axis_angle_local), 0.0])
    return position, math.atan2(axis[1], axis[0])


def column_angles(cam, n_columns):
    """BEV heading of every feature-map column, from the camera intrinsics."""
    if cam.fx == 0:
        raise ContractViolation("fx must be non-zero")
    _, theta_bev = camera_axis_in_bev(cam)
    p_width = cam.sensor_width / n_columns
    p_origin = np.arange(n_columns) * p_width + p_width / 2
    offsets = (p_origin - cam.cx) / cam.fx
    return np.arctan(offsets) + theta_bev


def build_sampling_grid(cam, spec, n_columns, radial_bins=None):
    """Polar sample positions (in BEV cells) for each camera column.

    Radii run n / H1 * (W1 / 2) cells for n = 1..H1, so the camera's own cell
    is never sampled and the last ring sits at half the grid width.
    """
    h1 = spec.height if radial_bins is None else radial_bins
    position, _ = camera_axis_in_bev(cam)
    px, py = spec.metric_to_cell(position[0], position[1])
    thetas = column_angles(cam, n_columns)
    radius = spec.width / 2
    radii = np.arange(1, h1 + 1) / h1 * radius
    xs = px + radii[:, None] * np.cos(thetas)[None, :]
    ys = py - radii[:, None] * np.sin(thetas)[None, :]
    return SamplingGrid(np.stack([xs, ys], axis=-1), thetas, radii, (float(px), float(py)))


def grid_sector_sample(bev, grid):
    """Extract the (C, H1, W2) sub-BEV seen along the camera's columns."""
    return bilinear_sample(check_feature_map(bev, "bev"), grid.coords)


def grid_sector_unsample(sub, grid, out_shape):
    """Project a sub-BEV back onto the BEV raster (weight-normalised scatter)."""
    sub = check_feature_map(sub, "sub-BEV")
    if sub.shape[1:] != grid.coords.shape[:2]:
        raise ContractViolation(f"sub-BEV {sub.shape[1:]} does not match grid {grid.coords.shape[:2]}")
    return bilinear_scatter(sub, grid.coords, out_shape, normalize=True)


def grid_footprint(grid, out_shape, eps=SCATTER_EPS):
    """Boolean mask of BEV cells that receive scatter weight from ``grid``."""
    ones = np.ones((1,) + grid.coords.shape[:2], np.float32)
    w = bilinear_scatter(ones, grid.coords, out_shape, normalize=False)[0]
    return w > eps


def warp_coords(src_pose, dst_pose, spec):
    """Source-frame cell coordinates for every destination cell, shape (H, W, 2)."""
    x, y = spec.cell_centers()
    wx, wy = dst_pose.to_world(x, y)
    sx, sy = src_pose.from_world(wx, wy)
    col, row = spec.metric_to_cell(sx, sy)
    return np.stack([col, row], axis=-1)


def warp_bev(bev, src_pose, dst_pose, spec):
    """Resample a BEV map rasterised in ``src_pose``'s frame into ``dst_pose``'s frame."""
    bev = check_feature_map(bev, "bev")
    if bev.shape[1:] != spec.shape:
        raise ContractViolation(f"bev {bev.shape[1:]} does not match grid spec {spec.shape}")
    if src_pose == dst_pose:
        return bev.copy()
    return bilinear_sample(bev, warp_coords(src_pose, dst_pose, spec))

"""Frustum-to-BEV pooling and ego-motion alignment of BEV features.

The fast pooling path precomputes, once per (rig, grid, frustum geometry),
a flat map from every (camera, depth bin, feature row, feature col) cell
to its target BEV cell; pooling is then a single deterministic
scatter-sum. pool_oracle recomputes the same thing point by point with no
precomputation and exists purely to check the fast path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from minibev import autodiff as ad
from minibev.autodiff import ShapeError, Tensor
from minibev.kernels import scatter_rows
from minibev.scene import CameraRig, EgoPose, relative_pose


@dataclass(frozen=True)
class BEVGrid:
    """Ego-centered square BEV grid; first tensor axis is ego-x, second ego-y."""

    cell_m: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.cell_m <= 0:
            raise ShapeError(f"BEV cell size must be positive, got {self.cell_m}")
        if self.nx % 2 or self.ny % 2:
            raise ShapeError(f"BEV extents must be even, got {self.nx}x{self.ny}")

    @property
    def extent_m(self) -> tuple[float, float]:
        return (self.nx * self.cell_m, self.ny * self.cell_m)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny


@dataclass(frozen=True)
class FrustumGeometry:
    """Maps (depth bin, feature row, feature col) to camera-frame points."""

    depth_centers: tuple[float, ...]
    feat_h: int
    feat_w: int
    stride: int  # image pixels per feature cell

    def __post_init__(self):
        d = np.asarray(self.depth_centers)
        if d.ndim != 1 or d.size < 1 or np.any(np.diff(d) <= 0):
            raise ShapeError("depth bin centers must be strictly increasing")

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Image-plane (u, v) coordinates of feature cell centers."""
        u = (np.arange(self.feat_w) + 0.5) * self.stride - 0.5
        v = (np.arange(self.feat_h) + 0.5) * self.stride - 0.5
        return u, v


def depth_bin_centers(d_min: float, d_max: float, n_bins: int) -> tuple[float, ...]:
    edges = np.linspace(d_min, d_max, n_bins + 1)
    return tuple((edges[:-1] + edges[1:]) / 2.0)


@dataclass
class BEVFeature:
    """BEV tensor tagged with its grid and the ego pose it is expressed in."""

    tensor: Tensor
    grid: BEVGrid
    pose: EgoPose
    frame_index: int = 0

    def __post_init__(self):
        if self.tensor.shape[:2] != (self.grid.nx, self.grid.ny):
            raise ShapeError(
                f"BEV tensor shape {self.tensor.shape} inconsistent with grid "
                f"{self.grid.nx}x{self.grid.ny}"
            )


@dataclass
class PoolingIndex:
    """Flat frustum-cell -> BEV-cell map for a fixed (rig, grid, geometry)."""

    flat: np.ndarray  # (n_cam * D * feat_h * feat_w,), int64; -1 marks outside
    grid: BEVGrid
    n_cameras: int
    geom: FrustumGeometry


def unproject_to_ego(cam, geom: FrustumGeometry) -> np.ndarray:
    """Ego-frame xyz of every (depth bin, row, col) frustum cell: (D, H, W, 3)."""
    u, v = geom.pixel_centers()
    uu, vv = np.meshgrid(u, v, indexing="xy")  # (H, W)
    dirs = np.stack([
        (uu - cam.cx) / cam.fx,
        (vv - cam.cy) / cam.fy,
        np.ones_like(uu),
    ], axis=-1)  # (H, W, 3), camera frame, z = 1
    d = np.asarray(geom.depth_centers)[:, None, None, None]
    pts_cam = dirs[None, :, :, :] * d
    return (pts_cam - cam.translation) @ cam.rotation  # R^T applied from the right


def build_index(rig: CameraRig, grid: BEVGrid, geom: FrustumGeometry) -> PoolingIndex:
    """Precompute the frustum-cell -> BEV-cell scatter map."""
    flats = []
    for cam in rig.cameras:
        pts = unproject_to_ego(cam, geom)
        i = np.floor(pts[..., 0] / grid.cell_m + grid.nx / 2).astype(np.int64)
        j = np.floor(pts[..., 1] / grid.cell_m + grid.ny / 2).astype(np.int64)
        inside = (i >= 0) & (i < grid.nx) & (j >= 0) & (j < grid.ny)
        flats.append(np.where(inside, i * grid.ny + j, -1).ravel())
    return PoolingIndex(
        flat=np.concatenate(flats), grid=grid, n_cameras=len(rig), geom=geom
    )


def pool(frustum: Tensor, index: PoolingIndex) -> Tensor:
    """Scatter-sum frustum features (n_cam, D, H, W, C) into a BEV (nx, ny, C)."""
    n_cam, D, H, W, C = frustum.shape if frustum.ndim == 5 else (None,) * 5
    if n_cam is None or (
        n_cam != index.n_cameras
        or (D, H, W) != (len(index.geom.depth_centers), index.geom.feat_h, index.geom.feat_w)
    ):
        raise ShapeError(
            f"pool: frustum shape {frustum.shape} does not match index geometry "
            f"({index.n_cameras} cams, {len(index.geom.depth_centers)} bins, "
            f"{index.geom.feat_h}x{index.geom.feat_w})"
        )
    flat = index.flat
    grid = index.grid
    vals = frustum.data.reshape(-1, C)
    out = scatter_rows(flat, vals, grid.n_cells).reshape(grid.nx, grid.ny, C)
    inside = flat >= 0

    def backward(g):
        g2 = g.reshape(grid.n_cells, C)
        gin = g2[np.maximum(flat, 0)]
        gin[~inside] = 0.0
        return (gin.reshape(frustum.shape),)

    return ad.record_op("bev_pool", out, (frustum,), backward)


def pool_oracle(frustum: np.ndarray, rig: CameraRig, grid: BEVGrid,
                geom: FrustumGeometry) -> np.ndarray:
    """Reference pooling: per-point unproject + accumulate, no precomputation."""
    n_cam, D, H, W, C = frustum.shape
    out = np.zeros((grid.nx, grid.ny, C))
    u, v = geom.pixel_centers()
    for ci, cam in enumerate(rig.cameras):
        r_t = cam.rotation.T
        for di, depth in enumerate(geom.depth_centers):
            for fi in range(H):
                for fj in range(W):
                    p_cam = np.array([
                        (u[fj] - cam.cx) / cam.fx * depth,
                        (v[fi] - cam.cy) / cam.fy * depth,
                        depth,
                    ])
                    p_ego = r_t @ (p_cam - cam.translation)
                    i = int(np.floor(p_ego[0] / grid.cell_m + grid.nx / 2))
                    j = int(np.floor(p_ego[1] / grid.cell_m + grid.ny / 2))
                    if 0 <= i < grid.nx and 0 <= j < grid.ny:
                        out[i, j] += frustum[ci, di, fi, fj]
    return out


def warp_to_current(past: BEVFeature, current_pose: EgoPose) -> BEVFeature:
    """Resample a past BEV feature into the current ego frame (zeros outside).

    Handles ego motion only; object motion is left to temporal fusion. The
    identity transform short-circuits to the unmodified tensor so that a
    no-motion warp is exactly lossless.
    """
    grid = past.grid
    dx, dy, dyaw = relative_pose(past.pose, current_pose)
    if dx == 0.0 and dy == 0.0 and dyaw == 0.0:
        return BEVFeature(past.tensor, grid, current_pose, past.frame_index)
    xs = (np.arange(grid.nx) - grid.nx / 2 + 0.5) * grid.cell_m
    ys = (np.arange(grid.ny) - grid.ny / 2 + 0.5) * grid.cell_m
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    c, s = np.cos(dyaw), np.sin(dyaw)
    px = gx * c - gy * s + dx
    py = gx * s + gy * c + dy
    coords = np.stack([
        px / grid.cell_m + grid.nx / 2 - 0.5,
        py / grid.cell_m + grid.ny / 2 - 0.5,
    ], axis=-1)
    out = ad.bilinear_resample(past.tensor, coords)
    return BEVFeature(out, grid, current_pose, past.frame_index)


class IndexCache:
    """Pooling indices keyed by (rig, grid, geometry); rebuilt on any change."""

    def __init__(self):
        self._cache: dict[tuple, PoolingIndex] = {}

    def get(self, rig: CameraRig, grid: BEVGrid, geom: FrustumGeometry) -> PoolingIndex:
        key = (rig.key(), grid, geom)
        idx = self._cache.get(key)
        if idx is None:
            idx = self._cache[key] = build_index(rig, grid, geom)
        return idx


def pool_multiscale(frustum: Tensor, rig: CameraRig, grids: list[BEVGrid],
                    geom: FrustumGeometry, cache: IndexCache | None = None,
                    pose: EgoPose | None = None, frame_index: int = 0) -> list[BEVFeature]:
    """Pool one frustum onto every requested grid (e.g. detection + segmentation)."""
    if not grids:
        raise ShapeError("pool_multiscale: need at least one grid")
    if cache is None:
        cache = IndexCache()
    pose = pose if pose is not None else EgoPose(0.0, 0.0, 0.0)
    out = []
    for grid in grids:
        idx = cache.get(rig, grid, geom)
        out.append(BEVFeature(pool(frustum, idx), grid, pose, frame_index))
    return out

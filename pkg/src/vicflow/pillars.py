"""Point cloud -> BEV pseudo-image (a one-layer Pillar Feature Net).

Binning is geometric and parameter-free, so it is split out
(:func:`bin_points`) and can be cached per frame; only the embedding in
:func:`pillarize` is differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from . import tensor as T
from .nn import Module, param
from .scene import PointCloud
from .tensor import DEFAULT_DTYPE, Tensor

N_POINT_FEATURES = 6  # x, y, z, intensity, dx/dy from pillar centre


@dataclass(frozen=True)
class BevGrid:
    x_range: tuple = (0.0, 36.0)
    y_range: tuple = (-18.0, 18.0)
    z_range: tuple = (-3.0, 1.0)
    nx: int = 72
    ny: int = 72
    channels: int = 16

    def __post_init__(self):
        cx = (self.x_range[1] - self.x_range[0]) / self.nx
        cy = (self.y_range[1] - self.y_range[0]) / self.ny
        if cx <= 0 or abs(cx - cy) > 1e-9:
            raise ValueError(f"grid cells must be square and positive, got {cx} x {cy}")
        if self.z_range[1] <= self.z_range[0]:
            raise ValueError("empty z range")

    @property
    def cell(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.nx

    def downsample(self, factor: int, channels: int) -> "BevGrid":
        return replace(self, nx=self.nx // factor, ny=self.ny // factor, channels=channels)

    def cell_centers(self) -> tuple:
        """(x, y) centre coordinates, each [ny, nx]."""
        xs = self.x_range[0] + (np.arange(self.nx) + 0.5) * self.cell
        ys = self.y_range[0] + (np.arange(self.ny) + 0.5) * self.cell
        return np.meshgrid(xs, ys)

    def locate(self, x, y):
        """Row and column of the cell containing (x, y); may be out of range."""
        col = np.floor((np.asarray(x) - self.x_range[0]) / self.cell).astype(np.int64)
        row = np.floor((np.asarray(y) - self.y_range[0]) / self.cell).astype(np.int64)
        return row, col


@dataclass(frozen=True)
class PillarBins:
    features: np.ndarray  # [M, 6] float32 per kept point
    cell: np.ndarray      # [M] flat cell index row * nx + col
    grid: BevGrid
    frame_id: str
    timestamp: float


@dataclass
class PseudoImage:
    tensor: Tensor  # [channels, ny, nx]
    grid: BevGrid
    frame_id: str
    timestamp: float


def _farthest_point_subset(xyz: np.ndarray, centre: np.ndarray, k: int) -> np.ndarray:
    """Greedy farthest-point sampling seeded by the point farthest from the pillar centre."""
    chosen = [int(np.argmax(((xyz[:, :2] - centre) ** 2).sum(1)))]
    dist = ((xyz - xyz[chosen[0]]) ** 2).sum(1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, ((xyz - xyz[nxt]) ** 2).sum(1))
    return np.sort(np.asarray(chosen))


def bin_points(cloud: PointCloud, grid: BevGrid, max_points: int = 32) -> PillarBins:
    pts = np.asarray(cloud.points, dtype=np.float64)
    if len(pts):
        row, col = grid.locate(pts[:, 0], pts[:, 1])
        keep = ((row >= 0) & (row < grid.ny) & (col >= 0) & (col < grid.nx)
                & (pts[:, 2] >= grid.z_range[0]) & (pts[:, 2] < grid.z_range[1]))
        pts, row, col = pts[keep], row[keep], col[keep]
    else:
        row = col = np.zeros(0, np.int64)
    cell = row * grid.nx + col
    order = np.argsort(cell, kind="stable")
    pts, cell, row, col = pts[order], cell[order], row[order], col[order]

    if len(cell):
        uniq, start, counts = np.unique(cell, return_index=True, return_counts=True)
        over = np.nonzero(counts > max_points)[0]
        if len(over):
            keep_mask = np.ones(len(cell), bool)
            for u in over:
                s, n = start[u], counts[u]
                r, c = divmod(int(uniq[u]), grid.nx)
                centre = np.array([grid.x_range[0] + (c + 0.5) * grid.cell, grid.y_range[0] + (r + 0.5) * grid.cell])
                sub = _farthest_point_subset(pts[s:s + n, :3], centre, max_points)
                local = np.zeros(n, bool)
                local[sub] = True
                keep_mask[s:s + n] = local
            pts, cell, row, col = pts[keep_mask], cell[keep_mask], row[keep_mask], col[keep_mask]

    xs = grid.x_range[1] - grid.x_range[0]
    ys = grid.y_range[1] - grid.y_range[0]
    zs = grid.z_range[1] - grid.z_range[0]
    xc = grid.x_range[0] + (col + 0.5) * grid.cell
    yc = grid.y_range[0] + (row + 0.5) * grid.cell
    feats = np.column_stack([
        (pts[:, 0] - grid.x_range[0]) / xs,
        (pts[:, 1] - grid.y_range[0]) / ys,
        (pts[:, 2] - grid.z_range[0]) / zs,
        pts[:, 3],
        (pts[:, 0] - xc) / grid.cell,
        (pts[:, 1] - yc) / grid.cell,
    ]) if len(pts) else np.zeros((0, N_POINT_FEATURES))
    return PillarBins(feats.astype(np.float32), cell.astype(np.int64), grid, cloud.frame_id, cloud.timestamp)


class PillarEmbed(Module):
    """Shared per-point linear layer + relu, max-pooled per pillar."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.weight = param(rng.normal(0, np.sqrt(2.0 / N_POINT_FEATURES), (N_POINT_FEATURES, channels)).astype(dtype))
        self.bias = param(np.zeros(channels, dtype=dtype))


def pillarize(cloud: Union[PointCloud, PillarBins], grid: BevGrid, embed: PillarEmbed) -> PseudoImage:
    """BEV pseudo-image of ``cloud``; empty pillars are exactly zero."""
    bins = cloud if isinstance(cloud, PillarBins) else bin_points(cloud, grid)
    if bins.grid != grid:
        raise ValueError("pillar bins were computed for a different grid")
    c = embed.weight.shape[1]
    if c != grid.channels:
        raise T.DimensionError(f"embed produces {c} channels, grid expects {grid.channels}")
    feats = Tensor(bins.features.astype(embed.weight.dtype))
    h = T.relu(T.linear(feats, embed.weight, embed.bias))
    pooled = T.segment_max(h, bins.cell, grid.nx * grid.ny)
    img = T.reshape(pooled, (c, grid.ny, grid.nx))
    return PseudoImage(img, grid, bins.frame_id, bins.timestamp)

"""Infra-to-vehicle feature warp, concat fusion, and a single-anchor SSD-style head.

Box overlap everywhere (matching, NMS, evaluation) is BEV IoU of the boxes'
axis-aligned hulls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from . import tensor as T
from .flow import FeatureMap
from .geometry import Pose, relative
from .nn import ConvBlock, Module
from .pillars import BevGrid
from .scene import VEHICLE
from .tensor import DEFAULT_DTYPE, Tensor

N_HEAD = 9  # objectness, dx, dy, dz, log w, log l, log h, sin yaw, cos yaw


@dataclass(frozen=True)
class DetectionBox:
    cx: float
    cy: float
    cz: float
    w: float
    l: float
    h: float
    yaw: float
    score: float
    label: str = "Car"

    def __post_init__(self):
        if min(self.w, self.l, self.h) <= 0:
            raise ValueError("box dimensions must be positive")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def in_frame(self, source_to_target: Pose) -> "DetectionBox":
        c = source_to_target.apply(np.array([self.cx, self.cy, self.cz]))
        yaw = math.remainder(self.yaw + source_to_target.yaw, 2 * math.pi)
        return DetectionBox(float(c[0]), float(c[1]), float(c[2]), self.w, self.l, self.h, yaw, self.score, self.label)

    def as_row(self) -> tuple:
        return (self.cx, self.cy, self.cz, self.w, self.l, self.h, self.yaw, self.score)


@dataclass(frozen=True)
class AnchorConfig:
    w: float = 1.6
    l: float = 3.9
    h: float = 1.56
    z_center: float = -1.78
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    force_best: bool = True

    def __post_init__(self):
        if not self.pos_iou > self.neg_iou:
            raise ValueError("pos_iou must exceed neg_iou")

    @property
    def diag(self) -> float:
        return math.hypot(self.w, self.l)


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------


def bev_hulls(cx, cy, w, l, yaw) -> np.ndarray:
    """[N, 4] axis-aligned hulls (xmin, ymin, xmax, ymax) of yawed boxes."""
    cx, cy, w, l, yaw = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (cx, cy, w, l, yaw))
    c, s = np.abs(np.cos(yaw)), np.abs(np.sin(yaw))
    hx = c * l / 2 + s * w / 2
    hy = s * l / 2 + c * w / 2
    return np.stack([cx - hx, cy - hy, cx + hx, cy + hy], axis=1)


def boxes_hulls(boxes: Sequence) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    a = np.array([(b.cx, b.cy, b.w, b.l, b.yaw) for b in boxes], dtype=np.float64)
    return bev_hulls(*a.T)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of axis-aligned rectangles, [N, 4] x [M, 4] -> [N, M]."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def bev_iou(a, b) -> float:
    return float(iou_matrix(boxes_hulls([a]), boxes_hulls([b]))[0, 0])


def fold_yaw(yaw):
    """Map yaw into [-pi/2, pi/2): boxes are symmetric under a half turn."""
    return np.mod(np.asarray(yaw) + np.pi / 2, np.pi) - np.pi / 2


# ---------------------------------------------------------------------------
# warp
# ---------------------------------------------------------------------------


def _planar(p: Pose) -> tuple:
    return (round(float(p.translation[0]), 9), round(float(p.translation[1]), 9), round(p.yaw, 12))


@lru_cache(maxsize=4096)
def _warp_matrix(rel: tuple, grid: BevGrid) -> sparse.csr_matrix:
    """Bilinear splat: each source cell pushes its value onto the four target
    cells around where its centre lands, so mass is kept exactly for sources
    that land inside the grid."""
    tx, ty, yaw = rel
    xs, ys = grid.cell_centers()
    # rel maps target (vehicle) coordinates to source (infra) ones; invert it
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = xs - tx, ys - ty
    vx = c * dx + s * dy
    vy = -s * dx + c * dy
    fc = (vx - grid.x_range[0]) / grid.cell - 0.5
    fr = (vy - grid.y_range[0]) / grid.cell - 0.5
    # snap float noise so exact grid alignment gives exact weights
    fc = np.where(np.abs(fc - np.round(fc)) < 1e-9, np.round(fc), fc)
    fr = np.where(np.abs(fr - np.round(fr)) < 1e-9, np.round(fr), fr)
    c0, r0 = np.floor(fc).astype(np.int64), np.floor(fr).astype(np.int64)
    ac, ar = fc - c0, fr - r0
    src = np.arange(grid.nx * grid.ny).reshape(grid.ny, grid.nx)
    rows, cols, vals = [], [], []
    for dr, dc, wgt in ((0, 0, (1 - ar) * (1 - ac)), (0, 1, (1 - ar) * ac), (1, 0, ar * (1 - ac)), (1, 1, ar * ac)):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < grid.ny) & (cc >= 0) & (cc < grid.nx) & (wgt > 0)
        rows.append(rr[ok] * grid.nx + cc[ok])
        cols.append(src[ok])
        vals.append(wgt[ok])
    n = grid.nx * grid.ny
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def warp_to_vehicle(feature: FeatureMap, infra_pose: Pose, vehicle_pose: Pose, grid: BevGrid) -> FeatureMap:
    """Move an infra-frame BEV feature onto the vehicle grid by bilinear splatting.

    Only the planar part (x, y, yaw) of the relative pose is used; infra cells
    that land outside the vehicle grid are dropped.
    """
    c, h, w = feature.shape
    if (h, w) != (grid.ny, grid.nx):
        raise T.DimensionError(f"feature {feature.shape} does not match grid {grid.ny}x{grid.nx}")
    rel = relative(infra_pose, vehicle_pose)  # vehicle frame -> infra frame
    m = _warp_matrix(_planar(rel), grid)
    return FeatureMap(T.sparse_apply(feature.tensor, m, (h, w)), VEHICLE, feature.timestamp)


# ---------------------------------------------------------------------------
# fusion + head
# ---------------------------------------------------------------------------


class Fusion(Module):
    def __init__(self, channels: int = 32, *, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.block = ConvBlock(2 * channels, channels, 3, 1, 1, rng=rng, dtype=dtype)

    def __call__(self, vehicle: FeatureMap, infra: FeatureMap) -> FeatureMap:
        if vehicle.shape != infra.shape:
            raise T.DimensionError(f"cannot fuse {vehicle.shape} with {infra.shape}")
        return FeatureMap(self.block(T.concat_channels(vehicle.tensor, infra.tensor)), VEHICLE, vehicle.timestamp)


def fuse(vehicle_feat: FeatureMap, infra_feat_warped: FeatureMap, fusion: Fusion) -> FeatureMap:
    return fusion(vehicle_feat, infra_feat_warped)


class Head(Module):
    """conv3x3 + relu, then a 1x1 conv to the nine per-anchor outputs."""

    def __init__(self, channels: int = 32, *, rng: np.random.Generator, prior: float = 0.01, dtype=DEFAULT_DTYPE):
        self.hidden = ConvBlock(channels, channels, 3, 1, 1, rng=rng, dtype=dtype)
        self.out = ConvBlock(channels, N_HEAD, 1, act=False, rng=rng, dtype=dtype, init_scale=0.1)
        self.out.bias.data[0] = -math.log((1 - prior) / prior)

    def __call__(self, x: FeatureMap) -> Tensor:
        return self.out(self.hidden(x.tensor))


def anchor_centers(grid: BevGrid) -> tuple:
    xs, ys = grid.cell_centers()
    return xs.ravel(), ys.ravel()


def anchor_hulls(grid: BevGrid, anchors: AnchorConfig) -> np.ndarray:
    xs, ys = anchor_centers(grid)
    return bev_hulls(xs, ys, np.full_like(xs, anchors.w), np.full_like(xs, anchors.l), np.zeros_like(xs))


@dataclass
class Targets:
    labels: np.ndarray      # [HW] 1 positive, 0 negative
    cls_weight: np.ndarray  # [HW] 0 for ignored anchors
    reg: np.ndarray         # [8, HW]
    positive: np.ndarray    # [HW] bool


def encode_box(box, ax: float, ay: float, anchors: AnchorConfig) -> np.ndarray:
    yaw = float(fold_yaw(box.yaw))
    return np.array([(box.cx - ax) / anchors.diag, (box.cy - ay) / anchors.diag, (box.cz - anchors.z_center) / anchors.h,
                     math.log(box.w / anchors.w), math.log(box.l / anchors.l), math.log(box.h / anchors.h),
                     math.sin(yaw), math.cos(yaw)])


def decode(reg: np.ndarray, ax, ay, anchors: AnchorConfig) -> np.ndarray:
    """[8, N] residuals -> [N, 7] (cx, cy, cz, w, l, h, yaw)."""
    d = anchors.diag
    reg = np.clip(reg.astype(np.float64), -10, 10)
    return np.stack([reg[0] * d + ax, reg[1] * d + ay, reg[2] * anchors.h + anchors.z_center,
                     np.exp(reg[3]) * anchors.w, np.exp(reg[4]) * anchors.l, np.exp(reg[5]) * anchors.h,
                     np.arctan2(reg[6], reg[7])], axis=1)


def assign_targets(gts: Sequence, grid: BevGrid, anchors: AnchorConfig) -> Targets:
    n = grid.nx * grid.ny
    labels = np.zeros(n)
    weight = np.ones(n)
    reg = np.zeros((8, n))
    pos = np.zeros(n, bool)
    if len(gts) == 0:
        return Targets(labels, weight, reg, pos)
    iou = iou_matrix(anchor_hulls(grid, anchors), boxes_hulls(gts))  # [n, G]
    best_gt = iou.argmax(1)
    best_iou = iou.max(1)
    pos = best_iou >= anchors.pos_iou
    if anchors.force_best:
        for g in range(len(gts)):
            a = int(iou[:, g].argmax())
            if iou[a, g] > 0:
                pos[a] = True
                best_gt[a] = g
    weight[(best_iou > anchors.neg_iou) & ~pos] = 0.0
    labels[pos] = 1.0
    xs, ys = anchor_centers(grid)
    for a in np.flatnonzero(pos):
        reg[:, a] = encode_box(gts[best_gt[a]], xs[a], ys[a], anchors)
    return Targets(labels, weight, reg, pos)


def detection_loss(head_out: Tensor, gts: Sequence, grid: BevGrid, anchors: AnchorConfig = AnchorConfig(),
                   cls_weight: float = 1.0, reg_weight: float = 2.0, targets: Optional[Targets] = None) -> Tensor:
    """Focal objectness loss + smooth-L1 box regression, normalised by positive count."""
    if head_out.shape != (N_HEAD, grid.ny, grid.nx):
        raise T.DimensionError(f"head output {head_out.shape} vs grid {grid.ny}x{grid.nx}")
    tg = targets if targets is not None else assign_targets(gts, grid, anchors)
    norm = max(1.0, float(tg.positive.sum()))
    flat = T.reshape(head_out, (N_HEAD, grid.ny * grid.nx))
    cls = T.sigmoid_focal_loss(T.channel_slice(flat, 0, 1), tg.labels[None], tg.cls_weight[None] / norm)
    w = np.broadcast_to(tg.positive[None].astype(np.float64), (8, len(tg.labels))) / norm
    reg = T.smooth_l1_loss(T.channel_slice(flat, 1, N_HEAD), tg.reg, w)
    return T.add(T.scale(cls, cls_weight), T.scale(reg, reg_weight))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def nms(boxes: list, iou_thr: float) -> list:
    """Greedy BEV NMS over boxes sorted by descending score."""
    boxes = sorted(boxes, key=lambda b: -b.score)
    if not boxes:
        return []
    hulls = boxes_hulls(boxes)
    iou = iou_matrix(hulls, hulls)
    keep: list[int] = []
    suppressed = np.zeros(len(boxes), bool)
    for i in range(len(boxes)):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= iou[i] > iou_thr
    return [boxes[i] for i in keep]


def detect(head_out, grid: BevGrid, anchors: AnchorConfig = AnchorConfig(), score_threshold: float = 0.5,
           nms_iou: float = 0.1, max_boxes: int = 100) -> list:
    """Decode, threshold (strictly above ``score_threshold``) and NMS."""
    out = head_out.data if isinstance(head_out, Tensor) else np.asarray(head_out)
    flat = out.reshape(N_HEAD, -1).astype(np.float64)
    scores = _sigmoid(flat[0])
    idx = np.flatnonzero(scores > score_threshold)
    if len(idx) == 0:
        return []
    idx = idx[np.argsort(-scores[idx], kind="stable")][: max_boxes * 4]
    xs, ys = anchor_centers(grid)
    dec = decode(flat[1:, idx], xs[idx], ys[idx], anchors)
    boxes = [DetectionBox(*map(float, d), score=float(s)) for d, s in zip(dec, scores[idx])]
    return nms(boxes, nms_iou)[:max_boxes]

"""Network bundles for every system variant and the per-frame data they consume.

All variants share one pillar grid and feature grid.  The middle-fusion
network is used three ways: with a derivative (feature flow), without
(no prediction), and with a wider code and no derivative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .comm import Codec, FlowMessage, compress
from .flow import Backbone, DerivativeGenerator, Extractor, FeatureFlow, FeatureMap
from .fusion import AnchorConfig, Fusion, Head, Targets, assign_targets, warp_to_vehicle
from .geometry import Pose, relative
from .nn import Module
from .pillars import BevGrid, PillarBins, PillarEmbed, PseudoImage, bin_points, pillarize
from .scene import INFRA, VEHICLE, PointCloud, Scenario, transform_cloud
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    grid: BevGrid = BevGrid()
    channels: int = 32
    code_channels: int = 4
    wide_code_channels: int = 8
    anchors: AnchorConfig = AnchorConfig()
    score_threshold: float = 0.05
    nms_iou: float = 0.1
    max_points_per_pillar: int = 32
    rescale: bool = True  # L1 scale correction at inference
    frame_interval: float = 0.1
    seed: int = 0

    @property
    def feat_grid(self) -> BevGrid:
        return self.grid.downsample(2, self.channels)


class Detector(Module):
    """Single-cloud detector: pillars -> extractor -> head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.embed = PillarEmbed(cfg.grid.channels, rng)
        self.extractor = Extractor(cfg.grid.channels, cfg.channels, rng=rng)
        self.head = Head(cfg.channels, rng=rng)

    def __call__(self, bins: PillarBins) -> Tensor:
        img = pillarize(bins, bins.grid, self.embed)
        return self.head(self.extractor(img))


class MiddleFusionNet(Module):
    """Infra and vehicle branches, codec, optional derivative generator, fusion and head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, code_channels: int, with_flow: bool = True):
        g = cfg.grid
        self.cfg = cfg
        self.infra_embed = PillarEmbed(g.channels, rng)
        self.infra_extractor = Extractor(g.channels, cfg.channels, rng=rng)
        self.vehicle_embed = PillarEmbed(g.channels, rng)
        self.vehicle_extractor = Extractor(g.channels, cfg.channels, rng=rng)
        self.codec = Codec(cfg.channels, code_channels, rng=rng, with_derivative=with_flow)
        self.derivative = DerivativeGenerator(g.channels, cfg.channels, frame_interval=cfg.frame_interval, rng=rng) \
            if with_flow else None
        self.fusion = Fusion(cfg.channels, rng=rng)
        self.head = Head(cfg.channels, rng=rng)

    @property
    def with_flow(self) -> bool:
        return self.derivative is not None

    # parameter groups -----------------------------------------------------
    def stage1_parameters(self) -> list:
        mods = [self.infra_embed, self.infra_extractor, self.vehicle_embed, self.vehicle_extractor,
                self.codec.feat_enc, self.codec.feat_dec, self.fusion, self.head]
        return [p for m in mods for p in m.parameters()]

    def flow_parameters(self) -> list:
        if not self.with_flow:
            return []
        mods = [self.derivative, self.codec.deriv_enc, self.codec.deriv_dec]
        return [p for m in mods for p in m.parameters()]

    # pieces ---------------------------------------------------------------
    def infra_image(self, bins: PillarBins) -> PseudoImage:
        return pillarize(bins, bins.grid, self.infra_embed)

    def infra_feature(self, bins: PillarBins) -> FeatureMap:
        return self.infra_extractor(self.infra_image(bins))

    def vehicle_feature(self, bins: PillarBins) -> FeatureMap:
        return self.vehicle_extractor(pillarize(bins, bins.grid, self.vehicle_embed))

    def fuse_and_head(self, vehicle: FeatureMap, infra: FeatureMap, infra_pose: Pose, vehicle_pose: Pose) -> Tensor:
        warped = warp_to_vehicle(infra, infra_pose, vehicle_pose, self.cfg.feat_grid)
        return self.head(self.fusion(vehicle, warped))

    def forward_sync(self, infra_bins: PillarBins, vehicle_bins: PillarBins, infra_pose: Pose,
                     vehicle_pose: Pose) -> Tensor:
        """Zero-latency path used in stage-1 training: no derivative anywhere."""
        f = self.infra_feature(infra_bins)
        restored = FeatureMap(self.codec.roundtrip_feature(f.tensor), INFRA, f.timestamp)
        return self.fuse_and_head(self.vehicle_feature(vehicle_bins), restored, infra_pose, vehicle_pose)

    def make_message(self, bins_prev: Optional[PillarBins], bins_curr: PillarBins, calib: Pose,
                     with_derivative: bool) -> FlowMessage:
        """Infra side: feature (and derivative, when history exists) -> compressed message."""
        with T.no_grad():
            img = self.infra_image(bins_curr)
            feat = self.infra_extractor(img)
            if with_derivative and bins_prev is not None:
                deriv = self.derivative(self.infra_image(bins_prev), img)
            else:
                deriv = T.tensor(np.zeros(feat.shape, np.float32))
        flow = FeatureFlow(feat, deriv, bins_curr.timestamp)
        return compress(flow, self.codec, calib, with_derivative=with_derivative)


class VehicleFlowNet(Module):
    """Derivative estimated on the receiver from two consecutive decompressed features.

    Same module as the infra-side generator (antisymmetric backbone over the
    frame pair), with a stride-1 stem because its inputs are already at
    feature resolution.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.channels
        self.frame_interval = cfg.frame_interval
        self.net = Backbone(2 * c, c, rng, linear_out=True, out_scale=0.1, stem_stride=1)

    def __call__(self, prev: Tensor, curr: Tensor) -> Tensor:
        delta = T.sub(self.net(T.concat_channels(prev, curr)), self.net(T.concat_channels(curr, prev)))
        return T.scale(delta, 1.0 / self.frame_interval)


class ModelBundle(Module):
    """Every trainable network the variants need, in one checkpoint."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg

        def rng(k):
            return np.random.default_rng([cfg.seed, k])

        self.nonfusion = Detector(cfg, rng(1))
        self.early = Detector(cfg, rng(2))
        self.infra_det = Detector(cfg, rng(3))
        self.ffnet = MiddleFusionNet(cfg, rng(4), cfg.code_channels, with_flow=True)
        self.wide = MiddleFusionNet(cfg, rng(5), cfg.wide_code_channels, with_flow=False)
        self.vflow = VehicleFlowNet(cfg, rng(6))


# ---------------------------------------------------------------------------
# per-frame data, computed once per scenario
# ---------------------------------------------------------------------------


@dataclass
class FrameData:
    index: int
    timestamp: float
    infra_bins: PillarBins
    vehicle_bins: PillarBins
    infra_pose: Pose
    vehicle_pose: Pose
    gts_vehicle: list
    gts_infra: list
    _targets: dict = field(default_factory=dict, repr=False)

    def targets(self, frame: str, cfg: ModelConfig) -> Targets:
        if frame not in self._targets:
            gts = self.gts_vehicle if frame == VEHICLE else self.gts_infra
            self._targets[frame] = assign_targets(gts, cfg.feat_grid, cfg.anchors)
        return self._targets[frame]


@dataclass
class ScenarioData:
    scenario: Scenario
    frames: list
    cfg: ModelConfig
    _early: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.frames)

    def time(self, i: int) -> float:
        return self.frames[i].timestamp

    def early_bins(self, v: int, i: int) -> PillarBins:
        """Vehicle cloud at frame v merged with the infra cloud captured at frame i."""
        key = (v, i)
        if key not in self._early:
            self._early[key] = bin_points(early_cloud(self.scenario, v, i), self.cfg.grid, self.cfg.max_points_per_pillar)
        return self._early[key]


def early_cloud(scen: Scenario, v: int, i: int) -> PointCloud:
    fv, fi = scen.frames[v], scen.frames[i]
    moved = transform_cloud(fi.infra_cloud, relative(fv.vehicle_pose, fi.infra_pose), VEHICLE)
    pts = np.concatenate([fv.vehicle_cloud.points, moved.points])
    return PointCloud(VEHICLE, fv.timestamp, pts)


def in_region(boxes, region) -> list:
    x0, y0, x1, y1 = region
    return [b for b in boxes if x0 <= b.cx < x1 and y0 <= b.cy < y1]


def prepare(scen: Scenario, cfg: ModelConfig) -> ScenarioData:
    g = cfg.grid
    region = (g.x_range[0], g.y_range[0], g.x_range[1], g.y_range[1])
    frames = []
    for k, f in enumerate(scen.frames):
        frames.append(FrameData(
            k, f.timestamp,
            bin_points(f.infra_cloud, g, cfg.max_points_per_pillar),
            bin_points(f.vehicle_cloud, g, cfg.max_points_per_pillar),
            f.infra_pose, f.vehicle_pose,
            in_region(scen.boxes_in_vehicle_frame(k), region),
            in_region(scen.boxes_in_infra_frame(k), region)))
    return ScenarioData(scen, frames, cfg)

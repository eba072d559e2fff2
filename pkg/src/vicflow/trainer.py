"""Two-stage training: supervised zero-latency fusion, then self-supervised feature flow.

Stage 1 trains everything except the derivative path on detection loss.
Stage 2 freezes that and fits the derivative generator (and its codec
path) so that feature + k * dt * derivative points in the same direction
as the feature actually observed k frames later.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .flow import FeatureFlow, FeatureMap, linear_predict, scale_correct
from .fusion import detection_loss
from .optim import Adam
from .pipeline import MiddleFusionNet, ModelBundle, ScenarioData, VehicleFlowNet
from .scene import INFRA, VEHICLE, ConfigError
from .tensor import DegenerateInputError, Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 8
    stage2_epochs: int = 5
    lr: float = 1e-3
    weight_decay: float = 0.01
    stage1_batch: int = 1
    stage2_batch: int = 2
    k_range: tuple = (1, 2)
    seed: int = 0

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0 or self.lr <= 0:
            raise ConfigError("epochs must be non-negative and lr positive")
        if self.k_range[0] < 1 or self.k_range[1] < self.k_range[0]:
            raise ConfigError(f"bad k_range {self.k_range}")


@dataclass(frozen=True)
class TrainPair:
    scenario: int
    t_index: int  # frame of P(t_i); P(t_i - 1) and P(t_i + k) are its neighbours
    k: int

    @property
    def frames(self) -> tuple:
        return (self.t_index - 1, self.t_index, self.t_index + self.k)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (stage, epoch, step, loss)

    def add(self, stage: str, epoch: int, step: int, loss: float) -> None:
        self.rows.append((stage, epoch, step, loss))

    def losses(self, stage: str) -> list:
        return [r[3] for r in self.rows if r[0] == stage]

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["stage", "epoch", "step", "loss"])
        for s, e, k, loss in self.rows:
            w.writerow([s, e, k, repr(float(loss))])
        return out.getvalue()


def build_pairs(n_frames: int, k_range: Sequence[int], seed: int = 0, scenario: int = 0) -> list:
    """One pair per valid t_i with k drawn uniformly from ``k_range`` (inclusive)."""
    k_lo, k_hi = int(k_range[0]), int(k_range[1])
    if n_frames < k_hi + 2:
        raise ConfigError(f"scenario of {n_frames} frames too short for k up to {k_hi}")
    rng = np.random.default_rng([seed, scenario, 0x5E1F])
    pairs = []
    for t in range(1, n_frames - k_lo):
        k = int(rng.integers(k_lo, k_hi + 1))
        if t + k >= n_frames:
            k = n_frames - 1 - t
        pairs.append(TrainPair(scenario, t, k))
    return pairs


def _fit(params: list, items: Sequence, loss_fn: Callable, *, epochs: int, cfg: TrainConfig, batch: int,
         stage: str, tlog: TrainLog, seed_tag: int) -> None:
    """Adam over ``items`` with gradient accumulation; loss_fn(item) -> scalar Tensor or None (skip)."""
    if not items or epochs == 0:
        return
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    step = 0
    for epoch in range(epochs):
        order = np.random.default_rng([cfg.seed, seed_tag, epoch]).permutation(len(items))
        for start in range(0, len(order), batch):
            opt.zero_grad()
            total, used = 0.0, 0
            for j in order[start:start + batch]:
                loss = loss_fn(items[j])
                if loss is None:
                    continue
                val = loss.item()
                if not math.isfinite(val):
                    raise TrainingError(f"{stage}: non-finite loss at step {step}")
                T.backward(T.scale(loss, 1.0 / batch))
                total += val
                used += 1
            if used == 0:
                continue
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            opt.step()
            tlog.add(stage, epoch, step, total / used)
            step += 1


def _frames(data: Sequence[ScenarioData], first: int = 0) -> list:
    return [(s, i) for s, sd in enumerate(data) for i in range(first, len(sd))]


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


def stage1_loss(net: MiddleFusionNet, sd: ScenarioData, i: int) -> Tensor:
    f = sd.frames[i]
    out = net.forward_sync(f.infra_bins, f.vehicle_bins, f.infra_pose, f.vehicle_pose)
    return detection_loss(out, f.gts_vehicle, sd.cfg.feat_grid, sd.cfg.anchors, targets=f.targets(VEHICLE, sd.cfg))


def train_stage1(net: MiddleFusionNet, data: Sequence[ScenarioData], cfg: TrainConfig,
                 tlog: Optional[TrainLog] = None, tag: str = "stage1") -> TrainLog:
    """End-to-end zero-latency fusion training; the derivative path is masked."""
    tlog = tlog if tlog is not None else TrainLog()
    items = _frames(data)
    _fit(net.stage1_parameters(), items, lambda it: stage1_loss(net, data[it[0]], it[1]),
         epochs=cfg.stage1_epochs, cfg=cfg, batch=cfg.stage1_batch, stage=tag, tlog=tlog, seed_tag=hash_tag(tag))
    return tlog


def hash_tag(tag: str) -> int:
    import zlib

    return zlib.crc32(tag.encode())


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------


def flow_loss(pred: Tensor, target: Tensor) -> Tensor:
    """1 - cos(pred, target), one term of the self-supervised objective."""
    return T.sub(T.tensor(1.0, dtype=pred.dtype), T.cosine_similarity(pred, target))


class FlowCache:
    """Frozen stage-1 quantities per frame: infra pseudo-images and codec-restored features."""

    def __init__(self, net: MiddleFusionNet, data: Sequence[ScenarioData]):
        self.images, self.restored = [], []
        with T.no_grad():
            for sd in data:
                imgs, rest = [], []
                for f in sd.frames:
                    img = net.infra_image(f.infra_bins)
                    feat = net.infra_extractor(img)
                    imgs.append(img)
                    rest.append(net.codec.roundtrip_feature(feat.tensor))
                self.images.append(imgs)
                self.restored.append(rest)


def predicted_feature(base: Tensor, derivative: Tensor, dt: float, t_i: float = 0.0) -> FeatureMap:
    flow = FeatureFlow(FeatureMap(base, INFRA, t_i), derivative, t_i)
    return scale_correct(linear_predict(flow, t_i + dt), flow.feature)


def stage2_pair_loss(net: MiddleFusionNet, cache: FlowCache, pair: TrainPair, dt: float) -> Optional[Tensor]:
    prev, cur, fut = pair.frames
    imgs = cache.images[pair.scenario]
    deriv = net.derivative(imgs[prev], imgs[cur])
    deriv = net.codec.roundtrip_derivative(deriv)
    try:
        pred = predicted_feature(cache.restored[pair.scenario][cur], deriv, pair.k * dt)
    except DegenerateInputError:
        log.warning("skipping pair %s: zero-norm prediction", pair)
        return None
    return flow_loss(pred.tensor, cache.restored[pair.scenario][fut])


def make_pairs(data: Sequence[ScenarioData], cfg: TrainConfig) -> list:
    return [p for s, sd in enumerate(data) for p in build_pairs(len(sd), cfg.k_range, cfg.seed, s)]


def train_stage2(net: MiddleFusionNet, data: Sequence[ScenarioData], cfg: TrainConfig,
                 tlog: Optional[TrainLog] = None, pairs: Optional[list] = None,
                 cache: Optional[FlowCache] = None) -> TrainLog:
    """Self-supervised derivative training; every stage-1 parameter stays frozen."""
    tlog = tlog if tlog is not None else TrainLog()
    pairs = pairs if pairs is not None else make_pairs(data, cfg)
    cache = cache or FlowCache(net, data)
    dt = net.cfg.frame_interval
    _fit(net.flow_parameters(), pairs, lambda p: stage2_pair_loss(net, cache, p, dt),
         epochs=cfg.stage2_epochs, cfg=cfg, batch=cfg.stage2_batch, stage="stage2", tlog=tlog,
         seed_tag=hash_tag("stage2"))
    return tlog


def vehicle_flow_pair_loss(vnet: VehicleFlowNet, cache: FlowCache, pair: TrainPair, dt: float) -> Optional[Tensor]:
    prev, cur, fut = pair.frames
    rest = cache.restored[pair.scenario]
    deriv = vnet(rest[prev], rest[cur])
    try:
        pred = predicted_feature(rest[cur], deriv, pair.k * dt)
    except DegenerateInputError:
        return None
    return flow_loss(pred.tensor, rest[fut])


def train_vehicle_flow(vnet: VehicleFlowNet, net: MiddleFusionNet, data: Sequence[ScenarioData], cfg: TrainConfig,
                       tlog: Optional[TrainLog] = None, pairs: Optional[list] = None,
                       cache: Optional[FlowCache] = None) -> TrainLog:
    """Same objective, but the derivative comes from two received features."""
    tlog = tlog if tlog is not None else TrainLog()
    pairs = pairs if pairs is not None else make_pairs(data, cfg)
    cache = cache or FlowCache(net, data)
    dt = net.cfg.frame_interval
    _fit(vnet.parameters(), pairs, lambda p: vehicle_flow_pair_loss(vnet, cache, p, dt),
         epochs=cfg.stage2_epochs, cfg=cfg, batch=cfg.stage2_batch, stage="stage2_vehicle", tlog=tlog,
         seed_tag=hash_tag("stage2_vehicle"))
    return tlog


def mean_pair_loss(loss_fn: Callable, pairs: Sequence) -> float:
    with T.no_grad():
        vals = [loss_fn(p) for p in pairs]
    vals = [v.item() for v in vals if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------------------
# single-cloud detectors (baselines)
# ---------------------------------------------------------------------------


def train_detector(det, data: Sequence[ScenarioData], cfg: TrainConfig, source: str,
                   tlog: Optional[TrainLog] = None, epochs: Optional[int] = None) -> TrainLog:
    """source: 'vehicle' (vehicle cloud), 'infra' (infra cloud, infra-frame labels) or 'early' (merged, zero latency)."""
    tlog = tlog if tlog is not None else TrainLog()

    def loss_fn(it):
        sd = data[it[0]]
        f = sd.frames[it[1]]
        if source == "vehicle":
            bins, frame = f.vehicle_bins, VEHICLE
        elif source == "infra":
            bins, frame = f.infra_bins, INFRA
        elif source == "early":
            bins, frame = sd.early_bins(it[1], it[1]), VEHICLE
        else:
            raise ValueError(f"unknown detector source {source!r}")
        gts = f.gts_vehicle if frame == VEHICLE else f.gts_infra
        return detection_loss(det(bins), gts, sd.cfg.feat_grid, sd.cfg.anchors, targets=f.targets(frame, sd.cfg))

    _fit(det.parameters(), _frames(data), loss_fn, epochs=cfg.stage1_epochs if epochs is None else epochs, cfg=cfg,
         batch=cfg.stage1_batch, stage=f"detector_{source}", tlog=tlog, seed_tag=hash_tag(source))
    return tlog


def train_bundle(bundle: ModelBundle, data: Sequence[ScenarioData], cfg: TrainConfig,
                 parts: Sequence[str] = ("ffnet", "wide", "vflow", "nonfusion", "early", "infra_det"),
                 baseline_epochs: Optional[int] = None) -> TrainLog:
    """Train the requested members of the bundle; FFNet stage 2 and the vehicle flow reuse one cache."""
    tlog = TrainLog()
    if "ffnet" in parts:
        train_stage1(bundle.ffnet, data, cfg, tlog, tag="stage1")
        cache = FlowCache(bundle.ffnet, data)
        pairs = make_pairs(data, cfg)
        train_stage2(bundle.ffnet, data, cfg, tlog, pairs, cache)
        if "vflow" in parts:
            train_vehicle_flow(bundle.vflow, bundle.ffnet, data, cfg, tlog, pairs, cache)
    if "wide" in parts:
        train_stage1(bundle.wide, data, cfg, tlog, tag="stage1_wide")
    for name, source in (("nonfusion", "vehicle"), ("early", "early"), ("infra_det", "infra")):
        if name in parts:
            train_detector(getattr(bundle, name), data, cfg, source, tlog, epochs=baseline_epochs)
    return tlog

"""11-point interpolated AP, Average Byte, and the latency sweep over system variants."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .comm import BYTES_PER_BOX, BYTES_PER_POINT, ChannelModel, TransmissionLog, channel_deliver, decompress
from .flow import FeatureFlow, FeatureMap, predict
from .fusion import boxes_hulls, detect, iou_matrix, nms
from .geometry import relative
from .pipeline import ModelBundle, ScenarioData, in_region
from .scene import INFRA, VEHICLE

NON_FUSION = "NonFusion"
EARLY = "EarlyFusion"
LATE = "LateFusion"
MIDDLE_NO_PRED = "MiddleNoPred"
MIDDLE_NO_PRED_WIDE = "MiddleNoPredWide"
FFNET = "FFNet"
FFNET_V = "FFNetV"
VARIANTS = (NON_FUSION, EARLY, LATE, MIDDLE_NO_PRED, MIDDLE_NO_PRED_WIDE, FFNET, FFNET_V)
RECALL_GRID = np.linspace(0.0, 1.0, 11)


@dataclass(frozen=True)
class EvalConfig:
    region: tuple = (0.0, -18.0, 36.0, 18.0)  # x0, y0, x1, y1 in the vehicle frame
    iou_thresholds: tuple = (0.5, 0.7)
    min_history: int = 6  # first evaluated vehicle frame; leaves room for 500 ms + one frame
    score_threshold: float = 0.05
    # minimum cosine(original, decompressed) expected of a stage-1 feature codec
    codec_cosine_min: float = 0.9

    def __post_init__(self):
        x0, y0, x1, y1 = self.region
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"empty evaluation region {self.region}")


@dataclass(frozen=True)
class PRPoint:
    recall: float
    precision: float


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def match_detections(dets: Sequence, gts: Sequence, iou_thr: float) -> list:
    """Greedy by descending score; each ground truth absorbs at most one detection."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    if not gts:
        return [(dets[i], False) for i in order]
    iou = iou_matrix(boxes_hulls([dets[i] for i in order]), boxes_hulls(gts)) if order else np.zeros((0, len(gts)))
    taken = np.zeros(len(gts), bool)
    out = []
    for row, i in enumerate(order):
        cand = np.where(taken, -1.0, iou[row])
        g = int(np.argmax(cand))
        if cand[g] >= iou_thr:
            taken[g] = True
            out.append((dets[i], True))
        else:
            out.append((dets[i], False))
    return out


def pr_curve(scored: Sequence[tuple], n_gt: int) -> list:
    """(score, is_tp) pairs pooled over frames -> PR points in descending-score order."""
    if n_gt == 0 or not scored:
        return []
    order = sorted(scored, key=lambda s: -s[0])
    tp = np.cumsum([1 if s[1] else 0 for s in order])
    n = np.arange(1, len(order) + 1)
    return [PRPoint(float(r), float(p)) for r, p in zip(tp / n_gt, tp / n)]


def average_precision(points: Sequence[PRPoint]) -> float:
    """(1/11) * sum over r in {0, .1, ..., 1} of max precision at recall >= r."""
    if not points:
        return 0.0
    rec = np.array([p.recall for p in points])
    prec = np.array([p.precision for p in points])
    total = 0.0
    for r in RECALL_GRID:
        mask = rec >= r - 1e-12
        total += prec[mask].max() if mask.any() else 0.0
    return total / len(RECALL_GRID)


def mean_ap(frame_dets: Sequence[list], frame_gts: Sequence[list], iou_thr: float) -> float:
    scored, n_gt = [], 0
    for dets, gts in zip(frame_dets, frame_gts):
        n_gt += len(gts)
        scored.extend((d.score, tp) for d, tp in match_detections(dets, gts, iou_thr))
    return average_precision(pr_curve(scored, n_gt))


# ---------------------------------------------------------------------------
# payloads for the non-feature variants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CloudPayload:
    index: int
    n_points: int

    @property
    def payload_bytes(self) -> int:
        return BYTES_PER_POINT * self.n_points


@dataclass(frozen=True)
class BoxesPayload:
    index: int
    boxes: tuple

    @property
    def payload_bytes(self) -> int:
        return BYTES_PER_BOX * len(self.boxes)


@dataclass(frozen=True)
class MessagePayload:
    index: int
    message: object

    @property
    def payload_bytes(self) -> int:
        return self.message.payload_bytes


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    variant: str
    latency_ms: int
    map_bev_50: float
    map_bev_70: float
    avg_byte: float
    frames: int
    seed: int


class SweepRunner:
    """Runs variants over shared scenarios; caches everything that does not depend on latency."""

    def __init__(self, bundle: ModelBundle, data: Sequence[ScenarioData], eval_cfg: EvalConfig = EvalConfig()):
        self.bundle = bundle
        self.cfg = bundle.cfg
        self.data = data
        self.eval_cfg = eval_cfg
        self._payloads: dict = {}
        self._flows: dict = {}
        self._veh_feat: dict = {}
        self._single: dict = {}
        self.logs: dict = {}

    # infra side ------------------------------------------------------------
    def _net(self, variant: str):
        return self.bundle.wide if variant == MIDDLE_NO_PRED_WIDE else self.bundle.ffnet

    def payload(self, variant: str, s: int, i: int):
        key = (variant, s, i)
        if key in self._payloads:
            return self._payloads[key]
        sd = self.data[s]
        f = sd.frames[i]
        if variant == EARLY:
            p = CloudPayload(i, len(sd.scenario.frames[i].infra_cloud))
        elif variant == LATE:
            p = BoxesPayload(i, tuple(self._detect_single("infra_det", s, i)))
        else:
            with_d = variant == FFNET and i > 0
            if variant == MIDDLE_NO_PRED:
                # the same message as FFNet minus the derivative
                base = self.payload(FFNET, s, i).message
                msg = type(base)(base.t_i, base.calib, base.comp_feature, None)
            else:
                prev = sd.frames[i - 1].infra_bins if i > 0 else None
                msg = self._net(variant).make_message(prev, f.infra_bins, f.infra_pose, with_derivative=with_d)
            p = MessagePayload(i, msg)
        self._payloads[key] = p
        return p

    def received_flow(self, variant: str, s: int, i: int) -> FeatureFlow:
        key = (variant, s, i)
        if key not in self._flows:
            self._flows[key] = decompress(self.payload(variant, s, i).message, self._net(variant).codec)
        return self._flows[key]

    # vehicle side ----------------------------------------------------------
    def _detect_single(self, name: str, s: int, i: int, bins=None) -> list:
        key = (name, s, i) if bins is None else None
        if key is not None and key in self._single:
            return self._single[key]
        f = self.data[s].frames[i]
        if bins is None:
            bins = f.infra_bins if name == "infra_det" else f.vehicle_bins
        with T.no_grad():
            out = getattr(self.bundle, name)(bins)
        dets = detect(out, self.cfg.feat_grid, self.cfg.anchors, self.eval_cfg.score_threshold, self.cfg.nms_iou)
        if key is not None:
            self._single[key] = dets
        return dets

    def vehicle_feature(self, variant: str, s: int, v: int) -> FeatureMap:
        net = self._net(variant)
        key = (id(net), s, v)
        if key not in self._veh_feat:
            with T.no_grad():
                self._veh_feat[key] = net.vehicle_feature(self.data[s].frames[v].vehicle_bins)
        return self._veh_feat[key]

    def consumer_predict(self, variant: str, s: int, i: int, t_v: float, prev_available: bool) -> FeatureMap:
        """Infra feature expected at t_v, from what the vehicle has received."""
        flow = self.received_flow(variant, s, i)
        if variant == FFNET_V:
            if not prev_available or i == 0:
                return flow.feature
            prev = self.received_flow(variant, s, i - 1)
            with T.no_grad():
                deriv = self.bundle.vflow(prev.feature.tensor, flow.feature.tensor)
            flow = FeatureFlow(flow.feature, deriv, flow.t_i)
        with T.no_grad():
            return predict(flow, t_v, rescale=self.cfg.rescale)

    def detect_frame(self, variant: str, s: int, v: int, channel: ChannelModel, log: Optional[TransmissionLog] = None) -> list:
        sd = self.data[s]
        t_v = sd.time(v)
        got = None
        if variant != NON_FUSION:
            sent = [(sd.time(i), self.payload(variant, s, i)) for i in range(v + 1)]
            got = channel_deliver(sent, channel, t_v)
            if got is not None and log is not None:
                t_i = sd.time(got.index)
                log.record(t_i, channel.arrival(t_i, got.payload_bytes), got.payload_bytes, variant)
        ec, cfg = self.eval_cfg, self.cfg
        if variant == NON_FUSION or (got is None and variant in (LATE,)):
            return self._detect_single("nonfusion", s, v)
        if variant == EARLY:
            bins = sd.early_bins(v, got.index) if got is not None else sd.frames[v].vehicle_bins
            return self._detect_single("early", s, v, bins=bins)
        if variant == LATE:
            rel = relative(sd.frames[v].vehicle_pose, sd.frames[got.index].infra_pose)
            moved = [b.in_frame(rel) for b in got.boxes]
            return nms(self._detect_single("nonfusion", s, v) + moved, cfg.nms_iou)
        net = self._net(variant)
        veh = self.vehicle_feature(variant, s, v)
        with T.no_grad():
            if got is None:
                infra = FeatureMap(T.tensor(np.zeros(veh.shape, np.float32)), VEHICLE, t_v)
                out = net.head(net.fusion(veh, infra))
            else:
                i = got.index
                prev_ok = i > 0 and channel.arrival(sd.time(i - 1), got.payload_bytes) <= t_v + 1e-9
                feat = self.consumer_predict(variant, s, i, t_v, prev_ok)
                out = net.fuse_and_head(veh, feat, got.message.calib, sd.frames[v].vehicle_pose)
        return detect(out, cfg.feat_grid, cfg.anchors, ec.score_threshold, cfg.nms_iou)

    def eval_frames(self) -> list:
        return [(s, v) for s, sd in enumerate(self.data) for v in range(self.eval_cfg.min_history, len(sd))]

    def run_cell(self, variant: str, channel: ChannelModel) -> tuple:
        """-> (AP per IoU threshold, TransmissionLog, frame count)."""
        tlog = TransmissionLog()
        dets_all, gts_all = [], []
        for s, v in self.eval_frames():
            dets = in_region(self.detect_frame(variant, s, v, channel, tlog), self.eval_cfg.region)
            dets_all.append(dets)
            gts_all.append(in_region(self.data[s].frames[v].gts_vehicle, self.eval_cfg.region))
        aps = tuple(mean_ap(dets_all, gts_all, thr) for thr in self.eval_cfg.iou_thresholds)
        return aps, tlog, len(dets_all)

    def run(self, variants: Sequence[str] = VARIANTS, latencies_ms: Sequence[int] = (0, 100, 200, 300, 500),
            seed: int = 0, channel_kw: Optional[dict] = None) -> list:
        rows = []
        for lat in latencies_ms:
            channel = ChannelModel.fixed(lat / 1000.0, seed=seed, **(channel_kw or {}))
            for variant in variants:
                if variant not in VARIANTS:
                    raise ValueError(f"unknown variant {variant!r}")
                aps, tlog, n = self.run_cell(variant, channel)
                self.logs[(variant, lat)] = tlog
                rows.append(SweepRow(variant, int(lat), aps[0], aps[1] if len(aps) > 1 else float("nan"),
                                     tlog.average_byte(), n, seed))
        return rows


def run_latency_sweep(bundle: ModelBundle, data: Sequence[ScenarioData], variants: Sequence[str] = VARIANTS,
                      latencies_ms: Sequence[int] = (0, 100, 200, 300, 500), channel_seed: int = 0,
                      eval_cfg: EvalConfig = EvalConfig()) -> list:
    return SweepRunner(bundle, data, eval_cfg).run(variants, latencies_ms, channel_seed)


RESULT_FIELDS = ("variant", "latency_ms", "map_bev_50", "map_bev_70", "avg_byte", "frames", "seed")


def results_csv(rows: Sequence[SweepRow], header_comment: str = "") -> str:
    out = io.StringIO()
    if header_comment:
        out.write(f"# {header_comment}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(RESULT_FIELDS)
    for r in rows:
        w.writerow([r.variant, r.latency_ms, f"{r.map_bev_50:.6f}", f"{r.map_bev_70:.6f}", f"{r.avg_byte:.1f}",
                    r.frames, r.seed])
    return out.getvalue()


def curve_files(rows: Sequence[SweepRow], header_comment: str = "") -> dict:
    """variant -> two-column (latency_ms, mAP@BEV0.5) text for plotting."""
    out: dict = {}
    for r in rows:
        out.setdefault(r.variant, [f"# {header_comment}"] if header_comment else []).append(
            f"{r.latency_ms} {100 * r.map_bev_50:.4f}")
    return {k: "\n".join(v) + "\n" for k, v in out.items()}

"""Feature-flow codec, broadcast wire format, latency channel and byte accounting.

Byte accounting follows one convention throughout: every transmitted
number is a 32-bit float (4 bytes) and timestamps/calibration are free.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .flow import FeatureFlow, FeatureMap
from .geometry import Pose
from .nn import ConvBlock, Module
from .scene import INFRA
from .tensor import DEFAULT_DTYPE, Tensor, UsageError

MAGIC = b"FFNT"
VERSION = 1
FLAG_DERIVATIVE = 0x01
HEADER = struct.Struct("<4sBBd12f3I")
HEADER_BYTES = HEADER.size  # 74
BYTES_PER_FLOAT = 4
BYTES_PER_POINT = 4 * BYTES_PER_FLOAT   # x, y, z, intensity
BYTES_PER_BOX = 8 * BYTES_PER_FLOAT     # x, y, z, w, l, h, yaw, score
MAX_ELEMENTS = 1 << 26


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# byte accounting
# ---------------------------------------------------------------------------


def tensor_bytes(shape: Sequence[int]) -> int:
    return BYTES_PER_FLOAT * int(np.prod(shape, dtype=np.int64))


def cloud_bytes(n_points: int) -> int:
    return BYTES_PER_POINT * n_points


def boxes_bytes(n_boxes: int) -> int:
    return BYTES_PER_BOX * n_boxes


def flow_payload_bytes(code_shape: Sequence[int], with_derivative: bool = True) -> int:
    return tensor_bytes(code_shape) * (2 if with_derivative else 1)


def average_byte(log: Sequence[int]) -> float:
    """Mean payload bytes per transmission; 0 when nothing was sent."""
    if len(log) == 0:
        return 0.0
    return float(np.mean(np.asarray(log, dtype=np.float64)))


# ---------------------------------------------------------------------------
# codec
# ---------------------------------------------------------------------------


class Compressor(Module):
    """Two stride-2 3x3 blocks then a 1x1 projection: [C,H,W] -> [c,H/4,W/4]."""

    def __init__(self, channels: int, code_channels: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE,
                 bias: bool = True):
        kw = dict(rng=rng, dtype=dtype, bias=bias)
        self.blocks = [ConvBlock(channels, channels, 3, 2, 1, **kw),
                       ConvBlock(channels, channels, 3, 2, 1, **kw),
                       ConvBlock(channels, code_channels, 1, act=False, **kw)]

    def __call__(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


class Decompressor(Module):
    """Three transposed-conv blocks back to [C,H,W]; last one linear when ``signed``."""

    def __init__(self, code_channels: int, channels: int, rng: np.random.Generator, *, signed: bool = False,
                 dtype=DEFAULT_DTYPE, bias: bool = True):
        kw = dict(rng=rng, dtype=dtype, transpose=True, bias=bias)
        self.blocks = [ConvBlock(code_channels, channels, 2, 2, 0, **kw),
                       ConvBlock(channels, channels, 2, 2, 0, **kw),
                       ConvBlock(channels, channels, 3, 1, 1, act=not signed, **kw)]

    def __call__(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


class Codec(Module):
    """Independent feature and derivative paths.

    The derivative path has no biases, so a zero derivative (static scene)
    survives the round trip as exactly zero.
    """

    def __init__(self, channels: int = 32, code_channels: int = 4, *, rng: np.random.Generator,
                 with_derivative: bool = True, dtype=DEFAULT_DTYPE):
        self.channels = channels
        self.code_channels = code_channels
        self.feat_enc = Compressor(channels, code_channels, rng, dtype)
        self.feat_dec = Decompressor(code_channels, channels, rng, dtype=dtype)
        self.deriv_enc = self.deriv_dec = None
        if with_derivative:
            self.deriv_enc = Compressor(channels, code_channels, rng, dtype, bias=False)
            self.deriv_dec = Decompressor(code_channels, channels, rng, signed=True, dtype=dtype, bias=False)

    @property
    def has_derivative_path(self) -> bool:
        return self.deriv_enc is not None

    def roundtrip_feature(self, x: Tensor) -> Tensor:
        return self.feat_dec(self.feat_enc(x))

    def roundtrip_derivative(self, x: Tensor) -> Tensor:
        return self.deriv_dec(self.deriv_enc(x))

    def code_shape(self, feature_shape: Sequence[int]) -> tuple:
        _, h, w = feature_shape
        return (self.code_channels, _down(_down(h)), _down(_down(w)))


def _down(n: int) -> int:
    # 3x3, stride 2, padding 1
    return (n - 1) // 2 + 1


@dataclass
class FlowMessage:
    t_i: float
    calib: Pose  # infra -> world
    comp_feature: np.ndarray  # float32 [c, h, w]
    comp_derivative: Optional[np.ndarray] = None
    version: int = VERSION

    @property
    def has_derivative(self) -> bool:
        return self.comp_derivative is not None

    @property
    def payload_bytes(self) -> int:
        n = self.comp_feature.size + (self.comp_derivative.size if self.has_derivative else 0)
        return BYTES_PER_FLOAT * n


def compress(flow: FeatureFlow, codec: Codec, calib: Pose, *, with_derivative: bool = True) -> FlowMessage:
    shape = flow.feature.shape
    if shape[0] != codec.channels:
        raise T.DimensionError(f"codec expects {codec.channels} channels, got {shape}")
    if with_derivative and not codec.has_derivative_path:
        raise UsageError("codec has no derivative path")
    with T.no_grad():
        cf = codec.feat_enc(flow.feature.tensor).data.astype(np.float32)
        cd = codec.deriv_enc(flow.derivative).data.astype(np.float32) if with_derivative else None
    return FlowMessage(flow.t_i, calib, cf, cd)


def decompress(msg: FlowMessage, codec: Codec) -> FeatureFlow:
    if msg.version != VERSION:
        raise FormatError(f"unsupported version {msg.version}", 4)
    with T.no_grad():
        feat = codec.feat_dec(T.tensor(msg.comp_feature))
        if msg.has_derivative:
            deriv = codec.deriv_dec(T.tensor(msg.comp_derivative))
        else:
            deriv = T.tensor(np.zeros(feat.shape, dtype=feat.dtype))
    return FeatureFlow(FeatureMap(feat, INFRA, msg.t_i), deriv, msg.t_i)


# ---------------------------------------------------------------------------
# wire format
# ---------------------------------------------------------------------------


def serialize(msg: FlowMessage) -> bytes:
    cf = np.ascontiguousarray(msg.comp_feature, dtype="<f4")
    if cf.ndim != 3:
        raise T.DimensionError("compressed feature must be [c, h, w]")
    flags = 0
    if msg.has_derivative:
        if msg.comp_derivative.shape != cf.shape:
            raise T.DimensionError("compressed derivative shape differs from feature")
        flags |= FLAG_DERIVATIVE
    calib = msg.calib.matrix3x4().astype("<f4").ravel()
    head = HEADER.pack(MAGIC, msg.version, flags, float(msg.t_i), *calib.tolist(), *cf.shape)
    parts = [head, cf.tobytes()]
    if msg.has_derivative:
        parts.append(np.ascontiguousarray(msg.comp_derivative, dtype="<f4").tobytes())
    return b"".join(parts)


def deserialize(buf: bytes) -> FlowMessage:
    """Parse one message; any malformed input raises :class:`FormatError`."""
    buf = bytes(buf)
    if len(buf) < HEADER_BYTES:
        raise FormatError(f"buffer too short for header ({len(buf)} < {HEADER_BYTES})", len(buf))
    magic, version, flags, t_i, *rest = HEADER.unpack_from(buf, 0)
    calib, dims = rest[:12], rest[12:]
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if flags & ~FLAG_DERIVATIVE:
        raise FormatError(f"unknown flag bits {flags:#04x}", 5)
    if not np.isfinite(t_i):
        raise FormatError("non-finite timestamp", 6)
    m = np.asarray(calib, dtype=np.float64).reshape(3, 4)
    if not np.isfinite(m).all():
        raise FormatError("non-finite calibration", 14)
    pose = Pose(m[:, :3], m[:, 3])
    if not pose.is_valid(tol=1e-4):
        raise FormatError("calibration rotation is not orthonormal", 14)
    if min(dims) == 0:
        raise FormatError(f"zero dimension in {tuple(dims)}", 62)
    n = int(np.prod(dims, dtype=np.int64))
    if n > MAX_ELEMENTS:
        raise FormatError(f"implausible element count {n}", 62)
    has_d = bool(flags & FLAG_DERIVATIVE)
    expected = HEADER_BYTES + BYTES_PER_FLOAT * n * (2 if has_d else 1)
    if len(buf) != expected:
        raise FormatError(f"payload length {len(buf)} != expected {expected}", min(len(buf), expected))
    arrays = []
    for k in range(2 if has_d else 1):
        off = HEADER_BYTES + k * BYTES_PER_FLOAT * n
        a = np.frombuffer(buf, dtype="<f4", count=n, offset=off)
        bad = np.flatnonzero(~np.isfinite(a))
        if len(bad):
            raise FormatError("non-finite payload value", off + 4 * int(bad[0]))
        arrays.append(a.reshape(dims).astype(np.float32))
    return FlowMessage(t_i, pose, arrays[0], arrays[1] if has_d else None, version)


# ---------------------------------------------------------------------------
# channel
# ---------------------------------------------------------------------------

FIXED, UNIFORM_SET, PER_RECEIVER = "fixed", "uniform_set", "per_receiver"


@dataclass(frozen=True)
class ChannelModel:
    """Per-message latency model.

    The latency of a message depends only on (seed, send time), so every
    variant evaluated with the same channel sees the same draws.
    """

    mode: str = FIXED
    latency: float = 0.0
    latencies: tuple = ()
    receivers: tuple = ()  # ((name, latency), ...)
    receiver: str = "vehicle"
    seed: int = 0
    per_byte_cost: float = 0.0

    def __post_init__(self):
        vals = {FIXED: (self.latency,), UNIFORM_SET: self.latencies,
                PER_RECEIVER: tuple(v for _, v in self.receivers)}.get(self.mode)
        if vals is None:
            raise ValueError(f"unknown channel mode {self.mode!r}")
        if not vals or min(vals) < 0 or self.per_byte_cost < 0:
            raise ValueError("latencies must be non-negative and non-empty")
        if self.mode == PER_RECEIVER and self.receiver not in dict(self.receivers):
            raise ValueError(f"no latency configured for receiver {self.receiver!r}")

    @classmethod
    def fixed(cls, latency: float, **kw) -> "ChannelModel":
        return cls(FIXED, latency=latency, **kw)

    @classmethod
    def uniform_set(cls, latencies: Sequence[float], seed: int = 0, **kw) -> "ChannelModel":
        return cls(UNIFORM_SET, latencies=tuple(latencies), seed=seed, **kw)

    @classmethod
    def per_receiver(cls, mapping: dict, receiver: str, **kw) -> "ChannelModel":
        return cls(PER_RECEIVER, receivers=tuple(sorted(mapping.items())), receiver=receiver, **kw)

    def base_latency(self, send_time: float) -> float:
        if self.mode == FIXED:
            return self.latency
        if self.mode == PER_RECEIVER:
            return dict(self.receivers)[self.receiver]
        rng = np.random.default_rng([self.seed, int(round(send_time * 1e6))])
        return float(self.latencies[rng.integers(len(self.latencies))])

    def latency_for(self, send_time: float, n_bytes: int = 0) -> float:
        return self.base_latency(send_time) + n_bytes * self.per_byte_cost

    def arrival(self, send_time: float, n_bytes: int = 0) -> float:
        return send_time + self.latency_for(send_time, n_bytes)


def channel_deliver(messages: Sequence[tuple], channel: ChannelModel, query_time: float):
    """Most recently sent message that has arrived by ``query_time``, or None.

    ``messages`` is a send-time ordered sequence of (send_time, message);
    the message's ``payload_bytes`` (if any) feeds the per-byte latency term.
    """
    for send_time, msg in reversed(messages):
        if send_time > query_time + 1e-9:
            continue
        if channel.arrival(send_time, getattr(msg, "payload_bytes", 0)) <= query_time + 1e-9:
            return msg
    return None


@dataclass
class TransmissionLog:
    rows: list = field(default_factory=list)  # (send_time, arrive_time, bytes, kind)

    def record(self, send_time: float, arrive_time: float, n_bytes: int, kind: str) -> None:
        self.rows.append((send_time, arrive_time, int(n_bytes), kind))

    def payloads(self) -> list:
        return [r[2] for r in self.rows]

    def average_byte(self) -> float:
        return average_byte(self.payloads())

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["send_time", "arrive_time", "bytes", "kind"])
        for s, a, b, k in self.rows:
            w.writerow([f"{s:.6f}", f"{a:.6f}", b, k])
        return out.getvalue()

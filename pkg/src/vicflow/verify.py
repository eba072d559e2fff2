"""In-process oracle checks runnable from the command line (no pytest needed)."""

from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np

from . import tensor as T
from .comm import (ChannelModel, FlowMessage, average_byte, boxes_bytes, channel_deliver, cloud_bytes,
                   deserialize, flow_payload_bytes, serialize, tensor_bytes)
from .evaluator import PRPoint, average_precision
from .flow import FeatureFlow, FeatureMap, predict, scale_correct
from .geometry import Pose
from .gradcases import CASES, worst_error


def _loop_conv(x, w, b, stride, pad):
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = b[oc]
                for ic in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            acc += xp[ic, i * stride + di, j * stride + dj] * w[oc, ic, di, dj]
                out[oc, i, j] = acc
    return out


def check_conv_oracle() -> str:
    rng = np.random.default_rng(0)
    worst = 0.0
    for stride, pad in ((1, 0), (2, 1), (1, 1), (3, 2)):
        x, w, b = rng.normal(size=(2, 7, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        got = T.conv2d(T.tensor(x, dtype=np.float64), T.tensor(w, dtype=np.float64), T.tensor(b, dtype=np.float64),
                       stride, pad).data
        worst = max(worst, float(np.abs(got - _loop_conv(x, w, b, stride, pad)).max()))
    assert worst < 1e-6, worst
    return f"max abs diff {worst:.2e}"


def check_deconv_adjoint() -> str:
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(3, 7, 7)), rng.normal(size=(4, 3, 3, 3))
    t = lambda a: T.tensor(a, dtype=np.float64)
    y = rng.normal(size=T.conv2d(t(x), t(w), None, 2, 1).shape)
    lhs = float((T.conv2d(t(x), t(w), None, 2, 1).data * y).sum())
    rhs = float((x * T.deconv2d(t(y), t(w), None, 2, 1).data).sum())
    assert abs(lhs - rhs) <= 1e-5 * max(1, abs(lhs))
    return f"|<Ax,y>-<x,A'y>| = {abs(lhs - rhs):.2e}"


def check_gradients(trials: int = 10) -> str:
    worst = max(worst_error(name, trials=trials) for name in CASES)
    assert worst < 1e-4, worst
    return f"{len(CASES)} ops, worst rel err {worst:.2e}"


def check_byte_accounting() -> str:
    assert average_byte([cloud_bytes(100_000)]) == 1.6e6
    assert average_byte([boxes_bytes(10)]) == 320
    assert average_byte([tensor_bytes((100, 100, 100))]) == 4e6
    assert flow_payload_bytes((12, 36, 36)) == 124_416
    assert flow_payload_bytes((12, 36, 36), False) == 62_208
    assert average_byte([]) == 0
    return "worked examples exact"


def check_ap_oracle() -> str:
    assert average_precision([PRPoint(1.0, 1.0)]) == 1.0
    assert abs(average_precision([PRPoint(0.5, 1.0)]) - 6 / 11) < 1e-12
    assert average_precision([]) == 0.0
    return "AP(half recall) = 6/11"


def check_wire(n: int = 2000) -> str:
    rng = np.random.default_rng(2)
    for _ in range(n):
        dims = tuple(int(d) for d in rng.integers(1, 5, 3))
        d = rng.normal(size=dims).astype(np.float32) if rng.integers(2) else None
        m = FlowMessage(float(rng.normal()), Pose.from_planar(*rng.normal(size=2), rng.normal()),
                        rng.normal(size=dims).astype(np.float32), d)
        buf = serialize(m)
        assert serialize(deserialize(buf)) == buf
    return f"{n} round trips bitwise"


def check_channel() -> str:
    assert channel_deliver([(0.0, "a"), (0.1, "b")], ChannelModel.fixed(0.2), 0.25) == "a"
    assert channel_deliver([(0.0, "a")], ChannelModel.fixed(0.2), 0.1) is None
    return "fixed-latency examples"


def check_prediction() -> str:
    rng = np.random.default_rng(3)
    f = FeatureFlow(FeatureMap(T.tensor(rng.uniform(size=(2, 3, 3))), "infra", 1.0), T.tensor(rng.normal(size=(2, 3, 3))), 1.0)
    assert predict(f, 1.0) is f.feature
    with T.count_ops() as c:
        out = predict(f, 1.3)
    assert sum(c.values()) == 0
    ratio = T.l1_norm(out.tensor).item() / T.l1_norm(f.feature.tensor).item()
    assert abs(ratio - 1) < 1e-4
    r = FeatureMap(T.tensor(rng.normal(size=(4,))), "infra", 0)
    assert np.allclose(scale_correct(FeatureMap(T.scale(r.tensor, 2.0), "infra", 0), r).tensor.data, r.tensor.data)
    return "dt=0 identity, no conv, L1 preserved"


def check_pose_laws() -> str:
    rng = np.random.default_rng(4)
    for _ in range(100):
        a, b, c = (Pose.from_planar(*rng.normal(size=2) * 10, rng.uniform(-math.pi, math.pi), rng.normal()) for _ in range(3))
        assert np.allclose(a.compose(a.inverse()).matrix(), np.eye(4), atol=1e-6)
        assert np.allclose(a.compose(b).compose(c).matrix(), a.compose(b.compose(c)).matrix(), atol=1e-6)
    return "inverse and associativity"


CHECKS: dict = {
    "conv-loop-oracle": check_conv_oracle,
    "deconv-adjoint": check_deconv_adjoint,
    "finite-difference-gradients": check_gradients,
    "byte-accounting": check_byte_accounting,
    "ap-11-point": check_ap_oracle,
    "wire-round-trip": check_wire,
    "channel-delivery": check_channel,
    "flow-prediction": check_prediction,
    "pose-group-laws": check_pose_laws,
}


def run_all(emit: Callable[[str], None] = print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            detail = fn()
            emit(f"PASS {name}: {detail} ({time.perf_counter() - t0:.2f}s)")
        except Exception as e:  # report every failure, keep going
            ok = False
            emit(f"FAIL {name}: {type(e).__name__}: {e}")
    return ok

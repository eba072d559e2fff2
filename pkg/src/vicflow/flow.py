"""Feature flow: a feature, its first-order time derivative, and linear prediction.

The consumer side only ever evaluates ``feature + dt * derivative`` (plus an
L1 rescale), so predicting for an arbitrary latency costs a handful of
elementwise ops and no network forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import ConvBlock, Module
from .pillars import PseudoImage
from .tensor import DEFAULT_DTYPE, DegenerateInputError, Tensor, UsageError

TIME_EPS = 1e-9


class TemporalOrderError(ValueError):
    """Prediction requested for a time before the feature was captured."""


@dataclass
class FeatureMap:
    tensor: Tensor  # [C, H, W]
    frame_id: str
    timestamp: float

    @property
    def shape(self) -> tuple:
        return self.tensor.shape


@dataclass
class FeatureFlow:
    feature: FeatureMap
    derivative: Tensor  # feature units per second
    t_i: float

    def __post_init__(self):
        if self.derivative.shape != self.feature.shape:
            raise T.DimensionError(f"derivative {self.derivative.shape} vs feature {self.feature.shape}")


class Backbone(Module):
    """Four conv blocks (strides 2,1,1,1) and a one-level FPN-style lateral merge.

    ``stem_stride=1`` keeps the input resolution (used on feature-resolution inputs).

    The merge concatenates the stride-2 map with an upsampled coarser map and
    mixes them with a 1x1 conv.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, *, linear_out: bool = False,
                 out_scale: float = 1.0, stem_stride: int = 2, dtype=DEFAULT_DTYPE):
        kw = dict(rng=rng, dtype=dtype)
        self.stem = ConvBlock(cin, cout, 3, stem_stride, 1, **kw)
        self.blocks = [ConvBlock(cout, cout, 3, 1, 1, **kw) for _ in range(3)]
        self.down = ConvBlock(cout, cout, 3, 2, 1, **kw)
        self.up = ConvBlock(cout, cout, 2, 2, 0, transpose=True, **kw)
        self.merge = ConvBlock(2 * cout, cout, 1, act=not linear_out, init_scale=out_scale, **kw)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.stem(x)
        for b in self.blocks:
            h = b(h)
        coarse = self.up(self.down(h))
        return self.merge(T.concat_channels(h, coarse))


class Extractor(Module):
    def __init__(self, in_channels: int = 16, channels: int = 32, *, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.in_channels = in_channels
        self.net = Backbone(in_channels, channels, rng, dtype=dtype)

    def __call__(self, img: PseudoImage) -> FeatureMap:
        x = img.tensor
        if x.shape[0] != self.in_channels or x.shape[1] % 4 or x.shape[2] % 4:
            raise T.DimensionError(f"extractor expects [{self.in_channels}, 4k, 4k] input, got {x.shape}")
        return FeatureMap(self.net(x), img.frame_id, img.timestamp)


class DerivativeGenerator(Module):
    """Estimates dF/dt from two consecutive pseudo-images.

    The network sees both frame orders and returns ``N([a, b]) - N([b, a])``,
    so swapping the frames negates the derivative and identical frames give
    exactly zero. The per-frame change is divided by the frame interval to
    get feature units per second.
    """

    def __init__(self, in_channels: int = 16, channels: int = 32, *, frame_interval: float = 0.1,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.in_channels = in_channels
        self.frame_interval = frame_interval
        self.net = Backbone(2 * in_channels, channels, rng, linear_out=True, out_scale=0.1, dtype=dtype)

    def __call__(self, img_prev: PseudoImage, img_curr: PseudoImage) -> Tensor:
        gap = img_curr.timestamp - img_prev.timestamp
        if abs(gap - self.frame_interval) > 1e-6:
            raise UsageError(f"derivative needs adjacent frames, got gap {gap:.6f}s")
        if img_prev.tensor.shape != img_curr.tensor.shape:
            raise T.DimensionError("pseudo-images differ in shape")
        a, b = img_prev.tensor, img_curr.tensor
        delta = T.sub(self.net(T.concat_channels(a, b)), self.net(T.concat_channels(b, a)))
        return T.scale(delta, 1.0 / self.frame_interval)


def extract_feature(img: PseudoImage, extractor: Extractor) -> FeatureMap:
    return extractor(img)


def estimate_derivative(img_prev: PseudoImage, img_curr: PseudoImage, gen: DerivativeGenerator) -> Tensor:
    return gen(img_prev, img_curr)


def scale_correct(predicted: FeatureMap, reference: FeatureMap) -> FeatureMap:
    """Rescale ``predicted`` so its L1 norm equals that of ``reference``."""
    n_pred = T.l1_norm(predicted.tensor)
    if not n_pred.data > 0:
        raise DegenerateInputError("cannot rescale a zero-norm prediction")
    s = T.div(T.l1_norm(reference.tensor), n_pred)
    return FeatureMap(T.mul(predicted.tensor, s), predicted.frame_id, predicted.timestamp)


def linear_predict(flow: FeatureFlow, t: float) -> FeatureMap:
    """feature + (t - t_i) * derivative, without rescaling."""
    dt = t - flow.t_i
    if dt < -TIME_EPS:
        raise TemporalOrderError(f"t={t} precedes capture time {flow.t_i}")
    out = T.add(flow.feature.tensor, T.scale(flow.derivative, dt))
    return FeatureMap(out, flow.feature.frame_id, t)


def predict(flow: FeatureFlow, t: float, *, rescale: bool = True) -> FeatureMap:
    """Feature expected at time ``t >= t_i``; exactly the stored feature at t_i."""
    dt = t - flow.t_i
    if dt < -TIME_EPS:
        raise TemporalOrderError(f"t={t} precedes capture time {flow.t_i}")
    if dt <= TIME_EPS:
        return flow.feature
    pred = linear_predict(flow, t)
    if not rescale:
        return pred
    if not T.l1_norm(pred.tensor).data > 0:
        # all-zero prediction: nothing to rescale, fall back to the plain extrapolation
        return pred
    return scale_correct(pred, flow.feature)

"""Random float64 cases for every differentiable op.

Each builder takes an rng and returns ``(fn, inputs)`` where ``fn()`` is a
scalar Tensor. Inputs are kept away from relu/max kinks so central
differences with h=1e-3 are valid. Shared by the gradient tests and the
acceptance suite.
"""

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .tensor import Tensor


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + rng.random(shape)), x)


def _probe(rng, shape):
    return rng.normal(size=shape)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum_all(T.mul(out, Tensor(w)))


def case_conv2d(rng):
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, 2))
    x, w, b = _t(rng.normal(size=(2, 5, 5))), _t(rng.normal(size=(3, 2, 3, 3))), _t(rng.normal(size=3))
    probe = _probe(rng, T.conv2d(x, w, b, s, p).shape)
    return (lambda: _weighted(T.conv2d(x, w, b, s, p), probe)), [x, w, b]


def case_deconv2d(rng):
    s = int(rng.integers(1, 3))
    k = int(rng.choice([2, 3]))
    p = int(rng.integers(0, k))
    x, w, b = _t(rng.normal(size=(2, 3, 3))), _t(rng.normal(size=(2, 3, k, k))), _t(rng.normal(size=3))
    probe = _probe(rng, T.deconv2d(x, w, b, s, p).shape)
    return (lambda: _weighted(T.deconv2d(x, w, b, s, p), probe)), [x, w, b]


def case_relu(rng):
    x = _t(_away_from_zero(rng, (4, 3)))
    probe = _probe(rng, (4, 3))
    return (lambda: _weighted(T.relu(x), probe)), [x]


def case_linear(rng):
    x, w, b = _t(rng.normal(size=(5, 3))), _t(rng.normal(size=(3, 4))), _t(rng.normal(size=4))
    probe = _probe(rng, (5, 4))
    return (lambda: _weighted(T.linear(x, w, b), probe)), [x, w, b]


def case_concat(rng):
    a, b = _t(rng.normal(size=(2, 3, 3))), _t(rng.normal(size=(1, 3, 3)))
    probe = _probe(rng, (3, 3, 3))
    return (lambda: _weighted(T.concat_channels(a, b), probe)), [a, b]


def case_scale(rng):
    x = _t(rng.normal(size=(3, 4)))
    s = float(rng.normal())
    probe = _probe(rng, (3, 4))
    return (lambda: _weighted(T.scale(x, s), probe)), [x]


def case_add_sub_mul(rng):
    a, b = _t(rng.normal(size=(3, 3))), _t(rng.normal(size=(3, 3)))
    probe = _probe(rng, (3, 3))
    return (lambda: _weighted(T.mul(T.add(a, b), T.sub(a, b)), probe)), [a, b]


def case_scalar_mul_div(rng):
    a, s, d = _t(rng.normal(size=(2, 3))), _t(rng.normal()), _t(1.5 + rng.random())
    probe = _probe(rng, (2, 3))
    return (lambda: _weighted(T.div(T.mul(a, s), d), probe)), [a, s, d]


def case_cosine(rng):
    a, b = _t(rng.normal(size=(2, 3, 3))), _t(rng.normal(size=(2, 3, 3)))
    return (lambda: T.cosine_similarity(a, b)), [a, b]


def case_l1(rng):
    a = _t(_away_from_zero(rng, (3, 4)))
    return (lambda: T.l1_norm(a)), [a]


def case_l2(rng):
    a = _t(rng.normal(size=(3, 4)))
    return (lambda: T.l2_norm(a)), [a]


def case_channel_slice(rng):
    a = _t(rng.normal(size=(5, 2, 2)))
    probe = _probe(rng, (2, 2, 2))
    return (lambda: _weighted(T.channel_slice(a, 1, 3), probe)), [a]


def case_segment_max(rng):
    n, c, cells = 12, 3, 5
    # distinct positive values so every max has a unique, well-separated winner
    vals = rng.permutation(n * c).reshape(n, c) * 0.1 + 0.5
    feats = _t(vals)
    cell = rng.integers(0, cells, n)
    probe = _probe(rng, (c, cells))
    return (lambda: _weighted(T.segment_max(feats, cell, cells), probe)), [feats]


def case_sparse_apply(rng):
    m = sp.random(6, 9, density=0.4, random_state=np.random.RandomState(int(rng.integers(1 << 30))), format="csr")
    x = _t(rng.normal(size=(2, 3, 3)))
    probe = _probe(rng, (2, 2, 3))
    return (lambda: _weighted(T.sparse_apply(x, m, (2, 3)), probe)), [x]


def case_focal(rng):
    x = _t(rng.normal(size=(4, 4)) * 2)
    tgt = (rng.random((4, 4)) < 0.3).astype(float)
    w = rng.random((4, 4))
    return (lambda: T.sigmoid_focal_loss(x, tgt, w)), [x]


def case_smooth_l1(rng):
    x = _t(rng.normal(size=(3, 4)))
    tgt = x.data + np.where(rng.random((3, 4)) < 0.5, 0.02, 0.6) * np.sign(rng.normal(size=(3, 4)))
    tgt = tgt + 0.0
    w = rng.random((3, 4))
    return (lambda: T.smooth_l1_loss(x, tgt, w)), [x]


CASES = {
    "conv2d": case_conv2d,
    "deconv2d": case_deconv2d,
    "relu": case_relu,
    "linear": case_linear,
    "concat_channels": case_concat,
    "scale": case_scale,
    "add_sub_mul": case_add_sub_mul,
    "scalar_mul_div": case_scalar_mul_div,
    "cosine_similarity": case_cosine,
    "l1_norm": case_l1,
    "l2_norm": case_l2,
    "channel_slice": case_channel_slice,
    "segment_max": case_segment_max,
    "sparse_apply": case_sparse_apply,
    "sigmoid_focal_loss": case_focal,
    "smooth_l1_loss": case_smooth_l1,
}


def worst_error(name: str, trials: int = 50, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        fn, inputs = CASES[name](rng)
        worst = max(worst, T.gradcheck(fn, inputs, h=1e-3))
    return worst

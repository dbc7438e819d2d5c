"""Shared toy-network builders.

Weights are drawn once per call from a seeded generator so that tests
are reproducible; BatchNorm statistics are kept in realistic ranges
(positive sigmas, small means).
"""

import copy
import functools
import inspect

import numpy as np
import pytest

from ldfc.graph import BatchNormParams, Block, NetworkGraph, run_forward
from ldfc.tensor import ConvSpec, avg_pool, conv2d_forward


def _cached_builder(fn):
    """Build each distinct configuration once; hand out deep copies."""
    build = functools.lru_cache(maxsize=None)(fn)

    @functools.wraps(fn)
    def wrap(*args, **kw):
        ba = inspect.signature(fn).bind(*args, **kw)
        ba.apply_defaults()
        return copy.deepcopy(build(*ba.args))

    return wrap


def _conv(rng, co, ci, k, groups=1, scale=1.0, pad=None):
    w = (scale * rng.standard_normal((co, ci // groups, k, k))).astype(np.float32)
    b = (0.1 * rng.standard_normal(co)).astype(np.float32)
    pad = (k // 2, k // 2) if pad is None else pad
    return ConvSpec(w, b, (1, 1), pad, groups)


def _bn(rng, c):
    return BatchNormParams(
        mu=np.zeros(c, dtype=np.float32),
        sigma=np.ones(c, dtype=np.float32),
        gamma=(0.5 + rng.random(c)).astype(np.float32) * rng.choice(
            [-1.0, 1.0], c).astype(np.float32),
        beta=(0.3 * rng.standard_normal(c)).astype(np.float32),
        eps=1e-5,
    )


def _measure_bn_stats(g, seed=12345, n=512):
    """Set every BatchNorm's mu/sigma to the true conv-output statistics.

    Trained networks have running statistics that describe reality; toys
    must too, or data-free calibration is fed lies.  Processed front to
    back because each block's true input depends on upstream stats.
    """
    x = np.random.default_rng(seed).standard_normal(
        (n,) + g.input_shape).astype(np.float32)
    for b in g.blocks:
        if b.batchnorm is None:
            continue
        _, caps = run_forward(g, x, capture=True)
        xin = caps[b.id]
        if b.pool is not None:
            xin = avg_pool(xin, b.pool)
        y = conv2d_forward(xin, b.conv)
        b.batchnorm.mu = y.mean(axis=(0, 2, 3)).astype(np.float32)
        b.batchnorm.sigma = np.maximum(
            y.std(axis=(0, 2, 3)), 1e-3).astype(np.float32)
    return g


@_cached_builder
def chain_net(seed=0, c=8, classes=10, hw=8, with_bn=True):
    """conv-bn-relu x3 then global average pool into a linear head."""
    rng = np.random.default_rng(seed)
    blocks = [
        Block("c1", _conv(rng, c, 3, 3), [], activation="relu",
              batchnorm=_bn(rng, c) if with_bn else None),
        Block("c2", _conv(rng, c, c, 3), ["c1"], activation="relu",
              batchnorm=_bn(rng, c) if with_bn else None),
        Block("c3", _conv(rng, 2 * c, c, 3), ["c2"], activation="relu",
              batchnorm=_bn(rng, 2 * c) if with_bn else None),
        Block("head", _conv(rng, classes, 2 * c, 1, pad=(0, 0)), ["c3"],
              activation="identity", pool=(hw, hw)),
    ]
    return _measure_bn_stats(NetworkGraph(blocks, (3, hw, hw)).finalize())


@_cached_builder
def residual_net(seed=1, c=8, classes=10, hw=8):
    """One residual junction: d2 reads the sum of b1 and b3 outputs."""
    rng = np.random.default_rng(seed)
    blocks = [
        Block("b1", _conv(rng, c, 3, 3), [], activation="relu",
              batchnorm=_bn(rng, c)),
        Block("b2", _conv(rng, c, c, 3), ["b1"], activation="relu",
              batchnorm=_bn(rng, c)),
        Block("b3", _conv(rng, c, c, 3), ["b2"], activation="relu",
              batchnorm=_bn(rng, c)),
        Block("d2", _conv(rng, 2 * c, c, 3), ["b1", "b3"], combine="add",
              activation="relu", batchnorm=_bn(rng, 2 * c)),
        Block("head", _conv(rng, classes, 2 * c, 1, pad=(0, 0)), ["d2"],
              activation="identity", pool=(hw, hw)),
    ]
    return _measure_bn_stats(NetworkGraph(blocks, (3, hw, hw)).finalize())


@_cached_builder
def depthwise_net(seed=2, c=8, classes=10, hw=8):
    """Pointwise / depthwise / pointwise sandwich."""
    rng = np.random.default_rng(seed)
    blocks = [
        Block("p1", _conv(rng, c, 3, 1, pad=(0, 0)), [], activation="relu",
              batchnorm=_bn(rng, c)),
        Block("dw", _conv(rng, c, c, 3, groups=c), ["p1"], activation="relu",
              batchnorm=_bn(rng, c)),
        Block("p2", _conv(rng, 2 * c, c, 1, pad=(0, 0)), ["dw"],
              activation="relu", batchnorm=_bn(rng, 2 * c)),
        Block("head", _conv(rng, classes, 2 * c, 1, pad=(0, 0)), ["p2"],
              activation="identity", pool=(hw, hw)),
    ]
    return _measure_bn_stats(NetworkGraph(blocks, (3, hw, hw)).finalize())


ALL_NETS = {"chain": chain_net, "residual": residual_net,
            "depthwise": depthwise_net}


@pytest.fixture(params=sorted(ALL_NETS))
def any_net(request):
    return ALL_NETS[request.param]()

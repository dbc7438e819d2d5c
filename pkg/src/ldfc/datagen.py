"""Per-layer input synthesis from recorded BatchNorm statistics.

A block's input is modeled as the sum of its predecessors' outputs, each
drawn as activation(N(mu_j, sigma_j)) with (mu_j, sigma_j) the
predecessor's snapshotted output statistics, i.i.d. across batch and
spatial positions.  A predecessor without statistics contributes N(0, 1)
(before its activation), and a block with no predecessors reads the
network input, modeled as N(0, 1) directly.  Pooling and other
shape-only ops are ignored: the synthesized tensor is shaped for the
consumer's conv input and keeps the raw statistics.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError
from .graph import NetworkGraph
from .tensor import relu


def derive_seed(*parts):
    """Stable 63-bit seed from any mix of strings and ints."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


@dataclass
class SourceSpec:
    """One predecessor's contribution to a synthesized input."""

    mu: np.ndarray | None     # None means standard normal
    sigma: np.ndarray | None
    activation: str = "identity"
    scale: np.ndarray | None = None  # per-channel multiplier, default ones


@dataclass
class GenSpec:
    batch: int
    shape: tuple              # (c, h, w)
    sources: list = field(default_factory=list)  # empty: network input
    include_activations: bool = True
    seed: int = 0


def _apply_act(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "identity":
        return x
    raise FormatError(f"cannot synthesize through activation {kind!r}")


def generate(spec: GenSpec, rng=None):
    """Draw one batch; deterministic in (spec.seed, call order on rng)."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    c, h, w = spec.shape
    shape = (spec.batch, c, h, w)
    if not spec.sources:
        return rng.standard_normal(shape, dtype=np.float32)
    out = np.zeros(shape, dtype=np.float32)
    for src in spec.sources:
        g = rng.standard_normal(shape, dtype=np.float32)
        if src.mu is not None:
            if src.mu.shape != (c,) or src.sigma.shape != (c,):
                raise ShapeError(f"source statistics have shape {src.mu.shape}, "
                                 f"expected ({c},)")
            g = g * src.sigma.reshape(1, -1, 1, 1) + src.mu.reshape(1, -1, 1, 1)
        if spec.include_activations:
            g = _apply_act(g, src.activation)
        if src.scale is not None:
            g = g * src.scale.reshape(1, -1, 1, 1)
        out += g
    return out


def combined_stats(mu1, sigma1, mu2, sigma2):
    """Statistics of the sum of two independent branches."""
    if mu1.shape != mu2.shape:
        raise ShapeError(f"branch statistics disagree: {mu1.shape} vs {mu2.shape}")
    return mu1 + mu2, np.sqrt(sigma1.astype(np.float64) ** 2
                              + sigma2.astype(np.float64) ** 2).astype(mu1.dtype)


def spec_for_block(graph: NetworkGraph, block_id, batch, seed,
                   include_activations=True, undo_out_buffers=False):
    """Build the GenSpec describing one block's conv input.

    With undo_out_buffers, each source is scaled by 1 / v_out of its
    producer: that is the data the consumer will see once the buffers are
    discarded (recorded statistics describe original-scale outputs).
    """
    b = graph.block(block_id)
    shape = graph.conv_input_shapes()[block_id]
    sources = []
    for pid in b.predecessors:
        p = graph.block(pid)
        scale = None
        if undo_out_buffers:
            scale = (1.0 / p.v_out.astype(np.float64)).astype(np.float32)
        sources.append(SourceSpec(mu=p.gen_mu, sigma=p.gen_sigma,
                                  activation=p.activation, scale=scale))
    return GenSpec(batch=batch, shape=shape, sources=sources,
                   include_activations=include_activations, seed=seed)

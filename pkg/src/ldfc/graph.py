"""Network intermediate representation and reference evaluator.

A network is a DAG of blocks.  Each block is one conv (or linear-as-1x1-
conv) with optional attachments, evaluated in this order:

    x   = combine(predecessor outputs)          ("single" or "add")
    x   = Q(x)            if mode == "quant_sim" and the block carries an
                          input quantizer (the first block quantizes the
                          raw network input)
    x   = avg_pool(x)     if the block carries a pooling window
    y   = (W (x * v_in) + b) * v_out            v_* are equalization buffers
    y   = batchnorm(y)    if present
    out = activation(y)

The equalization buffers default to ones, in which case the middle line
is a plain conv.  In "quant_sim" mode W is replaced by Q(W) when the
block carries a weight quantizer; in "str" mode W is replaced by its
soft-thresholded form.  The head block's output (which no other block
consumes) is the network output and is never quantized.

BatchNorm statistics needed for input synthesis are snapshotted into
gen_mu / gen_sigma when the graph is finalized and are not touched by
fusion, so synthesis keeps working on preconditioned graphs.
"""

import copy as _copy
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError
from .tensor import (ConvSpec, add, avg_pool, conv2d_forward,
                     elementwise_scale, relu)

ACTIVATIONS = ("relu", "identity")
COMBINES = ("single", "add")
MODES = ("float", "quant_sim", "str")


@dataclass
class BatchNormParams:
    """Inference-time batch norm: y = (x - mu) / sqrt(sigma^2 + eps) * gamma + beta.

    sigma is the per-channel standard deviation (not variance).
    """

    mu: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5


@dataclass
class QuantParams:
    """Affine quantizer interval [l, h] at the given bit width."""

    l: float
    h: float
    bits: int

    @property
    def step(self):
        return (self.h - self.l) / (2 ** self.bits - 1)


@dataclass
class STRState:
    """Soft-threshold reparameterization state for one block.

    s is the learned threshold logit; s0 its initial value; lam the decay
    coefficient applied to s during training.  Optimizer moments are
    owned by the trainer and are not part of the serialized model.
    """

    s: float
    s0: float
    lam: float


@dataclass
class Block:
    id: str
    conv: ConvSpec
    predecessors: list = field(default_factory=list)
    combine: str = "single"
    activation: str = "relu"
    pool: tuple | None = None
    batchnorm: BatchNormParams | None = None
    v_in: np.ndarray | None = None
    v_out: np.ndarray | None = None
    weight_quant: QuantParams | None = None
    act_quant: QuantParams | None = None
    str_state: STRState | None = None
    gen_mu: np.ndarray | None = None
    gen_sigma: np.ndarray | None = None


class NetworkGraph:
    """Blocks in a fixed order that must already be topological."""

    def __init__(self, blocks, input_shape):
        self.blocks = list(blocks)
        self.input_shape = tuple(input_shape)

    def copy(self):
        return _copy.deepcopy(self)

    def block(self, block_id):
        for b in self.blocks:
            if b.id == block_id:
                return b
        raise FormatError(f"no block named {block_id!r}")

    def consumers(self):
        """Map id -> list of block ids that read it, in graph order."""
        out = {b.id: [] for b in self.blocks}
        for b in self.blocks:
            for p in b.predecessors:
                out[p].append(b.id)
        return out

    @property
    def head(self):
        cons = self.consumers()
        heads = [b for b in self.blocks if not cons[b.id]]
        if len(heads) != 1:
            raise FormatError(f"expected exactly one output block, found "
                              f"{[b.id for b in heads]}")
        return heads[0]

    def finalize(self):
        """Validate structure, infer shapes, snapshot generator statistics.

        Returns self.  Must be called after construction and after any
        structural edit; value-only edits (preconditioning) don't need it.
        """
        self.validate()
        for b in self.blocks:
            c = b.conv.c_out
            if b.v_in is None:
                b.v_in = np.ones(b.conv.c_in, dtype=np.float32)
            if b.v_out is None:
                b.v_out = np.ones(c, dtype=np.float32)
            if b.gen_mu is None and b.batchnorm is not None:
                b.gen_mu = b.batchnorm.beta.astype(np.float32).copy()
                b.gen_sigma = np.abs(b.batchnorm.gamma).astype(np.float32)
        return self

    def validate(self):
        seen = set()
        for b in self.blocks:
            if b.id in seen:
                raise FormatError(f"duplicate block id {b.id!r}")
            for p in b.predecessors:
                if p not in seen:
                    raise FormatError(
                        f"block {b.id!r} reads {p!r} which is not an earlier "
                        f"block; the block list must be a topological order")
            seen.add(b.id)
            if b.combine not in COMBINES:
                raise FormatError(f"block {b.id!r}: unknown combine {b.combine!r}")
            if b.combine == "add" and len(b.predecessors) < 2:
                raise FormatError(f"block {b.id!r}: combine=add needs at least "
                                  f"two predecessors")
            if b.combine == "single" and len(b.predecessors) > 1:
                raise FormatError(f"block {b.id!r}: combine=single allows at most "
                                  f"one predecessor")
            b.conv.label = b.conv.label or b.id
            b.conv.validate()
            co = b.conv.c_out
            if b.batchnorm is not None:
                for name in ("mu", "sigma", "gamma", "beta"):
                    v = getattr(b.batchnorm, name)
                    if v.shape != (co,):
                        raise ShapeError(f"block {b.id!r}: batchnorm {name} has "
                                         f"shape {v.shape}, expected ({co},)")
            for name, vec, want in (("v_in", b.v_in, b.conv.c_in),
                                    ("v_out", b.v_out, co)):
                if vec is not None and vec.shape != (want,):
                    raise ShapeError(f"block {b.id!r}: {name} has shape "
                                     f"{vec.shape}, expected ({want},)")
            if b.v_out is not None and np.any(b.v_out == 0):
                raise FormatError(f"block {b.id!r}: v_out contains zeros")
            if b.v_in is not None and np.any(b.v_in == 0):
                raise FormatError(f"block {b.id!r}: v_in contains zeros")
        _ = self.head  # raises unless exactly one output block
        self.input_shapes()

    def input_shapes(self):
        """Per-block input shape (c, h, w) after combine, before pooling."""
        out_shapes = {}
        in_shapes = {}
        for b in self.blocks:
            if not b.predecessors:
                shape = self.input_shape
            else:
                preds = [out_shapes[p] for p in b.predecessors]
                if len(set(preds)) != 1:
                    raise ShapeError(f"block {b.id!r}: predecessor output shapes "
                                     f"differ: {preds}")
                shape = preds[0]
            in_shapes[b.id] = shape
            if b.pool is not None:
                c, h, w = shape
                if h % b.pool[0] or w % b.pool[1]:
                    raise ShapeError(f"block {b.id!r}: pool window {b.pool} does "
                                     f"not tile input {h}x{w}")
                shape = (c, h // b.pool[0], w // b.pool[1])
            out_shapes[b.id] = b.conv.out_shape(shape)
        return in_shapes

    def conv_input_shapes(self):
        """Per-block conv input shape (c, h, w): after combine and pooling."""
        shapes = {}
        for bid, (c, h, w) in self.input_shapes().items():
            b = self.block(bid)
            if b.pool is not None:
                h, w = h // b.pool[0], w // b.pool[1]
            shapes[bid] = (c, h, w)
        return shapes


def _apply_quant(x, q: QuantParams):
    # local import: quantize depends on graph for calibration plumbing
    from .quantize import affine_quantize
    return affine_quantize(x, q.l, q.h, q.bits)


def _apply_bn(y, bn: BatchNormParams):
    scale = (bn.gamma.astype(np.float64)
             / np.sqrt(bn.sigma.astype(np.float64) ** 2 + bn.eps))
    shift = bn.beta.astype(np.float64) - bn.mu.astype(np.float64) * scale
    out = y * scale.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)
    return out.astype(y.dtype)


def _apply_activation(y, kind, block_id):
    if kind == "relu":
        return relu(y)
    if kind == "identity":
        return y
    raise FormatError(f"block {block_id!r}: cannot evaluate activation {kind!r}")


def run_forward(graph: NetworkGraph, x, mode="float", capture=False):
    """Evaluate the network on a batch.

    Returns the head output, or (output, captures) when capture is true;
    captures maps block id -> the block's input after combine and input
    quantization but before pooling.
    """
    if mode not in MODES:
        raise FormatError(f"unknown forward mode {mode!r}")
    if x.ndim != 4 or x.shape[1:] != graph.input_shape:
        raise ShapeError(f"network input shape {x.shape} does not match "
                         f"expected (n, {', '.join(map(str, graph.input_shape))})")
    outs = {}
    caps = {}
    for b in graph.blocks:
        if not b.predecessors:
            xin = x
        elif b.combine == "single":
            xin = outs[b.predecessors[0]]
        else:
            xin = outs[b.predecessors[0]]
            for p in b.predecessors[1:]:
                xin = add(xin, outs[p])
        if mode == "quant_sim" and b.act_quant is not None:
            xin = _apply_quant(xin, b.act_quant)
        if capture:
            caps[b.id] = xin
        if b.pool is not None:
            xin = avg_pool(xin, b.pool)
        w = b.conv.weight
        if mode == "str" and b.str_state is not None:
            from .prune import str_forward
            w = str_forward(w, b.str_state.s)
        if mode == "quant_sim" and b.weight_quant is not None:
            w = _apply_quant(w, b.weight_quant)
        spec = ConvSpec(w, b.conv.bias, b.conv.stride, b.conv.padding,
                        b.conv.groups, b.conv.label)
        try:
            y = conv2d_forward(elementwise_scale(xin, b.v_in), spec)
        except ShapeError as e:
            raise ShapeError(f"block {b.id!r}: {e}") from e
        y = elementwise_scale(y, b.v_out)
        if b.batchnorm is not None:
            y = _apply_bn(y, b.batchnorm)
        outs[b.id] = _apply_activation(y, b.activation, b.id)
    result = outs[graph.head.id]
    return (result, caps) if capture else result


def in_channel_rows(groups, c_in, c_out, channel):
    """Weight-column coordinates for one input channel of a grouped conv.

    Returns (row_slice, local_col): weight[row_slice, local_col] is the
    slice of the kernel that reads input channel `channel`.
    """
    per_group = c_in // groups
    g = channel // per_group
    rows_per_group = c_out // groups
    return (slice(g * rows_per_group, (g + 1) * rows_per_group),
            channel % per_group)

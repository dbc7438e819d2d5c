"""Affine quantization and data-free calibration.

The quantizer maps x to the nearest of 2^b evenly spaced values on
[l, h] (ties away from zero), clamping outside the interval:

    k = (h - l) / (2^b - 1)
    Q(x) = round((clamp(x, l, h) - l) / k) * k + l

Weight intervals come straight from per-tensor min/max.  Activation
intervals are calibrated on synthesized data by exhaustive grid search:
candidate tops are (i/N) * max(d_max, 0) and candidate bottoms
(i/N) * min(d_min, 0) for i in 1..N, where [d_min, d_max] is the data
range; the pair minimizing ||X - Q(X)||_2 wins, ties going to the wider
interval.  The search is exact: data is sorted once and each candidate's
error is evaluated from prefix sums over the quantization cells, which
reproduces the brute-force result without materializing Q(X) per
candidate.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from .datagen import derive_seed, generate, spec_for_block
from .errors import FormatError, ShapeError
from .graph import NetworkGraph, QuantParams
from .precondition import (EqualizationReport, absorb_bias, discard_buffers,
                           equalize, fold_buffers, fuse_batchnorm)
from .tensor import ConvSpec, conv2d_forward

F8 = np.float64


def affine_quantize(x, l, h, bits):
    if not 1 <= int(bits) <= 16:
        raise FormatError(f"bit width must be in 1..16, got {bits}")
    if not l < h:
        raise FormatError(f"quantizer interval is empty: [{l}, {h}]")
    k = (F8(h) - F8(l)) / (2 ** int(bits) - 1)
    t = (np.clip(np.asarray(x, dtype=F8), l, h) - F8(l)) / k
    q = np.floor(t + 0.5)  # t >= 0, so this rounds half away from zero
    out = q * k + F8(l)
    return out.astype(np.asarray(x).dtype)


def weight_range(w, bits):
    """Min/max interval for a weight tensor; degenerate tensors get a
    vanishing interval so Q reproduces the constant exactly."""
    lo = float(np.min(w))
    hi = float(np.max(w))
    if lo == hi:
        hi = lo + 1e-8 * max(1.0, abs(lo))
    return QuantParams(lo, hi, int(bits))


def _cell_losses(xs, ps, pss, lows, highs, bits):
    """Squared quantization error for each (low, high) candidate pair.

    xs must be sorted ascending; ps/pss are prefix sums of xs and xs^2
    with a leading zero.  Exactly reproduces
    sum((x - affine_quantize(x, l, h, b))^2): cell j of a candidate holds
    the x in [l + (j-0.5) k, l + (j+0.5) k) (open below for j=0, open
    above for the last cell) and maps to l + j k.
    """
    n = xs.shape[0]
    levels = 2 ** bits
    out = np.empty((len(lows), len(highs)), dtype=F8)
    for i, lo in enumerate(lows):
        for j, hi in enumerate(highs):
            k = (hi - lo) / (levels - 1)
            # boundaries between consecutive cells
            bounds = lo + (np.arange(1, levels) - 0.5) * k
            idx = np.searchsorted(xs, bounds, side="left")
            edges = np.concatenate(([0], idx, [n]))
            counts = np.diff(edges)
            vals = lo + np.arange(levels) * k
            seg_s = np.diff(ps[edges])
            seg_ss = np.diff(pss[edges])
            err = float(np.sum(seg_ss - 2.0 * vals * seg_s + vals ** 2 * counts))
            out[i, j] = err
    # guard tiny negative values from cancellation
    np.maximum(out, 0.0, out=out)
    return out


def calibrate_range(x, bits, n_steps=100):
    """Grid-search the quantization interval for a data tensor.

    Returns (QuantParams, l2_loss).  All-zero data gets a vanishing
    interval around zero and zero loss.
    """
    if not 1 <= int(bits) <= 16:
        raise FormatError(f"bit width must be in 1..16, got {bits}")
    if n_steps < 1:
        raise FormatError(f"grid resolution must be positive, got {n_steps}")
    xs = np.sort(np.asarray(x, dtype=F8).ravel())
    if xs.size == 0:
        raise ShapeError("cannot calibrate on an empty tensor")
    d_min, d_max = float(xs[0]), float(xs[-1])
    top = max(d_max, 0.0)
    bot = min(d_min, 0.0)
    if top == 0.0 and bot == 0.0:
        return QuantParams(0.0, 1e-8, int(bits)), 0.0
    steps = np.arange(1, n_steps + 1, dtype=F8) / n_steps
    highs = steps * top
    lows = steps * bot
    ps = np.concatenate(([0.0], np.cumsum(xs)))
    pss = np.concatenate(([0.0], np.cumsum(xs * xs)))
    losses = _cell_losses(xs, ps, pss, lows, highs, int(bits))
    ranges = highs.reshape(1, -1) - lows.reshape(-1, 1)
    # lexicographic: min loss, then max range
    order = np.lexsort((-ranges.ravel(), losses.ravel()))
    best = order[0]
    i, j = divmod(int(best), len(highs))
    return (QuantParams(float(lows[i]), float(highs[j]), int(bits)),
            float(np.sqrt(losses[i, j])))


def calibrate_activation(graph: NetworkGraph, block_id, bits, n_steps=100,
                         batch=2000, seed=0, undo_out_buffers=False):
    """Calibrate one block's input quantizer on synthesized data."""
    spec = spec_for_block(graph, block_id, batch,
                          derive_seed(seed, "calib", block_id),
                          include_activations=True,
                          undo_out_buffers=undo_out_buffers)
    x = generate(spec)
    return calibrate_range(x, bits, n_steps)


def bias_correction(graph: NetworkGraph, bits, batch=2000, seed=0,
                    undo_out_buffers=False):
    """Shift each bias by the expected quantization-error response.

    b <- b - (Q(W) - W) . E[x], with E[x] estimated per input channel
    from one synthesized batch per block.  Uses each block's current
    weight_quant parameters; blocks without one are skipped.  Mutates
    and returns the graph.
    """
    for b in graph.blocks:
        if b.weight_quant is None:
            continue
        spec = spec_for_block(graph, b.id, batch,
                              derive_seed(seed, "bias", b.id),
                              include_activations=True,
                              undo_out_buffers=undo_out_buffers)
        x = generate(spec)
        ex = x.astype(F8).mean(axis=(0, 2, 3))
        q = b.weight_quant
        dw = (affine_quantize(b.conv.weight.astype(F8), q.l, q.h, q.bits)
              - b.conv.weight.astype(F8))
        # response of the conv to a constant per-channel input: column sums
        mean_map = np.full((1, ex.shape[0], 1, 1), 0.0, dtype=F8)
        mean_map[0, :, 0, 0] = ex * b.v_in.astype(F8)
        probe = ConvSpec(dw, np.zeros(dw.shape[0], dtype=F8), (1, 1), (0, 0),
                         b.conv.groups, b.conv.label)
        resp = conv2d_forward(np.broadcast_to(
            mean_map, (1, ex.shape[0],) + b.conv.weight.shape[2:]).copy(), probe)
        b.conv.bias = (b.conv.bias.astype(F8) - resp[0, :, 0, 0]).astype(np.float32)
    return graph


@dataclass
class QuantSite:
    block_id: str
    kind: str                 # "weight" or "activation"
    params: QuantParams
    loss: float = float("nan")


@dataclass
class QuantizeReport:
    bits: int = 8
    sites: list = field(default_factory=list)
    equalization: EqualizationReport = field(default_factory=EqualizationReport)
    buffers: str = ""         # "discarded" or "folded"
    recalibration_delta: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


def _scale_free(graph):
    return all(b.activation in ("relu", "identity") for b in graph.blocks)


def quantize_pipeline(graph: NetworkGraph, bits, seed=0, n_steps=100,
                      batch=2000, absorb=True, eps_stop=0.001, max_sweeps=100):
    """Full data-free quantization.

    Stages: BatchNorm fusion, cross-layer equalization, bias absorption,
    activation calibration, weight intervals, bias correction, a second
    calibration pass on the corrected weights, then buffer removal
    (discarded exactly on scale-free nets, folded otherwise).  Returns
    (graph, QuantizeReport); the input graph is left untouched.
    """
    for b in graph.blocks:
        if b.activation not in ("relu", "identity"):
            raise FormatError(f"block {b.id!r}: quantization does not support "
                              f"activation {b.activation!r}")
    g = graph.copy()
    rep = QuantizeReport(bits=int(bits))
    scale_free = _scale_free(g)

    fuse_batchnorm(g)
    equalize(g, eps_stop=eps_stop, max_sweeps=max_sweeps, report=rep.equalization)
    if absorb:
        absorb_bias(g, report=rep.equalization)
    rep.warnings.extend(rep.equalization.warnings)

    undo = scale_free  # calibrate in the coordinates the final net will use
    first_pass = {}
    for b in g.blocks:
        params, loss = calibrate_activation(g, b.id, bits, n_steps, batch,
                                            derive_seed(seed, "round1"),
                                            undo_out_buffers=undo)
        b.act_quant = params
        first_pass[b.id] = loss
        rep.sites.append(QuantSite(b.id, "activation", params, loss))

    for b in g.blocks:
        b.weight_quant = weight_range(b.conv.weight, bits)
        rep.sites.append(QuantSite(b.id, "weight", b.weight_quant))

    bias_correction(g, bits, batch, seed, undo_out_buffers=undo)

    for b in g.blocks:
        params, loss = calibrate_activation(g, b.id, bits, n_steps, batch,
                                            derive_seed(seed, "round2"),
                                            undo_out_buffers=undo)
        b.act_quant = params
        rep.recalibration_delta[b.id] = loss - first_pass[b.id]
        for site in rep.sites:
            if site.block_id == b.id and site.kind == "activation":
                site.params = params
                site.loss = loss

    if scale_free:
        discard_buffers(g)
        rep.buffers = "discarded"
    else:
        fold_buffers(g)
        rep.buffers = "folded"
        for b in g.blocks:
            b.weight_quant = weight_range(b.conv.weight, bits)

    return g, rep

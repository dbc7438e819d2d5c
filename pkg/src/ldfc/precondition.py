"""Weight preconditioning: BatchNorm fusion, cross-layer equalization,
and high-bias absorption.

Equalization here is buffer-recorded: instead of rescaling a channel in
one layer and compensating in the next (which changes both layers'
functions and is only safe across piecewise-linear activations), every
rescale is paired with its exact inverse in the block's v_in / v_out
buffers, so each block's *buffered* function

    L(x) = (W (x * v_in) + b) * v_out

never changes, activation be what it may.  Once all scale decisions are
made, the buffers are either folded into the weights (general nets) or
discarded (nets whose activations commute with positive scaling, where
v_out of a producer and v_in of its consumer are exact reciprocals and
cancel through the activation).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .graph import NetworkGraph, in_channel_rows

F8 = np.float64


@dataclass
class EqualizationReport:
    sweeps: int = 0
    converged: bool = False
    mean_deviation: list = field(default_factory=list)
    pairs: list = field(default_factory=list)  # (prev_id, next_id)
    final_maxima: dict = field(default_factory=dict)  # pair -> (prev[], next[])
    absorbed: dict = field(default_factory=dict)  # prev_id -> max shift
    warnings: list = field(default_factory=list)


def fuse_batchnorm(graph: NetworkGraph):
    """Fold every BatchNorm into its conv; mutates and returns the graph.

    W'_c = W_c * g_c,  b'_c = (b_c - mu_c) * g_c + beta_c,
    g_c = gamma_c / sqrt(sigma_c^2 + eps).

    Generator statistics snapshotted at finalize time are left alone.
    """
    for b in graph.blocks:
        bn = b.batchnorm
        if bn is None:
            continue
        g = bn.gamma.astype(F8) / np.sqrt(bn.sigma.astype(F8) ** 2 + bn.eps)
        w = b.conv.weight.astype(F8) * g.reshape(-1, 1, 1, 1)
        bias = (b.conv.bias.astype(F8) - bn.mu.astype(F8)) * g + bn.beta.astype(F8)
        b.conv.weight = w.astype(b.conv.weight.dtype)
        b.conv.bias = bias.astype(b.conv.bias.dtype)
        b.batchnorm = None
    return graph


def equalization_pairs(graph: NetworkGraph):
    """Adjacent (producer, consumer) blocks whose shared channel dimension
    can be rescaled without anyone else noticing.

    The consumer must read exactly one block, combine must be "single",
    and the producer must have no other readers: channels crossing an add
    or a fan-out are pinned.  Pooling between the two is fine (it is
    positive-homogeneous and channel-preserving).
    """
    cons = graph.consumers()
    pairs = []
    for b in graph.blocks:
        if b.combine != "single" or len(b.predecessors) != 1:
            continue
        prev = graph.block(b.predecessors[0])
        if cons[prev.id] != [b.id]:
            continue
        pairs.append((prev.id, b.id))
    return pairs


def _channel_absmax_prev(w, c):
    return float(np.max(np.abs(w[c])))


def _channel_absmax_next(w, groups, c_in, c):
    rows, col = in_channel_rows(groups, c_in, w.shape[0], c)
    return float(np.max(np.abs(w[rows, col])))


def equalize(graph: NetworkGraph, eps_stop=0.001, max_sweeps=100,
             report: EqualizationReport | None = None):
    """Cross-layer range equalization over all equalizable pairs.

    For channel c of a pair, with m_p = max |row c of W_prev| and
    m_n = max |column c of W_next|, the scale s = sqrt(m_n * m_p) / m_p
    moves both maxima to sqrt(m_p * m_n).  The producer's row, bias entry
    and v_out, and the consumer's column and v_in are updated so both
    buffered functions stay bit-for-bit equivalent.  Sweeps repeat until
    the mean |s - 1| over all channels drops below eps_stop or max_sweeps
    is hit.  Channels whose either side is all zero are skipped (s = 1).

    Call after fuse_batchnorm; mutates and returns the graph.
    """
    for b in graph.blocks:
        if b.batchnorm is not None:
            raise FormatError(f"block {b.id!r} still carries a BatchNorm; "
                              f"fuse before equalizing")
    rep = report if report is not None else EqualizationReport()
    pairs = equalization_pairs(graph)
    rep.pairs = list(pairs)
    if not pairs:
        rep.converged = True
        return graph

    # work in float64 copies; write back float32 once at the end
    work = {}
    for b in graph.blocks:
        work[b.id] = [b.conv.weight.astype(F8), b.conv.bias.astype(F8),
                      b.v_in.astype(F8), b.v_out.astype(F8)]

    for sweep in range(max_sweeps):
        devs = []
        for prev_id, next_id in pairs:
            wp, bp, _, vop = work[prev_id]
            wn, _, vin, _ = work[next_id]
            groups = graph.block(next_id).conv.groups
            c_in = graph.block(next_id).conv.c_in
            for c in range(wp.shape[0]):
                m_p = _channel_absmax_prev(wp, c)
                m_n = _channel_absmax_next(wn, groups, c_in, c)
                if m_p == 0.0 or m_n == 0.0:
                    continue
                s = np.sqrt(m_n * m_p) / m_p
                wp[c] *= s
                bp[c] *= s
                vop[c] /= s
                rows, col = in_channel_rows(groups, c_in, wn.shape[0], c)
                wn[rows, col] /= s
                vin[c] *= s
                devs.append(abs(s - 1.0))
        rep.sweeps = sweep + 1
        mean_dev = float(np.mean(devs)) if devs else 0.0
        rep.mean_deviation.append(mean_dev)
        if mean_dev < eps_stop:
            rep.converged = True
            break

    for prev_id, next_id in pairs:
        wp = work[prev_id][0]
        wn = work[next_id][0]
        groups = graph.block(next_id).conv.groups
        c_in = graph.block(next_id).conv.c_in
        prev_max = [_channel_absmax_prev(wp, c) for c in range(wp.shape[0])]
        next_max = [_channel_absmax_next(wn, groups, c_in, c)
                    for c in range(wp.shape[0])]
        rep.final_maxima[(prev_id, next_id)] = (prev_max, next_max)

    for b in graph.blocks:
        w, bias, vin, vout = work[b.id]
        b.conv.weight = w.astype(np.float32)
        b.conv.bias = bias.astype(np.float32)
        b.v_in = vin.astype(np.float32)
        b.v_out = vout.astype(np.float32)
    return graph


def absorb_bias(graph: NetworkGraph, report: EqualizationReport | None = None):
    """Shift large positive pre-activation means into the next layer's bias.

    For a producer P feeding exactly one consumer N through a ReLU, with
    P's synthesized output statistics (mu, sigma), the per-channel shift

        t = max(0, mu - 3 sigma)

    is subtracted from P's output (via its bias, in buffered coordinates)
    and added back after N's conv (via N's bias, weighted by N's kernel
    column sums).  Exact whenever P's pre-activation stays >= t, which
    the 3-sigma margin makes overwhelmingly likely; the snapshotted
    statistics are shifted too so later synthesis sees the moved data.

    Pairs whose producer lacks statistics or uses another activation are
    skipped with a warning.  Mutates and returns the graph.
    """
    rep = report if report is not None else EqualizationReport()
    for prev_id, next_id in equalization_pairs(graph):
        prev = graph.block(prev_id)
        nxt = graph.block(next_id)
        if prev.activation != "relu":
            rep.warnings.append(f"absorb: {prev_id}->{next_id} skipped, producer "
                                f"activation is {prev.activation!r}")
            continue
        if prev.gen_mu is None:
            rep.warnings.append(f"absorb: {prev_id}->{next_id} skipped, producer "
                                f"has no recorded output statistics")
            continue
        t = np.maximum(0.0, prev.gen_mu.astype(F8) - 3.0 * prev.gen_sigma.astype(F8))
        if not np.any(t > 0):
            rep.absorbed[prev_id] = 0.0
            continue
        # producer: subtract in its internal (pre-v_out) coordinates
        prev.conv.bias = (prev.conv.bias.astype(F8)
                          - t / prev.v_out.astype(F8)).astype(np.float32)
        prev.gen_mu = (prev.gen_mu.astype(F8) - t).astype(np.float32)
        # consumer: its conv sees t * v_in less input; compensate the bias
        wn = nxt.conv.weight.astype(F8)
        t_seen = t * nxt.v_in.astype(F8)
        comp = np.zeros(wn.shape[0], dtype=F8)
        for c in range(t_seen.shape[0]):
            if t_seen[c] == 0.0:
                continue
            rows, col = in_channel_rows(nxt.conv.groups, nxt.conv.c_in,
                                        wn.shape[0], c)
            comp[rows] += wn[rows, col].sum(axis=(1, 2)) * t_seen[c]
        nxt.conv.bias = (nxt.conv.bias.astype(F8) + comp).astype(np.float32)
        rep.absorbed[prev_id] = float(t.max())
    return graph


def fold_buffers(graph: NetworkGraph):
    """Bake v_in / v_out into weights and biases; buffers reset to ones.

    W[o, c] <- v_out[o] * W[o, c] * v_in[c],  b <- b * v_out.  Always
    function-preserving because it reproduces the buffered block function
    exactly.  Mutates and returns the graph.
    """
    for b in graph.blocks:
        w = b.conv.weight.astype(F8)
        for c in range(b.conv.c_in):
            rows, col = in_channel_rows(b.conv.groups, b.conv.c_in,
                                        w.shape[0], c)
            w[rows, col] *= float(b.v_in[c])
        w *= b.v_out.astype(F8).reshape(-1, 1, 1, 1)
        b.conv.weight = w.astype(np.float32)
        b.conv.bias = (b.conv.bias.astype(F8) * b.v_out.astype(F8)).astype(np.float32)
        b.v_in = np.ones_like(b.v_in)
        b.v_out = np.ones_like(b.v_out)
    return graph


def discard_buffers(graph: NetworkGraph):
    """Reset buffers to ones without touching weights.

    Exact only when every producer/consumer buffer pair holds exact
    reciprocals and every crossed activation commutes with positive
    per-channel scaling (ReLU, identity); that is what equalize()
    produces on such nets.  The caller is responsible for checking the
    activation condition.  Mutates and returns the graph.
    """
    for b in graph.blocks:
        b.v_in = np.ones_like(b.v_in)
        b.v_out = np.ones_like(b.v_out)
    return graph

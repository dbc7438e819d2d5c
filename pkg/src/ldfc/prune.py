"""Data-free pruning by per-layer soft-threshold training.

Each conv layer is trained in isolation to match its own frozen copy on
synthesized inputs while a soft threshold pushes small weights to zero:

    W_s = sign(W) * max(|W| - sigmoid(s), 0)

with one scalar s per layer, trained jointly with W by Adam against the
teacher-student MSE.  A coupled L2 penalty with coefficient lam acts on
s only (never on W): larger lam buys more sparsity.  Biases stay frozen.
The learning rate follows a cosine from lr0 to 0 over a nominal horizon,
truncated at the iteration cap.

Magnitude-pruning baselines (global / uniform / kernel-shaped budgets)
live here too, as does the ablation that reuses a trained model's
per-layer budgets without the training.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .datagen import derive_seed, generate, spec_for_block
from .errors import DivergenceError, FormatError
from .graph import Block, NetworkGraph, STRState
from .precondition import EqualizationReport, equalize, fold_buffers, fuse_batchnorm
from .tensor import ConvSpec, conv2d_backward, conv2d_forward, elementwise_scale

F8 = np.float64


def sigmoid(s):
    if s >= 0:
        return float(1.0 / (1.0 + np.exp(-s)))
    e = np.exp(s)
    return float(e / (1.0 + e))


def str_forward(w, s):
    """Soft-thresholded weights.

    A threshold below the float32 resolution of the tensor (relative to
    its largest magnitude) is treated as exactly zero: it could not
    survive the carrier dtype anyway, and flushing it keeps a
    zero-pressure configuration a true no-op instead of feeding rounding
    noise to the optimizer.
    """
    thr = sigmoid(float(s))
    if w.size and thr <= np.finfo(np.float32).eps * float(np.max(np.abs(w))):
        return w.copy()
    return (np.sign(w) * np.maximum(np.abs(w) - thr, 0)).astype(w.dtype)


def str_backward(w, s, grad_ws):
    """Gradients of str_forward wrt w and s given the gradient wrt W_s.

    Active entries (|w| larger than the threshold) pass the gradient to w
    unchanged; the threshold's gradient collects -sign(w) * sig(s) *
    (1 - sig(s)) over active entries.  Inactive entries contribute
    nothing to either.
    """
    sig = sigmoid(float(s))
    active = np.abs(w) > sig
    grad_w = np.where(active, grad_ws, 0.0)
    grad_s = float(np.sum(np.where(active, -np.sign(w) * grad_ws, 0.0))
                   * sig * (1.0 - sig))
    return grad_w, grad_s


def cosine_lr(lr0, t, horizon):
    """Cosine decay from lr0 to 0 over `horizon` steps, clamped past it."""
    t = min(t, horizon)
    return 0.5 * lr0 * (1.0 + np.cos(np.pi * t / horizon))


class Adam:
    def __init__(self, shape, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape, dtype=F8)
        self.v = np.zeros(shape, dtype=F8)
        self.t = 0
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, x, grad, lr=None):
        self.t += 1
        lr = self.lr if lr is None else lr
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1 ** self.t)
        vh = self.v / (1 - self.beta2 ** self.t)
        return x - lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch: int = 128
    lr: float = 0.001
    horizon: int = 100_000     # nominal cosine length; cap may cut it short
    s0: float = -5.0
    lam: float = 1.551757813e-05
    seed: int = 0
    s_loss_grad: bool = True   # include the MSE term in ds; decay always applies
    record_every: int = 10


@dataclass
class LayerResult:
    block_id: str
    loss: list = field(default_factory=list)
    s_path: list = field(default_factory=list)
    s_final: float = 0.0
    sparsity: float = 0.0
    seconds: float = 0.0


def train_layer(teacher: Block, student: Block, gen, cfg: TrainConfig):
    """Distill one block against its frozen copy on synthesized batches.

    `gen` is the GenSpec for the block's conv input (activations off,
    original scale); one rng drawn from gen.seed supplies every batch.
    Mutates student.conv.weight and student.str_state; returns LayerResult.
    """
    t0 = time.monotonic()
    rng = np.random.default_rng(gen.seed)
    # weights live in deployment precision; convolutions accumulate in
    # float64 internally.  A converged student then matches its teacher
    # bit for bit, the gradient is exactly zero, and the optimizer holds
    # still instead of limit-cycling at learning-rate amplitude.
    w = student.conv.weight.astype(np.float32).copy()
    s = float(cfg.s0)
    opt_w = Adam(w.shape, lr=cfg.lr)
    opt_s = Adam((), lr=cfg.lr)
    res = LayerResult(block_id=student.id)
    t_spec = ConvSpec(teacher.conv.weight.astype(np.float32),
                      teacher.conv.bias.astype(np.float32), teacher.conv.stride,
                      teacher.conv.padding, teacher.conv.groups, teacher.id)
    vin = student.v_in.astype(np.float32)
    vout = student.v_out.astype(np.float32)
    for it in range(cfg.iterations):
        x = generate(gen, rng)
        xs = elementwise_scale(x, vin)
        ref = elementwise_scale(conv2d_forward(xs, t_spec), vout)
        ws = str_forward(w, s)
        s_spec = ConvSpec(ws, student.conv.bias.astype(np.float32),
                          student.conv.stride, student.conv.padding,
                          student.conv.groups, student.id)
        out = elementwise_scale(conv2d_forward(xs, s_spec), vout)
        diff = (out - ref).astype(F8)
        loss = float(np.mean(diff * diff))
        lr = cosine_lr(cfg.lr, it, cfg.horizon)
        if not np.isfinite(loss):
            raise DivergenceError(f"layer {student.id!r}: non-finite loss at "
                                  f"iteration {it} (lr={lr:.3g})", it, lr)
        grad_out = elementwise_scale(2.0 * diff / diff.size,
                                     vout.astype(F8))
        _, grad_ws, _ = conv2d_backward(xs.astype(F8),
                                        ConvSpec(ws.astype(F8),
                                                 s_spec.bias.astype(F8),
                                                 s_spec.stride, s_spec.padding,
                                                 s_spec.groups, s_spec.label),
                                        grad_out, need_input=False)
        grad_w, grad_s = str_backward(w.astype(F8), s, grad_ws)
        if not cfg.s_loss_grad:
            grad_s = 0.0
        grad_s += cfg.lam * s
        w = opt_w.step(w.astype(F8), grad_w, lr=lr).astype(np.float32)
        s = float(opt_s.step(s, grad_s, lr=lr))
        if it % cfg.record_every == 0 or it == cfg.iterations - 1:
            res.loss.append(loss)
            res.s_path.append(s)
    ws = str_forward(w, s)
    student.conv.weight = ws.astype(np.float32)
    student.str_state = STRState(s=s, s0=float(cfg.s0), lam=float(cfg.lam))
    res.s_final = s
    res.sparsity = float(np.mean(ws == 0.0))
    res.seconds = time.monotonic() - t0
    return res


@dataclass
class PruneReport:
    layers: list = field(default_factory=list)
    total_sparsity: float = 0.0
    equalization: EqualizationReport = field(default_factory=EqualizationReport)
    budgets: dict = field(default_factory=dict)  # block id -> layer sparsity


def _total_sparsity(graph):
    zeros = sum(int(np.sum(b.conv.weight == 0)) for b in graph.blocks)
    total = sum(b.conv.weight.size for b in graph.blocks)
    return zeros / total


def prune_network(graph: NetworkGraph, cfg: TrainConfig, equalize_first=True):
    """Per-layer soft-threshold pruning of every conv in the network.

    Fuses BatchNorm, optionally equalizes, then trains each layer against
    its frozen copy; thresholded weights are baked in and the buffers
    folded.  Returns (pruned graph, PruneReport); input graph untouched.
    """
    g = graph.copy()
    rep = PruneReport()
    fuse_batchnorm(g)
    if equalize_first:
        equalize(g, report=rep.equalization)
    teacher = g.copy()
    for tb, sb in zip(teacher.blocks, g.blocks):
        # unknown predecessor activations: train on their pre-activation
        # statistics rather than refusing the network
        known = all(g.block(p).activation in ("relu", "identity")
                    for p in sb.predecessors)
        gen = spec_for_block(g, sb.id, cfg.batch,
                             derive_seed(cfg.seed, "prune", sb.id),
                             include_activations=known)
        res = train_layer(tb, sb, gen, cfg)
        rep.layers.append(res)
        rep.budgets[sb.id] = res.sparsity
    fold_buffers(g)
    rep.total_sparsity = _total_sparsity(g)
    return g, rep


# -- magnitude baselines ------------------------------------------------------

def kernel_shape_densities(graph: NetworkGraph):
    """Per-layer density weights p = (co + ci + kh + kw) / (co ci kh kw)."""
    out = {}
    for b in graph.blocks:
        co, cig, kh, kw = b.conv.weight.shape
        ci = cig * b.conv.groups
        out[b.id] = (co + ci + kh + kw) / (co * ci * kh * kw)
    return out


def baseline_budgets(graph: NetworkGraph, sparsity, method):
    """Per-layer kept-weight counts for a magnitude baseline.

    method "global": one threshold across all layers.  "uniform": every
    layer keeps the same fraction.  "kernel": kept density proportional
    to the kernel-shape weights, waterfilled so no layer exceeds density
    one, with largest-remainder rounding to hit the global budget.
    """
    if not 0.0 <= sparsity < 1.0:
        raise FormatError(f"sparsity must be in [0, 1), got {sparsity}")
    sizes = {b.id: b.conv.weight.size for b in graph.blocks}
    total = sum(sizes.values())
    keep_total = total - int(round(sparsity * total))
    if method == "global":
        mags = np.concatenate([np.abs(b.conv.weight).ravel()
                               for b in graph.blocks])
        order = np.argsort(mags, kind="stable")
        dropped_idx = order[:total - keep_total]
        kept = {}
        pos = 0
        for b in graph.blocks:
            lo, hi = pos, pos + sizes[b.id]
            ndrop = int(np.sum((dropped_idx >= lo) & (dropped_idx < hi)))
            kept[b.id] = sizes[b.id] - ndrop
            pos = hi
        return kept
    if method == "uniform":
        kept = {bid: n - int(round(sparsity * n)) for bid, n in sizes.items()}
        return kept
    if method == "kernel":
        p = kernel_shape_densities(graph)
        ids = [b.id for b in graph.blocks]
        dens = {bid: p[bid] for bid in ids}
        clamped = set()
        while True:
            free = [bid for bid in ids if bid not in clamped]
            budget = keep_total - sum(sizes[bid] for bid in clamped)
            if budget < 0:
                top = 1.0 - sum(sizes[bid] for bid in clamped) / total
                raise FormatError(
                    f"sparsity {sparsity} unreachable under kernel-shaped "
                    f"budgets; highest achievable is about {max(top, 0.0):.4f}")
            if not free:
                break
            alpha = budget / sum(dens[bid] * sizes[bid] for bid in free)
            over = [bid for bid in free if alpha * dens[bid] > 1.0]
            if not over:
                break
            clamped.update(over)
        target = {}
        for bid in ids:
            target[bid] = (float(sizes[bid]) if bid in clamped
                           else alpha * dens[bid] * sizes[bid])
        floor = {bid: min(int(target[bid]), sizes[bid]) for bid in ids}
        rem = keep_total - sum(floor.values())
        fracs = sorted(ids, key=lambda bid: (target[bid] - floor[bid], bid),
                       reverse=True)
        kept = dict(floor)
        i = 0
        while rem > 0 and i < len(fracs):
            bid = fracs[i]
            if kept[bid] < sizes[bid]:
                kept[bid] += 1
                rem -= 1
            i += 1
        return kept
    raise FormatError(f"unknown baseline method {method!r}")


def magnitude_prune_to_budget(graph: NetworkGraph, kept):
    """Zero all but the `kept[id]` largest-magnitude weights per layer.

    Mutates and returns (graph, report dict of per-layer sparsity).
    Ties break toward earlier flat indices, deterministically.
    """
    layer_sparsity = {}
    for b in graph.blocks:
        k = kept.get(b.id, b.conv.weight.size)
        flat = b.conv.weight.ravel()
        n = flat.size
        if not 0 <= k <= n:
            raise FormatError(f"block {b.id!r}: kept count {k} out of range 0..{n}")
        order = np.argsort(np.abs(flat), kind="stable")
        mask = np.ones(n, dtype=bool)
        mask[order[:n - k]] = False
        flat = np.where(mask, flat, 0.0).astype(np.float32)
        b.conv.weight = flat.reshape(b.conv.weight.shape)
        layer_sparsity[b.id] = 1.0 - k / n
    return graph, layer_sparsity


def baseline_prune(graph: NetworkGraph, sparsity, method):
    """Magnitude-prune a copy of the graph (BatchNorm fused first)."""
    g = graph.copy()
    fuse_batchnorm(g)
    kept = baseline_budgets(g, sparsity, method)
    g, layer_sparsity = magnitude_prune_to_budget(g, kept)
    return g, layer_sparsity

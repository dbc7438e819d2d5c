"""Classification evaluation over the container dataset format."""

import numpy as np

from .errors import ShapeError
from .graph import NetworkGraph, run_forward


def evaluate(graph: NetworkGraph, inputs, labels, mode="float", batch=256):
    """Top-1 accuracy; returns (accuracy, per-class accuracy dict)."""
    n = inputs.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} inputs")
    hits = 0
    per_class_hit = {}
    per_class_n = {}
    for lo in range(0, n, batch):
        xb = inputs[lo:lo + batch]
        out = run_forward(graph, xb, mode=mode)
        pred = out.reshape(out.shape[0], -1).argmax(axis=1)
        yb = labels[lo:lo + batch]
        hits += int(np.sum(pred == yb))
        for c in np.unique(yb):
            sel = yb == c
            per_class_hit[int(c)] = per_class_hit.get(int(c), 0) + int(
                np.sum(pred[sel] == c))
            per_class_n[int(c)] = per_class_n.get(int(c), 0) + int(np.sum(sel))
    per_class = {c: per_class_hit[c] / per_class_n[c] for c in sorted(per_class_n)}
    return hits / n, per_class

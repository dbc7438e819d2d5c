"""Command-line interface.

Every artifact-producing run writes a manifest JSON next to its output
(`<output>.manifest.json` unless --manifest overrides) recording the
exact argv, resolved configuration, seed, package version, SHA-256 of
every input and output file, and stage timings.  Re-running the argv
stored in a manifest reproduces the output model byte for byte.

Exit codes: 0 success, 2 usage error (argparse), 3 malformed container
or graph, 4 shape mismatch, 5 training divergence, 1 anything else.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .datagen import derive_seed
from .errors import DivergenceError, FormatError, LdfcError, ShapeError
from .evaluate import evaluate
from .precondition import (EqualizationReport, absorb_bias, discard_buffers,
                           equalize, fold_buffers, fuse_batchnorm)
from .prune import TrainConfig, baseline_prune, magnitude_prune_to_budget, \
    prune_network
from .quantize import quantize_pipeline
from .serialize import load_data, load_model, save_model

EXIT_FORMAT = 3
EXIT_SHAPE = 4
EXIT_DIVERGE = 5


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if hasattr(obj, "__dict__"):
        return _jsonable(vars(obj))
    return obj


def _default_seed(value):
    if value is not None:
        return value
    return int(os.environ.get("LDFC_SEED", "0"))


class _Run:
    """Collects manifest data over the lifetime of one command."""

    def __init__(self, args, argv):
        self.data = {
            "command": args.command,
            "argv": list(argv),
            "version": __version__,
            "config": {k: v for k, v in sorted(vars(args).items())
                       if k not in ("command", "func", "manifest")},
            "inputs": {},
            "outputs": {},
            "timings": {},
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        self._marks = {}
        self.manifest_path = getattr(args, "manifest", None)

    def input(self, path):
        self.data["inputs"][str(path)] = _sha256(path)

    def output(self, path):
        self.data["outputs"][str(path)] = _sha256(path)

    def start(self, stage):
        self._marks[stage] = time.monotonic()

    def stop(self, stage):
        self.data["timings"][stage] = round(
            time.monotonic() - self._marks.pop(stage), 6)

    def write(self, default_anchor=None):
        path = self.manifest_path
        if path is None and default_anchor is not None:
            path = str(default_anchor) + ".manifest.json"
        if path is None:
            return
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        with open(path, "w") as f:
            json.dump(_jsonable(self.data), f, indent=2, sort_keys=True)
            f.write("\n")


def _write_report(path, payload):
    if not path:
        return
    with open(path, "w") as f:
        json.dump(_jsonable(payload), f, indent=2, sort_keys=True)
        f.write("\n")


def _eq_report_dict(rep: EqualizationReport):
    return {
        "sweeps": rep.sweeps,
        "converged": rep.converged,
        "mean_deviation": rep.mean_deviation,
        "pairs": [f"{a}->{b}" for a, b in rep.pairs],
        "final_maxima": {f"{a}->{b}": {"prev": pm, "next": nm}
                         for (a, b), (pm, nm) in rep.final_maxima.items()},
        "absorbed": rep.absorbed,
        "warnings": rep.warnings,
    }


# -- commands -----------------------------------------------------------------

def cmd_inspect(args, run):
    g = load_model(args.model)
    shapes = g.input_shapes()
    info = {"input_shape": list(g.input_shape), "blocks": []}
    total = 0
    zeros = 0
    for b in g.blocks:
        w = b.conv.weight
        total += w.size
        zeros += int(np.sum(w == 0))
        info["blocks"].append({
            "id": b.id,
            "predecessors": list(b.predecessors),
            "combine": b.combine,
            "activation": b.activation,
            "weight_shape": list(w.shape),
            "stride": list(b.conv.stride),
            "padding": list(b.conv.padding),
            "groups": b.conv.groups,
            "pool": list(b.pool) if b.pool else None,
            "input_shape": list(shapes[b.id]),
            "batchnorm": b.batchnorm is not None,
            "weight_quant": (None if b.weight_quant is None else
                             {"l": b.weight_quant.l, "h": b.weight_quant.h,
                              "bits": b.weight_quant.bits}),
            "act_quant": (None if b.act_quant is None else
                          {"l": b.act_quant.l, "h": b.act_quant.h,
                           "bits": b.act_quant.bits}),
            "str_s": None if b.str_state is None else b.str_state.s,
            "sparsity": round(float(np.mean(w == 0)), 6),
        })
    info["total_weights"] = total
    info["total_sparsity"] = round(zeros / total, 6)
    if args.json:
        print(json.dumps(info, indent=2, sort_keys=True))
    else:
        print(f"model: {args.model}")
        print(f"input: {tuple(g.input_shape)}   "
              f"weights: {total}   sparsity: {zeros / total:.2%}")
        for d in info["blocks"]:
            attrs = []
            if d["batchnorm"]:
                attrs.append("bn")
            if d["pool"]:
                attrs.append(f"pool{tuple(d['pool'])}")
            if d["weight_quant"]:
                attrs.append(f"w{d['weight_quant']['bits']}b")
            if d["act_quant"]:
                attrs.append(f"a{d['act_quant']['bits']}b")
            if d["str_s"] is not None:
                attrs.append(f"s={d['str_s']:.3f}")
            src = ",".join(d["predecessors"]) or "<input>"
            comb = "+" if d["combine"] == "add" else ""
            print(f"  {d['id']:>10}  <- {comb}{src:<14} "
                  f"w{tuple(d['weight_shape'])} {d['activation']:<8} "
                  f"{' '.join(attrs)}")
    return 0


def cmd_precondition(args, run):
    run.input(args.model)
    run.start("load")
    g = load_model(args.model)
    run.stop("load")
    rep = EqualizationReport()
    run.start("transform")
    fuse_batchnorm(g)
    if not args.no_equalize:
        equalize(g, eps_stop=args.eps_stop, max_sweeps=args.max_sweeps,
                 report=rep)
    if args.absorb:
        absorb_bias(g, report=rep)
    if args.buffers == "fold":
        fold_buffers(g)
    elif args.buffers == "discard":
        discard_buffers(g)
    run.stop("transform")
    run.start("save")
    save_model(g, args.out)
    run.stop("save")
    run.output(args.out)
    _write_report(args.report, {"equalization": _eq_report_dict(rep)})
    if args.report:
        run.output(args.report)
    run.write(args.out)
    print(f"preconditioned -> {args.out}  "
          f"(sweeps={rep.sweeps} converged={rep.converged})")
    return 0


def cmd_quantize(args, run):
    run.input(args.model)
    seed = _default_seed(args.seed)
    run.data["config"]["seed"] = seed
    run.start("load")
    g = load_model(args.model)
    run.stop("load")
    run.start("quantize")
    q, rep = quantize_pipeline(g, bits=args.bits, seed=seed,
                               n_steps=args.grid, batch=args.batch,
                               absorb=not args.no_absorb)
    run.stop("quantize")
    run.start("save")
    save_model(q, args.out)
    run.stop("save")
    run.output(args.out)
    payload = {
        "bits": rep.bits,
        "buffers": rep.buffers,
        "equalization": _eq_report_dict(rep.equalization),
        "sites": [{"block": s.block_id, "kind": s.kind, "l": s.params.l,
                   "h": s.params.h, "bits": s.params.bits, "loss": s.loss}
                  for s in rep.sites],
        "recalibration_delta": rep.recalibration_delta,
        "warnings": rep.warnings,
    }
    _write_report(args.report, payload)
    if args.report:
        run.output(args.report)
    run.write(args.out)
    print(f"quantized at {args.bits} bits -> {args.out}")
    return 0


def _train_config(args, seed):
    return TrainConfig(iterations=args.iters, batch=args.batch,
                       s0=args.s0, lam=args.lam, seed=seed)


def cmd_prune(args, run):
    run.input(args.model)
    seed = _default_seed(args.seed)
    run.data["config"]["seed"] = seed
    run.start("load")
    g = load_model(args.model)
    run.stop("load")
    run.start("prune")
    payload = {"method": args.method}
    if args.method == "str":
        pruned, rep = prune_network(g, _train_config(args, seed))
        payload["layers"] = [{
            "block": r.block_id, "loss_first": r.loss[0], "loss_last": r.loss[-1],
            "s_final": r.s_final, "sparsity": r.sparsity,
            "seconds": round(r.seconds, 3),
            "s_path": [round(v, 6) for v in r.s_path],
        } for r in rep.layers]
        payload["budgets"] = rep.budgets
        payload["total_sparsity"] = rep.total_sparsity
        payload["equalization"] = _eq_report_dict(rep.equalization)
    elif args.method == "budget":
        if not args.budgets_json:
            raise FormatError("--method budget needs --budgets-json")
        with open(args.budgets_json) as f:
            budgets = json.load(f)
        if "budgets" in budgets:
            budgets = budgets["budgets"]
        pruned = fuse_batchnorm(g.copy())
        kept = {}
        for b in pruned.blocks:
            sp = float(budgets.get(b.id, 0.0))
            kept[b.id] = b.conv.weight.size - int(round(sp * b.conv.weight.size))
        pruned, layer_sp = magnitude_prune_to_budget(pruned, kept)
        payload["layer_sparsity"] = layer_sp
        payload["total_sparsity"] = float(
            sum((1 - kept[b.id] / b.conv.weight.size) * b.conv.weight.size
                for b in pruned.blocks)
            / sum(b.conv.weight.size for b in pruned.blocks))
    else:
        if args.target_sparsity is None:
            raise FormatError(f"--method {args.method} needs --target-sparsity")
        pruned, layer_sp = baseline_prune(g, args.target_sparsity, args.method)
        payload["layer_sparsity"] = layer_sp
        payload["target_sparsity"] = args.target_sparsity
    run.stop("prune")
    run.start("save")
    save_model(pruned, args.out)
    run.stop("save")
    run.output(args.out)
    _write_report(args.report, payload)
    if args.report:
        run.output(args.report)
    run.write(args.out)
    total = payload.get("total_sparsity")
    if total is None:
        zeros = sum(int((b.conv.weight == 0).sum()) for b in pruned.blocks)
        n = sum(b.conv.weight.size for b in pruned.blocks)
        total = zeros / n
    print(f"pruned ({args.method}) -> {args.out}  sparsity={total:.4f}")
    return 0


def _eval_mode(graph, requested):
    if requested != "auto":
        return requested
    has_q = any(b.weight_quant is not None or b.act_quant is not None
                for b in graph.blocks)
    return "quant_sim" if has_q else "float"


def cmd_eval(args, run):
    run.input(args.model)
    run.input(args.data)
    g = load_model(args.model)
    kind, tensors, _ = load_data(args.data)
    if kind != "dataset":
        raise FormatError(f"{args.data} is a {kind}, expected a dataset")
    mode = _eval_mode(g, args.mode)
    run.start("eval")
    acc, per_class = evaluate(g, tensors["inputs"], tensors["labels"],
                              mode=mode, batch=args.batch)
    run.stop("eval")
    result = {"accuracy": acc, "mode": mode, "count": int(
        tensors["inputs"].shape[0]), "per_class": per_class}
    run.data["result"] = result
    if args.json:
        _write_report(args.json, result)
        run.output(args.json)
    run.write(args.json or None)
    print(f"accuracy: {acc:.4f}  ({mode}, n={result['count']})")
    return 0


# -- sweep --------------------------------------------------------------------

def _parse_grid(text):
    """Comma list or start:stop:step (inclusive endpoints, sign-aware)."""
    if text is None:
        return [None]
    if ":" in text:
        start, stop, step = (float(v) for v in text.split(":"))
        if step == 0:
            raise FormatError("grid step must be nonzero")
        step = abs(step) * (1 if stop >= start else -1)
        vals = []
        v = start
        while (v <= stop + 1e-9) if step > 0 else (v >= stop - 1e-9):
            vals.append(round(v, 10))
            v += step
        return vals
    return [float(v) for v in text.split(",")]


def _sweep_one(task):
    """One sweep cell; runs in a worker process."""
    (idx, model_path, out_dir, mode, s0, lam, bits, iters, batch, grid,
     seed, eval_path) = task
    row = {"row": idx, "mode": mode, "s0": s0, "lambda": lam, "bits": bits,
           "iterations": iters, "batch": batch, "seed": seed,
           "total_sparsity": "", "loss": "", "accuracy": "", "status": "ok",
           "error": "", "output": ""}
    try:
        g = load_model(model_path)
        out_path = os.path.join(out_dir, f"model_{idx:03d}.ldfc")
        if mode == "prune":
            cfg = TrainConfig(iterations=iters, batch=batch, s0=s0, lam=lam,
                              seed=derive_seed(seed, "sweep", idx))
            result, rep = prune_network(g, cfg)
            row["total_sparsity"] = f"{rep.total_sparsity:.6f}"
            row["loss"] = f"{float(np.mean([r.loss[-1] for r in rep.layers])):.6g}"
        else:
            result, rep = quantize_pipeline(g, bits=int(bits),
                                            seed=derive_seed(seed, "sweep", idx),
                                            n_steps=grid, batch=batch)
            act_losses = [s.loss for s in rep.sites if s.kind == "activation"]
            row["loss"] = f"{float(np.mean(act_losses)):.6g}"
            row["total_sparsity"] = "0.000000"
        save_model(result, out_path)
        row["output"] = os.path.basename(out_path)
        if eval_path:
            kind, tensors, _ = load_data(eval_path)
            mode_used = _eval_mode(result, "auto")
            acc, _ = evaluate(result, tensors["inputs"], tensors["labels"],
                              mode=mode_used)
            row["accuracy"] = f"{acc:.6f}"
    except LdfcError as e:
        row["status"] = "error"
        row["error"] = str(e)
    return row


FRONTIER_FIELDS = ["row", "mode", "s0", "lambda", "bits", "iterations",
                   "batch", "seed", "total_sparsity", "loss", "accuracy",
                   "status", "error", "output"]


def cmd_sweep(args, run):
    run.input(args.model)
    seed = _default_seed(args.seed)
    run.data["config"]["seed"] = seed
    os.makedirs(args.out_dir, exist_ok=True)
    tasks = []
    if args.mode == "prune":
        for s0 in _parse_grid(args.s0_grid or "-2:-7:0.33"):
            for lam in _parse_grid(args.lambda_grid or
                                   "0.00001551757813"):
                tasks.append((len(tasks), args.model, args.out_dir, "prune",
                              s0, lam, None, args.iters, args.batch, args.grid,
                              seed, args.eval))
    else:
        for bits in _parse_grid(args.bits_grid or "4,6,8"):
            tasks.append((len(tasks), args.model, args.out_dir, "quantize",
                          None, None, bits, args.iters, args.batch, args.grid,
                          seed, args.eval))
    run.start("sweep")
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_one, tasks))
    else:
        rows = [_sweep_one(t) for t in tasks]
    run.stop("sweep")
    rows.sort(key=lambda r: r["row"])
    frontier = os.path.join(args.out_dir, "frontier.csv")
    with open(frontier, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=FRONTIER_FIELDS)
        w.writeheader()
        w.writerows(rows)
    run.output(frontier)
    for row in rows:
        if row["output"]:
            run.output(os.path.join(args.out_dir, row["output"]))
    run.write(frontier)
    failures = sum(1 for r in rows if r["status"] != "ok")
    print(f"sweep: {len(rows)} runs, {failures} failed -> {frontier}")
    return 0


def cmd_report(args, run):
    path = args.path
    if path.endswith(".csv"):
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        print(f"{len(rows)} rows from {path}")
        cols = ["row", "s0", "lambda", "bits", "total_sparsity", "loss",
                "accuracy", "status"]
        print("  ".join(f"{c:>14}" for c in cols))
        for r in rows:
            print("  ".join(f"{r.get(c, ''):>14}" for c in cols))
        return 0
    with open(path) as f:
        payload = json.load(f)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


# -- parser -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="ldfc",
        description="Data-free CNN compression: quantize and prune trained "
                    "networks from their BatchNorm statistics alone.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("inspect", help="summarize a model container")
    sp.add_argument("model")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("precondition",
                        help="fuse batchnorm and equalize weight ranges")
    sp.add_argument("model")
    sp.add_argument("out")
    sp.add_argument("--no-equalize", action="store_true")
    sp.add_argument("--absorb", action="store_true",
                    help="also shift large activation means downstream")
    sp.add_argument("--buffers", choices=["keep", "fold", "discard"],
                    default="keep")
    sp.add_argument("--eps-stop", type=float, default=0.001)
    sp.add_argument("--max-sweeps", type=int, default=100)
    sp.add_argument("--report")
    sp.add_argument("--manifest")
    sp.set_defaults(func=cmd_precondition)

    sp = sub.add_parser("quantize", help="data-free quantization pipeline")
    sp.add_argument("model")
    sp.add_argument("out")
    sp.add_argument("--bits", type=int, required=True)
    sp.add_argument("--seed", type=int, default=None,
                    help="default: $LDFC_SEED or 0")
    sp.add_argument("--batch", type=int, default=2000)
    sp.add_argument("--grid", type=int, default=100,
                    help="calibration grid resolution per side")
    sp.add_argument("--no-absorb", action="store_true")
    sp.add_argument("--report")
    sp.add_argument("--manifest")
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("prune", help="data-free pruning")
    sp.add_argument("model")
    sp.add_argument("out")
    sp.add_argument("--method", choices=["str", "global", "uniform", "erk",
                                         "budget"], default="str")
    sp.add_argument("--s0", type=float, default=-5.0)
    sp.add_argument("--lambda", dest="lam", type=float,
                    default=1.551757813e-05)
    sp.add_argument("--iters", type=int, default=1000)
    sp.add_argument("--batch", type=int, default=128)
    sp.add_argument("--target-sparsity", type=float, default=None)
    sp.add_argument("--budgets-json",
                    help="per-layer sparsity JSON for --method budget")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--report")
    sp.add_argument("--manifest")
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("eval", help="top-1 accuracy on a dataset container")
    sp.add_argument("model")
    sp.add_argument("data")
    sp.add_argument("--mode", choices=["auto", "float", "quant_sim", "str"],
                    default="auto")
    sp.add_argument("--batch", type=int, default=256)
    sp.add_argument("--json", help="write the result to this JSON file")
    sp.add_argument("--manifest")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="grid of prune or quantize runs")
    sp.add_argument("model")
    sp.add_argument("out_dir")
    sp.add_argument("--mode", choices=["prune", "quantize"], default="prune")
    sp.add_argument("--s0-grid", help="comma list or start:stop:step")
    sp.add_argument("--lambda-grid")
    sp.add_argument("--bits-grid")
    sp.add_argument("--iters", type=int, default=1000)
    sp.add_argument("--batch", type=int, default=128)
    sp.add_argument("--grid", type=int, default=100)
    sp.add_argument("--eval", help="dataset container to score each run on")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--manifest")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="pretty-print a report or frontier")
    sp.add_argument("path")
    sp.set_defaults(func=cmd_report)

    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    run = _Run(args, argv)
    try:
        return args.func(args, run)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGE
    except ShapeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SHAPE
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except LdfcError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

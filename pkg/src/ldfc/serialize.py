"""Binary containers.

Model container (.ldfc):

    bytes 0..3    magic "LDFC"
    byte  4       format version, currently 0x01
    bytes 5..12   manifest length M, unsigned 64-bit little-endian
    bytes 13..    manifest, M bytes of canonical UTF-8 JSON
                  (sorted keys, no whitespace)
    then          zero padding up to the first 64-byte-aligned offset
    then          tensor blob

Every tensor is little-endian IEEE-754 (float32, "<f4") or little-endian
int64 ("<i8"), C-contiguous.  Offsets recorded in the manifest are
relative to the blob start and are themselves multiples of 64.

The same framing with magic "LDFD" carries datasets (inputs + integer
labels) and reference packs (inputs + expected outputs); the manifest
"kind" field says which.  Writing is canonical: saving a just-loaded
model reproduces the input bytes exactly.
"""

import json

import numpy as np

from .errors import FormatError, ShapeError
from .graph import (BatchNormParams, Block, NetworkGraph, QuantParams,
                    STRState)
from .tensor import ConvSpec

MODEL_MAGIC = b"LDFC"
DATA_MAGIC = b"LDFD"
VERSION = 1
ALIGN = 64
_DTYPES = {"<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


def _canon_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _aligned(n):
    return (n + ALIGN - 1) // ALIGN * ALIGN


class _BlobWriter:
    def __init__(self):
        self.parts = []
        self.entries = []
        self.offset = 0

    def put(self, name, arr, dtype="<f4"):
        data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        pad = _aligned(self.offset) - self.offset
        if pad:
            self.parts.append(b"\x00" * pad)
            self.offset += pad
        self.entries.append({"name": name, "dtype": dtype,
                             "shape": list(np.shape(arr)),
                             "offset": self.offset, "length": len(data)})
        self.parts.append(data)
        self.offset += len(data)

    def blob(self):
        return b"".join(self.parts)


def _frame(magic, manifest_obj, blob):
    manifest = _canon_json(manifest_obj)
    header_len = 4 + 1 + 8 + len(manifest)
    pad = _aligned(header_len) - header_len
    return b"".join([magic, bytes([VERSION]),
                     len(manifest).to_bytes(8, "little"),
                     manifest, b"\x00" * pad, blob])


def _unframe(data, magic, path=""):
    where = f" in {path}" if path else ""
    if len(data) < 13 or data[:4] != magic:
        raise FormatError(f"bad magic{where}: expected {magic!r}, got "
                          f"{bytes(data[:4])!r}")
    if data[4] != VERSION:
        raise FormatError(f"unsupported format version {data[4]}{where}; "
                          f"this build reads version {VERSION}")
    mlen = int.from_bytes(data[5:13], "little")
    if 13 + mlen > len(data):
        raise FormatError(f"manifest length {mlen} overruns file{where}")
    try:
        manifest = json.loads(data[13:13 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"manifest is not valid JSON{where}: {e}") from e
    blob = data[_aligned(13 + mlen):]
    return manifest, blob


def _read_tensors(manifest, blob, path=""):
    out = {}
    for ent in manifest.get("tensors", []):
        name, dtype = ent["name"], ent["dtype"]
        if dtype not in _DTYPES:
            raise FormatError(f"tensor {name!r}: unsupported dtype {dtype!r}")
        off, length = ent["offset"], ent["length"]
        if off % ALIGN:
            raise FormatError(f"tensor {name!r}: offset {off} is not 64-byte "
                              f"aligned")
        n_expected = int(np.prod(ent["shape"], dtype=np.int64)) if ent["shape"] else 1
        if length != n_expected * _DTYPES[dtype].itemsize:
            raise FormatError(f"tensor {name!r}: length {length} does not match "
                              f"shape {ent['shape']}")
        if off + length > len(blob):
            raise FormatError(f"tensor {name!r}: data overruns blob "
                              f"({off}+{length} > {len(blob)})")
        arr = np.frombuffer(blob[off:off + length], dtype=_DTYPES[dtype])
        out[name] = arr.reshape(ent["shape"]).copy()
    return out


# -- model ------------------------------------------------------------------

def _quant_to_json(q):
    return None if q is None else {"l": q.l, "h": q.h, "bits": q.bits}


def _quant_from_json(d):
    return None if d is None else QuantParams(float(d["l"]), float(d["h"]),
                                              int(d["bits"]))


def save_model(graph: NetworkGraph, path):
    graph.validate()
    w = _BlobWriter()
    blocks = []
    for b in graph.blocks:
        w.put(f"{b.id}.weight", b.conv.weight)
        w.put(f"{b.id}.bias", b.conv.bias)
        if b.batchnorm is not None:
            for name in ("mu", "sigma", "gamma", "beta"):
                w.put(f"{b.id}.bn.{name}", getattr(b.batchnorm, name))
        w.put(f"{b.id}.v_in", b.v_in)
        w.put(f"{b.id}.v_out", b.v_out)
        if b.gen_mu is not None:
            w.put(f"{b.id}.gen.mu", b.gen_mu)
            w.put(f"{b.id}.gen.sigma", b.gen_sigma)
        blocks.append({
            "id": b.id,
            "predecessors": list(b.predecessors),
            "combine": b.combine,
            "activation": b.activation,
            "stride": list(b.conv.stride),
            "padding": list(b.conv.padding),
            "groups": b.conv.groups,
            "pool": list(b.pool) if b.pool is not None else None,
            "bn_eps": b.batchnorm.eps if b.batchnorm is not None else None,
            "weight_quant": _quant_to_json(b.weight_quant),
            "act_quant": _quant_to_json(b.act_quant),
            "str_state": (None if b.str_state is None else
                          {"s": b.str_state.s, "s0": b.str_state.s0,
                           "lambda": b.str_state.lam}),
        })
    manifest = {"kind": "model", "input_shape": list(graph.input_shape),
                "blocks": blocks, "tensors": w.entries}
    with open(path, "wb") as f:
        f.write(_frame(MODEL_MAGIC, manifest, w.blob()))


def load_model(path):
    with open(path, "rb") as f:
        data = f.read()
    manifest, blob = _unframe(data, MODEL_MAGIC, str(path))
    if manifest.get("kind") != "model":
        raise FormatError(f"{path}: kind {manifest.get('kind')!r} is not a model")
    tensors = _read_tensors(manifest, blob, str(path))

    def take(name, required=True):
        if name not in tensors:
            if required:
                raise FormatError(f"{path}: manifest lists no tensor {name!r}")
            return None
        return tensors[name]

    blocks = []
    for d in manifest["blocks"]:
        bid = d["id"]
        if not isinstance(d["activation"], str):
            raise FormatError(f"block {bid!r}: activation must be a string, "
                              f"got {d['activation']!r}")
        conv = ConvSpec(take(f"{bid}.weight"), take(f"{bid}.bias"),
                        tuple(d["stride"]), tuple(d["padding"]),
                        int(d["groups"]), bid)
        bn = None
        if d.get("bn_eps") is not None:
            bn = BatchNormParams(take(f"{bid}.bn.mu"), take(f"{bid}.bn.sigma"),
                                 take(f"{bid}.bn.gamma"), take(f"{bid}.bn.beta"),
                                 float(d["bn_eps"]))
        st = d.get("str_state")
        blocks.append(Block(
            id=bid, conv=conv,
            predecessors=list(d["predecessors"]),
            combine=d["combine"], activation=d["activation"],
            pool=tuple(d["pool"]) if d.get("pool") else None,
            batchnorm=bn,
            v_in=take(f"{bid}.v_in", required=False),
            v_out=take(f"{bid}.v_out", required=False),
            weight_quant=_quant_from_json(d.get("weight_quant")),
            act_quant=_quant_from_json(d.get("act_quant")),
            str_state=(None if st is None else
                       STRState(float(st["s"]), float(st["s0"]),
                                float(st["lambda"]))),
            gen_mu=take(f"{bid}.gen.mu", required=False),
            gen_sigma=take(f"{bid}.gen.sigma", required=False),
        ))
    return NetworkGraph(blocks, tuple(manifest["input_shape"])).finalize()


# -- datasets and reference packs --------------------------------------------

def save_dataset(path, inputs, labels, meta=None):
    if inputs.ndim != 4:
        raise ShapeError(f"dataset inputs must be 4-d, got {inputs.shape}")
    if labels.shape != (inputs.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match "
                         f"{inputs.shape[0]} inputs")
    w = _BlobWriter()
    w.put("inputs", inputs)
    w.put("labels", labels, dtype="<i8")
    manifest = {"kind": "dataset", "tensors": w.entries,
                "meta": meta or {}}
    with open(path, "wb") as f:
        f.write(_frame(DATA_MAGIC, manifest, w.blob()))


def save_refpack(path, inputs, outputs, meta=None):
    if inputs.shape[0] != outputs.shape[0]:
        raise ShapeError(f"refpack inputs/outputs disagree on count: "
                         f"{inputs.shape[0]} vs {outputs.shape[0]}")
    w = _BlobWriter()
    w.put("inputs", inputs)
    w.put("outputs", outputs)
    manifest = {"kind": "refpack", "tensors": w.entries, "meta": meta or {}}
    with open(path, "wb") as f:
        f.write(_frame(DATA_MAGIC, manifest, w.blob()))


def load_data(path):
    """Read a dataset or refpack; returns (kind, tensors dict, meta)."""
    with open(path, "rb") as f:
        data = f.read()
    manifest, blob = _unframe(data, DATA_MAGIC, str(path))
    kind = manifest.get("kind")
    if kind not in ("dataset", "refpack"):
        raise FormatError(f"{path}: unknown data kind {kind!r}")
    tensors = _read_tensors(manifest, blob, str(path))
    want = {"dataset": ("inputs", "labels"), "refpack": ("inputs", "outputs")}
    for name in want[kind]:
        if name not in tensors:
            raise FormatError(f"{path}: {kind} is missing tensor {name!r}")
    return kind, tensors, manifest.get("meta", {})

"""Compressed model files and sparse-path inference.

A sparse model file (magic ``SPM1``) is a list of named blobs.  Each weight
matrix is stored as an SBM1 (bit-mask) or SCM1 (CSR(C)) blob, or as a raw
dense tensor when that is smaller; biases are always dense.  Layout, all
little-endian::

    b"SPM1" | u32 version=1 | u64 entry count
    per entry: u16 name length | name (utf-8) | u8 kind | u64 blob length | blob

``kind`` is 0 for a dense tensor (blob = u8 dtype code, u8 rank, u64 dims,
raw values), 1 for SBM1 and 2 for SCM1.  A JSON sidecar carries the model
config and the footprint report.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sparse_format as sf
from .errors import ParameterError
from .layers import log_softmax
from .tensor import sigmoid

MODEL_MAGIC = b"SPM1"
MODEL_VERSION = 1
KIND_DENSE, KIND_BITMASK, KIND_CSRC = 0, 1, 2
_FMT_KIND = {"dense": KIND_DENSE, "bitmask": KIND_BITMASK, "csrc": KIND_CSRC}
_KIND_FMT = {v: k for k, v in _FMT_KIND.items()}
FORMATS = ("best", "bitmask", "csrc")


def _dense_blob(arr):
    arr = np.ascontiguousarray(arr)
    head = struct.pack("<BB", sf.DTYPE_CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def _parse_dense(blob):
    code, rank = struct.unpack_from("<BB", blob, 0)
    shape = struct.unpack_from(f"<{rank}Q", blob, 2)
    dtype = sf.CODE_DTYPES[code]
    size = int(np.prod(shape, dtype=np.int64))
    arr = np.frombuffer(blob, dtype.newbyteorder("<"), size, 2 + 8 * rank)
    return arr.astype(dtype).reshape(shape)


@dataclass
class TensorReport:
    name: str
    shape: tuple
    format: str
    stored_bytes: int
    footprint: sf.FootprintReport

    def as_dict(self):
        d = {"name": self.name, "shape": list(self.shape), "format": self.format}
        d["stored_bytes"] = self.stored_bytes
        d.update(self.footprint.as_dict())
        return d


@dataclass
class SparseModel:
    entries: dict  # name -> ndarray | BitmaskMatrix | CsrcMatrix
    meta: dict = field(default_factory=dict)

    def dense(self, name):
        v = self.entries[name]
        return v if isinstance(v, np.ndarray) else sf.decode(v)

    def dense_tensors(self):
        return {k: self.dense(k) for k in self.entries}

    def save(self, path):
        path = Path(path)
        out = bytearray(MODEL_MAGIC + struct.pack("<IQ", MODEL_VERSION, len(self.entries)))
        for name, v in self.entries.items():
            if isinstance(v, np.ndarray):
                kind, blob = KIND_DENSE, _dense_blob(v)
            else:
                kind = KIND_BITMASK if isinstance(v, sf.BitmaskMatrix) else KIND_CSRC
                blob = sf.to_bytes(v)
            raw = name.encode("utf-8")
            out += struct.pack("<H", len(raw)) + raw + struct.pack("<BQ", kind, len(blob)) + blob
        path.write_bytes(bytes(out))
        path.with_suffix(".json").write_text(json.dumps(self.meta, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        buf = path.read_bytes()
        if buf[:4] != MODEL_MAGIC:
            raise ValueError(f"{path}: not a sparse model file")
        version, count = struct.unpack_from("<IQ", buf, 4)
        if version != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        off, entries = 16, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2 : off + 2 + n].decode("utf-8")
            off += 2 + n
            kind, length = struct.unpack_from("<BQ", buf, off)
            off += 9
            blob = buf[off : off + length]
            off += length
            entries[name] = _parse_dense(blob) if kind == KIND_DENSE else sf.from_bytes(blob)
        mpath = path.with_suffix(".json")
        meta = json.loads(mpath.read_text()) if mpath.exists() else {}
        return cls(entries, meta)


def _nnz(arr):
    return int(np.count_nonzero(sf._present(arr.ravel())))


def compress_tensors(tensors, masks, fmt="best", count_bits=4):
    """Encode effective weights; returns ``(SparseModel, [TensorReport])``.

    Masked tensors are encoded with ``fmt``; ``best`` picks whichever of
    dense, bit-mask and CSR(C) takes the fewest bytes for each tensor.
    Unmasked tensors (biases) are stored dense.
    """
    if fmt not in FORMATS:
        raise ParameterError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    entries, reports = {}, []
    for name, arr in tensors.items():
        mask = masks.get(name)
        eff = arr if mask is None else np.where(mask, arr, arr.dtype.type(0))
        bpe = eff.dtype.itemsize
        if mask is None or eff.ndim != 2:
            entries[name] = eff.copy()
            fp = sf.footprint(eff.size, eff.size, count_bits, bpe)
            reports.append(TensorReport(name, eff.shape, "dense", fp.dense_bytes, fp))
            continue
        csrc = sf.encode_csrc(eff, count_bits)
        fp = sf.footprint(eff.size, _nnz(eff), count_bits, bpe, csrc.padding_entries())
        choice = fp.best_format if fmt == "best" else fmt
        if choice == "dense":
            entries[name], stored = eff.copy(), fp.dense_bytes
        elif choice == "bitmask":
            entries[name] = sf.encode_bitmask(eff)
            stored = fp.payload_bytes + fp.bitmask_overhead_bytes
        else:
            entries[name] = csrc
            stored = fp.payload_bytes + fp.csrc_overhead_bytes + fp.padding_entries * bpe
        reports.append(TensorReport(name, eff.shape, choice, stored, fp))
    return SparseModel(entries), reports


def summarize(reports, count_bits=4):
    """Whole-model footprint from per-tensor reports.

    ``stored_total_bytes`` sums what each tensor actually costs in its chosen
    format.  ``theoretical`` applies the closed-form accounting to the whole
    model with padding ignored.
    """
    total = sum(r.footprint.total_params for r in reports)
    nnz = sum(r.footprint.nnz for r in reports)
    bpe = reports[0].footprint.bytes_per_elem if reports else 4
    dense = nnz == total
    bitmask = sum(r.footprint.bitmask_overhead_bytes for r in reports if r.format != "dense")
    csrc = sum(r.footprint.csrc_overhead_bytes for r in reports if r.format != "dense")
    theory = sf.footprint(total, nnz, count_bits, bpe)
    return {
        "total_params": total,
        "nnz": nnz,
        "dense_bytes": total * bpe,
        "payload_bytes": nnz * bpe,
        "bitmask_overhead_bytes": None if dense else bitmask,
        "csrc_overhead_bytes": None if dense else csrc,
        "stored_total_bytes": sum(r.stored_bytes for r in reports),
        "best_total_bytes": sum(r.footprint.best_total_bytes for r in reports),
        "theoretical": theory.as_dict(),
    }


def representation_sizes(tensors, masks, count_bits=4):
    """Whole-model byte totals when every masked tensor uses one format."""
    out = {}
    for fmt in FORMATS:
        _, reports = compress_tensors(tensors, masks, fmt, count_bits)
        out[fmt] = sum(r.stored_bytes for r in reports)
    out["dense"] = sum(int(v.nbytes) for v in tensors.values())
    return out


# --- sparse-path inference -----------------------------------------------


def _matmul(entry, x):
    if isinstance(entry, np.ndarray):
        return x @ entry.T
    return sf.spmm(entry, x)


def mlp_logits(model, x, n_hidden):
    """MLP forward pass using the stored (possibly sparse) matrices."""
    e = model.entries
    for i in range(n_hidden):
        x = np.maximum(_matmul(e[f"hidden{i}.weight"], x) + e[f"hidden{i}.bias"], 0)
    return _matmul(e["softmax.projection"], x) + e["softmax.bias"]


def lstm_logits(model, ids, num_layers, forget_bias_offset=1.0):
    """Char-LSTM logits for a single stream ``ids`` (zero initial state)."""
    e = model.entries
    table = model.dense("embedding.table")  # a lookup, not a product
    x = table[np.asarray(ids)][:, None, :]  # [T, 1, h]
    for layer in range(num_layers):
        w = e[f"lstm{layer}.gate_weight"]
        bias = e[f"lstm{layer}.gate_bias"].copy()
        h = bias.size // 4
        bias[h : 2 * h] += forget_bias_offset
        hp = np.zeros((1, h), dtype=x.dtype)
        cp = np.zeros((1, h), dtype=x.dtype)
        outs = []
        for t in range(x.shape[0]):
            a = _matmul(w, np.concatenate([x[t], hp], axis=1)) + bias
            i, f = sigmoid(a[:, :h]), sigmoid(a[:, h : 2 * h])
            g, o = np.tanh(a[:, 2 * h : 3 * h]), sigmoid(a[:, 3 * h :])
            cp = f * cp + i * g
            hp = o * np.tanh(cp)
            outs.append(hp)
        x = np.stack(outs)
    return _matmul(e["softmax.projection"], x[:, 0, :]) + e["softmax.bias"]


def probabilities(logits):
    return np.exp(log_softmax(logits))

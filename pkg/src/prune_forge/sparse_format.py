"""Sparse matrix storage: bit-mask and CSR(C) run-length codecs.

Both codecs work on the flat row-major element stream.  An element counts as
"present" when its bit pattern is nonzero, so ``-0.0`` survives a round trip.

Bit-mask
    one presence bit per element (LSB-first inside each byte) plus the
    present values in row-major order.

CSR(C)
    every stored value carries a ``count_bits``-wide count of the zeros that
    precede it.  A zero run longer than ``2**count_bits - 1`` is split with
    explicit ``0.0`` padding entries; a trailing zero run is closed the same
    way, so ``sum(count + 1) == rows * cols``.

Footprints are reported in bytes; :data:`MB` is 10**6 bytes.
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError, ParameterError

MB = 1_000_000

BITMASK_MAGIC = b"SBM1"
CSRC_MAGIC = b"SCM1"
FORMAT_VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def _present(flat):
    # bit-pattern test: keeps -0.0 as a stored value
    uint = {4: np.uint32, 8: np.uint64}[flat.dtype.itemsize]
    return flat.view(uint) != 0


def _as_2d(dense):
    dense = np.ascontiguousarray(dense)
    if dense.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {dense.shape}")
    if dense.dtype not in DTYPE_CODES:
        raise ParameterError(f"unsupported dtype {dense.dtype}")
    return dense


@dataclass(eq=False)
class BitmaskMatrix:
    rows: int
    cols: int
    presence_bits: np.ndarray  # uint8, ceil(rows*cols/8) bytes
    nonzeros: np.ndarray

    @property
    def nnz(self):
        return int(self.nonzeros.size)

    @property
    def dtype(self):
        return self.nonzeros.dtype

    def presence(self):
        bits = np.unpackbits(self.presence_bits, count=self.rows * self.cols, bitorder="little")
        return bits.astype(bool)

    def positions(self):
        return np.flatnonzero(self.presence())

    def overhead_bytes(self):
        return math.ceil(self.rows * self.cols / 8)


@dataclass(eq=False)
class CsrcMatrix:
    rows: int
    cols: int
    count_bits: int
    counts: np.ndarray  # one count per entry, each < 2**count_bits
    values: np.ndarray  # same length as counts; padding entries hold 0.0

    @property
    def n_entries(self):
        return int(self.counts.size)

    @property
    def dtype(self):
        return self.values.dtype

    def positions(self):
        return np.cumsum(self.counts.astype(np.int64) + 1) - 1

    def padding_entries(self):
        return self.n_entries - int(np.count_nonzero(_present(self.values)))

    def overhead_bytes(self):
        return math.ceil(self.n_entries * self.count_bits / 8)


def encode_bitmask(dense):
    dense = _as_2d(dense)
    flat = dense.ravel()
    present = _present(flat)
    return BitmaskMatrix(
        rows=dense.shape[0],
        cols=dense.shape[1],
        presence_bits=np.packbits(present, bitorder="little"),
        nonzeros=flat[present].copy(),
    )


def decode_bitmask(m):
    out = np.zeros(m.rows * m.cols, dtype=m.dtype)
    out[m.presence()] = m.nonzeros
    return out.reshape(m.rows, m.cols)


def _check_count_bits(count_bits):
    if count_bits not in (4, 5):
        raise ParameterError(f"count_bits must be 4 or 5, got {count_bits}")


def encode_csrc(dense, count_bits=4):
    _check_count_bits(count_bits)
    dense = _as_2d(dense)
    flat = dense.ravel()
    n = flat.size
    span = 1 << count_bits  # positions covered by one saturated padding entry
    pos = np.flatnonzero(_present(flat))
    gaps = np.diff(np.concatenate([[-1], pos])) - 1
    pads = gaps // span

    # each gap -> `pads` saturated padding entries, then the real entry
    reps = pads + 1
    counts = np.full(int(reps.sum()), span - 1, dtype=np.int64)
    values = np.zeros(counts.size, dtype=dense.dtype)
    last = np.cumsum(reps) - 1
    counts[last] = gaps - pads * span
    values[last] = flat[pos]

    tail = n - 1 - (pos[-1] if pos.size else -1)
    if tail > 0:
        full, rem = divmod(tail, span)
        extra = [span - 1] * full + ([rem - 1] if rem else [])
        counts = np.concatenate([counts, np.asarray(extra, dtype=np.int64)])
        values = np.concatenate([values, np.zeros(len(extra), dtype=dense.dtype)])
    return CsrcMatrix(dense.shape[0], dense.shape[1], count_bits, counts.astype(np.uint8), values)


def decode_csrc(m):
    out = np.zeros(m.rows * m.cols, dtype=m.dtype)
    out[m.positions()] = m.values
    return out.reshape(m.rows, m.cols)


def decode(m):
    return decode_bitmask(m) if isinstance(m, BitmaskMatrix) else decode_csrc(m)


def spmv(m, x):
    """Sparse matrix-vector product ``m @ x``.

    Row sums are accumulated in ascending column order.
    """
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != m.cols:
        raise DimensionError(f"spmv: matrix is {m.rows}x{m.cols}, vector has shape {x.shape}")
    if isinstance(m, BitmaskMatrix):
        pos, vals = m.positions(), m.nonzeros
    else:
        pos, vals = m.positions(), m.values
    rows, cols = np.divmod(pos, m.cols)
    y = np.zeros(m.rows, dtype=np.result_type(vals.dtype, x.dtype))
    np.add.at(y, rows, vals * x[cols])
    return y


def spmm(m, x):
    """Batched product ``x @ m.T`` for ``x`` of shape ``[batch, cols]``."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != m.cols:
        raise DimensionError(f"spmm: matrix is {m.rows}x{m.cols}, input has shape {x.shape}")
    pos = m.positions()
    vals = m.nonzeros if isinstance(m, BitmaskMatrix) else m.values
    rows, cols = np.divmod(pos, m.cols)
    out = np.zeros((m.rows, x.shape[0]), dtype=np.result_type(vals.dtype, x.dtype))
    np.add.at(out, rows, vals[:, None] * x[:, cols].T)
    return out.T


@dataclass
class FootprintReport:
    total_params: int
    nnz: int
    count_bits: int
    bytes_per_elem: int
    padding_entries: int
    dense_bytes: int
    payload_bytes: int
    bitmask_overhead_bytes: int
    csrc_overhead_bytes: int
    best_total_bytes: int
    best_format: str

    @property
    def is_dense(self):
        return self.nnz == self.total_params

    def mb(self, field):
        return getattr(self, field) / MB

    def as_dict(self):
        d = asdict(self)
        if self.is_dense:
            # no sparse representation is meaningful for a fully dense tensor
            d["bitmask_overhead_bytes"] = None
            d["csrc_overhead_bytes"] = None
        return d


def footprint(total_params, nnz, count_bits=4, bytes_per_elem=4, padding_entries=0):
    """Byte accounting for storing ``nnz`` of ``total_params`` values.

    With ``padding_entries=0`` this is the idealised CSR(C) figure where the
    overhead is exactly proportional to the nonzero count; pass the padding
    count of an actual encoding to get the real size.  ``best_total_bytes``
    is the cheapest of dense storage, payload + bit-mask and payload +
    CSR(C).
    """
    total_params, nnz = int(total_params), int(nnz)
    if nnz < 0 or total_params < 0:
        raise ParameterError("counts must be non-negative")
    if nnz > total_params:
        raise ParameterError(f"nnz {nnz} exceeds total_params {total_params}")
    dense = total_params * bytes_per_elem
    payload = nnz * bytes_per_elem
    bitmask = math.ceil(total_params / 8)
    csrc = math.ceil((nnz + padding_entries) * count_bits / 8)
    options = [
        ("dense", dense),
        ("bitmask", payload + bitmask),
        ("csrc", payload + csrc + padding_entries * bytes_per_elem),
    ]
    best_format, best = min(options, key=lambda kv: kv[1])
    return FootprintReport(
        total_params=total_params,
        nnz=nnz,
        count_bits=count_bits,
        bytes_per_elem=bytes_per_elem,
        padding_entries=padding_entries,
        dense_bytes=dense,
        payload_bytes=payload,
        bitmask_overhead_bytes=bitmask,
        csrc_overhead_bytes=csrc,
        best_total_bytes=best,
        best_format=best_format,
    )


# --- binary layout -------------------------------------------------------


def pack_counts(counts, count_bits):
    counts = np.asarray(counts, dtype=np.uint8)
    shifts = np.arange(count_bits, dtype=np.uint8)
    bits = (counts[:, None] >> shifts) & 1
    return np.packbits(bits.ravel(), bitorder="little")


def unpack_counts(packed, n, count_bits):
    bits = np.unpackbits(packed, count=n * count_bits, bitorder="little").reshape(n, count_bits)
    weights = (1 << np.arange(count_bits)).astype(np.uint8)
    return (bits * weights).sum(axis=1).astype(np.uint8)


def to_bytes(m):
    """Serialise a :class:`BitmaskMatrix` or :class:`CsrcMatrix` (little-endian)."""
    code = DTYPE_CODES[np.dtype(m.dtype)]
    if isinstance(m, BitmaskMatrix):
        head = BITMASK_MAGIC + struct.pack("<IQQBQ", FORMAT_VERSION, m.rows, m.cols, code, m.nnz)
        body = m.presence_bits.tobytes()
        vals = m.nonzeros
    else:
        head = CSRC_MAGIC + struct.pack(
            "<IQQBBQ", FORMAT_VERSION, m.rows, m.cols, code, m.count_bits, m.n_entries
        )
        body = pack_counts(m.counts, m.count_bits).tobytes()
        vals = m.values
    return head + body + vals.astype(vals.dtype.newbyteorder("<"), copy=False).tobytes()


def from_bytes(buf):
    buf = memoryview(buf)
    magic = bytes(buf[:4])
    if magic == BITMASK_MAGIC:
        version, rows, cols, code, count = struct.unpack_from("<IQQBQ", buf, 4)
        off = 4 + struct.calcsize("<IQQBQ")
        nbits = math.ceil(rows * cols / 8)
        presence = np.frombuffer(buf, np.uint8, nbits, off).copy()
        dtype = CODE_DTYPES[code].newbyteorder("<")
        vals = np.frombuffer(buf, dtype, count, off + nbits).astype(CODE_DTYPES[code])
        _check_version(version)
        return BitmaskMatrix(rows, cols, presence, vals)
    if magic == CSRC_MAGIC:
        version, rows, cols, code, cb, count = struct.unpack_from("<IQQBBQ", buf, 4)
        off = 4 + struct.calcsize("<IQQBBQ")
        nbytes = math.ceil(count * cb / 8)
        counts = unpack_counts(np.frombuffer(buf, np.uint8, nbytes, off), count, cb)
        dtype = CODE_DTYPES[code].newbyteorder("<")
        vals = np.frombuffer(buf, dtype, count, off + nbytes).astype(CODE_DTYPES[code])
        _check_version(version)
        return CsrcMatrix(rows, cols, cb, counts, vals)
    raise ValueError(f"unknown sparse matrix magic {magic!r}")


def _check_version(version):
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported sparse format version {version}")


def encoded_size(m):
    return len(to_bytes(m))


def encode(dense, fmt, count_bits=4):
    if fmt == "bitmask":
        return encode_bitmask(dense)
    if fmt == "csrc":
        return encode_csrc(dense, count_bits)
    raise ParameterError(f"unknown sparse format {fmt!r}")

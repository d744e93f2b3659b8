"""Binary and JSON encodings of :class:`~lnskit.format.LnsTensor`.

Binary layout (all integers little-endian)::

    offset  size        field
    0       4           magic b"LNST"
    4       1           version (1)
    5       1           bitwidth B
    6       4           gamma (u32)
    10      1           granularity (0 per-tensor, 1 per-channel, 2 per-feature)
    11      1           ndim
    12      4*ndim      shape (u32 each)
    ..      4           number of scale groups G (u32)
    ..      ceil(N*(B+1)/8)  packed element records
    ..      8*G         scales (float64)

Each element record is ``B + 1`` bits, packed LSB-first into a continuous
bitstream: bit 0 is the sign (1 = negative), bits ``1 .. B-1`` the exponent
(LSB first), bit ``B`` the zero flag.  Zero elements are written with sign 0
and exponent 0.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError
from .format import Granularity, LnsFormat, LnsTensor

MAGIC = b"LNST"
VERSION = 1
_GRAN_CODES = {
    Granularity.PER_TENSOR: 0,
    Granularity.PER_CHANNEL: 1,
    Granularity.PER_FEATURE: 2,
}
_GRAN_FROM_CODE = {v: k for k, v in _GRAN_CODES.items()}


def _scale_shape(shape: tuple, granularity: Granularity) -> tuple:
    if not shape:
        return ()
    if granularity is Granularity.PER_TENSOR:
        return (1,) * len(shape)
    if granularity is Granularity.PER_CHANNEL:
        return (shape[0],) + (1,) * (len(shape) - 1)
    return (1,) * (len(shape) - 1) + (shape[-1],)


def to_bytes(t: LnsTensor) -> bytes:
    B = t.fmt.bitwidth
    head = struct.pack(
        "<4sBBIBB", MAGIC, VERSION, B, t.fmt.gamma, _GRAN_CODES[t.granularity], t.exponent.ndim
    )
    head += struct.pack(f"<{t.exponent.ndim}I", *t.shape)
    scales = np.ascontiguousarray(t.scales, dtype="<f8").ravel()
    head += struct.pack("<I", scales.size)

    n = t.size
    zero = t.zero.ravel()
    sign = np.where(zero, 0, t.sign.ravel() < 0).astype(np.uint64)
    e = np.where(zero, 0, t.exponent.ravel()).astype(np.uint64)
    rec = sign | (e << np.uint64(1)) | (zero.astype(np.uint64) << np.uint64(B))
    shifts = np.arange(B + 1, dtype=np.uint64)
    bits = ((rec[:, None] >> shifts) & np.uint64(1)).astype(np.uint8).reshape(n * (B + 1))
    payload = np.packbits(bits, bitorder="little").tobytes()
    return head + payload + scales.tobytes()


def from_bytes(buf: bytes) -> LnsTensor:
    try:
        magic, version, B, gamma, gcode, ndim = struct.unpack_from("<4sBBIBB", buf, 0)
    except struct.error as exc:
        raise DataError(f"truncated LNS tensor header: {exc}") from None
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"unsupported version {version}")
    if gcode not in _GRAN_FROM_CODE:
        raise DataError(f"unknown granularity code {gcode}")
    off = 12
    try:
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        (G,) = struct.unpack_from("<I", buf, off)
    except struct.error as exc:
        raise DataError(f"truncated LNS tensor header: {exc}") from None
    off += 4
    fmt = LnsFormat(B, gamma)
    gran = _GRAN_FROM_CODE[gcode]
    n = int(np.prod(shape, dtype=np.int64))
    nbytes = (n * (B + 1) + 7) // 8
    if len(buf) != off + nbytes + 8 * G:
        raise DataError("LNS tensor payload has the wrong length")
    bits = np.unpackbits(
        np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=off), bitorder="little"
    )[: n * (B + 1)].reshape(n, B + 1).astype(np.uint64)
    rec = (bits << np.arange(B + 1, dtype=np.uint64)).sum(axis=1, dtype=np.uint64)
    off += nbytes
    scales = np.frombuffer(buf, dtype="<f8", count=G, offset=off).astype(np.float64)

    zero = ((rec >> np.uint64(B)) & np.uint64(1)).astype(bool)
    sign = np.where(rec & np.uint64(1), -1, 1).astype(np.int8)
    e = ((rec >> np.uint64(1)) & np.uint64(fmt.max_exponent)).astype(np.int64)
    return LnsTensor(
        sign.reshape(shape), e.reshape(shape), zero.reshape(shape), fmt,
        scales.reshape(_scale_shape(tuple(shape), gran)), gran,
    )


def to_json(t: LnsTensor) -> str:
    """Human-readable dump; not meant to be compact."""
    doc = {
        "bitwidth": t.fmt.bitwidth,
        "gamma": t.fmt.gamma,
        "granularity": t.granularity.value,
        "shape": list(t.shape),
        "scales": t.scales.ravel().tolist(),
        "sign": t.sign.ravel().astype(int).tolist(),
        "exponent": t.exponent.ravel().astype(int).tolist(),
        "zero": t.zero.ravel().astype(bool).tolist(),
        "decoded": t.decode().ravel().tolist(),
    }
    return json.dumps(doc, indent=1)


def from_json(text: str) -> LnsTensor:
    doc = json.loads(text)
    shape = tuple(doc["shape"])
    gran = Granularity(doc["granularity"])
    return LnsTensor(
        np.array(doc["sign"], dtype=np.int8).reshape(shape),
        np.array(doc["exponent"], dtype=np.int64).reshape(shape),
        np.array(doc["zero"], dtype=bool).reshape(shape),
        LnsFormat(doc["bitwidth"], doc["gamma"]),
        np.array(doc["scales"], dtype=np.float64).reshape(_scale_shape(shape, gran)),
        gran,
    )


def save(path, t: LnsTensor) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(t))


def load(path) -> LnsTensor:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())

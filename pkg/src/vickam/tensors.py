"""Dense float32 tensors, the VKT1 file format and a portable seeded fill.

Tensors are plain C-contiguous ``numpy.float32`` arrays of rank 1 to 4,
row-major with the channel axis last.  Nothing here wraps ndarray.

VKT1 layout (all little-endian)::

    b"VKT1" | rank:u8 | dims: rank x u32 | payload: numel x f32

Random fill
-----------
``seeded_fill`` draws from the SplitMix64 output function applied to a
counter, so element ``i`` depends only on ``(seed, i)``::

    z_i = mix64(seed + (i + 1) * 0x9E3779B97F4A7C15)   (mod 2**64)

``uniform``: ``(2 * (z_i >> 40) + 1) / 2**24 - 1``.  The 24 high bits give
an odd numerator below 2**24, so the value is exact in float32 and lies in
the open interval (-1, 1).

``gaussian``: Box-Muller on the pair ``(z_{2i}, z_{2i+1})`` with 53-bit
uniforms ``((z >> 11) + 0.5) / 2**53``; the cosine branch is used, computed
in float64, scaled by sigma and rounded once to float32.
"""

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ShapeError

MAGIC = b"VKT1"
MAX_RANK = 4

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def as_tensor(a, name="tensor"):
    """Coerce to a C-contiguous float32 array and check rank and finiteness."""
    t = np.ascontiguousarray(a, dtype=np.float32)
    if not 1 <= t.ndim <= MAX_RANK:
        raise ShapeError(f"{name}: unsupported rank {t.ndim} (expected 1..{MAX_RANK})")
    if any(d < 1 for d in t.shape):
        raise ShapeError(f"{name}: all extents must be positive, got {t.shape}")
    if not np.all(np.isfinite(t)):
        raise NumericError(f"{name}: contains non-finite values")
    return t


def write_tensor(t, path):
    t = as_tensor(t)
    header = MAGIC + struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(t.astype("<f4", copy=False).tobytes(order="C"))
    except OSError as exc:
        raise OSError(f"cannot write tensor to {path}: {exc}") from exc


def read_tensor(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read tensor file: {exc.strerror}", path=path) from exc
    if len(raw) < 5 or raw[:4] != MAGIC:
        raise FormatError("not a VKT1 file", path=path)
    rank = raw[4]
    if rank == 0 or rank > MAX_RANK:
        raise FormatError(f"unsupported rank {rank}", path=path)
    head = 5 + 4 * rank
    if len(raw) < head:
        raise FormatError("size mismatch: truncated header", path=path)
    dims = struct.unpack(f"<{rank}I", raw[5:head])
    numel = int(np.prod(dims, dtype=np.int64))
    if len(raw) - head != 4 * numel:
        raise FormatError(
            f"size mismatch: dims {dims} need {4 * numel} payload bytes, found {len(raw) - head}",
            path=path,
        )
    data = np.frombuffer(raw, dtype="<f4", offset=head, count=numel)
    return data.astype(np.float32).reshape(dims)


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def splitmix_stream(seed, n, offset=0):
    """``n`` raw 64-bit outputs for counters ``offset .. offset+n-1``."""
    base = np.uint64(int(seed) & _MASK64)
    idx = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix64(base + idx * _GAMMA)


def seeded_fill(dims, seed, dist="uniform", sigma=1.0):
    """Deterministic tensor of shape ``dims``; see the module docstring.

    ``dist`` is ``"uniform"`` (on (-1, 1)) or ``"gaussian"`` (mean 0,
    standard deviation ``sigma``).
    """
    dims = tuple(int(d) for d in np.atleast_1d(dims))
    if not 1 <= len(dims) <= MAX_RANK or any(d < 1 for d in dims):
        raise ShapeError(f"invalid dims {dims}")
    n = int(np.prod(dims))
    if dist == "uniform":
        hi = (splitmix_stream(seed, n) >> np.uint64(40)).astype(np.float64)
        out = (2.0 * hi + 1.0) / float(1 << 24) - 1.0
    elif dist == "gaussian":
        z = splitmix_stream(seed, 2 * n)
        u = ((z >> np.uint64(11)).astype(np.float64) + 0.5) / float(1 << 53)
        u1, u2 = u[0::2], u[1::2]
        out = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2) * float(sigma)
        out = out + 0.0  # normalise -0.0
    else:
        raise ValueError(f"unknown distribution {dist!r}")
    return out.astype(np.float32).reshape(dims)


def derive_seed(seed, *keys):
    """Stable 64-bit sub-seed from a parent seed and integer/string keys."""
    h = hashlib.sha256(str(int(seed) & _MASK64).encode())
    for k in keys:
        h.update(b"\x00")
        h.update(str(k).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")

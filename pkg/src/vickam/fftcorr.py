"""Action maps by FFT cross-correlation, a spatial oracle and a benchmark.

Index convention (both backends)::

    out[u, v] = (1/C) * sum_{a, b, c} X[u + a - q, v + b - q, c] * P[a, b, c],   q = p // 2

with ``X`` read as zero outside its bounds, so a prototype that matches the
patch centred at ``(u, v)`` peaks at ``(u, v)``.

The FFT path pads ``X`` and ``P`` to at least ``(h + p - 1, w + p - 1)``,
multiplies ``FFT(X_c)`` by ``conj(FFT(P_c))``, sums over channels, inverts,
undoes the ``q`` offset circularly and crops to ``h x w``.  Summing channel
spectra before the inverse is the same as averaging per-channel maps.
"""

import statistics
import time

import numpy as np
import scipy.fft as sfft

from .errors import ShapeError
from .tensors import seeded_fill


def fft2d(grid):
    """Unnormalised forward 2-D DFT of a real or complex ``H x W`` grid."""
    return sfft.fft2(np.asarray(grid, dtype=np.float64 if np.isrealobj(grid) else np.complex128))


def ifft2d(spec):
    """Inverse of :func:`fft2d` (applies ``1 / (H * W)``)."""
    return sfft.ifft2(np.asarray(spec, dtype=np.complex128))


def _check_pair(x, pk):
    x = np.asarray(x)
    pk = np.asarray(pk)
    if x.ndim != 3 or pk.ndim != 3:
        raise ShapeError(f"expected X (h,w,C) and P (p,p,C), got {x.shape} and {pk.shape}")
    h, w, c = x.shape
    p = pk.shape[0]
    if pk.shape[1] != p:
        raise ShapeError(f"prototype must be square, got {pk.shape}")
    if pk.shape[2] != c:
        raise ShapeError(f"channel mismatch: X {x.shape} vs P {pk.shape}")
    if p > min(h, w):
        raise ShapeError(f"prototype {pk.shape} larger than feature map {x.shape}")
    return x.astype(np.float64), pk.astype(np.float64)


def xcorr_naive(x, pk):
    """Spatial-domain correlation, one shifted multiply-add per template cell."""
    x, pk = _check_pair(x, pk)
    h, w, c = x.shape
    p = pk.shape[0]
    q = p // 2
    xp = np.zeros((h + p - 1, w + p - 1, c))
    xp[q:q + h, q:q + w] = x
    out = np.zeros((h, w))
    for a in range(p):
        for b in range(p):
            out += xp[a:a + h, b:b + w] @ pk[a, b]
    return out / c


def padded_shape(h, w, p):
    return (sfft.next_fast_len(h + p - 1, real=True), sfft.next_fast_len(w + p - 1, real=True))


def _fft_maps(xs, protos):
    """Core FFT path. ``xs`` is (N,h,w,C), ``protos`` (K,p,p,C); returns (N,K,h,w) float64."""
    n, h, w, c = xs.shape
    p = protos.shape[1]
    q = p // 2
    shape = padded_shape(h, w, p)
    fx = sfft.rfft2(xs, s=shape, axes=(1, 2))
    fp = np.conj(sfft.rfft2(protos, s=shape, axes=(1, 2)))
    prod = np.einsum("nijc,kijc->nkij", fx, fp)
    corr = sfft.irfft2(prod, s=shape, axes=(2, 3))
    rows = (np.arange(h) - q) % shape[0]
    cols = (np.arange(w) - q) % shape[1]
    out = corr[:, :, rows][:, :, :, cols]
    return out / c


def xcorr_fft(x, pk):
    """Same result as :func:`xcorr_naive`, computed through the correlation theorem."""
    x, pk = _check_pair(x, pk)
    return _fft_maps(x[None], pk[None])[0, 0]


def _check_stack(xs, protos):
    xs = np.asarray(xs)
    protos = np.asarray(protos)
    if protos.ndim != 4 or protos.shape[0] == 0:
        raise ShapeError(f"prototype bank must be (K_a,p,p,C) with K_a >= 1, got {protos.shape}")
    if xs.ndim != 4:
        raise ShapeError(f"feature maps must be (N,h,w,C), got {xs.shape}")
    _check_pair(xs[0], protos[0])
    return xs.astype(np.float64), protos.astype(np.float64)


def zscore_maps(maps):
    """Standardise each (h,w) map to zero mean and unit variance; flat maps become zeros."""
    maps = np.asarray(maps, dtype=np.float64)
    mu = maps.mean(axis=(-2, -1), keepdims=True)
    sd = maps.std(axis=(-2, -1), keepdims=True)
    safe = np.where(sd > 0, sd, 1.0)
    return np.where(sd > 0, (maps - mu) / safe, 0.0)


def gen_action_maps(x, bank, zscore=False):
    """Action-map stack ``(K_a, h, w)`` for one feature map.

    ``bank`` may be a :class:`~vickam.prototypes.PrototypeBank` or a raw
    ``(K_a, p, p, C)`` array.  The result is float32.
    """
    protos = getattr(bank, "prototypes", bank)
    return action_maps_batch(np.asarray(x)[None], protos, zscore=zscore)[0]


def action_maps_batch(xs, protos, zscore=False, chunk=64):
    """Vectorised :func:`gen_action_maps` over a batch ``(N, h, w, C)``."""
    protos = getattr(protos, "prototypes", protos)
    xs, protos = _check_stack(xs, protos)
    parts = [_fft_maps(xs[i:i + chunk], protos) for i in range(0, xs.shape[0], chunk)]
    out = np.concatenate(parts, axis=0)
    if zscore:
        out = zscore_maps(out)
    return out.astype(np.float32)


def _median_ns(fn, repeats):
    times = []
    result = None
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter_ns()
        result = fn()
        times.append(time.perf_counter_ns() - t0)
    return int(statistics.median(times)), result


def bench_corr(h, w, C, p, K_a=1, repeats=5, seed=0):
    """Time the naive and FFT backends on identical seeded inputs.

    Returns one dict per backend with keys ``backend, h, w, C, p, K_a,
    median_ns, agreement, macs, speedup``.  ``macs`` is exact for the naive
    backend and a ``2.5 N log2 N`` per-FFT estimate for the FFT backend;
    ``speedup`` is naive median time over this backend's median time.
    """
    x = seeded_fill((h, w, C), seed)
    protos = seeded_fill((K_a, p, p, C), seed + 1)

    def run_naive():
        return np.stack([xcorr_naive(x, protos[k]) for k in range(K_a)])

    def run_fft():
        return _fft_maps(x[None].astype(np.float64), protos.astype(np.float64))[0]

    ref = run_naive()
    got = run_fft()
    agreement = bool(np.max(np.abs(got - ref)) <= 1e-6 * (1.0 + np.max(np.abs(ref))))

    t_naive, _ = _median_ns(run_naive, repeats)
    t_fft, _ = _median_ns(run_fft, repeats)

    H, W = padded_shape(h, w, p)
    per_fft = 2.5 * H * W * np.log2(H * W)
    macs_fft = int(per_fft * (C + K_a * C + K_a) + K_a * C * H * (W // 2 + 1))
    macs_naive = int(K_a * h * w * p * p * C)
    common = {"h": h, "w": w, "C": C, "p": p, "K_a": K_a, "agreement": agreement}
    return [
        {"backend": "naive", **common, "median_ns": t_naive, "macs": macs_naive, "speedup": 1.0},
        {"backend": "fft", **common, "median_ns": t_fft, "macs": macs_fft,
         "speedup": t_naive / max(t_fft, 1)},
    ]

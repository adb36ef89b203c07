"""Hot numeric kernels: 2-D convolution, masked category pooling, node scatter.

Every kernel has a pure-numpy implementation and a numba ``@njit`` twin with
identical semantics (including argmax tie breaking: first pixel in row-major
order wins). The default ``auto`` backend routes each kernel to whichever
implementation measures faster at desk scale: pooling and scatter loops go
to numba (numpy has no vectorized form and loses 10-30x), while the blocked
convolution stays on numpy, whose zero-copy strided views feed BLAS directly
(the jitted twin must pack windows first and the two paths are bitwise
equal). Set ``GRAPY_BACKEND=numpy`` to force the pure-numpy fallback
everywhere, or ``GRAPY_BACKEND=numba`` to force every kernel through numba
(ImportError when numba is missing). ``benchmarks/bench_backends.py`` times
each kernel pair against the other.
"""

from __future__ import annotations

import os

import numpy as np

_CHOICES = ("auto", "numba", "numpy")
_MODE = os.environ.get("GRAPY_BACKEND", "auto").strip().lower() or "auto"
if _MODE not in _CHOICES:
    raise ValueError(f"GRAPY_BACKEND must be one of {_CHOICES}, got {_MODE!r}")

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False
    if _MODE == "numba":
        raise

USE_NUMBA = HAVE_NUMBA and _MODE != "numpy"
# conv runs on the numpy BLAS path unless numba is explicitly forced
_CONV_NUMBA = HAVE_NUMBA and _MODE == "numba"


def conv_output_size(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


# ---------------------------------------------------------------------------
# 2-D convolution (cross-correlation), HWC layout, kernel (kh, kw, cin, cout)
# ---------------------------------------------------------------------------

def _conv2d_forward_np(xp, k, stride, ho, wo):
    kh, kw, cin, cout = k.shape
    out = np.zeros((ho, wo, cout), xp.dtype)
    for dy in range(kh):
        for dx in range(kw):
            win = xp[dy : dy + (ho - 1) * stride + 1 : stride,
                     dx : dx + (wo - 1) * stride + 1 : stride]
            out += win @ k[dy, dx]
    return out


def _conv2d_backward_input_np(g, k, stride, hp, wp):
    kh, kw, cin, cout = k.shape
    ho, wo = g.shape[:2]
    gxp = np.zeros((hp, wp, cin), g.dtype)
    for dy in range(kh):
        for dx in range(kw):
            gxp[dy : dy + (ho - 1) * stride + 1 : stride,
                dx : dx + (wo - 1) * stride + 1 : stride] += g @ k[dy, dx].T
    return gxp


def _conv2d_backward_kernel_np(xp, g, stride, kh, kw):
    ho, wo, cout = g.shape
    cin = xp.shape[2]
    gk = np.zeros((kh, kw, cin, cout), g.dtype)
    for dy in range(kh):
        for dx in range(kw):
            win = xp[dy : dy + (ho - 1) * stride + 1 : stride,
                     dx : dx + (wo - 1) * stride + 1 : stride]
            gk[dy, dx] = np.tensordot(win, g, axes=([0, 1], [0, 1]))
    return gk


if HAVE_NUMBA:
    # same shifted-block scheme as the numpy path, jitted so the slicing,
    # packing and accumulation loops fuse; the inner products stay on BLAS

    @njit(cache=True, nogil=True)
    def _conv2d_forward_nb(xp, k, stride, ho, wo):
        kh, kw, cin, cout = k.shape
        out = np.zeros((ho * wo, cout), xp.dtype)
        for dy in range(kh):
            for dx in range(kw):
                win = np.ascontiguousarray(
                    xp[dy : dy + (ho - 1) * stride + 1 : stride,
                       dx : dx + (wo - 1) * stride + 1 : stride]).reshape(ho * wo, cin)
                out += np.dot(win, np.ascontiguousarray(k[dy, dx]))
        return out.reshape(ho, wo, cout)

    @njit(cache=True, nogil=True)
    def _conv2d_backward_input_nb(g, k, stride, hp, wp):
        kh, kw, cin, cout = k.shape
        ho, wo = g.shape[:2]
        g2 = np.ascontiguousarray(g).reshape(ho * wo, cout)
        gxp = np.zeros((hp, wp, cin), g.dtype)
        for dy in range(kh):
            for dx in range(kw):
                contrib = np.dot(g2, np.ascontiguousarray(k[dy, dx].T)).reshape(ho, wo, cin)
                gxp[dy : dy + (ho - 1) * stride + 1 : stride,
                    dx : dx + (wo - 1) * stride + 1 : stride] += contrib
        return gxp

    @njit(cache=True, nogil=True)
    def _conv2d_backward_kernel_nb(xp, g, stride, kh, kw):
        ho, wo, cout = g.shape
        cin = xp.shape[2]
        g2 = np.ascontiguousarray(g).reshape(ho * wo, cout)
        gk = np.zeros((kh, kw, cin, cout), g.dtype)
        for dy in range(kh):
            for dx in range(kw):
                win = np.ascontiguousarray(
                    xp[dy : dy + (ho - 1) * stride + 1 : stride,
                       dx : dx + (wo - 1) * stride + 1 : stride]).reshape(ho * wo, cin)
                gk[dy, dx] = np.dot(win.T.copy(), g2)
        return gk


def _pad_hwc(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((pad, pad), (pad, pad), (0, 0)))


def conv2d_forward(x, k, stride, pad):
    ho, wo = conv_output_size(x.shape[0], x.shape[1], k.shape[0], k.shape[1], stride, pad)
    xp = _pad_hwc(x, pad)
    k = np.ascontiguousarray(k)
    if _CONV_NUMBA:
        return _conv2d_forward_nb(xp, k, stride, ho, wo)
    with np.errstate(over="ignore"):  # overflow surfaces as a NumericsError upstream
        return _conv2d_forward_np(xp, k, stride, ho, wo)


def conv2d_backward_input(g, k, stride, pad, h, w):
    hp, wp = h + 2 * pad, w + 2 * pad
    g = np.ascontiguousarray(g)
    k = np.ascontiguousarray(k)
    if _CONV_NUMBA:
        gxp = _conv2d_backward_input_nb(g, k, stride, hp, wp)
    else:
        gxp = _conv2d_backward_input_np(g, k, stride, hp, wp)
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[pad : pad + h, pad : pad + w])


def conv2d_backward_kernel(x, g, stride, pad, kh, kw):
    xp = _pad_hwc(x, pad)
    g = np.ascontiguousarray(g)
    if _CONV_NUMBA:
        return _conv2d_backward_kernel_nb(xp, g, stride, kh, kw)
    return _conv2d_backward_kernel_np(xp, g, stride, kh, kw)


# ---------------------------------------------------------------------------
# Masked category pooling: per-category mean and max over a label map
# ---------------------------------------------------------------------------

def _masked_pool_np(f2, labels, k):
    p, c = f2.shape
    sums = np.zeros((k, c), f2.dtype)
    np.add.at(sums, labels, f2)
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    maxv = np.zeros((k, c), f2.dtype)
    argi = np.zeros((k, c), np.int64)
    for kk in range(k):
        idx = np.nonzero(labels == kk)[0]
        if idx.size:
            block = f2[idx]
            am = block.argmax(axis=0)
            maxv[kk] = block[am, np.arange(c)]
            argi[kk] = idx[am]
    return sums, counts, maxv, argi


def _masked_pool_backward_np(gave, gmax, labels, counts, argi):
    k, c = gave.shape
    p = labels.shape[0]
    inv = np.zeros(k, gave.dtype)
    nz = counts > 0
    inv[nz] = 1.0 / counts[nz]
    gf2 = (gave * inv[:, None])[labels]
    rows = argi[nz].reshape(-1)
    cols = np.tile(np.arange(c), int(nz.sum()))
    np.add.at(gf2, (rows, cols), gmax[nz].reshape(-1))
    return gf2


if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _masked_pool_nb(f2, labels, k):
        p, c = f2.shape
        sums = np.zeros((k, c), f2.dtype)
        counts = np.zeros(k, np.int64)
        maxv = np.zeros((k, c), f2.dtype)
        argi = np.zeros((k, c), np.int64)
        started = np.zeros(k, np.bool_)
        for i in range(p):
            kk = labels[i]
            counts[kk] += 1
            if not started[kk]:
                started[kk] = True
                for cc in range(c):
                    sums[kk, cc] += f2[i, cc]
                    maxv[kk, cc] = f2[i, cc]
                    argi[kk, cc] = i
            else:
                for cc in range(c):
                    v = f2[i, cc]
                    sums[kk, cc] += v
                    if v > maxv[kk, cc]:
                        maxv[kk, cc] = v
                        argi[kk, cc] = i
        return sums, counts, maxv, argi

    @njit(cache=True, nogil=True)
    def _masked_pool_backward_nb(gave, gmax, labels, counts, argi):
        k, c = gave.shape
        p = labels.shape[0]
        inv = np.zeros(k, gave.dtype)  # reciprocal first, bitwise equal to numpy path
        for kk in range(k):
            if counts[kk] > 0:
                inv[kk] = 1.0 / counts[kk]
        gf2 = np.zeros((p, c), gave.dtype)
        for i in range(p):
            kk = labels[i]
            for cc in range(c):
                gf2[i, cc] += gave[kk, cc] * inv[kk]
        for kk in range(k):
            if counts[kk] > 0:
                for cc in range(c):
                    gf2[argi[kk, cc], cc] += gmax[kk, cc]
        return gf2


def masked_pool_forward(f, labels, k):
    """Per-category sums, counts, channelwise max and argmax over ``labels``.

    ``f`` is (H, W, C); ``labels`` is a (H, W) int map with values in [0, k).
    Empty categories get zero sums/max and count 0.
    """
    c = f.shape[2]
    f2 = np.ascontiguousarray(f.reshape(-1, c))
    lab = np.ascontiguousarray(labels.reshape(-1), dtype=np.int64)
    if USE_NUMBA:
        return _masked_pool_nb(f2, lab, k)
    return _masked_pool_np(f2, lab, k)


def masked_pool_backward(gave, gmax, labels, counts, argi, shape):
    lab = np.ascontiguousarray(labels.reshape(-1), dtype=np.int64)
    gave = np.ascontiguousarray(gave)
    gmax = np.ascontiguousarray(gmax)
    if USE_NUMBA:
        gf2 = _masked_pool_backward_nb(gave, gmax, lab, counts, argi)
    else:
        gf2 = _masked_pool_backward_np(gave, gmax, lab, counts, argi)
    return gf2.reshape(shape)


# ---------------------------------------------------------------------------
# Node scatter: broadcast one row per category onto its pixels, and its adjoint
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _gather_rows_nb(w, labels, h, wid):
        c = w.shape[1]
        out = np.zeros((h, wid, c), w.dtype)
        for i in range(h):
            for j in range(wid):
                kk = labels[i, j]
                for cc in range(c):
                    out[i, j, cc] = w[kk, cc]
        return out

    @njit(cache=True, nogil=True)
    def _scatter_rows_nb(g2, labels, k):
        p, c = g2.shape
        gw = np.zeros((k, c), g2.dtype)
        for i in range(p):
            kk = labels[i]
            for cc in range(c):
                gw[kk, cc] += g2[i, cc]
        return gw


def gather_rows(w, labels):
    lab = np.ascontiguousarray(labels, dtype=np.int64)
    if USE_NUMBA:
        return _gather_rows_nb(np.ascontiguousarray(w), lab, lab.shape[0], lab.shape[1])
    return w[lab]


def scatter_rows(g, labels, k):
    c = g.shape[2]
    g2 = np.ascontiguousarray(g.reshape(-1, c))
    lab = np.ascontiguousarray(labels.reshape(-1), dtype=np.int64)
    if USE_NUMBA:
        return _scatter_rows_nb(g2, lab, k)
    gw = np.zeros((k, c), g.dtype)
    np.add.at(gw, lab, g2)
    return gw

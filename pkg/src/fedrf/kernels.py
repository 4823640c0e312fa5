"""Inner loops of the 1-D convolution.

Every kernel works on channel-major batched ``(C, B, T)`` arrays and a per-tap integer
offset vector: output sample ``t`` of tap ``k`` reads input sample
``t + offsets[k]``; reads outside ``[0, T)`` are zeros.

Two implementations exist. The numpy path gathers the taps into a contiguous
im2col matrix and does a single BLAS matmul; the numba path is plain loops
compiled with ``@njit``. Set ``FEDRF_NUMBA=1`` to select numba. The default is
numpy because BLAS is 10-40x faster at every layer shape this package uses
(``benchmarks/bench_conv.py`` measures both). Each path has a fixed reduction
order, so results reproduce within a path; the two paths agree to float
rounding but are not bit-identical.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

_FLAG = os.environ.get("FEDRF_NUMBA", "0").strip().lower()
if _FLAG in ("1", "true", "yes", "on"):
    if not HAS_NUMBA:
        raise ImportError("FEDRF_NUMBA=1 but numba is not importable")
    BACKEND = "numba"
else:
    BACKEND = "numpy"


def _tap_range(off: int, T: int) -> tuple[int, int]:
    return max(0, -off), min(T, T - off)


# ---------------------------------------------------------------- numpy path


def _pointwise(offsets) -> bool:
    return len(offsets) == 1 and offsets[0] == 0


def _im2col(x, offsets):
    """Stack shifted copies of ``x`` into a contiguous ``(K*Ci, B*T)`` matrix."""
    Ci, B, T = x.shape
    if _pointwise(offsets):
        return x.reshape(Ci, B * T)
    K = len(offsets)
    col = np.zeros((K, Ci, B, T), dtype=x.dtype)
    for k, off in enumerate(offsets):
        lo, hi = _tap_range(int(off), T)
        if hi > lo:
            col[k, :, :, lo:hi] = x[:, :, lo + off : hi + off]
    return col.reshape(K * Ci, B * T)


def conv_forward_np(x, w, offsets):
    Ci, B, T = x.shape
    Co, _, K = w.shape
    w2 = np.ascontiguousarray(w.transpose(0, 2, 1)).reshape(Co, K * Ci)
    return (w2 @ _im2col(x, offsets)).reshape(Co, B, T)


def conv_backward_input_np(gy, w, offsets):
    Co, B, T = gy.shape
    _, Ci, K = w.shape
    w2 = np.ascontiguousarray(w.transpose(2, 1, 0)).reshape(K * Ci, Co)
    gcol = w2 @ gy.reshape(Co, B * T)
    if _pointwise(offsets):
        return gcol.reshape(Ci, B, T)
    gcol = gcol.reshape(K, Ci, B, T)
    gx = np.zeros((Ci, B, T), dtype=gy.dtype)
    for k, off in enumerate(offsets):
        lo, hi = _tap_range(int(off), T)
        if hi > lo:
            gx[:, :, lo + off : hi + off] += gcol[k, :, :, lo:hi]
    return gx


def conv_backward_weight_np(gy, x, offsets):
    Co, B, T = gy.shape
    Ci = x.shape[0]
    K = len(offsets)
    gw = gy.reshape(Co, B * T) @ _im2col(x, offsets).T
    return np.ascontiguousarray(gw.reshape(Co, K, Ci).transpose(0, 2, 1))


# ---------------------------------------------------------------- numba path

if HAS_NUMBA:

    @njit(cache=True)
    def _conv_forward_nb(x, w, offsets, y):
        Ci, B, T = x.shape
        Co, _, K = w.shape
        for co in range(Co):
            for ci in range(Ci):
                for k in range(K):
                    off = offsets[k]
                    lo = max(0, -off)
                    hi = min(T, T - off)
                    wk = w[co, ci, k]
                    for b in range(B):
                        for t in range(lo, hi):
                            y[co, b, t] += wk * x[ci, b, t + off]

    @njit(cache=True)
    def _conv_backward_input_nb(gy, w, offsets, gx):
        Co, B, T = gy.shape
        _, Ci, K = w.shape
        for ci in range(Ci):
            for co in range(Co):
                for k in range(K):
                    off = offsets[k]
                    lo = max(0, -off)
                    hi = min(T, T - off)
                    wk = w[co, ci, k]
                    for b in range(B):
                        for t in range(lo, hi):
                            gx[ci, b, t + off] += wk * gy[co, b, t]

    @njit(cache=True)
    def _conv_backward_weight_nb(gy, x, offsets, gw):
        Co, B, T = gy.shape
        Ci = x.shape[0]
        K = offsets.shape[0]
        for co in range(Co):
            for ci in range(Ci):
                for k in range(K):
                    off = offsets[k]
                    lo = max(0, -off)
                    hi = min(T, T - off)
                    acc = 0.0
                    for b in range(B):
                        for t in range(lo, hi):
                            acc += gy[co, b, t] * x[ci, b, t + off]
                    gw[co, ci, k] = acc


def conv_forward_nb(x, w, offsets):
    y = np.zeros((w.shape[0],) + x.shape[1:], dtype=x.dtype)
    _conv_forward_nb(np.ascontiguousarray(x), np.ascontiguousarray(w), offsets, y)
    return y


def conv_backward_input_nb(gy, w, offsets):
    gx = np.zeros((w.shape[1],) + gy.shape[1:], dtype=gy.dtype)
    _conv_backward_input_nb(np.ascontiguousarray(gy), np.ascontiguousarray(w), offsets, gx)
    return gx


def conv_backward_weight_nb(gy, x, offsets):
    gw = np.zeros((gy.shape[0], x.shape[0], len(offsets)), dtype=gy.dtype)
    _conv_backward_weight_nb(np.ascontiguousarray(gy), np.ascontiguousarray(x), offsets, gw)
    return gw


# ---------------------------------------------------------------- dispatch


def conv_forward(x, w, offsets):
    offsets = np.asarray(offsets, dtype=np.int64)
    if BACKEND == "numba":
        return conv_forward_nb(x, w, offsets)
    return conv_forward_np(x, w, offsets)


def conv_backward_input(gy, w, offsets):
    offsets = np.asarray(offsets, dtype=np.int64)
    if BACKEND == "numba":
        return conv_backward_input_nb(gy, w, offsets)
    return conv_backward_input_np(gy, w, offsets)


def conv_backward_weight(gy, x, offsets):
    offsets = np.asarray(offsets, dtype=np.int64)
    if BACKEND == "numba":
        return conv_backward_weight_nb(gy, x, offsets)
    return conv_backward_weight_np(gy, x, offsets)

"""Patch extraction / scatter kernels behind conv2d.

Two interchangeable backends:

* ``numba``  -- ``@njit`` loops (default when numba imports cleanly)
* ``numpy``  -- strided views and slice accumulation

Select with ``TRAJFUSE_KERNELS=numpy`` (or ``numba``).  Both backends
accumulate in the same per-element order, so their outputs agree bitwise.
"""
import os

import numpy as np

_REQUESTED = os.environ.get("TRAJFUSE_KERNELS", "numba").strip().lower()
if _REQUESTED not in ("numba", "numpy"):
    raise ImportError(f"TRAJFUSE_KERNELS must be 'numba' or 'numpy', got {_REQUESTED!r}")

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------

def im2col_numpy(xp, kh, kw, stride, ho, wo):
    """(B, C, Hp, Wp) padded input -> (B, C*kh*kw, ho*wo) patch matrix."""
    b, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # win: (B, C, ho, wo, kh, kw) -> (B, C, kh, kw, ho, wo)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(b, c * kh * kw, ho * wo)


def col2im_numpy(cols, c, hp, wp, kh, kw, stride, ho, wo):
    """Adjoint of :func:`im2col_numpy`: scatter-add patches into (B, C, hp, wp)."""
    b = cols.shape[0]
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    out = np.zeros((b, c, hp, wp))
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += cols[:, :, ki, kj]
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xp, kh, kw, stride, ho, wo):
        b, c = xp.shape[0], xp.shape[1]
        cols = np.empty((b, c * kh * kw, ho * wo))
        for n in range(b):
            for ch in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ch * kh + ki) * kw + kj
                        for i in range(ho):
                            src = i * stride + ki
                            for j in range(wo):
                                cols[n, row, i * wo + j] = xp[n, ch, src, j * stride + kj]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, c, hp, wp, kh, kw, stride, ho, wo):
        b = cols.shape[0]
        out = np.zeros((b, c, hp, wp))
        for n in range(b):
            for ch in range(c):
                # (ki, kj) outermost per element, same order as the numpy path
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ch * kh + ki) * kw + kj
                        for i in range(ho):
                            dst = i * stride + ki
                            for j in range(wo):
                                out[n, ch, dst, j * stride + kj] += cols[n, row, i * wo + j]
        return out

    def im2col_numba(xp, kh, kw, stride, ho, wo):
        return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)

    def col2im_numba(cols, c, hp, wp, kh, kw, stride, ho, wo):
        return _col2im_nb(np.ascontiguousarray(cols), c, hp, wp, kh, kw, stride, ho, wo)


def _select(name):
    if name == "numba" and HAS_NUMBA:
        return "numba", im2col_numba, col2im_numba
    return "numpy", im2col_numpy, col2im_numpy


BACKEND, im2col, col2im = _select(_REQUESTED)


def use_backend(name: str) -> str:
    """Switch backend at runtime (tests/benchmarks). Returns the previous one."""
    global BACKEND, im2col, col2im
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    previous = BACKEND
    BACKEND, im2col, col2im = _select(name)
    return previous

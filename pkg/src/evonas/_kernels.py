"""Numba kernels for the stride-1 'same' convolutions inside stages.

Data layout is NHWC with weights as (K, K, Cin, Cout): the innermost loops
run over the output-channel axis, which vectorizes at every spatial size the
stage pyramid produces.  Every output element is accumulated by exactly one
thread in a fixed order, so results do not depend on the thread count.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

# GNU OpenMP does not survive fork(); the worker pool needs a fork-safe layer
os.environ.setdefault("NUMBA_THREADING_LAYER", "forksafe")

with warnings.catch_warnings():
    # numba probes for TBB at import; the fallback threading layer is fine
    warnings.filterwarnings("ignore", message=".*TBB.*")
    from numba import njit, prange


@njit(parallel=True, fastmath=True, cache=True)
def conv_fwd(xp, w2, b, out):
    """out[n,y,x,o] = b[o] + sum_{i,j,c} xp[n,y+i,x+j,c] * w2[i,j,c,o]."""
    n_, oh, ow, oc = out.shape
    kh, kw, ic = w2.shape[0], w2.shape[1], w2.shape[2]
    for n in prange(n_):
        for y in range(oh):
            for x in range(ow):
                acc = b.copy()
                for i in range(kh):
                    for j in range(kw):
                        xv = xp[n, y + i, x + j]
                        wv = w2[i, j]
                        for c in range(ic):
                            s = xv[c]
                            row = wv[c]
                            for o in range(oc):
                                acc[o] += s * row[o]
                out[n, y, x] = acc


@njit(parallel=True, fastmath=True, cache=True)
def conv_bwd_dx(dout, w2, dxp):
    """dxp[n,y+i,x+j,c] += sum_o dout[n,y,x,o] * w2[i,j,c,o] (dxp padded)."""
    n_, oh, ow, oc = dout.shape
    kh, kw, ic = w2.shape[0], w2.shape[1], w2.shape[2]
    for n in prange(n_):
        for y in range(oh):
            for x in range(ow):
                dv = dout[n, y, x]
                for i in range(kh):
                    for j in range(kw):
                        wv = w2[i, j]
                        xv = dxp[n, y + i, x + j]
                        for c in range(ic):
                            s = dv[0] * wv[c, 0]
                            for o in range(1, oc):
                                s += dv[o] * wv[c, o]
                            xv[c] += s


@njit(parallel=True, fastmath=False, cache=True)
def conv_bwd_dw(dout, xp, dw2):
    """dw2[i,j,c,o] = sum_{n,y,x} xp[n,y+i,x+j,c] * dout[n,y,x,o]."""
    n_, oh, ow, oc = dout.shape
    kh, kw, ic = dw2.shape[0], dw2.shape[1], dw2.shape[2]
    for idx in prange(kh * kw * ic):
        i = idx // (kw * ic)
        rem = idx % (kw * ic)
        j = rem // ic
        c = rem % ic
        acc = np.zeros(oc, dout.dtype)
        for n in range(n_):
            for y in range(oh):
                xrow = xp[n, y + i]
                drow = dout[n, y]
                for x in range(ow):
                    s = xrow[x + j, c]
                    dv = drow[x]
                    for o in range(oc):
                        acc[o] += s * dv[o]
        dw2[i, j, c] = acc

"""Independent reference implementations used as test oracles.

Everything here is deliberately written a different way than the library
(plain loops, im2col on NCHW, direct enumeration) so the two routes agree
only if both are right.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from evonas import nn
from evonas.network import NetworkSpec


# ---------------------------------------------------------------------------
# reference conv / pool on NCHW tensors

def ref_conv2d(x, w, b, stride=1, pad=0):
    n, c, h, w_in = x.shape
    cout, cin, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("ncyxij,ocij->noyx", win, w) + b.reshape(1, -1, 1, 1)
    return out


def ref_maxpool(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), x.dtype)
    for i in range(h // 2):
        for j in range(w // 2):
            out[:, :, i, j] = x[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(2, 3))
    return out


# ---------------------------------------------------------------------------
# independent parameter count: enumerate tensors straight off the spec

def brute_force_param_count(spec: NetworkSpec) -> int:
    total = 0
    for layer in spec.layers:
        if layer.role in ("conv", "shortcut_conv1x1"):
            total += layer.out_channels * layer.in_channels * layer.kernel ** 2
            total += layer.out_channels  # bias
            if layer.has_bn:
                total += 2 * layer.out_channels  # gamma, beta
        elif layer.role == "fc":
            total += layer.out_channels * layer.in_channels + layer.out_channels
    return total


def state_param_count(state) -> int:
    """Trainable scalars actually allocated for a spec."""
    return sum(int(np.prod(v.shape)) for k, v in state.items()
               if not nn.is_stat_tensor(k))


# ---------------------------------------------------------------------------
# index-by-index slicing oracle (acceptance criterion 1)

def slice_oracle(w: np.ndarray, out_keep: int, in_keep: int | None = None):
    """Copy the kept low-index channels one element at a time."""
    if w.ndim == 1:
        out = np.empty(out_keep, w.dtype)
        for o in range(out_keep):
            out[o] = w[o]
        return out
    if in_keep is None:
        in_keep = w.shape[1]
    out = np.empty((out_keep, in_keep) + w.shape[2:], w.dtype)
    for o in range(out_keep):
        for i in range(in_keep):
            out[o, i] = w[o, i]
    return out


# ---------------------------------------------------------------------------
# brute-force Kendall tau by pair enumeration (no tie adjustment beyond tau-b)

def kendall_tau_bruteforce(pred, act) -> float:
    n = len(pred)
    conc = disc = ties_p = ties_a = 0
    for i in range(n):
        for j in range(i + 1, n):
            dp = pred[i] - pred[j]
            da = act[i] - act[j]
            if dp == 0:
                ties_p += 1
            if da == 0:
                ties_a += 1
            if dp * da > 0:
                conc += 1
            elif dp * da < 0:
                disc += 1
    n0 = n * (n - 1) // 2
    denom = math.sqrt((n0 - ties_p) * (n0 - ties_a))
    if denom == 0:
        return 0.0
    return (conc - disc) / denom


# ---------------------------------------------------------------------------
# finite differences and kink margins for gradient checks

def fd_gradients(spec, state64, x64, labels, names, eps=1e-3):
    """Central finite differences of the training-mode loss, in float64."""
    grads = {}
    for name in names:
        p = state64[name]
        fd = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + eps
            lp = nn.batch_loss(spec, state64, x64, labels)
            p[i] = old - eps
            lm = nn.batch_loss(spec, state64, x64, labels)
            p[i] = old
            fd[i] = (lp - lm) / (2 * eps)
        grads[name] = fd
    return grads


def max_rel_error(a, b, floor=1e-5) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def kink_margins(spec, state, x):
    """(min |ReLU preactivation|, min max-pool top-2 gap) in training mode.

    Finite differences at eps=1e-3 are only trustworthy when these margins
    dwarf the perturbation a single parameter step can cause downstream.
    """
    relu_margin = np.inf
    pool_margin = np.inf
    h = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    pooled = {}
    flat = False
    for layer in spec.layers:
        name = layer.name
        if layer.role == "conv":
            h, _ = nn._stage_conv_forward(h, state[f"{name}.w"],
                                          state[f"{name}.b"], layer.kernel // 2)
            h, _ = nn.bn_forward(h, state, name, "train", False)
            relu_margin = min(relu_margin, float(np.abs(h).min()))
            h = h * (h > 0)
        elif layer.role == "shortcut_identity":
            h = h + pooled[layer.from_stage]
        elif layer.role == "shortcut_conv1x1":
            side, _ = nn._proj_conv_forward(pooled[layer.from_stage],
                                            state[f"{name}.w"],
                                            state[f"{name}.b"], layer.stride)
            side, _ = nn.bn_forward(side, state, name, "train", False)
            h = h + side
        elif layer.role == "maxpool":
            windows = np.stack([h[:, 0::2, 0::2, :], h[:, 0::2, 1::2, :],
                                h[:, 1::2, 0::2, :], h[:, 1::2, 1::2, :]])
            top2 = np.sort(windows, axis=0)[-2:]
            pool_margin = min(pool_margin, float((top2[1] - top2[0]).min()))
            h, _ = nn.maxpool_forward(h)
            pooled[layer.stage_index] = h
        elif layer.role == "fc":
            if not flat:
                h = np.ascontiguousarray(h.transpose(0, 3, 1, 2)).reshape(len(h), -1)
                flat = True
            h = h @ state[f"{name}.w"].T + state[f"{name}.b"]
            if layer.slot_index != spec.source_genome.fc_count - 1:
                relu_margin = min(relu_margin, float(np.abs(h).min()))
                h = h * (h > 0)
    return relu_margin, pool_margin

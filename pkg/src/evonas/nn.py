"""Dense-tensor training backend.

Implements exactly what candidate networks need: conv2d, batch norm, ReLU,
2x2 max-pool, fully connected layers, residual adds for stage shortcuts,
softmax cross-entropy, and SGD with momentum, weight decay and a cosine
learning-rate schedule.

A model's state is a flat dict of named float32 arrays in canonical layout:
for a conv layer ``conv.s1.l0`` the tensors are ``.w (Cout,Cin,K,K)``,
``.b (Cout,)``, ``.gamma/.beta/.rmean/.rvar (Cout,)``; FC layers have
``.w (Cout,Cin)`` and ``.b``.  Running BN statistics (``rmean``/``rvar``)
are state but not trainable.  Internally the engine runs NHWC (numba kernels
for stage convs, BLAS for FC and 1x1 shortcut projections) and flattens
channel-major before the first FC layer, so low-index channel slices of the
state tensors always correspond to low-index feature columns.

Batch-norm modes:

    train         normalize with batch statistics, update running stats
    eval          normalize with running stats, touch nothing
    bn_calibrate  normalize like eval, then fold the batch's statistics into
                  the running estimates; trainable tensors are never touched

The math is dtype-generic (tests run the same graph in float64 against a
finite-difference oracle); production states are float32.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .network import LayerSpec, NetworkSpec
from .rng import as_rng

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
STAT_SUFFIXES = (".rmean", ".rvar")

MODES = ("train", "eval", "bn_calibrate")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    lr_init: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def cosine_lr(lr_init: float, step: int, total_steps: int) -> float:
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# state handling

def init_state(spec: NetworkSpec, rng) -> dict[str, np.ndarray]:
    """He-initialized parameters plus identity BN statistics."""
    rng = as_rng(rng)
    state: dict[str, np.ndarray] = {}
    for layer in spec.layers:
        if not layer.trainable:
            continue
        state.update(init_layer_tensors(layer, rng))
    return state


def init_layer_tensors(layer: LayerSpec, rng) -> dict[str, np.ndarray]:
    name = layer.name
    out: dict[str, np.ndarray] = {}
    if layer.role in ("conv", "shortcut_conv1x1"):
        fan_in = layer.in_channels * layer.kernel * layer.kernel
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in),
                       (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel))
        out[f"{name}.w"] = w.astype(np.float32)
        out[f"{name}.b"] = np.zeros(layer.out_channels, np.float32)
        if layer.has_bn:
            out[f"{name}.gamma"] = np.ones(layer.out_channels, np.float32)
            out[f"{name}.beta"] = np.zeros(layer.out_channels, np.float32)
            out[f"{name}.rmean"] = np.zeros(layer.out_channels, np.float32)
            out[f"{name}.rvar"] = np.ones(layer.out_channels, np.float32)
    elif layer.role == "fc":
        w = rng.normal(0.0, math.sqrt(2.0 / layer.in_channels),
                       (layer.out_channels, layer.in_channels))
        out[f"{name}.w"] = w.astype(np.float32)
        out[f"{name}.b"] = np.zeros(layer.out_channels, np.float32)
    return out


def clone_state(state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in state.items()}


def cast_state(state: dict[str, np.ndarray], dtype) -> dict[str, np.ndarray]:
    return {k: v.astype(dtype) for k, v in state.items()}


def is_stat_tensor(name: str) -> bool:
    return name.endswith(STAT_SUFFIXES)


def trainable_names(state: dict[str, np.ndarray]) -> list[str]:
    return [k for k in state if not is_stat_tensor(k)]


def states_equal(a: dict[str, np.ndarray], b: dict[str, np.ndarray],
                 names=None) -> bool:
    keys = names if names is not None else sorted(set(a) | set(b))
    for k in keys:
        if k not in a or k not in b:
            return False
        if a[k].shape != b[k].shape or not np.array_equal(a[k], b[k]):
            return False
    return True


# ---------------------------------------------------------------------------
# primitive ops (NHWC inside the engine)

def _stage_conv_forward(x, w, b, pad):
    """Stride-1 'same' conv on NHWC input; weights in canonical (O,C,K,K)."""
    n, h, wd, _ = x.shape
    w2 = np.ascontiguousarray(w.transpose(2, 3, 1, 0))  # (K,K,C,O)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    out = np.empty((n, h, wd, w.shape[0]), x.dtype)
    _kernels.conv_fwd(xp, w2, np.ascontiguousarray(b), out)
    return out, (xp, w2, pad, x.shape)


def _stage_conv_backward(dout, cache):
    xp, w2, pad, x_shape = cache
    dout = np.ascontiguousarray(dout)
    dxp = np.zeros(xp.shape, dout.dtype)
    _kernels.conv_bwd_dx(dout, w2, dxp)
    dw2 = np.empty(w2.shape, dout.dtype)
    _kernels.conv_bwd_dw(dout, xp, dw2)
    n, h, wd, _ = x_shape
    dx = dxp[:, pad:pad + h, pad:pad + wd, :] if pad else dxp
    dw = dw2.transpose(3, 2, 0, 1)  # back to (O,C,K,K)
    db = dout.sum(axis=(0, 1, 2))
    return np.ascontiguousarray(dx), np.ascontiguousarray(dw), db


def _proj_conv_forward(x, w, b, stride):
    """1x1 conv with stride on NHWC input: one GEMM over channels."""
    src = x[:, ::stride, ::stride, :]
    w2d = w[:, :, 0, 0].T  # (C, O)
    out = src @ w2d + b
    return out, (src, w2d, stride, x.shape)


def _proj_conv_backward(dout, cache):
    src, w2d, stride, x_shape = cache
    n, oh, ow, c = src.shape
    dflat = dout.reshape(-1, dout.shape[-1])
    dw = (src.reshape(-1, c).T @ dflat).T[:, :, None, None]  # (O,C,1,1)
    db = dflat.sum(axis=0)
    dsrc = dout @ w2d.T
    dx = np.zeros(x_shape, dout.dtype)
    dx[:, ::stride, ::stride, :] = dsrc
    return dx, dw, db


def bn_forward(x, state, prefix, mode, update_stats, momentum=BN_MOMENTUM):
    """Per-channel batch norm over (N, H, W) on NHWC tensors."""
    gamma = state[f"{prefix}.gamma"]
    beta = state[f"{prefix}.beta"]
    axes = (0, 1, 2)
    m = x.shape[0] * x.shape[1] * x.shape[2]
    if mode == "train":
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        istd = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu) * istd
        if update_stats:
            _update_running(state, prefix, mu, var, m, momentum)
        return gamma * xhat + beta, (xhat, istd, gamma)
    # eval / bn_calibrate normalize with the current running estimates
    rmean = state[f"{prefix}.rmean"]
    rvar = state[f"{prefix}.rvar"]
    y = gamma * ((x - rmean) / np.sqrt(rvar + BN_EPS)) + beta
    if mode == "bn_calibrate":
        _update_running(state, prefix, x.mean(axis=axes), x.var(axis=axes),
                        m, momentum)
    return y, None


def _update_running(state, prefix, mu, var, m, momentum):
    unbiased = var * (m / (m - 1)) if m > 1 else var
    rmean = state[f"{prefix}.rmean"]
    rvar = state[f"{prefix}.rvar"]
    rmean += (momentum * (mu - rmean)).astype(rmean.dtype)
    rvar += (momentum * (unbiased - rvar)).astype(rvar.dtype)


def bn_backward(dy, cache):
    xhat, istd, gamma = cache
    axes = (0, 1, 2)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    m_dy = dy.mean(axis=axes)
    m_dyx = (dy * xhat).mean(axis=axes)
    dx = (gamma * istd) * (dy - m_dy - xhat * m_dyx)
    return dx, dgamma, dbeta


def maxpool_forward(x):
    """2x2 stride-2 max pool on NHWC; ties route to the first window slot."""
    a = x[:, 0::2, 0::2, :]
    b = x[:, 0::2, 1::2, :]
    c = x[:, 1::2, 0::2, :]
    d = x[:, 1::2, 1::2, :]
    m = np.maximum(np.maximum(a, b), np.maximum(c, d))
    return m, (a, b, c, d, m, x.shape)


def maxpool_backward(dout, cache):
    a, b, c, d, m, x_shape = cache
    dx = np.zeros(x_shape, dout.dtype)
    rem = np.ones(m.shape, bool)
    for sub, (dy, dxw) in zip(
        (a, b, c, d),
        ((0, 0), (0, 1), (1, 0), (1, 1)),
    ):
        hit = (sub == m) & rem
        rem &= ~hit
        dx[:, dy::2, dxw::2, :] = dout * hit
    return dx


def softmax_cross_entropy(logits, labels):
    """Mean CE loss and gradient w.r.t. logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    nll = np.log(probs[np.arange(n), labels] + 1e-12)
    loss = -float(nll.mean())
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


# ---------------------------------------------------------------------------
# whole-network execution

def forward(spec: NetworkSpec, state, batch, mode="eval", update_stats=None,
            with_cache=False):
    """Run the layer graph on an NCHW batch; returns logits (+ caches).

    ``update_stats`` defaults to the mode's convention (train and
    bn_calibrate update BN running statistics, eval does not).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if update_stats is None:
        update_stats = mode != "eval"
    if batch.ndim != 4 or batch.shape[1] != spec.input_channels \
            or batch.shape[2] != spec.input_size or batch.shape[3] != spec.input_size:
        raise ValueError(
            f"layer 0: batch shape {batch.shape} does not match spec input "
            f"(N, {spec.input_channels}, {spec.input_size}, {spec.input_size})"
        )
    h = np.ascontiguousarray(batch.transpose(0, 2, 3, 1))  # NHWC
    pooled: dict[int, np.ndarray] = {}
    steps = []
    flattened = False
    for li, layer in enumerate(spec.layers):
        name = layer.name
        if layer.role == "conv":
            if h.shape[3] != layer.in_channels:
                raise ValueError(f"layer {li}: expected {layer.in_channels} "
                                 f"channels, got {h.shape[3]}")
            h, ccache = _stage_conv_forward(
                h, state[f"{name}.w"], state[f"{name}.b"], layer.kernel // 2)
            h, bcache = bn_forward(h, state, name, mode, update_stats)
            mask = h > 0
            h = h * mask
            steps.append(("conv", layer, (ccache, bcache, mask)))
        elif layer.role == "shortcut_identity":
            h = h + pooled[layer.from_stage]
            steps.append(("short_id", layer, None))
        elif layer.role == "shortcut_conv1x1":
            side, ccache = _proj_conv_forward(
                pooled[layer.from_stage], state[f"{name}.w"],
                state[f"{name}.b"], layer.stride)
            side, bcache = bn_forward(side, state, name, mode, update_stats)
            h = h + side
            steps.append(("short_conv", layer, (ccache, bcache)))
        elif layer.role == "maxpool":
            h, pcache = maxpool_forward(h)
            pooled[layer.stage_index] = h
            steps.append(("pool", layer, pcache))
        elif layer.role == "fc":
            shape4d = None
            if not flattened:
                shape4d = h.shape
                # flatten channel-major so feature columns track channel index
                h = np.ascontiguousarray(h.transpose(0, 3, 1, 2)).reshape(len(h), -1)
                flattened = True
            if h.shape[1] != layer.in_channels:
                raise ValueError(f"layer {li}: expected {layer.in_channels} "
                                 f"features, got {h.shape[1]}")
            xin = h
            h = h @ state[f"{name}.w"].T + state[f"{name}.b"]
            is_last = layer.slot_index == spec.source_genome.fc_count - 1
            mask = None
            if not is_last:
                mask = h > 0
                h = h * mask
            steps.append(("fc", layer, (xin, mask, shape4d)))
        else:
            raise ValueError(f"layer {li}: unknown role {layer.role}")
    if with_cache:
        return h, steps
    return h


def backward(spec: NetworkSpec, state, steps, dlogits):
    """Gradients of the loss w.r.t. every trainable tensor."""
    grads: dict[str, np.ndarray] = {}
    d_pooled: dict[int, np.ndarray] = {}
    dh = dlogits
    for kind, layer, cache in reversed(steps):
        name = layer.name
        if kind == "fc":
            xin, mask, shape4d = cache
            if mask is not None:
                dh = dh * mask
            grads[f"{name}.w"] = dh.T @ xin
            grads[f"{name}.b"] = dh.sum(axis=0)
            dh = dh @ state[f"{name}.w"]
            if shape4d is not None:
                n, hh, ww, cc = shape4d
                dh = dh.reshape(n, cc, hh, ww).transpose(0, 2, 3, 1)
        elif kind == "pool":
            s = layer.stage_index
            if s in d_pooled:
                dh = dh + d_pooled.pop(s)
            dh = maxpool_backward(dh, cache)
        elif kind == "short_id":
            src = layer.from_stage
            d_pooled[src] = d_pooled.get(src, 0) + dh
        elif kind == "short_conv":
            ccache, bcache = cache
            dside, dgamma, dbeta = bn_backward(dh, bcache)
            grads[f"{name}.gamma"] = dgamma
            grads[f"{name}.beta"] = dbeta
            dsrc, dw, db = _proj_conv_backward(dside, ccache)
            grads[f"{name}.w"] = dw
            grads[f"{name}.b"] = db
            src = layer.from_stage
            d_pooled[src] = d_pooled.get(src, 0) + dsrc
        elif kind == "conv":
            ccache, bcache, mask = cache
            dh = dh * mask
            dh, dgamma, dbeta = bn_backward(dh, bcache)
            grads[f"{name}.gamma"] = dgamma
            grads[f"{name}.beta"] = dbeta
            dh, dw, db = _stage_conv_backward(dh, ccache)
            grads[f"{name}.w"] = dw
            grads[f"{name}.b"] = db
    return grads


def compute_loss_and_grads(spec, state, batch, labels, update_stats=True):
    logits, steps = forward(spec, state, batch, mode="train",
                            update_stats=update_stats, with_cache=True)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    grads = backward(spec, state, steps, dlogits)
    return loss, grads


def batch_loss(spec, state, batch, labels, update_stats=False):
    """Training-mode loss without gradients (finite-difference probes)."""
    logits = forward(spec, state, batch, mode="train", update_stats=update_stats)
    loss, _ = softmax_cross_entropy(logits, labels)
    return loss


def sgd_step(state, grads, velocity, lr, momentum, weight_decay):
    for name, g in grads.items():
        p = state[name]
        v = velocity[name]
        v *= momentum
        v += g + weight_decay * p
        p -= lr * v


def backward_and_step(spec, state, velocity, batch, labels, cfg: TrainConfig,
                      step_index: int, total_steps: int) -> float:
    lr = cosine_lr(cfg.lr_init, step_index, total_steps)
    loss, grads = compute_loss_and_grads(spec, state, batch, labels)
    if not math.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss {loss} at step {step_index} (lr={lr:.4g})")
    sgd_step(state, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
    return loss


def train(spec, state, images, labels, cfg: TrainConfig) -> list[float]:
    """SGD epochs with seed-deterministic shuffling; returns per-epoch loss."""
    n = len(images)
    if n == 0:
        raise ValueError("empty dataset")
    b = min(int(cfg.batch_size), n)
    steps_per_epoch = math.ceil(n / b)
    total = cfg.epochs * steps_per_epoch
    velocity = {k: np.zeros_like(state[k]) for k in trainable_names(state)}
    rng = as_rng(cfg.seed)
    losses = []
    t = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for i in range(steps_per_epoch):
            idx = perm[i * b:(i + 1) * b]
            epoch_loss += backward_and_step(
                spec, state, velocity, images[idx], labels[idx], cfg, t, total)
            t += 1
        losses.append(epoch_loss / steps_per_epoch)
    return losses


def evaluate(spec, state, images, labels, batch_size=256) -> float:
    """Top-1 accuracy in eval mode."""
    n = len(images)
    if n == 0:
        raise ValueError("empty dataset")
    correct = 0
    for i in range(0, n, batch_size):
        logits = forward(spec, state, images[i:i + batch_size], mode="eval")
        correct += int((logits.argmax(axis=1) == labels[i:i + batch_size]).sum())
    return correct / n


# ---------------------------------------------------------------------------
# checkpoint format: magic "UENW", version u32, tensor count u32, then per
# tensor: name length u16 + UTF-8 name, rank u8, dims u32 each, raw
# little-endian float32 data.

CHECKPOINT_MAGIC = b"UENW"
CHECKPOINT_VERSION = 1


def save_state(state: dict[str, np.ndarray], path) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(state)))
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_state(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()

    def need(offset, count, what):
        if offset + count > len(data):
            raise ValueError(f"truncated checkpoint: {what} at byte {offset}")
        return data[offset:offset + count]

    if need(0, 4, "magic") != CHECKPOINT_MAGIC:
        raise ValueError("bad checkpoint magic at byte 0")
    version, count = struct.unpack("<II", need(4, 8, "header"))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version} at byte 4")
    pos = 12
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", need(pos, 2, "name length"))
        pos += 2
        name = need(pos, nlen, "name").decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack("<B", need(pos, 1, "rank"))
        pos += 1
        dims = struct.unpack(f"<{rank}I", need(pos, 4 * rank, "dims"))
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        raw = need(pos, 4 * size, f"tensor {name}")
        pos += 4 * size
        state[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return state

"""Online accuracy predictor: a small feed-forward regressor over encoded
genomes, retrained from scratch after every generation on all accumulated
(encoding, accuracy) pairs and used to discard the unpromising half of each
child batch before any training is spent on them.

The network has three weight layers (two equal-width ReLU hidden layers and
a linear scalar output), trained with Adam to minimize RMSE.  Inputs are raw
0/1 bits; targets are accuracies in [0, 1].  Weight matrices carry an L2
penalty: with tens of training pairs and hundreds of hidden units the
unregularized regressor memorizes its inputs and ranks unseen encodings no
better than chance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .genome import EncodedGenome
from .rng import as_rng


@dataclass(frozen=True)
class PredictorConfig:
    hidden: int = 256
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 10
    weight_decay: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class PredictorModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    train_rmse: float = float("nan")
    config: PredictorConfig = field(default_factory=PredictorConfig)

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[1]


def encodings_to_matrix(encodings) -> np.ndarray:
    rows = []
    for e in encodings:
        bits = e.bits if isinstance(e, EncodedGenome) else e
        rows.append(np.asarray(bits, np.float32))
    return np.stack(rows) if rows else np.zeros((0, 0), np.float32)


def _mlp_forward(model: PredictorModel, x: np.ndarray):
    h = x
    caches = []
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        if i < last:
            mask = z > 0
            caches.append((h, mask))
            h = z * mask
        else:
            caches.append((h, None))
            h = z
    return h[:, 0], caches


def fit(pairs, cfg: PredictorConfig = PredictorConfig(), seed: int = 0) -> PredictorModel:
    """Train a fresh predictor on (encoding, accuracy) pairs.

    Requires at least two pairs; deterministic under ``seed``.
    """
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 training pairs, got {len(pairs)}")
    x = encodings_to_matrix([p[0] for p in pairs])
    y = np.asarray([float(p[1]) for p in pairs], np.float32)
    if np.any((y < 0) | (y > 1)):
        raise ValueError("accuracies must lie in [0, 1]")
    rng = as_rng(seed)
    d = x.shape[1]
    dims = [d, cfg.hidden, cfg.hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in),
                                  (fan_out, fan_in)).astype(np.float32))
        biases.append(np.zeros(fan_out, np.float32))
    model = PredictorModel(weights, biases, config=cfg)

    m = [np.zeros_like(w) for w in weights] + [np.zeros_like(b) for b in biases]
    v = [np.zeros_like(w) for w in weights] + [np.zeros_like(b) for b in biases]
    n = len(y)
    bsz = min(cfg.batch_size, n)
    t = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for i in range(0, n, bsz):
            idx = perm[i:i + bsz]
            xb, yb = x[idx], y[idx]
            pred, caches = _mlp_forward(model, xb)
            err = pred - yb
            grads_w, grads_b = [None] * 3, [None] * 3
            dh = (2.0 * err / len(idx))[:, None]  # d(MSE)/d(output)
            for li in range(2, -1, -1):
                hin, mask = caches[li]
                if mask is not None:
                    dh = dh * mask
                grads_w[li] = dh.T @ hin + cfg.weight_decay * model.weights[li]
                grads_b[li] = dh.sum(axis=0)
                if li > 0:
                    dh = dh @ model.weights[li]
            t += 1
            params = model.weights + model.biases
            grads = grads_w + grads_b
            bc1 = 1.0 - cfg.adam_beta1 ** t
            bc2 = 1.0 - cfg.adam_beta2 ** t
            for p, g, mi, vi in zip(params, grads, m, v):
                mi += (1 - cfg.adam_beta1) * (g - mi)
                vi += (1 - cfg.adam_beta2) * (g * g - vi)
                p -= cfg.lr * (mi / bc1) / (np.sqrt(vi / bc2) + cfg.adam_eps)
    final_pred, _ = _mlp_forward(model, x)
    model.train_rmse = float(np.sqrt(np.mean((final_pred - y) ** 2)))
    return model


def predict(model: PredictorModel, encodings) -> np.ndarray:
    """Predicted accuracy per encoding, in batch order."""
    x = encodings_to_matrix(encodings)
    if len(x) == 0:
        return np.zeros(0, np.float32)
    if x.shape[1] != model.input_width:
        raise ValueError(
            f"encoding width {x.shape[1]} != model input width {model.input_width}")
    scores, _ = _mlp_forward(model, x)
    return scores


def filter_children(model: PredictorModel | None, children: list):
    """Keep the ceil(n/2) children with the best predicted accuracy.

    Ties keep the lower batch index; input order is preserved among the
    kept.  Without a fitted model (first generation) all children pass.
    Returns (kept_children, kept_indices, scores_or_None).
    """
    n = len(children)
    if n == 0:
        return [], [], None
    if model is None:
        return list(children), list(range(n)), None
    scores = predict(model, children)
    order = np.argsort(-scores, kind="stable")  # ties: lower index first
    keep = math.ceil(n / 2)
    kept_idx = sorted(int(i) for i in order[:keep])
    return [children[i] for i in kept_idx], kept_idx, scores


def kendall_tau(predicted, actual) -> float:
    """Tie-adjusted Kendall rank correlation (tau-b).

    tau_b = (concordant - discordant) / sqrt((n0 - t_pred) * (n0 - t_act))
    with n0 = n(n-1)/2 and t_* the tied-pair counts of each ranking.
    Degenerate inputs (one list entirely tied) score 0.
    """
    predicted = np.asarray(predicted, np.float64)
    actual = np.asarray(actual, np.float64)
    if predicted.shape != actual.shape or predicted.ndim != 1:
        raise ValueError("predicted and actual must be equal-length vectors")
    n = len(predicted)
    if n < 2:
        raise ValueError("need at least 2 observations")
    dp = np.sign(predicted[:, None] - predicted[None, :])
    da = np.sign(actual[:, None] - actual[None, :])
    iu = np.triu_indices(n, k=1)
    prod = dp[iu] * da[iu]
    concordant = int((prod > 0).sum())
    discordant = int((prod < 0).sum())
    n0 = n * (n - 1) // 2
    ties_p = int((dp[iu] == 0).sum())
    ties_a = int((da[iu] == 0).sum())
    denom = math.sqrt((n0 - ties_p) * (n0 - ties_a))
    if denom == 0:
        return 0.0
    return (concordant - discordant) / denom


def _cv_fold(args):
    train_pairs, held_pairs, cfg, seed = args
    model = fit(train_pairs, cfg, seed=seed)
    scores = predict(model, [p[0] for p in held_pairs])
    return kendall_tau(scores, [p[1] for p in held_pairs])


def crossval_ktau(pairs, folds: int = 5, cfg: PredictorConfig = PredictorConfig(),
                  seed: int = 0, map_fn=None) -> float:
    """Mean held-out Kendall tau over a seeded k-fold split.

    Folds are independent; pass ``map_fn`` to fan them out.
    """
    n = len(pairs)
    if n < folds:
        raise ValueError(f"need at least {folds} pairs for {folds}-fold CV, got {n}")
    rng = as_rng(seed)
    perm = rng.permutation(n)
    bounds = np.linspace(0, n, folds + 1).astype(int)
    tasks = []
    for f in range(folds):
        held = perm[bounds[f]:bounds[f + 1]]
        rest = np.concatenate([perm[:bounds[f]], perm[bounds[f + 1]:]])
        tasks.append(([pairs[i] for i in rest], [pairs[i] for i in held],
                      cfg, seed * 1000 + f))
    run = map_fn if map_fn is not None else lambda fn, items: [fn(t) for t in items]
    return float(np.mean(run(_cv_fold, tasks)))

"""Structured channel pruning by low-index weight slicing.

A pruning strategy assigns one keep-rate to every prunable layer of a
network (all stage convs plus hidden FC layers; the classifier is excluded
because its width is the class count).  Pruning builds a narrower copy of
the network and copies the lowest-index channels of every tensor:

    conv   W*[o, i]   = W[o, i]        o < round(Cout * p_l), i < C_in kept
    fc     W*[o, i]   = W[o, i]        same rule on the 2-D matrix
    bias / BN tensors sliced to the kept output channels

The input slice of a layer follows the kept output channels of whatever
actually feeds it, including through stage boundaries; a 1x1 shortcut conv
takes its input width from the last conv of its source stage and its output
width from the last conv of its destination stage.  Identity shortcuts whose
endpoint widths no longer match are deleted.  The last FC layer is sliced on
its input only.

Sliced networks carry stale BN running statistics; ``recalibrate_bn`` runs
calibration-mode forward passes that refresh them while every trainable
tensor stays frozen.  ``propose_and_select`` samples random strategies,
recalibrates each survivor of the parameter gate, and keeps the ones with
the best post-calibration validation accuracy.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .data import Dataset
from .genome import Genome, SearchSpaceConfig
from .network import LayerSpec, NetworkSpec, check_constraint, scaled_width
from .rng import as_rng, derive_rng


@dataclass
class PrunedCandidate:
    spec: NetworkSpec
    state: dict[str, np.ndarray]
    strategy: tuple[float, ...]
    inference_accuracy: float | None
    pre_calib_accuracy: float | None
    source_id: int


def prunable_layers(spec: NetworkSpec) -> list[LayerSpec]:
    return spec.prunable_layers()


def _clamp(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)


def compose_genome(parent: Genome, cfg: SearchSpaceConfig,
                   new_widths: dict[tuple, int]) -> Genome:
    """Parent genome with prune genes rewritten to the post-slicing widths.

    Gene values are the kept fraction of the *base* width, clamped into the
    searchable range so the composed genome stays encodable; the sliced spec
    keeps the exact channel counts even when the clamp bites.
    """
    lo, hi = cfg.prune_range
    rates = list(parent.prune_rates)
    for idx, slot in enumerate(cfg.prune_slots):
        if slot not in new_widths:
            continue
        base = cfg.base_channels[slot[1]] if slot[0] == "conv" else cfg.base_fc_width
        rates[idx] = _clamp(new_widths[slot] / base, lo, hi)
    return replace(parent, prune_rates=tuple(rates))


def slice_weights(src_state: dict[str, np.ndarray], src_spec: NetworkSpec,
                  strategy, cfg: SearchSpaceConfig):
    """Apply a pruning strategy; returns (pruned_spec, pruned_state).

    ``strategy`` holds one rate per prunable layer of ``src_spec`` in layer
    order.  Rates are relative to the source widths (1.0 keeps a layer
    whole), so the all-ones strategy is the identity.
    """
    targets = prunable_layers(src_spec)
    strategy = tuple(float(p) for p in strategy)
    if len(strategy) != len(targets):
        raise ValueError(
            f"strategy length {len(strategy)} != prunable layer count {len(targets)}"
        )
    lo, hi = cfg.prune_range
    for p in strategy:
        if not lo <= p <= hi:
            raise ValueError(f"rate {p} outside prune range [{lo}, {hi}]")

    new_out: dict[tuple, int] = {}  # layer.key -> kept output channels
    by_key = {l.key: l for l in src_spec.layers}
    for layer, p in zip(targets, strategy):
        new_out[layer.key] = scaled_width(layer.out_channels, p)

    # stage output widths chain shortcut and FC input widths
    stage_last: dict[int, tuple] = {}
    for l in src_spec.conv_layers():
        stage_last[l.stage_index] = l.key
    stage_out = {s: new_out[k] for s, k in stage_last.items()}

    genome = src_spec.source_genome
    spatial = src_spec.input_size // (2 ** len(stage_out))

    layers: list[LayerSpec] = []
    shortcuts: list[tuple[int, int, str]] = []
    in_map: dict[tuple, tuple] = {}  # layer.key -> (in_channels, in_sel)
    prev_c, prev_key = src_spec.input_channels, None
    fc_prev: tuple[int, tuple | None] | None = None
    for layer in src_spec.layers:
        if layer.role == "conv":
            c_out = new_out[layer.key]
            rate = layer.prune_rate if c_out == layer.out_channels \
                else c_out / cfg.base_channels[layer.stage_index]
            layers.append(replace(layer, in_channels=prev_c,
                                  out_channels=c_out, prune_rate=rate))
            in_map[layer.key] = (prev_c, prev_key)
            prev_c, prev_key = c_out, layer.key
        elif layer.role == "maxpool":
            layers.append(replace(layer, in_channels=prev_c, out_channels=prev_c))
        elif layer.role == "shortcut_identity":
            if stage_out[layer.from_stage] != stage_out[layer.to_stage]:
                continue  # widths diverged: the identity is deleted
            layers.append(replace(layer, in_channels=stage_out[layer.from_stage],
                                  out_channels=stage_out[layer.to_stage]))
            shortcuts.append((layer.from_stage, layer.to_stage, "identity"))
        elif layer.role == "shortcut_conv1x1":
            layers.append(replace(layer, in_channels=stage_out[layer.from_stage],
                                  out_channels=stage_out[layer.to_stage]))
            in_map[layer.key] = (stage_out[layer.from_stage],
                                 stage_last[layer.from_stage])
            shortcuts.append((layer.from_stage, layer.to_stage, "conv1x1"))
        elif layer.role == "fc":
            if fc_prev is None:
                c_in = prev_c * spatial * spatial
                in_src = prev_key
            else:
                c_in, in_src = fc_prev
            c_out = new_out.get(layer.key, layer.out_channels)
            rate = layer.prune_rate if c_out == layer.out_channels \
                else c_out / cfg.base_fc_width
            layers.append(replace(layer, in_channels=c_in, out_channels=c_out,
                                  prune_rate=rate))
            in_map[layer.key] = (c_in, in_src)
            fc_prev = (c_out, layer.key)

    # conv slots map 1:1 onto genome slots; hidden FCs use their fc index;
    # unchanged widths keep their original gene so the identity strategy is
    # exactly the identity
    widths_for_genome = {}
    for layer, p in zip(targets, strategy):
        if new_out[layer.key] == layer.out_channels:
            continue
        if layer.role == "conv":
            widths_for_genome[("conv", layer.stage_index, layer.slot_index)] = \
                new_out[layer.key]
        else:
            widths_for_genome[("fc", layer.slot_index)] = new_out[layer.key]
    pruned_genome = compose_genome(genome, cfg, widths_for_genome)

    pruned_spec = NetworkSpec(
        layers=tuple(layers),
        shortcuts=tuple(sorted(shortcuts)),
        param_count=sum(l.param_count() for l in layers),
        source_genome=pruned_genome,
        input_channels=src_spec.input_channels,
        input_size=src_spec.input_size,
        num_classes=src_spec.num_classes,
    )

    pruned_state: dict[str, np.ndarray] = {}
    for layer in pruned_spec.layers:
        if not layer.trainable:
            continue
        name = layer.name
        src_layer = by_key[layer.key]
        co = layer.out_channels
        if layer.role == "fc":
            pruned_state[f"{name}.w"] = src_state[f"{name}.w"][:co, :layer.in_channels].copy()
            pruned_state[f"{name}.b"] = src_state[f"{name}.b"][:co].copy()
        else:
            pruned_state[f"{name}.w"] = \
                src_state[f"{name}.w"][:co, :layer.in_channels, :, :].copy()
            pruned_state[f"{name}.b"] = src_state[f"{name}.b"][:co].copy()
            if layer.has_bn:
                for suf in ("gamma", "beta", "rmean", "rvar"):
                    pruned_state[f"{name}.{suf}"] = \
                        src_state[f"{name}.{suf}"][:co].copy()
        del src_layer
    return pruned_spec, pruned_state


def recalibrate_bn(spec: NetworkSpec, state: dict[str, np.ndarray],
                   train_ds: Dataset, num_batches: int, batch_size: int = 64,
                   rng=0) -> None:
    """Refresh BN running statistics in place with calibration forwards.

    Raises if anything other than BN statistics changes (frozen-parameter
    contract).
    """
    if num_batches < 1:
        raise ValueError(f"num_batches must be >= 1, got {num_batches}")
    rng = as_rng(rng)
    frozen = {k: state[k].copy() for k in nn.trainable_names(state)}
    n = len(train_ds)
    for _ in range(num_batches):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        nn.forward(spec, state, train_ds.images[idx], mode="bn_calibrate")
    if not nn.states_equal(state, frozen, names=list(frozen)):
        raise AssertionError("recalibration touched a trainable tensor")


def propose_and_select(parent_id: int, spec: NetworkSpec,
                       state: dict[str, np.ndarray], cfg: SearchSpaceConfig,
                       train_ds: Dataset, val_ds: Dataset, num_samples: int,
                       num_keep: int, rng_seed: int, max_params: int,
                       calib_batches: int = 20, calib_batch_size: int = 64,
                       log=None, extra_strategies=()) -> list[PrunedCandidate]:
    """Sample strategies, gate on the parameter budget, recalibrate, rank.

    Returns the ``num_keep`` feasible candidates with the best
    post-calibration validation accuracy (ties: fewer parameters, then
    sample order).  May return fewer when most samples violate the budget.
    ``extra_strategies`` are evaluated ahead of the random samples.
    """
    if num_keep > num_samples:
        raise ValueError("num_keep must be <= num_samples")
    targets = prunable_layers(spec)
    lo, hi = cfg.prune_range
    sample_rng = derive_rng(rng_seed, "prune", parent_id)
    strategies = [tuple(float(r) for r in st) for st in extra_strategies]
    strategies += [tuple(float(r) for r in sample_rng.uniform(lo, hi, len(targets)))
                   for _ in range(num_samples)]
    records = []
    scored: list[tuple[float, int, int, PrunedCandidate]] = []
    for s, strategy in enumerate(strategies):
        pruned_spec, pruned_state = slice_weights(state, spec, strategy, cfg)
        record = {
            "parent_id": parent_id,
            "rates": [round(r, 4) for r in strategy],
            "params": pruned_spec.param_count,
            "inference_acc_pre_calib": None,
            "inference_acc_post_calib": None,
            "kept": False,
        }
        records.append(record)
        if not check_constraint(pruned_spec, max_params):
            continue  # discarded before ranking
        acc_pre = nn.evaluate(pruned_spec, pruned_state, val_ds.images, val_ds.labels)
        recalibrate_bn(pruned_spec, pruned_state, train_ds, calib_batches,
                       calib_batch_size, rng=derive_rng(rng_seed, "calib", parent_id, s))
        acc_post = nn.evaluate(pruned_spec, pruned_state, val_ds.images, val_ds.labels)
        record["inference_acc_pre_calib"] = round(acc_pre, 4)
        record["inference_acc_post_calib"] = round(acc_post, 4)
        cand = PrunedCandidate(pruned_spec, pruned_state, strategy, acc_post,
                               acc_pre, parent_id)
        scored.append((-acc_post, pruned_spec.param_count, s, cand))
        record["_rank_key"] = (-acc_post, pruned_spec.param_count, s)
    scored.sort(key=lambda t: t[:3])
    kept_keys = {t[:3] for t in scored[:num_keep]}
    for record in records:
        key = record.pop("_rank_key", None)
        record["kept"] = key in kept_keys
        if log:
            log(record)
    if not scored and strategies:
        warnings.warn(
            f"all {len(strategies)} pruning strategies for parent {parent_id} "
            f"violate the {max_params}-parameter budget; nothing kept")
    return [c for *_rank, c in scored[:num_keep]]


def finetune_pruned(pruned: PrunedCandidate, train_ds: Dataset, val_ds: Dataset,
                    epochs: int, momentum: float = 0.9,
                    weight_decay: float = 5e-4, seed: int = 0):
    """Train a recalibrated pruned network with its genome's own batch size
    and learning rate; returns (val_accuracy, epoch_losses)."""
    g = pruned.spec.source_genome
    cfg = nn.TrainConfig(epochs=epochs, batch_size=g.batch_size_int(),
                         lr_init=g.learning_rate, momentum=momentum,
                         weight_decay=weight_decay, seed=seed)
    losses = nn.train(pruned.spec, pruned.state, train_ds.images,
                      train_ds.labels, cfg)
    acc = nn.evaluate(pruned.spec, pruned.state, val_ds.images, val_ds.labels)
    return acc, losses

"""Adaptive pruning: low-index weight slicing, stale batch-norm statistics,
and why recalibration matters.

Pruning keeps the lowest-index output channels of every layer and copies the
matching weight slices into a narrower network.  The copied batch-norm
running statistics describe the *unpruned* activations, so the sliced
network evaluates poorly until a few calibration forward passes (weights
frozen) refresh them.  Strategy selection ranks candidates by
post-calibration accuracy, then fine-tunes the winners briefly.
"""

import dataclasses

from evonas import data as D, genome as G, network as N, nn, pruner as P

ds = D.generate_synthetic(10, 50, 32, seed=1234)
train, val = D.split_dataset(ds, 0.2, seed=7)
mean, std = D.norm_stats(train.images)
train, val = D.normalize(train, mean, std), D.normalize(val, mean, std)

cfg = G.SearchSpaceConfig(num_stages=5, max_layers_per_stage=2,
                          base_channels=(8, 16, 32, 64, 64), base_fc_width=64)
g = G.random_genome(cfg, rng=17)
g = dataclasses.replace(g, prune_rates=tuple(1.0 for _ in g.prune_rates),
                        batch_size=64.0, learning_rate=0.02)
spec = N.build(g, cfg, 10, 32, 3)
state = nn.init_state(spec, rng=0)
nn.train(spec, state, train.images, train.labels,
         nn.TrainConfig(epochs=10, batch_size=64, lr_init=0.02, seed=0))
parent_acc = nn.evaluate(spec, state, val.images, val.labels)
print(f"parent: {spec.param_count:,} params, val accuracy {parent_acc:.3f}")

k = len(P.prunable_layers(spec))
pspec, pstate = P.slice_weights(state, spec, (0.5,) * k, cfg)
stale = nn.evaluate(pspec, pstate, val.images, val.labels)
print(f"\nhalf-rate pruned copy: {pspec.param_count:,} params "
      f"({1 - pspec.param_count / spec.param_count:.0%} cut)")
print(f"  accuracy with stale BN statistics : {stale:.3f}")

P.recalibrate_bn(pspec, pstate, train, num_batches=20, batch_size=64, rng=1)
recal = nn.evaluate(pspec, pstate, val.images, val.labels)
print(f"  accuracy after 20 calibration batches: {recal:.3f} "
      f"(weights untouched)")

print("\nsample-and-select over 20 random strategies, keep the best 3:")
kept = P.propose_and_select(0, spec, state, cfg, train, val,
                            num_samples=20, num_keep=3, rng_seed=5,
                            max_params=spec.param_count, calib_batches=6)
for i, cand in enumerate(kept):
    print(f"  keep {i}: {cand.spec.param_count:6,} params  "
          f"inference acc {cand.inference_accuracy:.3f} "
          f"(was {cand.pre_calib_accuracy:.3f} before calibration)")

acc, _ = P.finetune_pruned(kept[0], train, val, epochs=2, seed=3)
print(f"\nbest strategy fine-tuned for 2 epochs: {acc:.3f} "
      f"(parent {parent_acc:.3f}, {1 - kept[0].spec.param_count / spec.param_count:.0%} "
      f"fewer params)")

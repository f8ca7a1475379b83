"""From genome to concrete network.

Lowering resolves channel counts (base width x pruning rate, rounded half-up
with a floor of one channel), inserts a 2x2 max-pool after every stage, and
turns shortcut bits into identity adds or strided 1x1 projections depending
on whether the endpoint widths match and how many pooling boundaries the
connection crosses.
"""

import dataclasses

import numpy as np

from evonas import genome as G, network as N

cfg = G.SearchSpaceConfig(num_stages=5, max_layers_per_stage=2,
                          base_channels=(8, 16, 32, 64, 64), base_fc_width=64)

g = G.random_genome(cfg, rng=11)
spec = N.build(g, cfg, num_classes=10, input_size=32, input_channels=3)
print(N.render_spec(spec))

print("\npruning rates scale the per-stage base widths:")
unpruned = dataclasses.replace(g, prune_rates=tuple(1.0 for _ in g.prune_rates))
full = N.build(unpruned, cfg, 10)
print(f"  same topology at rate 1.0 everywhere: {full.param_count:,} params")
print(f"  with this genome's rates:             {spec.param_count:,} params "
      f"({spec.param_count / full.param_count:.0%})")

print("\nthe resource gate is a strict parameter-count bound:")
for cap in (50_000, 200_000, 500_000):
    print(f"  constraint {cap:>7,}: {'pass' if N.check_constraint(spec, cap) else 'reject'}")

# shortcut kinds: identity only for adjacent stages with matching widths
pair = G.SearchSpaceConfig(num_stages=2, max_layers_per_stage=1,
                           base_channels=(64, 64), base_fc_width=16)
matched = G.Genome(((3,), (3,)), 1, (1,), (0.5, 0.5), 64.0, 0.02)
diverged = G.Genome(((3,), (3,)), 1, (1,), (0.5, 0.75), 64.0, 0.02)
print("\nshortcut resolution on a two-stage toy:")
print("  equal widths   ->", N.build(matched, pair, 10, input_size=8).shortcuts)
print("  unequal widths ->", N.build(diverged, pair, 10, input_size=8).shortcuts)

rng = np.random.default_rng(0)
sizes = [N.build(G.random_genome(cfg, rng), cfg, 10).param_count
         for _ in range(200)]
print(f"\n200 random candidates span {min(sizes):,} .. {max(sizes):,} params "
      f"(median {int(np.median(sizes)):,})")

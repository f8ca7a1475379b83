"""Tour of the joint search space and its binary genome encoding.

A candidate is described by stage kernel sizes (0 = empty slot), the number
of fully connected layers, shortcut bits between stages, per-layer pruning
rates, and two training hyperparameters.  Everything is packed into one
fixed-length bit string, so crossover positions line up across any two
candidates and every possible bit string decodes to a buildable network.
"""

import numpy as np

from evonas import genome as G

cfg = G.SearchSpaceConfig(base_channels=(8, 16, 32, 64, 64))
print(f"encoded genome length: {G.encoded_length(cfg)} bits")
print("gene layout (first 8 fields):")
for field in G.build_layout(cfg)[:8]:
    print(f"  {field.name:16s} offset {field.offset:3d}  width {field.width}  {field.kind}")

g = G.random_genome(cfg, rng=7)
print("\na random genome:")
print("  stage kernels :", g.stage_kernels)
print("  fc layers     :", g.fc_count)
print("  shortcut bits :", g.shortcut_bits)
print("  prune rates   :", [round(r, 2) for r in g.prune_rates[:5]], "...")
print(f"  batch size    : {g.batch_size_int()}   learning rate: {g.learning_rate:.4f}")

e = G.encode(g, cfg)
print("\nencoded:", e.to_bitstring()[:64], "...")

g2 = G.decode(e, cfg)
print("decode(encode(g)) reproduces discrete genes exactly:",
      g2.stage_kernels == g.stage_kernels and g2.fc_count == g.fc_count)
print(f"continuous genes return within one quantization bucket: "
      f"|lr - lr'| = {abs(g.learning_rate - g2.learning_rate):.2e}")

# genetic operators act on bits and can never leave the space
other = G.encode(G.random_genome(cfg, rng=8), cfg)
child_a, child_b = G.crossover(e, other, rng=1)
mutant = G.mutate(child_a, p_mutate=0.05, rng=2)
print("\ncrossover + mutation outputs all decode to valid genomes:")
for name, enc in [("child_a", child_a), ("child_b", child_b), ("mutant", mutant)]:
    dg = G.decode(enc, cfg)
    ok = all(any(k != 0 for k in row) for row in dg.stage_kernels)
    print(f"  {name}: every stage kept at least one layer -> {ok}")

flips = [sum(x != y for x, y in zip(e.bits, G.mutate(e, 0.05, s).bits))
         for s in range(200)]
print(f"\nmean flipped bits at p=0.05 over 200 mutations: {np.mean(flips):.1f} "
      f"(expected {0.05 * len(e):.1f})")

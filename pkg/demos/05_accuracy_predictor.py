"""The online accuracy predictor.

A three-weight-layer regressor maps genome bits straight to predicted
accuracy.  During search it is retrained from scratch each generation on all
accumulated (encoding, accuracy) pairs and then discards the worse-scored
half of the new children before any training budget is spent on them.  Rank
quality is measured by Kendall's tau.
"""

import dataclasses

import numpy as np

from evonas import data as D, genome as G, network as N, nn, predictor as P

ds = D.generate_synthetic(10, 50, 32, seed=1234)
train, val = D.split_dataset(ds, 0.2, seed=7)
mean, std = D.norm_stats(train.images)
train, val = D.normalize(train, mean, std), D.normalize(val, mean, std)

cfg = G.SearchSpaceConfig(num_stages=5, max_layers_per_stage=2,
                          base_channels=(8, 16, 32, 64, 64), base_fc_width=64)

print("evaluating 24 random candidates (3 epochs each) to build pairs...")
pairs = []
rng = np.random.default_rng(0)
for i in range(24):
    g = dataclasses.replace(G.random_genome(cfg, rng),
                            batch_size=64.0, learning_rate=0.03)
    spec = N.build(g, cfg, 10, 32, 3)
    state = nn.init_state(spec, rng)
    try:
        nn.train(spec, state, train.images, train.labels,
                 nn.TrainConfig(epochs=3, batch_size=64, lr_init=0.03, seed=i))
        acc = nn.evaluate(spec, state, val.images, val.labels)
    except nn.TrainingDiverged:
        acc = 0.0
    pairs.append((G.encode(g, cfg), acc))
accs = [a for _, a in pairs]
print(f"accuracies span {min(accs):.2f} .. {max(accs):.2f}")

model = P.fit(pairs, P.PredictorConfig(), seed=0)
print(f"\npredictor trained on {len(pairs)} pairs, train RMSE {model.train_rmse:.4f}")

tau = P.crossval_ktau(pairs, folds=5, cfg=P.PredictorConfig(), seed=0)
print(f"5-fold cross-validated Kendall tau: {tau:.3f}")

children = [p[0] for p in pairs[:10]]
kept, kept_idx, scores = P.filter_children(model, children)
print(f"\nhalf-filtering 10 children -> keeps {len(kept)} "
      f"(indices {kept_idx})")
print("predicted scores:", " ".join(f"{s:.2f}" for s in scores))

print("\nexact tau examples:",
      f"identical={P.kendall_tau([1, 2, 3], [1, 2, 3]):.0f}",
      f"reversed={P.kendall_tau([1, 2, 3], [3, 2, 1]):.0f}",
      f"one swap={P.kendall_tau([1, 2, 3, 4], [1, 2, 4, 3]):.3f}")

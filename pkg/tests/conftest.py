import numpy as np
import pytest

from evonas import data as data_mod, genome as genome_mod, network, nn


@pytest.fixture(scope="session")
def tiny_space():
    return genome_mod.SearchSpaceConfig(
        num_stages=2, max_layers_per_stage=2, base_channels=(8, 12),
        base_fc_width=16)


@pytest.fixture(scope="session")
def desk_space():
    return genome_mod.SearchSpaceConfig(
        num_stages=5, max_layers_per_stage=2,
        base_channels=(8, 16, 32, 64, 64), base_fc_width=64)


@pytest.fixture(scope="session")
def small_data():
    """Normalized train/val split of a small synthetic set."""
    ds = data_mod.generate_synthetic(10, 24, 32, seed=99)
    train, val = data_mod.split_dataset(ds, 0.25, seed=5)
    mean, std = data_mod.norm_stats(train.images)
    return (data_mod.normalize(train, mean, std),
            data_mod.normalize(val, mean, std))


@pytest.fixture(scope="session")
def trained_small_net(desk_space, small_data):
    """A 5-stage unpruned candidate trained a few epochs (shared, read-only:
    tests must copy the state before mutating)."""
    train, val = small_data
    g = genome_mod.random_genome(desk_space, np.random.default_rng(17))
    import dataclasses
    g = dataclasses.replace(
        g, prune_rates=tuple(1.0 for _ in g.prune_rates),
        batch_size=64.0, learning_rate=0.03)
    spec = network.build(g, desk_space, train.class_count, train.size,
                         train.channels)
    state = nn.init_state(spec, np.random.default_rng(3))
    nn.train(spec, state, train.images, train.labels,
             nn.TrainConfig(epochs=4, batch_size=64, lr_init=0.03, seed=11))
    acc = nn.evaluate(spec, state, val.images, val.labels)
    return g, spec, state, acc

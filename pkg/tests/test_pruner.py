import dataclasses

import numpy as np
import pytest

from evonas import genome as G, network as N, nn, pruner as P
from .helpers import slice_oracle


def two_conv_spec():
    """conv 3->4 then conv 4->4, one FC: the Eq-style slicing shapes."""
    space = G.SearchSpaceConfig(num_stages=1, max_layers_per_stage=2,
                                base_channels=(4,), base_fc_width=8)
    g = G.Genome(((3, 3),), 1, (), (1.0, 1.0), 8.0, 0.02)
    return space, N.build(g, space, 3, input_size=8, input_channels=3)


def test_slice_shapes_follow_rates():
    space, spec = two_conv_spec()
    state = nn.init_state(spec, 0)
    pruned_spec, pruned_state = P.slice_weights(state, spec, (0.5, 0.5), space)
    w = pruned_state["conv.s0.l1.w"]
    assert w.shape == (2, 2, 3, 3)
    src = state["conv.s0.l1.w"]
    assert np.array_equal(w, src[:2, :2])
    # first conv keeps the image channels on its input side
    assert pruned_state["conv.s0.l0.w"].shape == (2, 3, 3, 3)


def test_all_ones_strategy_is_identity():
    space, spec = two_conv_spec()
    state = nn.init_state(spec, 1)
    pruned_spec, pruned_state = P.slice_weights(state, spec, (1.0, 1.0), space)
    assert pruned_spec == spec
    assert nn.states_equal(state, pruned_state)


def test_slices_match_index_by_index_oracle(desk_space):
    rng = np.random.default_rng(2)
    for seed in range(10):
        g = G.random_genome(desk_space, rng)
        spec = N.build(g, desk_space, 10)
        state = nn.init_state(spec, rng)
        k = len(P.prunable_layers(spec))
        strategy = tuple(float(r) for r in rng.uniform(0.3, 1.0, k))
        pspec, pstate = P.slice_weights(state, spec, strategy, desk_space)
        by_key = {l.key: l for l in pspec.layers}
        for layer in pspec.layers:
            if not layer.trainable:
                continue
            name = layer.name
            w = pstate[f"{name}.w"]
            assert np.array_equal(
                w, slice_oracle(state[f"{name}.w"], layer.out_channels,
                                layer.in_channels))
            for suf in ("b",) + (("gamma", "beta", "rmean", "rvar")
                                 if layer.has_bn else ()):
                assert np.array_equal(
                    pstate[f"{name}.{suf}"],
                    slice_oracle(state[f"{name}.{suf}"], layer.out_channels))
        del by_key


def test_channel_chain_consistency_after_slicing(desk_space):
    rng = np.random.default_rng(3)
    for seed in range(10):
        g = G.random_genome(desk_space, rng)
        spec = N.build(g, desk_space, 10)
        state = nn.init_state(spec, rng)
        k = len(P.prunable_layers(spec))
        strategy = tuple(float(r) for r in rng.uniform(0.3, 1.0, k))
        pspec, pstate = P.slice_weights(state, spec, strategy, desk_space)
        stage_out = {l.stage_index: l.out_channels for l in pspec.conv_layers()}
        c = pspec.input_channels
        fcs = pspec.fc_layers()
        for l in pspec.layers:
            if l.role == "conv":
                assert l.in_channels == c
                c = l.out_channels
            elif l.role == "shortcut_conv1x1":
                assert l.in_channels == stage_out[l.from_stage]
                assert l.out_channels == stage_out[l.to_stage]
            elif l.role == "shortcut_identity":
                assert stage_out[l.from_stage] == stage_out[l.to_stage]
        assert fcs[0].in_channels == c * (pspec.input_size // 2 ** 5) ** 2
        assert fcs[-1].out_channels == 10 and fcs[-1].prune_rate == 1.0
        # a pruned network must still run
        x = rng.normal(0, 1, (2, 3, 32, 32)).astype(np.float32)
        nn.forward(pspec, pstate, x)
        assert pspec.param_count <= spec.param_count


def test_identity_shortcut_deleted_when_widths_diverge():
    space = G.SearchSpaceConfig(num_stages=2, max_layers_per_stage=1,
                                base_channels=(8, 8), base_fc_width=8)
    g = G.Genome(((3,), (3,)), 1, (1,), (1.0, 1.0), 8.0, 0.02)
    spec = N.build(g, space, 3, input_size=8)
    assert spec.shortcuts == ((0, 1, "identity"),)
    state = nn.init_state(spec, 4)
    # equal rates keep the identity alive
    pspec, _ = P.slice_weights(state, spec, (0.5, 0.5), space)
    assert pspec.shortcuts == ((0, 1, "identity"),)
    # diverging rates delete it (no trained weights exist for a projection)
    pspec, pstate = P.slice_weights(state, spec, (0.5, 1.0), space)
    assert pspec.shortcuts == ()
    assert pspec.param_count == sum(l.param_count() for l in pspec.layers)
    nn.forward(pspec, pstate, np.zeros((1, 3, 8, 8), np.float32))


def test_conv_shortcut_survives_by_slicing():
    space = G.SearchSpaceConfig(num_stages=2, max_layers_per_stage=1,
                                base_channels=(8, 16), base_fc_width=8)
    g = G.Genome(((3,), (3,)), 1, (1,), (1.0, 1.0), 8.0, 0.02)
    spec = N.build(g, space, 3, input_size=8)
    assert spec.shortcuts == ((0, 1, "conv1x1"),)
    state = nn.init_state(spec, 5)
    pspec, pstate = P.slice_weights(state, spec, (0.5, 0.75), space)
    assert pspec.shortcuts == ((0, 1, "conv1x1"),)
    sc = pstate["short.0.1.w"]
    assert sc.shape == (12, 4, 1, 1)
    assert np.array_equal(sc, state["short.0.1.w"][:12, :4])


def test_slicing_composition_when_rounding_composes():
    space = G.SearchSpaceConfig(num_stages=1, max_layers_per_stage=1,
                                base_channels=(64,), base_fc_width=8)
    g = G.Genome(((3,),), 1, (), (1.0,), 8.0, 0.02)
    spec = N.build(g, space, 3, input_size=2)
    state = nn.init_state(spec, 6)
    s1, st1 = P.slice_weights(state, spec, (0.75,), space)       # 64 -> 48
    s2, st2 = P.slice_weights(st1, s1, (29 / 48,), space)        # 48 -> 29
    direct_spec, direct = P.slice_weights(state, spec, (29 / 64,), space)
    assert s2.conv_layers()[0].out_channels == 29
    assert direct_spec.conv_layers()[0].out_channels == 29
    assert nn.states_equal(st2, direct)


def test_composed_genome_rebuilds_channels(desk_space):
    rng = np.random.default_rng(7)
    g = G.random_genome(desk_space, rng)
    spec = N.build(g, desk_space, 10)
    state = nn.init_state(spec, rng)
    k = len(P.prunable_layers(spec))
    strategy = tuple(float(r) for r in rng.uniform(0.6, 1.0, k))
    pspec, _ = P.slice_weights(state, spec, strategy, desk_space)
    rebuilt = N.build(pspec.source_genome, desk_space, 10)
    assert [l.out_channels for l in rebuilt.conv_layers()] == \
        [l.out_channels for l in pspec.conv_layers()]
    lo, hi = desk_space.prune_range
    assert all(lo <= r <= hi for r in pspec.source_genome.prune_rates)


def test_strategy_validation(desk_space):
    g = G.random_genome(desk_space, 8)
    spec = N.build(g, desk_space, 10)
    state = nn.init_state(spec, 8)
    k = len(P.prunable_layers(spec))
    with pytest.raises(ValueError, match="length"):
        P.slice_weights(state, spec, (0.5,) * (k + 1), desk_space)
    with pytest.raises(ValueError, match="range"):
        P.slice_weights(state, spec, (0.1,) * k, desk_space)


def test_first_conv_masked_forward_equivalence():
    """Slicing the first conv equals zeroing the pruned channels and reading
    the surviving ones (per-channel BN makes the equivalence exact there)."""
    rng = np.random.default_rng(9)
    x = rng.normal(0, 1, (6, 8, 8, 3)).astype(np.float32)
    w = rng.normal(0, 0.5, (8, 3, 3, 3)).astype(np.float32)
    b = rng.normal(0, 0.1, 8).astype(np.float32)
    state = {"c.gamma": rng.uniform(0.5, 1.5, 8).astype(np.float32),
             "c.beta": rng.normal(0, 0.2, 8).astype(np.float32),
             "c.rmean": np.zeros(8, np.float32),
             "c.rvar": np.ones(8, np.float32)}
    full, _ = nn._stage_conv_forward(x, w, b, pad=1)
    full, _ = nn.bn_forward(full, state, "c", "train", False)
    keep = 5
    sliced_state = {k.replace("c.", "p."): v[:keep].copy()
                    for k, v in state.items()}
    out, _ = nn._stage_conv_forward(x, w[:keep].copy(), b[:keep].copy(), pad=1)
    out, _ = nn.bn_forward(out, sliced_state, "p", "train", False)
    np.testing.assert_allclose(out, full[..., :keep], atol=1e-5)


def test_recalibrate_preconditions_and_frozen_params(small_data, desk_space):
    train, _ = small_data
    g = G.random_genome(desk_space, 10)
    spec = N.build(g, desk_space, 10)
    state = nn.init_state(spec, 10)
    with pytest.raises(ValueError):
        P.recalibrate_bn(spec, state, train, num_batches=0)
    before = {k: v.copy() for k, v in state.items()}
    P.recalibrate_bn(spec, state, train, num_batches=3, batch_size=32, rng=1)
    assert nn.states_equal(state, before, names=nn.trainable_names(state))
    stats = [k for k in state if nn.is_stat_tensor(k)]
    assert any(not np.array_equal(state[k], before[k]) for k in stats)


def test_propose_and_select_degenerate_and_constraint(trained_small_net,
                                                      small_data, desk_space):
    train, val = small_data
    g, spec, state, _acc = trained_small_net
    kept = P.propose_and_select(0, spec, state, desk_space, train, val,
                                num_samples=1, num_keep=1, rng_seed=1,
                                max_params=10 ** 9, calib_batches=2)
    assert len(kept) == 1
    assert kept[0].spec.param_count < spec.param_count
    with pytest.raises(ValueError):
        P.propose_and_select(0, spec, state, desk_space, train, val,
                             num_samples=1, num_keep=2, rng_seed=1,
                             max_params=10 ** 9)
    # impossible budget: every sample is discarded before ranking
    records = []
    with pytest.warns(UserWarning, match="violate"):
        kept = P.propose_and_select(0, spec, state, desk_space, train, val,
                                    num_samples=4, num_keep=2, rng_seed=1,
                                    max_params=10, calib_batches=2,
                                    log=records.append)
    assert kept == []
    assert len(records) == 4
    assert all(r["kept"] is False and r["inference_acc_post_calib"] is None
               for r in records)


def test_propose_and_select_log_records(trained_small_net, small_data,
                                        desk_space):
    train, val = small_data
    g, spec, state, _acc = trained_small_net
    records = []
    kept = P.propose_and_select(7, spec, state, desk_space, train, val,
                                num_samples=5, num_keep=2, rng_seed=3,
                                max_params=10 ** 9, calib_batches=2,
                                log=records.append)
    assert len(records) == 5 and sum(r["kept"] for r in records) == 2
    for r in records:
        assert r["parent_id"] == 7
        assert len(r["rates"]) == len(P.prunable_layers(spec))
        assert r["params"] > 0
        if r["kept"]:
            assert r["inference_acc_post_calib"] is not None
    # ranking: every kept record beats every dropped record on accuracy
    kept_accs = [r["inference_acc_post_calib"] for r in records if r["kept"]]
    drop_accs = [r["inference_acc_post_calib"] for r in records if not r["kept"]]
    assert min(kept_accs) >= max(a for a in drop_accs if a is not None)
    assert all(c.inference_accuracy is not None for c in kept)


def test_finetune_pruned_returns_accuracy(trained_small_net, small_data,
                                          desk_space):
    train, val = small_data
    g, spec, state, _ = trained_small_net
    kept = P.propose_and_select(0, spec, state, desk_space, train, val,
                                num_samples=2, num_keep=1, rng_seed=5,
                                max_params=10 ** 9, calib_batches=2)
    acc, losses = P.finetune_pruned(kept[0], train, val, epochs=1, seed=1)
    assert 0.0 <= acc <= 1.0 and len(losses) == 1

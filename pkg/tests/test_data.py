import numpy as np
import pytest

from evonas import data as D, genome as G, network as N, nn


def test_generate_deterministic_and_bounds():
    a = D.generate_synthetic(10, 5, 32, seed=3)
    b = D.generate_synthetic(10, 5, 32, seed=3)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    assert a.class_count == 10 and len(a) == 50
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    c = D.generate_synthetic(10, 5, 32, seed=4)
    assert not np.array_equal(a.images, c.images)


def test_generate_size_guard():
    with pytest.raises(ValueError, match="32"):
        D.generate_synthetic(10, 5, 16, seed=0)


def test_save_load_roundtrip(tmp_path):
    ds = D.generate_synthetic(7, 4, 32, seed=1)
    path = tmp_path / "d.ueds"
    D.save_dataset(ds, path)
    loaded = D.load_dataset(path)
    assert np.array_equal(ds.images, loaded.images)  # u8-quantized at source
    assert np.array_equal(ds.labels, loaded.labels)
    assert loaded.class_count == 7
    raw = path.read_bytes()
    assert raw[:4] == b"UEDS"


def test_load_errors_with_offsets(tmp_path):
    bad = tmp_path / "bad.ueds"
    bad.write_bytes(b"NOPE" + b"\x00" * 24)
    with pytest.raises(D.DatasetFormatError, match="byte 0"):
        D.load_dataset(bad)
    import struct
    empty = tmp_path / "empty.ueds"
    empty.write_bytes(b"UEDS" + struct.pack("<6I", 1, 0, 3, 32, 32, 10))
    with pytest.raises(D.DatasetFormatError, match="empty"):
        D.load_dataset(empty)
    ds = D.generate_synthetic(3, 2, 32, seed=0)
    good = tmp_path / "good.ueds"
    D.save_dataset(ds, good)
    trunc = tmp_path / "trunc.ueds"
    trunc.write_bytes(good.read_bytes()[:50])
    with pytest.raises(D.DatasetFormatError, match="truncated"):
        D.load_dataset(trunc)
    extra = tmp_path / "extra.ueds"
    extra.write_bytes(good.read_bytes() + b"x")
    with pytest.raises(D.DatasetFormatError, match="trailing"):
        D.load_dataset(extra)


def test_split_and_normalize():
    ds = D.generate_synthetic(10, 20, 32, seed=5)
    train, val = D.split_dataset(ds, 0.2, seed=1)
    assert len(train) == 160 and len(val) == 40
    t2, v2 = D.split_dataset(ds, 0.2, seed=1)
    assert np.array_equal(train.images, t2.images)
    mean, std = D.norm_stats(train.images)
    normed = D.normalize(train, mean, std)
    m2, s2 = D.norm_stats(normed.images)
    np.testing.assert_allclose(m2, 0.0, atol=1e-5)
    np.testing.assert_allclose(s2, 1.0, atol=1e-4)
    with pytest.raises(ValueError):
        D.split_dataset(ds, 1.5, seed=0)


def test_linear_probe_stays_near_chance():
    """No linear model on raw pixels separates the phase-randomized classes."""
    ds = D.generate_synthetic(10, 50, 32, seed=7)
    train, val = D.split_dataset(ds, 0.2, seed=1)
    mean, std = D.norm_stats(train.images)
    tn, vn = D.normalize(train, mean, std), D.normalize(val, mean, std)
    x = tn.images.reshape(len(tn), -1).astype(np.float64)
    xv = vn.images.reshape(len(vn), -1).astype(np.float64)
    w = np.zeros((x.shape[1], 10))
    b = np.zeros(10)
    for _ in range(300):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(x)), tn.labels] -= 1
        p /= len(x)
        w -= 1.0 * (x.T @ p + 1e-4 * w)
        b -= 1.0 * p.sum(axis=0)
    acc = float(((xv @ w + b).argmax(axis=1) == vn.labels).mean())
    assert acc <= 0.40


@pytest.mark.slow
def test_small_cnn_separates_classes():
    """A two-conv-layer network clears 70% validation in 10 epochs."""
    ds = D.generate_synthetic(10, 50, 32, seed=7)
    train, val = D.split_dataset(ds, 0.2, seed=1)
    mean, std = D.norm_stats(train.images)
    tn, vn = D.normalize(train, mean, std), D.normalize(val, mean, std)
    space = G.SearchSpaceConfig(num_stages=2, max_layers_per_stage=1,
                                base_channels=(8, 16), base_fc_width=32)
    g = G.Genome(((5,), (5,)), 1, (0,), (1.0, 1.0), 64.0, 0.02)
    spec = N.build(g, space, 10, input_size=32, input_channels=3)
    state = nn.init_state(spec, 0)
    nn.train(spec, state, tn.images, tn.labels,
             nn.TrainConfig(epochs=10, batch_size=64, lr_init=0.02, seed=0))
    assert nn.evaluate(spec, state, vn.images, vn.labels) >= 0.70

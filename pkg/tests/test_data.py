import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csfda.data import (
    AugmentationPolicy,
    Dataset,
    DatasetSpec,
    MapSpec,
    Shift,
    augment,
    augment_batch,
    gaussian_noise,
    generate,
    generate_maps,
    keyed_uniform,
    load_dataset,
    random_rotation,
    save_dataset,
    split_source,
)
from csfda.engine import RunConfig, evaluate, pretrain_source
from csfda.errors import DataFormatError, DatasetMissing, DegenerateSpec


def test_generate_label_balance_and_determinism():
    spec = DatasetSpec(K=3, N_s=301, N_t=122, seed=4)
    s1, t1 = generate(spec)
    s2, t2 = generate(spec)
    assert s1.x.tobytes() == s2.x.tobytes() and t1.x.tobytes() == t2.x.tobytes()
    for ds in (s1, t1):
        counts = np.bincount(ds.y, minlength=3)
        assert counts.max() - counts.min() <= 1
        assert np.all(np.isfinite(ds.x))


def test_zero_rotation_gives_identical_distributions():
    s, t = generate(DatasetSpec(shift=Shift("rotation", angle=0.0), N_s=4000, N_t=4000))
    for k in range(4):
        np.testing.assert_allclose(s.x[s.y == k].mean(axis=0), t.x[t.y == k].mean(axis=0), atol=0.15)


def test_rotation_moves_class_means():
    s, t = generate(DatasetSpec(shift=Shift("rotation", angle=90.0), N_s=4000, N_t=4000, radius=4.0))
    # class 0 sits at angle 0 in the source and at angle 90 in the target
    np.testing.assert_allclose(t.x[t.y == 0].mean(axis=0), [0.0, 4.0], atol=0.15)


@pytest.mark.parametrize("kw", [dict(K=1), dict(N_s=5), dict(N_t=0), dict(input_dim=1)])
def test_degenerate_specs(kw):
    with pytest.raises(DegenerateSpec):
        generate(DatasetSpec(**kw))


def test_shift_parse():
    assert Shift.parse("rotation:45") == Shift("rotation", angle=45.0)
    comp = Shift.parse("translation:1,2+scale:2")
    assert comp == (Shift("translation", vector=(1.0, 2.0)), Shift("scale", factor=2.0))
    with pytest.raises(DegenerateSpec):
        Shift.parse("warp:3")


def test_rotation_180_flips_two_class_accuracy():
    cfg = RunConfig(num_classes=2, shift="rotation:180", source_epochs=5, n_source=400, n_target=400)
    source, target = generate(cfg.dataset_spec())
    net, report = pretrain_source(cfg, source)
    src_acc = evaluate(net, source).overall
    tgt_acc = evaluate(net, target).overall
    assert tgt_acc == pytest.approx(1.0 - src_acc, abs=0.03)


# -- augmentation -------------------------------------------------------------

def test_identity_policy_returns_input(rng):
    x = rng.normal(size=(5, 3))
    out = augment_batch(x, np.arange(5), AugmentationPolicy.identity(), slot=3, epoch=2)
    np.testing.assert_array_equal(out, x)


def test_noise_mean_monte_carlo():
    sigma, n = 0.5, 4000
    policy = AugmentationPolicy((gaussian_noise(sigma),), L=2, seed=11)
    x = np.tile([[1.0, -2.0]], (n, 1))
    out = augment_batch(x, np.arange(n), policy, slot=0)
    assert np.all(np.abs(out.mean(axis=0) - x[0]) <= 3 * sigma / np.sqrt(n))
    assert out.std(axis=0) == pytest.approx([sigma, sigma], rel=0.05)


def test_keyed_uniform_range_and_spread():
    u = keyed_uniform(0, np.arange(20000), 1, 2, 3, 2)
    assert 0.0 < u.min() and u.max() < 1.0
    assert u.mean() == pytest.approx(0.5, abs=0.01)
    assert abs(np.corrcoef(u[:, 0], u[:, 1])[0, 1]) < 0.03


@given(st.integers(0, 2**40), st.integers(0, 11), st.integers(0, 1000), st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_augment_is_a_pure_function_of_its_key(index, slot, epoch, seed):
    policy = AugmentationPolicy(seed=seed)
    x = np.array([[0.3, -1.2]])
    a = augment_batch(x, np.array([index]), policy, slot, epoch)
    b = augment_batch(np.vstack([x, x + 1]), np.array([index, index + 1]), policy, slot, epoch)[:1]
    assert a.tobytes() == b.tobytes()


def test_augment_single_sample_matches_batch(rng):
    ds = Dataset(rng.normal(size=(4, 2)), [0, 1, 0, 1], [10, 11, 12, 13], 2)
    policy = AugmentationPolicy()
    batch = augment_batch(ds.x, ds.index, policy, slot=5, epoch=1)
    np.testing.assert_array_equal(augment(ds[2], policy, 5, epoch=1), batch[2])
    with pytest.raises(ValueError):
        augment(ds[0], policy, policy.L)


def test_slots_and_epochs_differ(rng):
    x = rng.normal(size=(3, 2))
    policy = AugmentationPolicy()
    a = augment_batch(x, np.arange(3), policy, 0, 0)
    assert not np.array_equal(a, augment_batch(x, np.arange(3), policy, 1, 0))
    assert not np.array_equal(a, augment_batch(x, np.arange(3), policy, 0, 1))
    assert not np.array_equal(a, augment_batch(x, np.arange(3), policy, 0, 0, stream=1))


def test_rotation_transform_preserves_norm(rng):
    x = rng.normal(size=(50, 2))
    out = augment_batch(x, np.arange(50), AugmentationPolicy((random_rotation(30.0),)), 0)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.linalg.norm(x, axis=1))


def test_policy_requires_two_views():
    with pytest.raises(ValueError):
        AugmentationPolicy(L=1)


# -- split --------------------------------------------------------------------

def test_split_hundred_samples_ninety_ten():
    ds = Dataset(np.zeros((100, 2)), np.arange(100) % 4, np.arange(100), 4)
    train, val = split_source(ds, 0.9, seed=0)
    assert (len(train), len(val)) == (90, 10)
    assert set(train.index.tolist()).isdisjoint(val.index.tolist())
    assert sorted(train.index.tolist() + val.index.tolist()) == list(range(100))
    for k in range(4):
        assert abs((train.y == k).sum() - 0.9 * 25) <= 1


def test_split_same_seed_same_split():
    ds = Dataset(np.zeros((57, 2)), np.arange(57) % 3, np.arange(57), 3)
    a, _ = split_source(ds, 0.9, seed=3)
    b, _ = split_source(ds, 0.9, seed=3)
    c, _ = split_source(ds, 0.9, seed=4)
    assert a.index.tolist() == b.index.tolist()
    assert a.index.tolist() != c.index.tolist()


# -- files ----------------------------------------------------------------------

def test_dataset_roundtrip_bit_identical(tmp_path):
    _, target = generate(DatasetSpec(input_dim=8, seed=2))
    path = tmp_path / "t.csdt"
    save_dataset(path, target)
    back = load_dataset(path)
    assert back.x.tobytes() == target.x.tobytes()
    assert back.y.tolist() == target.y.tolist()
    assert back.index.tolist() == target.index.tolist()
    assert back.K == target.K


def test_dataset_header_and_unlabeled(tmp_path):
    ds = Dataset(np.ones((3, 2)), [0, 1, 0], [5, 6, 7], 2).without_labels()
    path = tmp_path / "u.csdt"
    save_dataset(path, ds)
    raw = open(path, "rb").read()
    assert raw[:4] == b"CSDT"
    assert int.from_bytes(raw[4:8], "little") == 2
    assert int.from_bytes(raw[8:12], "little") == 2
    assert int.from_bytes(raw[12:20], "little") == 3
    assert len(raw) == 20 + 3 * (8 + 4 + 16)
    assert load_dataset(path).y.tolist() == [-1, -1, -1]


def test_dataset_errors(tmp_path):
    with pytest.raises(DatasetMissing):
        load_dataset(tmp_path / "nope")
    (tmp_path / "bad").write_bytes(b"XXXX" + bytes(16))
    with pytest.raises(DataFormatError):
        load_dataset(tmp_path / "bad")


def test_maps_shape_and_checkerboard():
    spec = MapSpec(n_maps=3)
    source, target = generate_maps(spec)
    assert len(source) == 3 * 16 * 16
    labels = source.y.reshape(3, 16, 16)
    assert set(np.unique(labels)) == {0, 1}
    # blocks of constant label
    assert np.mean(labels[:, :, :-1] == labels[:, :, 1:]) > 0.7

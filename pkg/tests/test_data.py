import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hvs.data import (DataFormatError, LabeledDataset, SplitConfigurationError, augment, generate_synthetic,
                      load_dataset, load_split, make_open_set_split, save_dataset, save_split)


class TestGenerator:
    def test_zero_noise_gives_prototypes(self):
        ds = generate_synthetic(5, 4, 8, 0.0, seed=1)
        for y in range(5):
            rows = ds.features[ds.labels == y]
            assert np.all(rows == rows[0])
        np.testing.assert_allclose(np.linalg.norm(ds.features, axis=1), 1.0, rtol=1e-6)

    def test_deterministic(self):
        a = generate_synthetic(10, 3, 16, 0.2, seed=7, latent_dim=4)
        b = generate_synthetic(10, 3, 16, 0.2, seed=7, latent_dim=4)
        assert a == b
        assert not generate_synthetic(10, 3, 16, 0.2, seed=8) == a

    def test_nearest_prototype_accuracy(self):
        ds = generate_synthetic(50, 6, 32, 0.1, seed=0)
        feats, labels = ds.features, ds.labels
        # brute-force 1-NN: first sample of each identity as the reference
        refs = np.array([feats[labels == y][0] for y in range(50)])
        held = np.concatenate([np.flatnonzero(labels == y)[1:] for y in range(50)])
        hits = 0
        for i in held:
            d = [float(np.dot(feats[i] - r, feats[i] - r)) for r in refs]
            hits += int(np.argmin(d) == labels[i])
        assert hits / len(held) > 0.95

    def test_latent_prototypes_span_subspace(self):
        ds = generate_synthetic(40, 1, 16, 0.0, seed=3, latent_dim=4)
        assert np.linalg.matrix_rank(ds.features.astype(np.float64), tol=1e-4) == 4

    def test_latent_full_width_is_plain(self):
        assert generate_synthetic(6, 2, 8, 0.1, seed=2, latent_dim=8) == generate_synthetic(6, 2, 8, 0.1, seed=2)

    @pytest.mark.parametrize("args", [(1, 2, 4, 0.1), (3, 0, 4, 0.1), (3, 2, 1, 0.1), (3, 2, 4, -1.0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            generate_synthetic(*args, seed=0)

    def test_invalid_latent(self):
        with pytest.raises(ValueError):
            generate_synthetic(3, 2, 4, 0.1, seed=0, latent_dim=5)


def _split_oracle(split):
    """Set-algebra checks over the emitted parts."""
    names = ("train", "val", "test_gallery", "test_probe_mated", "test_probe_nonmated")
    idx = {n: set(np.flatnonzero(split.parts == i).tolist()) for i, n in enumerate(names)}
    total = set()
    for n in names:
        assert not (total & idx[n])
        total |= idx[n]
    assert total == set(range(len(split.dataset)))
    lab = split.dataset.labels
    ids = {n: set(lab[list(idx[n])].tolist()) for n in names}
    test = ids["test_gallery"] | ids["test_probe_mated"] | ids["test_probe_nonmated"]
    assert not (ids["train"] & ids["val"]) and not (ids["train"] & test) and not (ids["val"] & test)
    assert ids["test_probe_mated"] <= ids["test_gallery"]
    assert not (ids["test_probe_nonmated"] & ids["test_gallery"])
    return ids


class TestSplit:
    def test_default_counts(self):
        ds = generate_synthetic(140, 5, 8, 0.1, seed=0)
        ids = _split_oracle(make_open_set_split(ds))
        assert (len(ids["train"]), len(ids["val"])) == (100, 20)
        assert (len(ids["test_gallery"]), len(ids["test_probe_nonmated"])) == (15, 5)

    def test_gallery_per_id(self):
        ds = generate_synthetic(40, 5, 8, 0.1, seed=0)
        split = make_open_set_split(ds, gallery_per_id=2)
        counts = np.bincount(split.test_gallery.labels)
        assert set(counts[counts > 0].tolist()) == {2}

    def test_small_val_fraction(self):
        ds = generate_synthetic(200, 3, 8, 0.1, seed=0)
        ids = _split_oracle(make_open_set_split(ds, train_frac=0.95, val_frac=0.05, gallery_per_id=1))
        assert len(ids["val"]) == round((200 - round(200 / 7)) * 0.05)

    def test_no_nonmated(self):
        ds = generate_synthetic(30, 4, 8, 0.1, seed=0)
        split = make_open_set_split(ds, nonmated_id_frac=0.0)
        assert len(split.test_probe_nonmated) == 0

    def test_too_few_identities(self):
        with pytest.raises(SplitConfigurationError):
            make_open_set_split(generate_synthetic(5, 4, 8, 0.1, seed=0))

    def test_fractions_validated(self):
        ds = generate_synthetic(30, 4, 8, 0.1, seed=0)
        with pytest.raises(SplitConfigurationError):
            make_open_set_split(ds, train_frac=0.5, val_frac=0.2)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(14, 60), st.integers(3, 6), st.floats(0.0, 0.5), st.integers(0, 10 ** 6))
    def test_partition_property(self, n_ids, per_id, nonmated, seed):
        ds = generate_synthetic(n_ids, per_id, 4, 0.1, seed=seed)
        try:
            split = make_open_set_split(ds, nonmated_id_frac=nonmated, seed=seed, test_id_frac=0.3)
        except SplitConfigurationError:
            return
        _split_oracle(split)

    def test_val_protocol(self):
        split = make_open_set_split(generate_synthetic(140, 4, 8, 0.1, seed=0))
        gal, probe = split.val_protocol(1)
        assert len(gal) == 20 and len(probe) == 60
        assert set(probe.labels.tolist()) == set(gal.labels.tolist())


class TestFormats:
    def test_dataset_round_trip(self, tmp_path):
        ds = generate_synthetic(6, 3, 5, 0.2, seed=4)
        save_dataset(tmp_path / "d.hvsd", ds)
        assert load_dataset(tmp_path / "d.hvsd") == ds

    def test_split_round_trip(self, tmp_path):
        split = make_open_set_split(generate_synthetic(30, 4, 5, 0.2, seed=4))
        save_split(tmp_path / "s.hvss", split)
        back = load_split(tmp_path / "s.hvss")
        assert back.dataset == split.dataset and np.array_equal(back.parts, split.parts)

    def test_truncated(self, tmp_path):
        save_dataset(tmp_path / "d", generate_synthetic(6, 3, 5, 0.2, seed=4))
        (tmp_path / "t").write_bytes((tmp_path / "d").read_bytes()[:-3])
        with pytest.raises(DataFormatError):
            load_dataset(tmp_path / "t")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"HVSC" + bytes(20))
        with pytest.raises(DataFormatError):
            load_dataset(tmp_path / "x")

    def test_empty_class_rejected(self, tmp_path):
        ds = LabeledDataset(np.zeros((2, 3)), np.array([0, 2]), 3)
        with pytest.raises(DataFormatError):
            save_dataset(tmp_path / "d", ds)

    def test_label_range(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((2, 3)), np.array([0, 3]), 3)


class TestAugment:
    def test_zero_sigma_identity(self):
        x = np.random.default_rng(0).standard_normal((4, 3)).astype(np.float32)
        assert np.array_equal(augment(x, 0.0, np.random.default_rng(1)), x)

    def test_rows_unit_norm(self):
        x = generate_synthetic(4, 3, 6, 0.1, seed=0).features
        out = augment(x, 0.3, np.random.default_rng(1))
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, rtol=1e-5)

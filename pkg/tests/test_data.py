import struct

import numpy as np
import pytest

from fedprint.data import (
    BadMagicError,
    CountMismatchError,
    Dataset,
    IDX_IMAGE_MAGIC,
    IDX_LABEL_MAGIC,
    PartitionError,
    TruncatedFileError,
    load_idx,
    make_key_samples,
    partition_dirichlet,
    partition_iid,
    synth_blobs,
)
from fedprint.nn import SgdTrainer, accuracy, init_model


def write_idx_pair(tmp_path, images, labels):
    """Forge a small IDX image/label pair for parser tests."""
    img_path = tmp_path / "imgs.idx3-ubyte"
    lbl_path = tmp_path / "lbls.idx1-ubyte"
    n, rows, cols = images.shape
    with open(img_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(images.astype(np.uint8).tobytes())
    with open(lbl_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
        fh.write(labels.astype(np.uint8).tobytes())
    return str(img_path), str(lbl_path)


class TestSynthBlobs:
    def test_zero_spread_collapses_to_centers(self):
        ds = synth_blobs(classes=2, per_class=1, dim=5, spread=0.0, seed=1)
        assert len(ds) == 2
        assert ds.class_count == 2
        # spread 0 keeps both rows distinct (two separate centers)
        assert not np.array_equal(ds.samples[0], ds.samples[1])
        ds3 = synth_blobs(classes=2, per_class=3, dim=5, spread=0.0, seed=1)
        assert np.array_equal(ds3.samples[0], ds3.samples[1])

    def test_same_seed_identical(self):
        a = synth_blobs(4, 10, 8, 0.1, seed=7)
        b = synth_blobs(4, 10, 8, 0.1, seed=7)
        assert np.array_equal(a.samples, b.samples)
        assert np.array_equal(a.labels, b.labels)

    def test_values_in_unit_interval(self):
        ds = synth_blobs(3, 50, 6, 0.5, seed=8)
        assert ds.samples.min() >= 0.0
        assert ds.samples.max() <= 1.0

    def test_linear_classifier_separates_tight_blobs(self):
        ds = synth_blobs(5, 40, 16, spread=0.05, seed=9)
        model = init_model((16, 5), np.random.default_rng(10))
        trainer = SgdTrainer(model, lr=0.5, momentum=0.9, batch_size=20)
        rng = np.random.default_rng(11)
        for _ in range(60):
            trainer.epoch(ds.samples, ds.labels, rng)
        assert accuracy(model, ds.samples, ds.labels) >= 0.99

    def test_preconditions(self):
        with pytest.raises(ValueError):
            synth_blobs(1, 5, 4, 0.1, seed=0)
        with pytest.raises(ValueError):
            synth_blobs(3, 0, 4, 0.1, seed=0)


class TestLoadIdx:
    def test_round_trip_counts_and_scaling(self, tmp_path):
        rng = np.random.default_rng(12)
        images = rng.integers(0, 256, (30, 4, 4), dtype=np.uint8)
        labels = rng.integers(0, 10, 30, dtype=np.uint8)
        img, lbl = write_idx_pair(tmp_path, images, labels)
        ds = load_idx(img, lbl)
        assert len(ds) == 30
        assert ds.dim == 16
        assert ds.samples.max() <= 1.0
        assert np.array_equal(ds.labels, labels.astype(np.int64))
        assert np.allclose(ds.samples[0], images[0].ravel() / 255.0)

    def test_empty_file_truncated(self, tmp_path):
        img = tmp_path / "empty.idx"
        img.write_bytes(b"")
        with pytest.raises(TruncatedFileError):
            load_idx(str(img), str(img))

    def test_bad_magic(self, tmp_path):
        img = tmp_path / "bad.idx"
        img.write_bytes(struct.pack(">IIII", 0xDEADBEEF, 1, 2, 2) + b"\x00" * 4)
        with pytest.raises(BadMagicError):
            load_idx(str(img), str(img))

    def test_count_mismatch(self, tmp_path):
        rng = np.random.default_rng(13)
        images = rng.integers(0, 256, (10, 3, 3), dtype=np.uint8)
        labels = rng.integers(0, 10, 8, dtype=np.uint8)
        img, lbl = write_idx_pair(tmp_path, images, labels)
        with pytest.raises(CountMismatchError):
            load_idx(img, lbl)

    def test_truncated_pixels(self, tmp_path):
        rng = np.random.default_rng(14)
        images = rng.integers(0, 256, (10, 3, 3), dtype=np.uint8)
        labels = rng.integers(0, 10, 10, dtype=np.uint8)
        img, lbl = write_idx_pair(tmp_path, images, labels)
        raw = open(img, "rb").read()
        open(img, "wb").write(raw[:-7])
        with pytest.raises(TruncatedFileError):
            load_idx(img, lbl)


class TestPartitionIid:
    def test_even_split(self):
        ds = synth_blobs(2, 5, 4, 0.1, seed=15)
        part = partition_iid(ds, 5, seed=16)
        assert part.sizes() == [2, 2, 2, 2, 2]

    def test_single_client_gets_everything(self):
        ds = synth_blobs(2, 6, 4, 0.1, seed=17)
        part = partition_iid(ds, 1, seed=18)
        assert sorted(part.assignments[0].tolist()) == list(range(12))

    def test_partition_is_exact(self):
        ds = synth_blobs(3, 33, 4, 0.1, seed=19)
        part = partition_iid(ds, 4, seed=20)
        all_idx = np.concatenate(part.assignments)
        assert len(all_idx) == len(ds)
        assert len(np.unique(all_idx)) == len(ds)
        assert max(part.sizes()) - min(part.sizes()) <= 1

    def test_class_balance_chi_square(self):
        scipy_stats = pytest.importorskip("scipy.stats")
        ds = synth_blobs(10, 1000, 4, 0.1, seed=21)
        part = partition_iid(ds, 5, seed=22)
        for idx in part.assignments:
            counts = np.bincount(ds.labels[idx], minlength=10)
            _, p = scipy_stats.chisquare(counts)
            assert p > 1e-4

    def test_too_many_clients(self):
        ds = synth_blobs(2, 2, 4, 0.1, seed=23)
        with pytest.raises(PartitionError):
            partition_iid(ds, 10, seed=24)


class TestPartitionDirichlet:
    def test_deterministic(self):
        ds = synth_blobs(5, 60, 4, 0.1, seed=25)
        p1 = partition_dirichlet(ds, 5, beta=0.5, seed=26)
        p2 = partition_dirichlet(ds, 5, beta=0.5, seed=26)
        for a, b in zip(p1.assignments, p2.assignments):
            assert np.array_equal(a, b)

    def test_small_beta_skews(self):
        # At beta=0.1 at least one client concentrates most mass in <= 2 classes.
        ds = synth_blobs(10, 300, 4, 0.1, seed=27)
        hits = 0
        for seed in range(5):
            part = partition_dirichlet(ds, 5, beta=0.1, seed=30 + seed)
            for idx in part.assignments:
                counts = np.bincount(ds.labels[idx], minlength=10)
                top2 = np.sort(counts)[-2:].sum()
                if len(idx) and top2 / len(idx) >= 0.7:
                    hits += 1
                    break
        assert hits >= 4

    def test_large_beta_near_iid(self):
        ds = synth_blobs(10, 500, 4, 0.1, seed=28)
        part = partition_dirichlet(ds, 5, beta=100.0, seed=29)
        global_hist = np.bincount(ds.labels, minlength=10) / len(ds)
        for idx in part.assignments:
            hist = np.bincount(ds.labels[idx], minlength=10) / len(idx)
            assert np.abs(hist - global_hist).max() < 0.1

    def test_partition_exact_and_nonempty(self):
        ds = synth_blobs(4, 50, 4, 0.1, seed=31)
        part = partition_dirichlet(ds, 6, beta=0.3, seed=32)
        all_idx = np.concatenate(part.assignments)
        assert len(np.unique(all_idx)) == len(all_idx)
        assert all(len(a) > 0 for a in part.assignments)

    def test_bad_beta(self):
        ds = synth_blobs(2, 5, 4, 0.1, seed=33)
        with pytest.raises(ValueError):
            partition_dirichlet(ds, 2, beta=0.0, seed=34)


class TestKeySamples:
    def test_one_per_class(self):
        keys = make_key_samples("structured-noise", 10, 10, 16, seed=35)
        assert len(keys) == 10
        assert sorted(keys.labels.tolist()) == list(range(10))

    def test_count_must_divide(self):
        with pytest.raises(ValueError):
            make_key_samples("structured-noise", 15, 10, 16, seed=36)

    def test_deterministic(self):
        a = make_key_samples("structured-noise", 40, 10, 16, seed=37)
        b = make_key_samples("structured-noise", 40, 10, 16, seed=37)
        assert np.array_equal(a.samples, b.samples)

    def test_out_of_distribution_for_blob_classifier(self):
        ds = synth_blobs(10, 100, 96, spread=0.1, seed=38)
        model = init_model((96, 64, 10), np.random.default_rng(39))
        trainer = SgdTrainer(model, lr=0.05, momentum=0.9)
        rng = np.random.default_rng(40)
        for _ in range(30):
            trainer.epoch(ds.samples, ds.labels, rng)
        assert accuracy(model, ds.samples, ds.labels) > 0.95
        keys = make_key_samples("structured-noise", 100, 10, 96, seed=41)
        from fedprint.nn import predict_proba

        conf = predict_proba(model, keys.samples).max(axis=1)
        assert conf.mean() < 0.6

    def test_never_collides_with_training_samples(self):
        ds = synth_blobs(10, 50, 16, spread=0.1, seed=42)
        keys = make_key_samples("structured-noise", 50, 10, 16, seed=43)
        d2 = (
            (keys.samples[:, None, :] - ds.samples[None, :, :]) ** 2
        ).sum(axis=2)
        assert d2.min() > 0.0

    def test_disjoint_subset_kind(self):
        keys = make_key_samples("disjoint-class-subset", 20, 10, 8, seed=44)
        assert len(keys) == 20
        assert keys.class_count == 10

    def test_external_file_kind(self, tmp_path):
        rng = np.random.default_rng(45)
        images = rng.integers(0, 256, (20, 4, 4), dtype=np.uint8)
        labels = rng.integers(0, 10, 20, dtype=np.uint8)
        img, lbl = write_idx_pair(tmp_path, images, labels)
        keys = make_key_samples(
            "external-file", 20, 10, 16, seed=46, images_path=img, labels_path=lbl
        )
        assert len(keys) == 20
        assert np.bincount(keys.labels, minlength=10).tolist() == [2] * 10

    def test_external_file_missing(self):
        with pytest.raises(FileNotFoundError):
            make_key_samples("external-file", 10, 10, 16, seed=47)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_key_samples("telepathy", 10, 10, 16, seed=48)


class TestDatasetCsv:
    def test_export(self, tmp_path):
        ds = synth_blobs(2, 3, 4, 0.1, seed=49)
        path = tmp_path / "ds.csv"
        ds.to_csv(str(path))
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "label,x0,x1,x2,x3"
        assert len(lines) == 7

import numpy as np
import pytest

from dardkit.data import (
    Batch,
    batches,
    blob_centers,
    default_fixture,
    parse_cifar_bytes,
    serialize_cifar,
    synth_blobs,
)
from dardkit.errors import ConfigError, ContractViolation, DataError, DataFormatError

rng = np.random.default_rng(3)

RECORD10 = 1 + 3072
RECORD100 = 2 + 3072


def fake_cifar10(n, seed=0):
    local = np.random.default_rng(seed)
    records = []
    for i in range(n):
        label = local.integers(0, 10)
        pixels = local.integers(0, 256, size=3072, dtype=np.int64)
        records.append(bytes([label]) + bytes(pixels.astype(np.uint8)))
    return b"".join(records)


def fake_cifar100(n, seed=0):
    local = np.random.default_rng(seed)
    records = []
    for i in range(n):
        coarse = local.integers(0, 20)
        fine = local.integers(0, 100)
        pixels = local.integers(0, 256, size=3072, dtype=np.int64)
        records.append(bytes([coarse, fine]) + bytes(pixels.astype(np.uint8)))
    return b"".join(records)


class TestCifarParsing:
    def test_record_count(self):
        ds = parse_cifar_bytes(fake_cifar10(10), "cifar10")
        assert len(ds) == 10
        assert ds.input_shape == (3, 32, 32)
        assert ds.num_classes == 10

    def test_all_zero_record(self):
        data = bytes([3]) + bytes(3072)
        ds = parse_cifar_bytes(data, "cifar10")
        np.testing.assert_array_equal(ds.inputs, np.zeros((1, 3, 32, 32)))
        assert ds.labels[0] == 3

    def test_full_byte_scales_to_one(self):
        data = bytes([0]) + bytes([255]) * 3072
        ds = parse_cifar_bytes(data, "cifar10")
        np.testing.assert_array_equal(ds.inputs, np.ones((1, 3, 32, 32)))

    def test_channel_planar_layout(self):
        # first 1024 bytes are the red plane, row-major
        pixels = bytearray(3072)
        pixels[0] = 255          # red channel, pixel (0, 0)
        pixels[1024 + 33] = 255  # green channel, pixel (1, 1)
        ds = parse_cifar_bytes(bytes([0]) + bytes(pixels), "cifar10")
        assert ds.inputs[0, 0, 0, 0] == 1.0
        assert ds.inputs[0, 1, 1, 1] == 1.0
        assert ds.inputs[0].sum() == 2.0

    def test_wrong_size_names_byte_counts(self):
        with pytest.raises(DataFormatError, match="3073"):
            parse_cifar_bytes(fake_cifar10(3) + b"x", "cifar10")

    def test_label_out_of_range_names_record(self):
        bad = bytes([11]) + bytes(3072)
        data = fake_cifar10(2) + bad
        with pytest.raises(DataError, match="record 2"):
            parse_cifar_bytes(data, "cifar10")

    def test_cifar100_keeps_fine_label(self):
        data = bytes([5, 77]) + bytes(3072)
        ds = parse_cifar_bytes(data, "cifar100")
        assert ds.labels[0] == 77
        assert ds.coarse_labels[0] == 5
        assert ds.num_classes == 100

    def test_round_trip_cifar10(self):
        data = fake_cifar10(25, seed=4)
        ds = parse_cifar_bytes(data, "cifar10")
        assert serialize_cifar(ds, "cifar10") == data

    def test_round_trip_cifar100(self):
        data = fake_cifar100(25, seed=5)
        ds = parse_cifar_bytes(data, "cifar100")
        assert serialize_cifar(ds, "cifar100") == data

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            parse_cifar_bytes(b"", "mnist")


class TestSynthBlobs:
    def test_deterministic_in_seed(self):
        a = synth_blobs(9, num_classes=4, dim=8, n_per_class=10, spread=0.2)
        b = synth_blobs(9, num_classes=4, dim=8, n_per_class=10, spread=0.2)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_zero_spread_collapses_to_centers(self):
        ds = synth_blobs(1, num_classes=3, dim=5, n_per_class=4, spread=0.0)
        centers = blob_centers(3, 5, 0.0)
        for k in range(3):
            cluster = ds.inputs[ds.labels == k]
            np.testing.assert_allclose(cluster, np.tile(centers[k], (4, 1)), atol=1e-12)

    def test_inputs_in_unit_cube(self):
        ds = synth_blobs(2, num_classes=5, dim=10, n_per_class=50, spread=0.5)
        assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0

    def test_dim_smaller_than_classes(self):
        with pytest.raises(ConfigError):
            synth_blobs(0, num_classes=5, dim=3)

    def test_fixture_shapes(self):
        train, test = default_fixture(seed=0)
        assert len(train) == 2000 and len(test) == 1000
        assert train.input_shape == (32,) and train.num_classes == 10
        # splits are disjoint draws
        assert not np.array_equal(train.inputs[:1000], test.inputs)


class TestBatches:
    def setup_method(self):
        self.ds = synth_blobs(4, num_classes=3, dim=6, n_per_class=7, spread=0.1)

    def test_single_batch_when_size_covers_all(self):
        out = batches(self.ds, batch_size=100, seed=0, epoch=0)
        assert len(out) == 1 and len(out[0]) == 21

    def test_deterministic_order(self):
        a = batches(self.ds, 5, seed=3, epoch=2)
        b = batches(self.ds, 5, seed=3, epoch=2)
        for ba, bb in zip(a, b):
            np.testing.assert_array_equal(ba.inputs, bb.inputs)

    def test_epochs_differ(self):
        a = np.concatenate([b.labels for b in batches(self.ds, 5, seed=3, epoch=0)])
        b = np.concatenate([b.labels for b in batches(self.ds, 5, seed=3, epoch=1)])
        assert not np.array_equal(a, b)

    def test_epoch_covers_every_record_once(self):
        out = batches(self.ds, 4, seed=1, epoch=0)
        labels = np.concatenate([b.labels for b in out])
        assert len(labels) == len(self.ds)
        np.testing.assert_array_equal(np.sort(labels), np.sort(self.ds.labels))
        # short final batch is emitted
        assert len(out[-1]) == len(self.ds) % 4 or len(self.ds) % 4 == 0

    def test_all_batches_in_domain(self):
        for b in batches(self.ds, 5, seed=0, epoch=0):
            assert b.inputs.min() >= 0.0 and b.inputs.max() <= 1.0

    def test_empty_dataset(self):
        empty = synth_blobs(0, num_classes=2, dim=2, n_per_class=0)
        with pytest.raises(ConfigError):
            batches(empty, 4)

    def test_bad_batch_size(self):
        with pytest.raises(ConfigError):
            batches(self.ds, 0)


class TestBatchInvariants:
    def test_length_mismatch(self):
        with pytest.raises(ContractViolation):
            Batch(np.zeros((3, 2)), np.zeros(2, dtype=int))

    def test_domain_violation(self):
        with pytest.raises(ContractViolation):
            Batch(np.array([[0.5, 1.2]]), np.array([0]))
        with pytest.raises(ContractViolation):
            Batch(np.array([[-0.1, 0.2]]), np.array([0]))

"""Data plane tests: IDX files, synthetic data, partitioning, splitting."""

import numpy as np
import pytest

from fedsim.data import (ClientShards, LabeledImage, PartitionSpec, SyntheticSpec,
                         dataset_fingerprint, generate_synthetic, label_entropy,
                         largest_remainder, load_idx_dataset, load_per_client_dirs,
                         partition, read_idx, split_3_1_1, write_idx)
from fedsim.errors import DataFormatError, FedsimError


def make_images(n, label=0, seed=0):
    rng = np.random.default_rng(seed)
    return [LabeledImage(rng.uniform(size=(1, 4, 4)), label) for _ in range(n)]


# ---------------------------------------------------------------------------
# largest remainder
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("total,props,expect", [
    (5, [3, 1, 1], [3, 1, 1]),
    (10, [3, 1, 1], [6, 2, 2]),
    (7, [3, 1, 1], [4, 2, 1]),       # leftover goes to the largest remainder
    (100, [1, 1, 1, 1], [25, 25, 25, 25]),
])
def test_largest_remainder(total, props, expect):
    counts = largest_remainder(total, np.array(props, dtype=float))
    assert counts.tolist() == expect
    assert counts.sum() == total


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def test_idx_round_trip_and_normalization(tmp_path):
    images = np.zeros((4, 3, 3), dtype=np.uint8)
    images[0, 0, 0] = 255
    labels = np.array([0, 1, 2, 1], dtype=np.uint8)
    write_idx(tmp_path / "images.idx", images)
    write_idx(tmp_path / "labels.idx", labels)
    data = load_idx_dataset(tmp_path / "images.idx", tmp_path / "labels.idx",
                            num_classes=3)
    assert len(data) == 4
    assert data[0].pixels[0, 0, 0] == 1.0
    assert data[0].pixels.shape == (1, 3, 3)
    again = load_idx_dataset(tmp_path / "images.idx", tmp_path / "labels.idx")
    assert dataset_fingerprint(data) == dataset_fingerprint(again)


def test_idx_malformed_header(tmp_path):
    (tmp_path / "bad.idx").write_bytes(b"\x01\x02\x03\x04")
    with pytest.raises(DataFormatError):
        read_idx(tmp_path / "bad.idx")


def test_idx_truncated_payload(tmp_path):
    path = tmp_path / "short.idx"
    good = np.zeros((2, 2), dtype=np.uint8)
    write_idx(path, good)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(DataFormatError):
        read_idx(path)


def test_idx_label_out_of_range(tmp_path):
    write_idx(tmp_path / "images.idx", np.zeros((2, 2, 2), dtype=np.uint8))
    write_idx(tmp_path / "labels.idx", np.array([0, 9], dtype=np.uint8))
    with pytest.raises(DataFormatError):
        load_idx_dataset(tmp_path / "images.idx", tmp_path / "labels.idx",
                         num_classes=3)


def test_per_client_dirs_keep_natural_boundaries(tmp_path):
    for k, n in enumerate([3, 5]):
        d = tmp_path / f"client_{k}"
        d.mkdir()
        write_idx(d / "images.idx", np.full((n, 2, 2), k, dtype=np.uint8))
        write_idx(d / "labels.idx", np.full(n, k, dtype=np.uint8))
    clients = load_per_client_dirs(tmp_path)
    assert [len(c) for c in clients] == [3, 5]
    assert {img.label for img in clients[1]} == {1}
    spec = PartitionSpec("natural", num_clients=2)
    assert [len(c) for c in partition(clients, spec)] == [3, 5]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def test_synthetic_counts_and_determinism():
    spec = SyntheticSpec(num_classes=10, height=8, width=8, per_class=200, seed=5)
    data = generate_synthetic(spec)
    assert len(data) == 2000
    labels = np.array([img.label for img in data])
    assert np.bincount(labels).tolist() == [200] * 10
    again = generate_synthetic(spec)
    assert dataset_fingerprint(data) == dataset_fingerprint(again)
    assert all(img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0 for img in data)


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------

def test_iid_partition_equal_chunks():
    data = make_images(100)
    clients = partition(data, PartitionSpec("iid", num_clients=4, seed=1))
    assert [len(c) for c in clients] == [25, 25, 25, 25]


def test_partition_conserves_samples():
    data = generate_synthetic(SyntheticSpec(num_classes=5, per_class=60, seed=2))
    for kind, alpha in (("iid", 0.5), ("dirichlet", 0.5), ("dirichlet", 0.1)):
        clients = partition(data, PartitionSpec(kind, 6, seed=3, alpha=alpha))
        merged = [img for client in clients for img in client]
        assert dataset_fingerprint(merged) == dataset_fingerprint(data)


def test_partition_deterministic():
    data = generate_synthetic(SyntheticSpec(num_classes=4, per_class=50, seed=4))
    spec = PartitionSpec("dirichlet", 5, seed=9, alpha=0.5)
    a = partition(data, spec)
    b = partition(data, spec)
    for ca, cb in zip(a, b):
        assert dataset_fingerprint(ca) == dataset_fingerprint(cb)


def test_huge_alpha_behaves_like_iid():
    # class histograms per client within 10% of uniform, averaged over seeds
    data = generate_synthetic(SyntheticSpec(num_classes=5, per_class=200, seed=6))
    for seed in range(3):
        clients = partition(data, PartitionSpec("dirichlet", 4, seed=seed, alpha=1e6))
        for client in clients:
            labels = np.array([img.label for img in client])
            hist = np.bincount(labels, minlength=5) / len(labels)
            assert np.abs(hist - 0.2).max() <= 0.02


def test_dirichlet_skew_monotone_in_alpha():
    data = generate_synthetic(SyntheticSpec(num_classes=10, per_class=100, seed=7))
    means = {}
    for alpha in (0.1, 0.5, 10.0):
        entropies = []
        for seed in range(20):
            clients = partition(data, PartitionSpec("dirichlet", 8, seed=seed,
                                                    alpha=alpha))
            entropies.extend(label_entropy(c) for c in clients)
        means[alpha] = np.mean(entropies)
    assert means[0.1] < means[0.5] < means[10.0]


def test_infeasible_minimum_errors():
    data = make_images(8)   # 8 samples over 4 clients cannot give 5 each
    with pytest.raises(FedsimError):
        partition(data, PartitionSpec("dirichlet", 4, seed=0, alpha=0.5))


# ---------------------------------------------------------------------------
# 3:1:1 splitting
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("n,expect", [(5, (3, 1, 1)), (10, (6, 2, 2))])
def test_split_ratios(n, expect):
    shards = split_3_1_1(make_images(n), seed=0)
    assert (len(shards.train), len(shards.valid), len(shards.test)) == expect


def test_split_disjoint_and_covering():
    data = make_images(23, seed=3)
    shards = split_3_1_1(data, seed=1)
    merged = list(shards.train) + list(shards.valid) + list(shards.test)
    assert len(merged) == 23
    assert dataset_fingerprint(merged) == dataset_fingerprint(data)


def test_split_deterministic():
    data = make_images(17, seed=5)
    a, b = split_3_1_1(data, seed=2), split_3_1_1(data, seed=2)
    assert dataset_fingerprint(a.train) == dataset_fingerprint(b.train)
    assert dataset_fingerprint(a.test) == dataset_fingerprint(b.test)


def test_split_rejects_tiny_client():
    with pytest.raises(FedsimError):
        split_3_1_1(make_images(4), seed=0)

import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stealthbfa.data import (
    DatasetError,
    IdxParseError,
    LabeledDataset,
    encode_idx,
    load_idx_dataset,
    load_idx_images,
    load_idx_labels,
    parse_idx,
    stratified_split,
    synthetic_blobs,
    write_idx,
    write_idx_dataset,
)


def test_images_hand_example(tmp_path):
    p = tmp_path / "img.idx"
    p.write_bytes(bytes([0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0x00, 0xFF, 0x00, 0xFF]))
    x = load_idx_images(p)
    assert x.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(x[0, 0], [[0, 1], [0, 1]])


def test_labels_hand_example(tmp_path):
    p = tmp_path / "lab.idx"
    p.write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 3, 1, 0, 9]))
    np.testing.assert_array_equal(load_idx_labels(p), [1, 0, 9])


def test_truncated_payload_names_lengths():
    raw = bytes([0, 0, 8, 1, 0, 0, 0, 3, 1, 0])
    with pytest.raises(IdxParseError, match="expected 3 payload bytes, got 2") as err:
        parse_idx(raw)
    assert err.value.offset == len(raw)


def test_trailing_bytes_rejected():
    with pytest.raises(IdxParseError, match="trailing"):
        parse_idx(bytes([0, 0, 8, 1, 0, 0, 0, 1, 5, 6]))


def test_truncated_header():
    with pytest.raises(IdxParseError, match="truncated header"):
        parse_idx(bytes([0, 0, 8, 3, 0, 0, 0, 1]))


@pytest.mark.parametrize(
    "raw,offset",
    [
        (bytes([1, 0, 8, 1, 0, 0, 0, 1, 0]), 0),  # nonzero lead byte
        (bytes([0, 0, 9, 1, 0, 0, 0, 1, 0]), 2),  # non-ubyte element type
    ],
)
def test_bad_magic_reports_offset(raw, offset):
    with pytest.raises(IdxParseError) as err:
        parse_idx(raw)
    assert err.value.offset == offset
    assert f"offset {offset}" in str(err.value)


def test_wrong_file_kind_rejected(tmp_path):
    p = tmp_path / "lab.idx"
    p.write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 1, 7]))
    with pytest.raises(IdxParseError, match="0x00000801"):
        load_idx_images(p)


def test_consumed_bytes_position_exact():
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    raw = encode_idx(arr)
    assert len(raw) == 4 + 4 * 3 + 24
    header, data = parse_idx(raw)
    assert header.dims == (2, 3, 4) and header.ndim == 3 and header.type_code == 8
    np.testing.assert_array_equal(data, arr)
    assert raw[4:8] == struct.pack(">I", 2)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6)))
def test_image_write_read_round_trip(tmp_path_factory, images):
    p = tmp_path_factory.mktemp("rt") / "img.idx"
    write_idx(p, images)
    x = load_idx_images(p)
    assert x.min(initial=0) >= 0 and x.max(initial=1) <= 1
    np.testing.assert_array_equal(np.rint(x[:, 0] * 255).astype(np.uint8), images)


def test_dataset_round_trip_gz(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(5, 1, 4, 3)) / 255.0
    ds = LabeledDataset(imgs, rng.integers(0, 10, 5))
    ip, lp = tmp_path / "i.gz", tmp_path / "l.gz"
    write_idx_dataset(ip, lp, ds)
    assert gzip.decompress(ip.read_bytes())[:4] == bytes([0, 0, 8, 3])
    back = load_idx_dataset(ip, lp)
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.labels, ds.labels)
    # deterministic bytes
    first = ip.read_bytes()
    write_idx_dataset(ip, lp, ds)
    assert ip.read_bytes() == first


def test_count_mismatch_rejected(tmp_path):
    write_idx(tmp_path / "i.idx", np.zeros((2, 2, 2), np.uint8))
    write_idx(tmp_path / "l.idx", np.zeros(3, np.uint8))
    with pytest.raises(DatasetError, match="count mismatch"):
        load_idx_dataset(tmp_path / "i.idx", tmp_path / "l.idx")


def test_label_out_of_range_at_binding(tmp_path):
    write_idx(tmp_path / "i.idx", np.zeros((1, 2, 2), np.uint8))
    write_idx(tmp_path / "l.idx", np.array([10], np.uint8))
    with pytest.raises(DatasetError, match="class count"):
        load_idx_dataset(tmp_path / "i.idx", tmp_path / "l.idx", class_count=10)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.idx"):
        load_idx_labels(tmp_path / "nope.idx")


def test_bundled_mnist_subset(mnist):
    train, test = mnist
    assert train.inputs.shape == (8000, 1, 28, 28) and test.inputs.shape == (2000, 1, 28, 28)
    assert 0 <= train.inputs.min() and train.inputs.max() <= 1
    assert set(np.unique(train.labels)) == set(range(10))


def test_blobs_zero_spread_sits_on_centers():
    ds = synthetic_blobs(3, 5, 4, 0.0, seed=1)
    for c in range(3):
        pts = ds.inputs[ds.labels == c]
        assert np.all(pts == pts[0])
    assert len({tuple(ds.inputs[ds.labels == c][0]) for c in range(3)}) == 3


def test_blobs_deterministic_and_clamped():
    a = synthetic_blobs(4, 20, 6, 0.5, seed=3)
    b = synthetic_blobs(4, 20, 6, 0.5, seed=3)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.inputs.min() >= 0 and a.inputs.max() <= 1
    assert not np.array_equal(a.inputs, synthetic_blobs(4, 20, 6, 0.5, seed=4).inputs)


def test_blobs_large_spread_defeats_least_squares_linear_classifier():
    ds = synthetic_blobs(2, 200, 2, 2.0, seed=0)
    X = np.hstack([ds.inputs, np.ones((len(ds), 1))])
    target = np.where(ds.labels == 1, 1.0, -1.0)
    w, *_ = np.linalg.lstsq(X, target, rcond=None)
    acc = ((X @ w > 0) == (ds.labels == 1)).mean()
    assert acc < 1.0


def test_blobs_need_two_classes():
    with pytest.raises(DatasetError):
        synthetic_blobs(1, 5, 2, 0.1)


def test_stratified_split_partitions_by_class():
    ds = synthetic_blobs(3, 10, 2, 0.1, seed=0)
    tr, te = stratified_split(ds, 0.3, seed=0)
    assert len(tr) + len(te) == 30
    assert np.bincount(te.labels).tolist() == [3, 3, 3]

import gzip
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from fissionvae.data import (
    Dataset,
    border_mean,
    find_idx,
    load_mixed_mnist,
    parse_idx,
    partition,
    read_idx,
    serialize_idx,
    synth_two_group,
)
from fissionvae.errors import ConfigError, DataError, ParseError


def idx_bytes(code, dims, payload):
    return bytes([0, 0, code, len(dims)]) + struct.pack(f">{len(dims)}I", *dims) + payload


def test_header_arithmetic():
    arr = parse_idx(idx_bytes(0x08, [2, 2, 2], bytes(range(8))))
    assert arr.shape == (2, 2, 2) and arr.dtype == np.float32


def test_byte_255_is_one():
    assert parse_idx(idx_bytes(0x08, [1], b"\xff"))[0] == 1.0


def test_unscaled_and_other_types():
    assert parse_idx(idx_bytes(0x08, [2], b"\x01\x02"), scale=False).tolist() == [1, 2]
    arr = parse_idx(idx_bytes(0x0C, [2], struct.pack(">2i", -5, 7)))
    assert arr.tolist() == [-5, 7]


def test_gzip_accepted():
    raw = idx_bytes(0x08, [3], b"\x00\x80\xff")
    assert np.array_equal(parse_idx(gzip.compress(raw)), parse_idx(raw))


@pytest.mark.parametrize("data,offset", [
    (b"\x01\x00\x08\x01\x00\x00\x00\x01\x00", 0),                    # bad magic
    (b"\x00\x00\x07\x01\x00\x00\x00\x01\x00", 2),                    # unsupported type
    (idx_bytes(0x08, [4], b"\x00\x00"), 10),                         # truncated payload
    (b"\x00\x00\x08\x02\x00\x00", 6),                                # truncated dims
    (idx_bytes(0x08, [1], b"\x00\x00"), 9),                          # trailing bytes
])
def test_parse_errors_name_offset(data, offset):
    with pytest.raises(ParseError) as info:
        parse_idx(data)
    assert info.value.offset == offset
    assert f"byte offset {offset}" in str(info.value)


def test_parse_error_is_data_error():
    assert issubclass(ParseError, DataError)


@settings(max_examples=80, deadline=None)
@given(arrays(np.uint8, array_shapes(min_dims=1, max_dims=3, max_side=6)), st.booleans())
def test_idx_round_trip_bytes(arr, compress):
    out = parse_idx(serialize_idx(arr, compress=compress), scale=False)
    assert out.dtype == np.uint8 and np.array_equal(out, arr)


@settings(max_examples=40, deadline=None)
@given(arrays(np.int32, array_shapes(min_dims=1, max_dims=2, max_side=5)))
def test_idx_round_trip_int32(arr):
    assert np.array_equal(parse_idx(serialize_idx(arr)), arr)


def test_idx_round_trip_pixels_exact():
    pixels = np.arange(256, dtype=np.float32).reshape(16, 16) / np.float32(255)
    assert np.array_equal(parse_idx(serialize_idx(pixels)), pixels)


def test_read_and_find(tmp_path):
    (tmp_path / "x-idx1-ubyte.gz").write_bytes(serialize_idx(np.array([1, 2], np.uint8), compress=True))
    path = find_idx(tmp_path, "x-idx1-ubyte")
    assert read_idx(path).shape == (2,)
    with pytest.raises(DataError):
        find_idx(tmp_path, "missing")
    (tmp_path / "bad").write_bytes(b"\x01\x02\x03\x04")
    with pytest.raises(ParseError, match="bad"):
        read_idx(tmp_path / "bad")


def make_dataset(sizes):
    groups = np.concatenate([np.full(n, g) for g, n in enumerate(sizes)])
    return Dataset(np.zeros((len(groups), 2, 2), np.float32), groups)


def test_partition_even_split():
    shards = partition(make_dataset([10]), 1, 2, seed=0)
    assert sorted(len(s) for s in shards.values()) == [5, 5]
    assert not set(shards[0]) & set(shards[1])


def test_partition_deterministic():
    ds = make_dataset([30, 40])
    a, b = partition(ds, 2, 3, 9), partition(ds, 2, 3, 9)
    assert all(np.array_equal(a[c], b[c]) for c in a)
    assert any(not np.array_equal(a[c], partition(ds, 2, 3, 10)[c]) for c in a)


def test_partition_invariants():
    ds = make_dataset([100, 101])
    shards = partition(ds, 2, 10, 1)
    for g in range(2):
        own = [shards[g * 10 + c] for c in range(10)]
        sizes = [len(s) for s in own]
        assert max(sizes) - min(sizes) <= 1
        union = np.concatenate(own)
        assert len(set(union)) == len(union) == len(ds.group_indices(g))
        assert set(union) <= set(ds.group_indices(g))


def test_partition_insufficient_samples():
    with pytest.raises(ConfigError):
        partition(make_dataset([3, 10]), 2, 4, 0)


def test_synthetic_deterministic():
    a, b = synth_two_group(50, 8, seed=4), synth_two_group(50, 8, seed=4)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.groups, b.groups)
    assert not np.array_equal(a.images, synth_two_group(50, 8, seed=5).images)


def test_synthetic_shape_and_range():
    ds = synth_two_group(20, 10, seed=0)
    assert ds.images.shape == (40, 10, 10) and ds.k == 2
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_synthetic_threshold_classifier_separates_groups():
    # three hand features: border mean, centre mean, row-profile peak; threshold on the first
    ds = synth_two_group(500, 8, seed=2)
    feats = np.stack([border_mean(ds.images), ds.images[:, 3:5, 3:5].mean(axis=(1, 2)),
                      ds.images.mean(axis=2).max(axis=1)], axis=1)
    b0 = feats[ds.groups == 0, 0]
    b1 = feats[ds.groups == 1, 0]
    threshold = (b0.min() + b1.max()) / 2
    pred = (feats[:, 0] < threshold).astype(int)
    assert b0.min() > b1.max()
    assert np.mean(pred == ds.groups) == 1.0


def test_synthetic_rejects_empty_and_small():
    with pytest.raises(DataError):
        synth_two_group(0)
    with pytest.raises(ConfigError):
        synth_two_group(5, side=6)


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((0, 2, 2)), np.zeros(0))
    with pytest.raises(DataError):
        Dataset(np.full((1, 2, 2), 2.0), np.zeros(1))
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2, 2)), np.zeros(1))


def test_mixed_mnist_from_tiny_files(tmp_path):
    for name, n in (("m", 3), ("f", 2)):
        d = tmp_path / name
        d.mkdir()
        imgs = np.random.default_rng(n).integers(0, 256, (n, 28, 28), dtype=np.uint8)
        (d / "train-images-idx3-ubyte.gz").write_bytes(serialize_idx(imgs, compress=True))
    ds = load_mixed_mnist(tmp_path / "m", tmp_path / "f")
    assert ds.images.shape == (5, 28, 28) and ds.groups.tolist() == [0, 0, 0, 1, 1]


MNIST_DIR = os.environ.get("FVAE_MNIST_DIR")


@pytest.mark.skipif(not MNIST_DIR, reason="set FVAE_MNIST_DIR to the published MNIST files")
def test_official_mnist_header():
    imgs = read_idx(find_idx(MNIST_DIR, "train-images-idx3-ubyte"))
    assert imgs.shape == (60000, 28, 28)

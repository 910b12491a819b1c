import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fissionvae.checkpoint import MAGIC, Checkpoint, canonical_json, read_header
from fissionvae.errors import DataError, ParseError
from fissionvae.pgm import decode_pgm, encode_pgm


def sample_ckpt(rng=None):
    rng = rng or np.random.default_rng(0)
    params = {"encoder.0.weight": rng.standard_normal((3, 4)).astype(np.float32),
              "encoder.0.bias": rng.standard_normal(3).astype(np.float32),
              "branch1.decoder.0.weight": np.array([[np.float32(1e-40), -0.0]], np.float32)}
    return Checkpoint({"variant": "fission_ld", "seed": 1}, "abcd", 7, params)


def test_round_trip_bit_exact(tmp_path):
    ck = sample_ckpt()
    path = ck.save(tmp_path / "m.fvae")
    loaded = Checkpoint.load(path)
    assert list(loaded.params) == list(ck.params)
    for name in ck.params:
        assert loaded.params[name].tobytes() == ck.params[name].tobytes()
    assert loaded.to_bytes() == path.read_bytes()
    assert (loaded.round, loaded.config_hash, loaded.config) == (7, "abcd", ck.config)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(1, 4)), min_size=1, max_size=5), st.integers(0, 1000))
def test_round_trip_property(shapes, seed):
    rng = np.random.default_rng(seed)
    params = {f"t{i}": rng.standard_normal(s).astype(np.float32) for i, s in enumerate(shapes)}
    data = Checkpoint({}, "h", 0, params).to_bytes()
    assert Checkpoint.from_bytes(data).to_bytes() == data


def test_layout():
    data = sample_ckpt().to_bytes()
    assert data.startswith(MAGIC)
    (n,) = struct.unpack_from("<Q", data, 5)
    head, start = read_header(data)
    assert start == 13 + n
    assert data[13:13 + n].decode() == canonical_json(head)
    offsets = [t["offset"] for t in head["tensors"]]
    assert offsets == [0, 48, 60] and len(data) - start == 68
    w = np.frombuffer(data[start:start + 48], "<f4").reshape(3, 4)
    assert np.array_equal(w, sample_ckpt().params["encoder.0.weight"])


def corrupt_header(data, mutate):
    head, start = read_header(data)
    mutate(head)
    raw = canonical_json(head).encode()
    return MAGIC + struct.pack("<Q", len(raw)) + raw + data[start:]


@pytest.mark.parametrize("mutate", [
    lambda h: h["tensors"][1].update(offset=52),
    lambda h: h["tensors"][2].update(name="encoder.0.bias"),
    lambda h: h.update(format=2),
    lambda h: h.pop("round"),
])
def test_bad_headers_rejected(mutate):
    with pytest.raises(DataError):
        Checkpoint.from_bytes(corrupt_header(sample_ckpt().to_bytes(), mutate))


@pytest.mark.parametrize("cut", [3, 9, 20, -1])
def test_truncation_rejected(cut):
    data = sample_ckpt().to_bytes()
    with pytest.raises(DataError):
        Checkpoint.from_bytes(data[:cut])


def test_trailing_bytes_rejected():
    with pytest.raises(DataError, match="trailing"):
        Checkpoint.from_bytes(sample_ckpt().to_bytes() + b"\0")


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        Checkpoint.load(tmp_path / "nope.fvae")


def test_pgm_encode_decode():
    img = np.array([[0.0, 1.0, 0.5], [0.2, 0.8, 1.0]])
    data = encode_pgm(img, "config_hash=abc")
    assert data.startswith(b"P5\n# config_hash=abc\n3 2\n255\n")
    out = decode_pgm(data)
    assert out.shape == (2, 3) and out.tolist() == [[0, 255, 128], [51, 204, 255]]


@pytest.mark.parametrize("data", [b"P2\n1 1\n255\n\0", b"P5\n2 2\n255\n\0\0", b"P5\n1 1\n65535\n\0\0"])
def test_pgm_rejects_malformed(data):
    with pytest.raises(ParseError):
        decode_pgm(data)

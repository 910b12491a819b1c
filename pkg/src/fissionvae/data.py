"""IDX ingestion, per-group client sharding and a synthetic two-group dataset."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError

# IDX type code -> big-endian numpy dtype
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_CODES = {np.dtype(v).newbyteorder("="): k for k, v in IDX_TYPES.items()}

TRAIN_IMAGES = "train-images-idx3-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


def parse_idx(data: bytes, scale=True) -> np.ndarray:
    """Decode an IDX container (optionally gzipped).

    Unsigned-byte payloads are mapped to [0, 1] by /255 when ``scale`` is set;
    other element types are returned as stored.
    """
    data = bytes(data)
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise ParseError(f"corrupt gzip stream: {exc}", 0) from exc
    if len(data) < 4:
        raise ParseError("truncated IDX header", len(data))
    if data[0] != 0 or data[1] != 0:
        raise ParseError(f"bad IDX magic {data[:2].hex()}", 0)
    code, rank = data[2], data[3]
    if code not in IDX_TYPES:
        raise ParseError(f"unsupported IDX type code 0x{code:02x}", 2)
    header_end = 4 + 4 * rank
    if len(data) < header_end:
        raise ParseError(f"truncated IDX header: rank {rank} needs {header_end} bytes", len(data))
    dims = struct.unpack(f">{rank}I", data[4:header_end])
    dtype = IDX_TYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    need = header_end + count * dtype.itemsize
    if len(data) < need:
        raise ParseError(f"truncated IDX payload: expected {need} bytes, got {len(data)}", len(data))
    if len(data) > need:
        raise ParseError(f"{len(data) - need} trailing bytes after IDX payload", need)
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=header_end).reshape(dims)
    arr = arr.astype(dtype.newbyteorder("="))
    if code == 0x08 and scale:
        return arr.astype(np.float32) / np.float32(255.0)
    return arr


def serialize_idx(array, compress=False) -> bytes:
    """Encode ``array`` as IDX. Float arrays in [0, 1] are stored as bytes (x * 255)."""
    arr = np.asarray(array)
    if arr.dtype.kind == "f" and arr.size and arr.min() >= 0 and arr.max() <= 1:
        arr = np.rint(arr * 255).astype(np.uint8)
    native = arr.dtype.newbyteorder("=")
    if native not in _CODES:
        raise DataError(f"dtype {arr.dtype} has no IDX type code")
    code = _CODES[native]
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    payload = arr.astype(IDX_TYPES[code]).tobytes()
    out = header + payload
    return gzip.compress(out, mtime=0) if compress else out


def read_idx(path) -> np.ndarray:
    path = Path(path)
    try:
        return parse_idx(path.read_bytes())
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def find_idx(directory, stem) -> Path:
    directory = Path(directory)
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise DataError(f"{directory}: neither {stem} nor {stem}.gz found")


@dataclass
class Dataset:
    images: np.ndarray  # [N, H, W] in [0, 1]
    groups: np.ndarray  # [N] int
    source: str = ""

    def __post_init__(self):
        if len(self.images) == 0:
            raise DataError("dataset is empty")
        if len(self.images) != len(self.groups):
            raise DataError("images and group labels differ in length")
        if self.images.min() < 0 or self.images.max() > 1:
            raise DataError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.images)

    @property
    def side(self):
        return self.images.shape[1]

    @property
    def k(self):
        return int(self.groups.max()) + 1

    def flat(self, index=None):
        imgs = self.images if index is None else self.images[index]
        return imgs.reshape(len(imgs), -1)

    def group_indices(self, g):
        return np.flatnonzero(self.groups == g)


def concat(datasets: Sequence[Dataset], source="") -> Dataset:
    """Stack single-domain datasets; the i-th dataset becomes group i."""
    images = np.concatenate([d.images for d in datasets])
    groups = np.concatenate([np.full(len(d), i, dtype=np.int64) for i, d in enumerate(datasets)])
    return Dataset(images, groups, source)


def load_mixed_mnist(mnist_dir, fashion_dir, split="train") -> Dataset:
    """MNIST as group 0 and FashionMNIST as group 1."""
    stem = TRAIN_IMAGES if split == "train" else TEST_IMAGES
    parts = []
    for d in (mnist_dir, fashion_dir):
        imgs = read_idx(find_idx(d, stem))
        if imgs.ndim != 3:
            raise DataError(f"{d}: expected a rank-3 image file, got shape {imgs.shape}")
        parts.append(Dataset(imgs, np.zeros(len(imgs), dtype=np.int64)))
    return concat(parts, source=f"mixed_mnist:{split}")


def partition(dataset: Dataset, k, clients_per_group, seed) -> Dict[int, np.ndarray]:
    """Shuffle each group's indices and split them into near-equal shards.

    Client ids run group-major: client ``g * clients_per_group + c``.
    """
    if clients_per_group < 1:
        raise ConfigError("clients_per_group must be positive")
    shards = {}
    for g in range(k):
        idx = dataset.group_indices(g)
        if len(idx) < clients_per_group:
            raise ConfigError(f"group {g} has {len(idx)} samples for {clients_per_group} clients")
        perm = np.random.default_rng([seed, g]).permutation(idx)
        for c, chunk in enumerate(np.array_split(perm, clients_per_group)):
            shards[g * clients_per_group + c] = np.sort(chunk)
    return shards


def synth_two_group(n_per_group, side=8, seed=0) -> Dataset:
    """Group 0: horizontal bars two rows thick at random offsets.
    Group 1: centred Gaussian blobs of random radius.

    Bars always light both border columns while blobs stay well inside, so
    the mean of the border ring separates the groups.
    """
    if n_per_group <= 0:
        raise DataError("n_per_group must be positive")
    if side < 8:
        raise ConfigError("side must be at least 8")
    rng = np.random.default_rng(seed)
    bars = np.zeros((n_per_group, side, side), dtype=np.float32)
    offsets = rng.integers(0, side - 1, size=n_per_group)
    levels = rng.uniform(0.75, 1.0, size=n_per_group)
    for i, (row, level) in enumerate(zip(offsets, levels)):
        bars[i, row:row + 2, :] = level

    yy, xx = np.mgrid[0:side, 0:side]
    centre = (side - 1) / 2.0
    r2 = (yy - centre) ** 2 + (xx - centre) ** 2
    sigmas = rng.uniform(side / 10.0, side / 6.0, size=n_per_group)
    peaks = rng.uniform(0.75, 1.0, size=n_per_group)
    blobs = (peaks[:, None, None] * np.exp(-r2[None] / (2 * sigmas[:, None, None] ** 2))).astype(np.float32)

    images = np.concatenate([bars, blobs])
    groups = np.repeat(np.arange(2), n_per_group)
    return Dataset(images, groups, source=f"synthetic:{side}x{side}:seed{seed}")


def border_mean(images):
    """Mean intensity of the outermost ring of pixels, per image."""
    images = np.asarray(images)
    mask = np.ones(images.shape[1:], dtype=bool)
    mask[1:-1, 1:-1] = False
    return images[:, mask].mean(axis=1)

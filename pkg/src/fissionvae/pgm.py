"""Binary greyscale PGM (P5) read/write for generated samples."""
from __future__ import annotations

import re

import numpy as np

from .errors import ParseError

_HEADER = re.compile(rb"\AP5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def encode_pgm(image, comment: str = "") -> bytes:
    """[H, W] array in [0, 1] -> P5 bytes with maxval 255 and an optional header comment."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {img.shape}")
    pixels = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pixels.shape
    note = f"# {comment}\n" if comment else ""
    return f"P5\n{note}{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    """Parse P5 bytes (maxval < 256) into a uint8 [H, W] array."""
    m = _HEADER.match(data)
    if not m:
        raise ParseError("not a P5 PGM header", 0)
    w, h, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 256:
        raise ParseError(f"unsupported maxval {maxval}", m.start(3))
    start = m.end()
    if len(data) - start != w * h:
        raise ParseError(f"expected {w * h} pixel bytes, got {len(data) - start}", start)
    return np.frombuffer(data, dtype=np.uint8, offset=start).reshape(h, w)

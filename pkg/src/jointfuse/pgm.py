"""Netpbm PGM (P2 ascii / P5 binary) codec.

The only image format the engine reads or writes. Intensities are scaled to
[0, 1] on load; save clamps, quantizes with round-half-up and always emits
binary P5. 16-bit payloads are big-endian per the netpbm convention.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .image import as_plane, clamp01


class PgmFormatError(ValueError):
    """Raised for malformed, truncated or unsupported PGM files."""


def _tokenize_header(data: bytes, count: int) -> tuple[list[bytes], int]:
    """First `count` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset of the byte after the single
    whitespace character that terminates the last token.
    """
    tokens: list[bytes] = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i] not in (0x0A, 0x0D):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if i == start:
            raise PgmFormatError("malformed header: ran out of tokens")
        tokens.append(data[start:i])
    if i >= n or not data[i:i + 1].isspace():
        raise PgmFormatError("malformed header: missing separator after maxval")
    return tokens, i + 1


def load_pgm(path) -> np.ndarray:
    """Load a P2 or P5 grayscale file as a [0, 1] float plane."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 2:
        raise PgmFormatError(f"{path}: malformed header: file too short")
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise PgmFormatError(f"{path}: unsupported magic {magic!r} (want P2 or P5)")
    try:
        tokens, payload_at = _tokenize_header(data, 4)
    except PgmFormatError as exc:
        raise PgmFormatError(f"{path}: {exc}") from None
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise PgmFormatError(f"{path}: malformed header: non-numeric dimensions") from None
    if width <= 0 or height <= 0:
        raise PgmFormatError(f"{path}: malformed header: bad dimensions {width}x{height}")
    if not 0 < maxval <= 65535:
        raise PgmFormatError(f"{path}: malformed header: maxval {maxval} out of range")

    count = width * height
    if magic == b"P2":
        text = data[payload_at - 1:].split()
        if len(text) < count:
            raise PgmFormatError(
                f"{path}: truncated pixel data: expected {count} samples, got {len(text)}")
        try:
            values = np.array([int(t) for t in text[:count]], dtype=np.float64)
        except ValueError:
            raise PgmFormatError(f"{path}: malformed pixel data: non-numeric sample") from None
    else:
        bytes_per = 1 if maxval < 256 else 2
        payload = data[payload_at:payload_at + count * bytes_per]
        if len(payload) < count * bytes_per:
            raise PgmFormatError(
                f"{path}: truncated pixel data: expected {count * bytes_per} bytes, "
                f"got {len(payload)}")
        dtype = np.dtype(">u2") if bytes_per == 2 else np.dtype("u1")
        values = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    if np.any(values > maxval):
        raise PgmFormatError(f"{path}: sample exceeds maxval {maxval}")
    return (values / float(maxval)).reshape(height, width)


def save_pgm(img: np.ndarray, path, maxval: int = 255) -> None:
    """Write a binary P5 file; values are clamped then round-half-up quantized."""
    if maxval not in (255, 65535):
        raise ValueError(f"maxval must be 255 or 65535, got {maxval}")
    img = as_plane(img)
    quant = np.floor(clamp01(img) * maxval + 0.5)
    height, width = img.shape
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    if maxval == 255:
        payload = quant.astype(np.uint8).tobytes()
    else:
        payload = quant.astype(">u2").tobytes()
    Path(path).write_bytes(header + payload)

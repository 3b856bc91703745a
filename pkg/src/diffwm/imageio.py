"""Binary PGM (P5) / PBM (P4) images and packed watermark bit files."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


def _header(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, i, n = [], 0, len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i >= n:
            raise FormatError("truncated header")
        if data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        tokens.append(data[i:j])
        i = j
    if i >= n or not data[i:i + 1].isspace():
        raise FormatError("header must end with a single whitespace byte")
    return tokens, i + 1


def _dims(tokens):
    try:
        vals = [int(t) for t in tokens]
    except ValueError as exc:
        raise FormatError(f"bad header field: {exc}") from None
    if any(v <= 0 for v in vals):
        raise FormatError(f"non-positive header value in {vals}")
    return vals


def read_pgm(path: str | Path) -> np.ndarray:
    """8-bit (or 16-bit, returned as uint16) binary PGM."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    tokens, off = _header(data[2:], 3)
    w, h, maxval = _dims(tokens)
    if maxval > 65535:
        raise FormatError(f"{path}: maxval {maxval} out of range")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    body = data[2 + off:]
    need = w * h * dtype.itemsize
    if len(body) < need:
        raise FormatError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    img = np.frombuffer(body[:need], dtype=dtype).reshape(h, w)
    return img.astype(np.uint16 if maxval > 255 else np.uint8)


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2-d array, got {img.shape}")
    if img.dtype != np.uint8:
        if img.min() < 0 or img.max() > 255:
            raise FormatError("pixel values outside [0, 255]")
        img = np.round(img).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pbm(path: str | Path) -> np.ndarray:
    """Binary PBM; returns 0/1 uint8 with 1 = black, as the format defines."""
    data = Path(path).read_bytes()
    if data[:2] != b"P4":
        raise FormatError(f"{path}: not a binary PBM (P4) file")
    tokens, off = _header(data[2:], 2)
    w, h = _dims(tokens)
    row = (w + 7) // 8
    body = data[2 + off:]
    if len(body) < row * h:
        raise FormatError(f"{path}: expected {row * h} bytes, found {len(body)}")
    packed = np.frombuffer(body[:row * h], dtype=np.uint8).reshape(h, row)
    return np.unpackbits(packed, axis=1)[:, :w]


def write_pbm(path: str | Path, bits: np.ndarray) -> None:
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.ndim != 2:
        raise FormatError(f"PBM needs a 2-d array, got {bits.shape}")
    h, w = bits.shape
    Path(path).write_bytes(b"P4\n%d %d\n" % (w, h) + np.packbits(bits, axis=1).tobytes())


def read_bits(path: str | Path, count: int = 1024) -> np.ndarray:
    """Watermark bits from a P4 PBM or a raw packed file (MSB first)."""
    data = Path(path).read_bytes()
    if data[:2] == b"P4":
        bits = read_pbm(path).ravel()
    else:
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    if bits.size < count:
        raise FormatError(f"{path}: holds {bits.size} bits, need {count}")
    if data[:2] == b"P4" and bits.size != count:
        raise FormatError(f"{path}: PBM holds {bits.size} bits, expected {count}")
    return bits[:count].astype(np.uint8)


def write_bits(path: str | Path, bits: np.ndarray) -> None:
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    Path(path).write_bytes(np.packbits(bits).tobytes())

"""Binary PPM (P6) codec and image/tensor scaling.

PPM keeps the package free of image-library dependencies while staying
bit-exact under round-trips. Pixels are 8-bit RGB; tensors use the CHW
layout scaled to [-1, 1] via value / 127.5 - 1.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageError(ValueError):
    """Base class for image decoding problems."""


class MalformedHeaderError(ImageError):
    pass


class TruncatedPayloadError(ImageError):
    pass


class UnsupportedFormatError(ImageError):
    pass


def encode_ppm(pixels):
    """uint8 HxWx3 array -> P6 bytes."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ImageError(f"expected uint8 HxWx3 pixels, got {arr.dtype} {arr.shape}")
    h, w, _ = arr.shape
    return b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes()


def decode_ppm(blob):
    """P6 bytes -> uint8 HxWx3 array; rejects other formats distinctly."""
    if len(blob) < 2:
        raise MalformedHeaderError("file too short for a PPM header")
    magic = blob[:2]
    if magic in (b"P1", b"P2", b"P3", b"P4", b"P5"):
        raise UnsupportedFormatError(f"PPM variant {magic.decode()} is not supported, only P6")
    if magic != b"P6":
        raise UnsupportedFormatError("not a PPM file")

    # header tokens: width, height, maxval; '#' comments run to end of line
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if pos == start:
            raise MalformedHeaderError("header ended before width/height/maxval")
        fields.append(blob[start:pos])
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise MalformedHeaderError(f"non-numeric header fields {fields}") from None
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormatError(f"only maxval 255 is supported, got {maxval}")
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise MalformedHeaderError("missing whitespace after maxval")
    pos += 1

    need = width * height * 3
    payload = blob[pos:pos + need]
    if len(payload) < need:
        raise TruncatedPayloadError(
            f"payload holds {len(payload)} bytes, header promises {need}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def read_ppm(path):
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path, pixels):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_ppm(pixels))


# ---------------------------------------------------------------------------
# scaling between byte images and network tensors


def to_tensor(pixels):
    """uint8 HxWx3 -> float64 (3,H,W) in [-1, 1]."""
    arr = np.asarray(pixels, dtype=np.float64)
    return (arr / 127.5 - 1.0).transpose(2, 0, 1)


def to_pixels(chw):
    """(3,H,W) in [-1, 1] -> uint8 HxWx3, rounding to the nearest byte."""
    arr = (np.asarray(chw, dtype=np.float64).transpose(1, 2, 0) + 1.0) * 127.5
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def to_unit(chw):
    """[-1, 1] image to [0, 1] for metric computation."""
    return np.clip((np.asarray(chw, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def read_mask_ppm(path):
    """Mask image: any pixel with channel mean above 127 counts as missing."""
    pixels = read_ppm(path)
    return (pixels.mean(axis=2) > 127).astype(np.uint8)

"""Binary portable-anymap image files.

Color images are PPM (P6, 8-bit); gray images are PGM (P5) with either an
8-bit or a 16-bit big-endian payload chosen by maxval. Readers tolerate
comments and arbitrary whitespace in the header; writers emit one canonical
header so identical arrays produce identical bytes.
"""

import numpy as np

from .errors import FormatError

__all__ = ["read_ppm", "write_ppm", "read_pgm", "write_pgm"]


def _read_tokens(fh, count):
    """Next `count` whitespace-separated header tokens, skipping # comments."""
    tokens = []
    while len(tokens) < count:
        ch = fh.read(1)
        if not ch:
            raise FormatError("truncated header")
        if ch.isspace():
            continue
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        token = ch
        while True:
            ch = fh.read(1)
            if not ch or ch.isspace():
                break
            if ch == b"#":
                while ch not in (b"\n", b""):
                    ch = fh.read(1)
                break
            token += ch
        tokens.append(token)
    return tokens


def _read_header(fh, magic):
    got = fh.read(2)
    if got != magic:
        raise FormatError(f"expected magic {magic!r}, got {got!r}")
    w, h, maxval = (int(t) for t in _read_tokens(fh, 3))
    if w < 1 or h < 1:
        raise FormatError(f"bad dimensions {w}x{h}")
    if maxval not in (255, 65535):
        raise FormatError(f"unsupported maxval {maxval}")
    return w, h, maxval


def _read_payload(fh, count, maxval):
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    raw = fh.read(count * dtype.itemsize)
    if len(raw) < count * dtype.itemsize:
        raise FormatError("truncated pixel data")
    return np.frombuffer(raw, dtype=dtype).astype(
        np.uint16 if maxval == 65535 else np.uint8)


def read_ppm(path):
    """8-bit color image as a (3, h, w) uint8 array."""
    with open(path, "rb") as fh:
        w, h, maxval = _read_header(fh, b"P6")
        if maxval != 255:
            raise FormatError("only 8-bit color images are supported")
        flat = _read_payload(fh, h * w * 3, maxval)
    return flat.reshape(h, w, 3).transpose(2, 0, 1)


def write_ppm(path, rgb):
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3 or rgb.dtype != np.uint8:
        raise FormatError(f"write_ppm needs (3, h, w) uint8, got "
                          f"{rgb.shape} {rgb.dtype}")
    _, h, w = rgb.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(rgb.transpose(1, 2, 0).tobytes())


def read_pgm(path):
    """Gray image as (h, w); uint8 for maxval 255, uint16 for maxval 65535."""
    with open(path, "rb") as fh:
        w, h, maxval = _read_header(fh, b"P5")
        flat = _read_payload(fh, h * w, maxval)
    return flat.reshape(h, w)


def write_pgm(path, gray):
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype not in (np.dtype(np.uint8), np.dtype(np.uint16)):
        raise FormatError(f"write_pgm needs (h, w) uint8 or uint16, got "
                          f"{gray.shape} {gray.dtype}")
    h, w = gray.shape
    wide = gray.dtype == np.uint16
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (w, h, 65535 if wide else 255))
        fh.write(gray.astype(">u2").tobytes() if wide else gray.tobytes())

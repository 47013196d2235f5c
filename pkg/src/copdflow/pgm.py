"""Binary greyscale PGM (P5, maxval 255) reading and writing.

Images live in [-1, 1] in memory and map to bytes by
``round((value + 1) / 2 * 255)`` with halves rounded up.
"""

import re
from pathlib import Path

import numpy as np

from .errors import ParseError

_HEADER = re.compile(rb"P5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def to_bytes(image):
    """Map a [-1, 1] image to uint8 pixels."""
    image = np.asarray(image, dtype=np.float64)
    return np.floor(np.clip((image + 1.0) / 2.0 * 255.0, 0.0, 255.0) + 0.5).astype(np.uint8)


def from_bytes(pixels):
    return np.asarray(pixels, dtype=np.float64) / 255.0 * 2.0 - 1.0


def encode(pixels):
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError(f"expected a 2-D uint8 array, got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def decode(data, source="<bytes>"):
    m = _HEADER.match(data)
    if m is None:
        raise ParseError(f"{source}: not a binary PGM (bad or truncated header)")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ParseError(f"{source}: unsupported maxval {maxval}, expected 255")
    if w <= 0 or h <= 0:
        raise ParseError(f"{source}: invalid size {w}x{h}")
    body = data[m.end():]
    if len(body) != w * h:
        raise ParseError(f"{source}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_pixels(path, pixels):
    Path(path).write_bytes(encode(pixels))


def read_pixels(path):
    path = Path(path)
    return decode(path.read_bytes(), source=str(path))


def write_image(path, image):
    write_pixels(path, to_bytes(image))


def read_image(path, shape=None):
    """Read a PGM as floats in [-1, 1]; ``shape`` optionally enforces the size."""
    pixels = read_pixels(path)
    if shape is not None and pixels.shape != tuple(shape):
        raise ParseError(f"{path}: expected {shape[1]}x{shape[0]} image, found {pixels.shape[1]}x{pixels.shape[0]}")
    return from_bytes(pixels)


def tile(images, columns=8, pad=2, fill=-1.0):
    """Arrange equally sized 2-D images into one grid image."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ValueError("no images to tile")
    h, w = images[0].shape
    rows = -(-len(images) // columns)
    cols = min(columns, len(images))
    grid = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), fill)
    for k, im in enumerate(images):
        r, c = divmod(k, columns)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y:y + h, x:x + w] = im
    return grid

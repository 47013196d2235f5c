import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from copdflow import pgm
from copdflow.errors import ParseError
from copdflow.tensor import Rng


def test_pixel_mapping():
    values = np.array([[-1.0, 0.0, 1.0, -0.5, -2.0, 3.0]])
    # (v + 1) / 2 * 255 = 0, 127.5, 255, 63.75; halves round up, out-of-range values clip
    assert pgm.to_bytes(values).tolist() == [[0, 128, 255, 64, 0, 255]]


def test_header_and_round_trip(tmp_path):
    image = Rng(0).uniform(-1, 1, (128, 128))
    path = tmp_path / "a.pgm"
    pgm.write_image(path, image)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n128 128\n255\n")
    assert len(raw) == len(b"P5\n128 128\n255\n") + 128 * 128
    back = pgm.read_image(path, (128, 128))
    assert np.max(np.abs(back - image)) <= 1 / 255 + 1e-12
    pgm.write_image(tmp_path / "b.pgm", back)
    assert (tmp_path / "b.pgm").read_bytes() == raw


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 1000))
def test_pixels_round_trip(h, w, seed):
    pixels = Rng(seed).integers(256, (h, w)).astype(np.uint8)
    assert np.array_equal(pgm.decode(pgm.encode(pixels)), pixels)
    assert np.array_equal(pgm.to_bytes(pgm.from_bytes(pixels)), pixels)


def test_header_comments_and_whitespace():
    data = b"P5 # comment\n2\t1\n# another\n255\n\x00\xff"
    assert pgm.decode(data).tolist() == [[0, 255]]


@pytest.mark.parametrize("data", [b"P2\n1 1\n255\n\x00", b"P5\n2 2\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00",
                                  b"P5\n1 1", b""])
def test_malformed(data):
    with pytest.raises(ParseError):
        pgm.decode(data)


def test_truncated_file_error_names_file(tmp_path):
    path = tmp_path / "broken.pgm"
    path.write_bytes(pgm.encode(np.zeros((4, 4), dtype=np.uint8))[:-3])
    with pytest.raises(ParseError, match="broken.pgm"):
        pgm.read_image(path)


def test_size_enforced(tmp_path):
    path = tmp_path / "small.pgm"
    pgm.write_image(path, np.zeros((4, 4)))
    with pytest.raises(ParseError, match="small.pgm"):
        pgm.read_image(path, (128, 128))


def test_tile_layout():
    grid = pgm.tile([np.ones((2, 2)), np.zeros((2, 2)), np.ones((2, 2))], columns=2, pad=1)
    assert grid.shape == (7, 7)
    assert grid[1, 1] == 1 and grid[1, 4] == 0 and grid[4, 1] == 1 and grid[4, 4] == -1

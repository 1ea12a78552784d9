import numpy as np
import pytest
from PIL import Image

from fpdmnet.imageio import (
    ImageFormatError,
    UnsupportedFormatError,
    list_images,
    load_image,
    read_u8,
    save_image,
    to_u8,
    write_u8,
)


@pytest.mark.parametrize("suffix", [".pgm", ".png"])
def test_round_trip_bit_identical(tmp_path, suffix):
    px = np.random.default_rng(0).integers(0, 256, size=(7, 11), dtype=np.uint8)
    path = tmp_path / f"a{suffix}"
    write_u8(px, path)
    np.testing.assert_array_equal(read_u8(path), px)
    save_image(load_image(path), tmp_path / f"b{suffix}")
    np.testing.assert_array_equal(read_u8(tmp_path / f"b{suffix}"), px)


def test_value_mapping(tmp_path):
    write_u8(np.array([[0, 255, 128]], np.uint8), tmp_path / "x.pgm")
    np.testing.assert_array_equal(load_image(tmp_path / "x.pgm"), [[0.0, 1.0, 128 / 255]])
    np.testing.assert_array_equal(to_u8(np.array([-0.2, 0.5, 1.7, 0.998])), [0, 128, 255, 254])


def test_pgm_layout_is_exact(tmp_path):
    write_u8(np.array([[1, 2, 3], [4, 5, 6]], np.uint8), tmp_path / "x.pgm")
    assert (tmp_path / "x.pgm").read_bytes() == b"P5\n3 2\n255\n\x01\x02\x03\x04\x05\x06"


def test_pgm_header_with_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made elsewhere\n2 1\n# max\n255\n\x00\xff")
    np.testing.assert_array_equal(read_u8(tmp_path / "c.pgm"), [[0, 255]])


@pytest.mark.parametrize("data", [b"P6\n2 2\n255\n" + bytes(12), b"P2\n1 1\n255\n7\n", b"P5\n2 2\n65535\n" + bytes(8)])
def test_unsupported_netpbm(tmp_path, data):
    (tmp_path / "u.pgm").write_bytes(data)
    with pytest.raises(UnsupportedFormatError):
        read_u8(tmp_path / "u.pgm")


@pytest.mark.parametrize("data", [b"XX\n", b"P5\n2 x\n255\n", b"P5\n4 4\n255\n" + bytes(3), b"P5\n2 2"])
def test_malformed_pgm(tmp_path, data):
    (tmp_path / "m.pgm").write_bytes(data)
    with pytest.raises(ImageFormatError):
        read_u8(tmp_path / "m.pgm")


def test_color_png_rejected(tmp_path):
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "rgb.png")
    with pytest.raises(UnsupportedFormatError):
        read_u8(tmp_path / "rgb.png")


def test_write_requires_uint8_2d(tmp_path):
    with pytest.raises(ValueError):
        write_u8(np.zeros((2, 2)), tmp_path / "f.pgm")


def test_list_images(tmp_path):
    for name in ("b.pgm", "a.png", "notes.txt"):
        (tmp_path / name).write_bytes(b"")
    assert [p.name for p in list_images(tmp_path)] == ["a.png", "b.pgm"]

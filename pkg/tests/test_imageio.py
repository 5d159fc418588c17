"""Unit tests for PGM and raw slice handling."""

from pathlib import Path

import numpy as np
import pytest

from cipherdenoise.errors import ImageFormatError
from cipherdenoise.imageio import (
    encode_pgm,
    load_image,
    normalize_for_display,
    parse_pgm,
    read_pgm,
    read_raw,
    side_by_side,
    write_pgm,
    write_raw,
)


class TestPgm:
    """Test binary PGM encoding and parsing."""

    def test_round_trip_16_bit(self, tmp_path: Path) -> None:
        """Test a slice survives a 16-bit PGM to within one grey level."""
        image = np.random.default_rng(0).uniform(0.0, 1.0, (5, 7))
        path = tmp_path / "slice.pgm"
        write_pgm(path, image)
        loaded = read_pgm(path)
        assert loaded.shape == (5, 7)
        assert np.max(np.abs(loaded - image)) <= 1.0 / 65535

    def test_header(self) -> None:
        data = encode_pgm(np.zeros((2, 3)))
        assert data.startswith(b"P5\n3 2\n65535\n")
        assert len(data) == len(b"P5\n3 2\n65535\n") + 2 * 6

    def test_8_bit(self) -> None:
        data = encode_pgm(np.array([[0.0, 1.0]]), maxval=255)
        assert data.endswith(b"\x00\xff")
        assert parse_pgm(data).tolist() == [[0.0, 1.0]]

    def test_comments_in_header(self) -> None:
        data = b"P5\n# made by hand\n2 1\n255\n\x00\xff"
        assert parse_pgm(data).tolist() == [[0.0, 1.0]]

    def test_values_are_clipped(self) -> None:
        assert parse_pgm(encode_pgm(np.array([[-0.5, 1.5]]))).tolist() == [[0.0, 1.0]]

    def test_single_channel_stack_accepted(self) -> None:
        assert parse_pgm(encode_pgm(np.zeros((1, 2, 2)))).shape == (2, 2)

    def test_bad_magic(self) -> None:
        with pytest.raises(ImageFormatError, match="not a binary PGM"):
            parse_pgm(b"P2\n1 1\n255\n0")

    def test_short_raster(self) -> None:
        with pytest.raises(ImageFormatError, match="raster"):
            parse_pgm(b"P5\n2 2\n255\n\x00\x00")

    def test_truncated_header(self) -> None:
        with pytest.raises(ImageFormatError, match="truncated"):
            parse_pgm(b"P5\n2")

    def test_non_numeric_header(self) -> None:
        with pytest.raises(ImageFormatError):
            parse_pgm(b"P5\nx 2\n255\n\x00\x00")

    def test_three_dimensional_input(self) -> None:
        with pytest.raises(ImageFormatError, match="2-D"):
            encode_pgm(np.zeros((2, 2, 2)))

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(ImageFormatError, match="cannot read"):
            read_pgm(tmp_path / "absent.pgm")


class TestRaw:
    def test_round_trip(self, tmp_path: Path) -> None:
        image = np.linspace(-1.0, 2.0, 12).reshape(3, 4)
        path = tmp_path / "slice.raw"
        write_raw(path, image)
        assert path.stat().st_size == 48
        assert np.allclose(read_raw(path, (3, 4)), image)

    def test_size_mismatch(self, tmp_path: Path) -> None:
        path = tmp_path / "slice.raw"
        write_raw(path, np.zeros((3, 4)))
        with pytest.raises(ImageFormatError, match="float32"):
            read_raw(path, (4, 4))

    def test_load_image_dispatch(self, tmp_path: Path) -> None:
        image = np.full((2, 2), 0.5)
        write_raw(tmp_path / "a.raw", image)
        write_pgm(tmp_path / "a.pgm", image)
        assert np.array_equal(load_image(tmp_path / "a.raw", (2, 2)), image)
        assert np.allclose(load_image(tmp_path / "a.pgm"), image, atol=1.0 / 65535)


class TestDisplayHelpers:
    def test_normalize(self) -> None:
        out = normalize_for_display(np.array([-2.0, 0.0, 2.0]))
        assert out.tolist() == [0.0, 0.5, 1.0]

    def test_normalize_constant(self) -> None:
        assert not normalize_for_display(np.full((2, 2), 7.0)).any()

    def test_side_by_side(self) -> None:
        out = side_by_side([np.ones((2, 2)), np.ones((2, 3))], gap=1)
        assert out.shape == (2, 6)
        assert not out[:, 2].any()

    def test_side_by_side_height_mismatch(self) -> None:
        with pytest.raises(ImageFormatError, match="height"):
            side_by_side([np.ones((2, 2)), np.ones((3, 2))])

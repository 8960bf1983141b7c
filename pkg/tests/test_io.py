import struct

import numpy as np
import pytest

from caver.errors import FormatError
from caver.io import decode_cavr, encode_cavr, encode_pgm, read_cavr, read_pgm, to_gray8, write_cavr, write_pgm


class TestCavr:
    def test_roundtrip_float32_values_exact(self, rng, tmp_path):
        x = rng.standard_normal((3, 4, 5)).astype(np.float32).astype(np.float64)
        write_cavr(tmp_path / "x.cavr", x)
        assert np.array_equal(read_cavr(tmp_path / "x.cavr"), x)

    def test_header_layout(self):
        blob = encode_cavr(np.zeros((2, 3)))
        assert blob[:4] == b"CAVR" and blob[4] == 1 and blob[5] == 2
        assert struct.unpack("<2I", blob[6:14]) == (2, 3)
        assert len(blob) == 14 + 4 * 6

    def test_float64_rounds_to_nearest_float32(self, rng):
        x = rng.standard_normal(10)
        assert np.array_equal(decode_cavr(encode_cavr(x)), x.astype(np.float32).astype(np.float64))

    @pytest.mark.parametrize("rank", [1, 2, 3, 4])
    def test_all_ranks(self, rank):
        x = np.arange(2**rank, dtype=float).reshape((2,) * rank)
        assert np.array_equal(decode_cavr(encode_cavr(x)), x)

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            decode_cavr(b"XXXX" + bytes(10))

    def test_truncated_payload(self):
        blob = encode_cavr(np.ones((4, 4)))
        with pytest.raises(FormatError, match="payload"):
            decode_cavr(blob[:-3])

    def test_wrong_version(self):
        blob = bytearray(encode_cavr(np.ones(2)))
        blob[4] = 9
        with pytest.raises(FormatError, match="version"):
            decode_cavr(bytes(blob))

    def test_non_finite_refused(self):
        with pytest.raises(FormatError):
            encode_cavr(np.array([1.0, np.inf]))

    def test_no_temp_files_left(self, tmp_path):
        write_cavr(tmp_path / "a.cavr", np.ones(3))
        assert [p.name for p in tmp_path.iterdir()] == ["a.cavr"]


class TestPgm:
    def test_roundtrip_minmax(self, tmp_path):
        img = np.array([[0.0, 0.5], [1.0, 2.0]])
        write_pgm(tmp_path / "a.pgm", img)
        assert read_pgm(tmp_path / "a.pgm").tolist() == [[0, 64], [128, 255]]

    def test_unit_normalisation(self):
        assert to_gray8(np.array([[0.0, 0.5, 1.0]]), "unit").tolist() == [[0, 128, 255]]

    def test_constant_image(self):
        assert np.all(to_gray8(np.full((2, 2), 3.0)) == 0)

    def test_header(self):
        assert encode_pgm(np.zeros((2, 3, 1))).startswith(b"P5\n3 2\n255\n")

    def test_whitespace_valued_pixels_survive(self, tmp_path):
        # byte 10 is '\n' and byte 32 is ' '
        img = np.array([[10, 32, 9, 13]]) / 255.0
        write_pgm(tmp_path / "w.pgm", img, normalize="unit")
        assert read_pgm(tmp_path / "w.pgm").tolist() == [[10, 32, 9, 13]]

    def test_rejects_3d_color(self):
        with pytest.raises(FormatError):
            to_gray8(np.zeros((2, 2, 3)))

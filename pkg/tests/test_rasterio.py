import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mvvc.errors import FormatError
from mvvc.rasterio import ensure_dir, read_pfm, read_pgm, write_gray, write_pfm, write_pgm


def test_pgm_bytes_by_hand(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.array([[0, 255], [7, 128]]))
    assert (tmp_path / "a.pgm").read_bytes() == b"P5\n2 2\n255\n\x00\xff\x07\x80"


def test_pgm16_is_big_endian(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.array([[1, 65535]]))
    data = (tmp_path / "a.pgm").read_bytes()
    assert data.startswith(b"P5\n2 1\n65535\n")
    assert data.endswith(b"\x00\x01\xff\xff")


@given(arrays(np.uint16, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pgm_roundtrip(tmp_path_factory, img):
    p = tmp_path_factory.mktemp("pgm") / "x.pgm"
    write_pgm(p, img, maxval=65535)
    np.testing.assert_array_equal(read_pgm(p), img)


def test_pgm_header_comments_and_normalize(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n3 1\n# max\n200\n\x00\x64\xc8")
    np.testing.assert_array_equal(read_pgm(p), [[0, 100, 200]])
    np.testing.assert_allclose(read_pgm(p, normalize=True), [[0.0, 0.5, 1.0]])


def test_pgm_errors(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.array([[-1]]))
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.zeros(3))
    (tmp_path / "p2.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "p2.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x00")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "short.pgm")
    (tmp_path / "hdr.pgm").write_bytes(b"P5\n4")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "hdr.pgm")


def test_write_gray_quantizes(tmp_path):
    write_gray(tmp_path / "g.pgm", np.array([[0.0, 0.5, 1.2]]), bits=8)
    np.testing.assert_array_equal(read_pgm(tmp_path / "g.pgm"), [[0, 128, 255]])


def test_pfm_layout_bottom_to_top(tmp_path):
    a = np.array([[1.0, 2.0], [3.0, np.nan]], dtype=np.float32)
    write_pfm(tmp_path / "a.pfm", a)
    data = (tmp_path / "a.pfm").read_bytes()
    header = b"Pf\n2 2\n-1.0\n"
    assert data.startswith(header)
    first_row = struct.unpack("<2f", data[len(header) : len(header) + 8])
    assert first_row[0] == 3.0 and np.isnan(first_row[1])


@given(arrays(np.float32, st.tuples(st.integers(1, 7), st.integers(1, 7)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_pfm_roundtrip(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("pfm") / "x.pfm"
    write_pfm(p, arr)
    np.testing.assert_array_equal(read_pfm(p), arr)


def test_pfm_big_endian_and_errors(tmp_path):
    p = tmp_path / "be.pfm"
    p.write_bytes(b"Pf\n2 1\n1.0\n" + struct.pack(">2f", 1.5, -2.0))
    np.testing.assert_array_equal(read_pfm(p), [[1.5, -2.0]])
    (tmp_path / "rgb.pfm").write_bytes(b"PF\n1 1\n-1.0\n" + bytes(12))
    with pytest.raises(FormatError):
        read_pfm(tmp_path / "rgb.pfm")
    (tmp_path / "cut.pfm").write_bytes(b"Pf\n3 3\n-1.0\n" + bytes(8))
    with pytest.raises(FormatError):
        read_pfm(tmp_path / "cut.pfm")


def test_ensure_dir(tmp_path):
    d = ensure_dir(tmp_path / "a" / "b")
    assert d.is_dir()
    (tmp_path / "file").write_text("")
    with pytest.raises(OSError):
        ensure_dir(tmp_path / "file" / "sub")

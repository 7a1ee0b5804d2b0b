import struct

import numpy as np
import pytest

from gf4d.data import FlowMap
from gf4d.errors import FormatError
from gf4d.formats import (decode_flo4, decode_ftv1, decode_pfm, encode_flo4, encode_ftv1, encode_pfm, read_flo4,
                          read_pfm, read_png, write_flo4, write_pfm, write_png)


def test_pfm_roundtrip(tmp_path, rng):
    for shape in ((5, 7), (5, 7, 3)):
        a = rng.normal(size=shape).astype(np.float32)
        write_pfm(tmp_path / "x.pfm", a)
        assert np.array_equal(read_pfm(tmp_path / "x.pfm"), a)
    payload = encode_pfm(np.zeros((2, 3)))
    assert payload.startswith(b"Pf\n3 2\n-1.0\n")
    flow = rng.normal(size=(4, 4, 2)).astype(np.float32)
    back = decode_pfm(encode_pfm(flow))
    assert np.array_equal(back[..., :2], flow) and not back[..., 2].any()


def test_pfm_rows_are_bottom_up():
    a = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32)
    body = encode_pfm(a).split(b"-1.0\n", 1)[1]
    assert np.frombuffer(body, "<f4").tolist() == [3.0, 4.0, 1.0, 2.0]


def test_pfm_errors():
    with pytest.raises(FormatError):
        decode_pfm(b"P6\n1 1\n255\n...")
    with pytest.raises(FormatError):
        decode_pfm(encode_pfm(np.zeros((3, 3)))[:-1])
    with pytest.raises(FormatError):
        encode_pfm(np.zeros((2, 2, 5)))


def test_png_quantizes(tmp_path, rng):
    a = rng.random((6, 9, 3))
    write_png(tmp_path / "x.png", a)
    back = read_png(tmp_path / "x.png")
    assert back.shape == a.shape and np.abs(back - a).max() <= 0.5 / 255 + 1e-7
    write_png(tmp_path / "m.png", np.array([[True, False]]))
    assert read_png(tmp_path / "m.png").tolist() == [[1.0, 0.0]]


def test_flo4_roundtrip_and_layout(tmp_path, rng):
    fm = FlowMap(rng.normal(size=(3, 5, 2)).astype(np.float32), rng.random((3, 5)) > 0.5)
    payload = encode_flo4(fm)
    assert payload[:4] == b"FLO4" and struct.unpack("<II", payload[4:12]) == (5, 3)
    assert len(payload) == 12 + 3 * 5 * 9
    write_flo4(tmp_path / "f.flo4", fm)
    back = read_flo4(tmp_path / "f.flo4")
    assert np.array_equal(back.flow, fm.flow) and np.array_equal(back.valid, fm.valid)
    with pytest.raises(FormatError):
        decode_flo4(b"FLO3" + payload[4:])
    with pytest.raises(FormatError):
        decode_flo4(payload[:-1])
    with pytest.raises(FormatError):
        decode_flo4(b"FLO4\x01")


def test_ftv1_roundtrip(rng):
    grid = rng.normal(size=(4, 6, 16)).astype(np.float32)
    payload = encode_ftv1(grid, 9, 3, 17)
    g, n, k, t = decode_ftv1(payload)
    assert np.array_equal(g, grid) and (n, k, t) == (9, 3, 17)
    with pytest.raises(FormatError):
        decode_ftv1(payload[:-4])
    with pytest.raises(FormatError):
        decode_ftv1(b"XXXX" + payload[4:])


def test_atomic_write_leaves_no_temp_files(tmp_path, rng):
    write_pfm(tmp_path / "a.pfm", rng.random((3, 3)))
    write_pfm(tmp_path / "a.pfm", rng.random((3, 3)))
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.pfm"]

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from mvsrefine import io

from conftest import make_camera


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=9),
                  elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_pfm_roundtrip_bit_exact(tmp_path_factory, data):
    p = tmp_path_factory.mktemp("pfm") / "a.pfm"
    io.write_pfm(p, data)
    back = io.read_pfm(p)
    assert back.dtype == np.float32
    assert back.tobytes() == data.tobytes()


def test_pfm_layout(tmp_path):
    data = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    io.write_pfm(tmp_path / "a.pfm", data)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    body = np.frombuffer(raw[len(b"Pf\n2 2\n-1.0\n"):], "<f4")
    assert np.array_equal(body, [3, 4, 1, 2])          # bottom row first


def test_pfm_big_endian_and_colour(tmp_path):
    data = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
    p = tmp_path / "be.pfm"
    p.write_bytes(b"PF\n2 1\n1.0\n" + data.astype(">f4").tobytes())
    assert np.array_equal(io.read_pfm(p), data)


def test_pfm_nan_preserved(tmp_path):
    data = np.array([[np.nan, 1.0]], dtype=np.float32)
    io.write_pfm(tmp_path / "n.pfm", data)
    assert np.isnan(io.read_pfm(tmp_path / "n.pfm")[0, 0])


@pytest.mark.parametrize("raw,line", [(b"P6\n1 1\n-1\n", 1), (b"Pf\nx y\n-1\n", 2), (b"Pf\n2 2\n-1.0\n\0\0", 4),
                                      (b"Pf\n", 2)])
def test_pfm_parse_errors_name_line(tmp_path, raw, line):
    p = tmp_path / "bad.pfm"
    p.write_bytes(raw)
    with pytest.raises(io.ParseError) as e:
        io.read_pfm(p)
    assert e.value.line == line
    assert str(e.value).startswith(f"{p}:{line}:")


def test_pgm_roundtrip_quantised(tmp_path, rng):
    img = rng.random((5, 7))
    io.write_pgm(tmp_path / "a.pgm", img)
    back = io.read_pnm(tmp_path / "a.pgm")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_pnm_header_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# comment\n2 1\n255\n\x00\xff")
    assert np.array_equal(io.read_pnm(tmp_path / "c.pgm"), [[0.0, 1.0]])


def test_ppm_normals(tmp_path):
    n = np.array([[[0.0, 0.0, -1.0], [np.nan, np.nan, np.nan]]])
    rgb = io.normals_to_rgb(n)
    assert np.allclose(rgb[0, 0], [0.5, 0.5, 0.0]) and np.array_equal(rgb[0, 1], [0, 0, 0])
    io.write_ppm(tmp_path / "n.ppm", rgb)
    back = io.read_pnm(tmp_path / "n.ppm")
    assert back.shape == (1, 2, 3)
    assert np.allclose(back[0, 0], [128 / 255, 128 / 255, 0.0])


def test_camera_roundtrip(tmp_path):
    cam = make_camera((0.3, -0.1, 0.2), target=(0.0, 0.0, 2.0), f=123.5, w=40, h=32, cx=19.7, cy=16.2)
    io.write_camera(tmp_path / "c.txt", cam, (0.5, 4.25))
    back, rng_ = io.read_camera(tmp_path / "c.txt", 40, 32)
    assert rng_ == (0.5, 4.25)
    assert np.array_equal(back.K, cam.K)
    assert np.abs(back.extrinsics.matrix - cam.extrinsics.matrix).max() < 1e-12


@pytest.mark.parametrize("mutate,line", [(lambda L: ["intrinsic"] + L[1:], 1),
                                         (lambda L: L[:2] + ["1 2 x 4"] + L[3:], 3),
                                         (lambda L: L[:8] + ["1 2"] + L[9:], 9),
                                         (lambda L: L[:6] + ["nope"] + L[7:], 7),
                                         (lambda L: L[:11], 12)])
def test_camera_parse_errors(tmp_path, mutate, line):
    cam = make_camera()
    p = tmp_path / "c.txt"
    io.write_camera(p, cam, (1.0, 2.0))
    p.write_text("\n".join(mutate(p.read_text().splitlines())) + "\n")
    with pytest.raises(io.ParseError) as e:
        io.read_camera(p, 32, 24)
    assert e.value.line == line


def test_weights_roundtrip(tmp_path, rng):
    params = {"a.w": rng.standard_normal((3, 4)).astype(np.float32), "b": np.float32(2.5) * np.ones(()),
              "c.x": rng.standard_normal((2, 1, 3, 3)).astype(np.float32)}
    io.save_weights(tmp_path / "w.chsn", params)
    back = io.load_weights(tmp_path / "w.chsn")
    assert sorted(back) == sorted(params)
    for k in params:
        assert back[k].shape == np.shape(params[k])
        assert back[k].tobytes() == np.asarray(params[k], dtype="<f4").tobytes()


def test_weights_errors(tmp_path):
    p = tmp_path / "w.chsn"
    p.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(io.ParseError):
        io.load_weights(p)
    io.save_weights(p, {"a": np.ones((4, 4), np.float32)})
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(io.ParseError):
        io.load_weights(p)


def test_read_json_error_names_line(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{\n  "a": 1,\n  oops\n}\n')
    with pytest.raises(io.ParseError) as e:
        io.read_json(p)
    assert e.value.line == 3

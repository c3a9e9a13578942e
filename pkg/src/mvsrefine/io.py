"""Readers and writers for images, depth maps, cameras and weights.

PFM follows the canonical layout: ``Pf`` (one channel) or ``PF`` (three), the
dimensions, a scale whose sign gives the byte order (negative means
little-endian), then rows stored bottom-up.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import Camera, Extrinsics, Intrinsics

WEIGHTS_MAGIC = b"CHSN"
WEIGHTS_VERSION = 1


class ParseError(ValueError):
    """Malformed input file; the message names the file and line."""

    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = str(path)
        self.line = line


# -- PFM ---------------------------------------------------------------------

def write_pfm(path, data: np.ndarray):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        tag, h, w = b"Pf", data.shape[0], data.shape[1]
    elif data.ndim == 3 and data.shape[2] == 3:
        tag, h, w = b"PF", data.shape[0], data.shape[1]
    else:
        raise ValueError(f"PFM stores HxW or HxWx3 maps, got {data.shape}")
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1]).astype("<f4").tobytes())


def _header_line(f, path, lineno):
    line = f.readline()
    if not line:
        raise ParseError(path, lineno, "unexpected end of file")
    return line.decode("ascii", errors="replace").strip()


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = _header_line(f, path, 1)
        if tag not in ("Pf", "PF"):
            raise ParseError(path, 1, f"not a PFM file (header {tag!r})")
        dims = _header_line(f, path, 2).split()
        try:
            w, h = int(dims[0]), int(dims[1])
            scale = float(_header_line(f, path, 3))
        except (ValueError, IndexError):
            raise ParseError(path, 2, "bad PFM dimensions or scale") from None
        ch = 3 if tag == "PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        raw = f.read()
    if len(raw) < w * h * ch * 4:
        raise ParseError(path, 4, "truncated PFM raster")
    data = np.frombuffer(raw[: w * h * ch * 4], dtype=dtype).astype(np.float32)
    data = data.reshape(h, w, ch) if ch == 3 else data.reshape(h, w)
    return np.ascontiguousarray(data[::-1])


# -- PGM / PPM -----------------------------------------------------------------

def write_pgm(path, image: np.ndarray):
    """Write a [0, 1] grayscale image as 8-bit binary PGM."""
    img = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def write_ppm(path, rgb: np.ndarray):
    img = np.clip(np.round(np.asarray(rgb, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def _pnm_tokens(raw: bytes, count: int, path):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(path, 1, "truncated PNM header")
        tokens.append(raw[start:pos].decode("ascii"))
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read binary PGM (P5) or PPM (P6) into floats in [0, 1]."""
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pnm_tokens(raw, 4, path)
    if magic not in ("P5", "P6"):
        raise ParseError(path, 1, f"unsupported PNM type {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    ch = 3 if magic == "P6" else 1
    dtype = np.uint8 if maxval < 256 else ">u2"
    n = w * h * ch
    data = np.frombuffer(raw[pos:], dtype=dtype, count=n).astype(np.float64) / maxval
    return data.reshape(h, w, ch) if ch == 3 else data.reshape(h, w)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path).astype(np.float64)
    return read_pnm(path)


def normals_to_rgb(normals: np.ndarray) -> np.ndarray:
    """Map unit normals to colours by ``(n + 1) / 2``; invalid pixels are black."""
    rgb = (np.asarray(normals) + 1.0) / 2.0
    return np.where(np.isfinite(rgb), rgb, 0.0)


# -- camera files ----------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_camera(path, cam: Camera, depth_range):
    E = cam.extrinsics.matrix
    K = cam.K
    lines = ["extrinsic"]
    lines += [" ".join(_fmt(v) for v in row) for row in E]
    lines += ["", "intrinsic"]
    lines += [" ".join(_fmt(v) for v in row) for row in K]
    lines += ["", f"{_fmt(depth_range[0])} {_fmt(depth_range[1])}"]
    Path(path).write_text("\n".join(lines) + "\n")


def read_camera(path, width: int, height: int):
    """Parse a camera file; returns ``(Camera, (dmin, dmax))``."""
    lines = Path(path).read_text().splitlines()

    def row(i, n):
        if i >= len(lines):
            raise ParseError(path, i + 1, "unexpected end of file")
        try:
            vals = [float(v) for v in lines[i].split()]
        except ValueError:
            raise ParseError(path, i + 1, f"expected numbers, got {lines[i]!r}") from None
        if len(vals) < n:
            raise ParseError(path, i + 1, f"expected {n} numbers, got {len(vals)}")
        return vals[:n]

    if not lines or lines[0].strip() != "extrinsic":
        raise ParseError(path, 1, "expected 'extrinsic'")
    E = np.array([row(i, 4) for i in range(1, 5)])
    if len(lines) < 7 or lines[6].strip() != "intrinsic":
        raise ParseError(path, 7, "expected 'intrinsic'")
    K = np.array([row(i, 3) for i in range(7, 10)])
    dmin, dmax = row(11, 2)
    try:
        cam = Camera(Intrinsics.from_matrix(K), Extrinsics.from_matrix(E), width, height)
    except ValueError as e:
        raise ParseError(path, 2, str(e)) from None
    return cam, (dmin, dmax)


# -- weights -------------------------------------------------------------------------

def save_weights(path, params: dict):
    """Flat binary container: magic, version, then (name, rank, dims, f32 data) records."""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC + struct.pack("<I", WEIGHTS_VERSION))
        for name in sorted(params):
            arr = params[name]
            arr = np.asarray(getattr(arr, "data", arr), dtype="<f4")
            key = name.encode("utf-8")
            f.write(struct.pack("<I", len(key)) + key)
            f.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHTS_MAGIC:
        raise ParseError(path, 1, "bad weight file magic")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != WEIGHTS_VERSION:
        raise ParseError(path, 1, f"unsupported weight file version {version}")
    pos, out = 8, {}
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", raw, pos)
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += 4 * size
    except (struct.error, ValueError):
        raise ParseError(path, 1, f"truncated weight record at byte {pos}") from None
    return out


# -- volumes and manifests ---------------------------------------------------------

def dump_volume(path, vol):
    """Raw little-endian f32 hypotheses-by-cost dump plus a text sidecar."""
    path = Path(path)
    np.ascontiguousarray(vol.values, dtype="<f4").tofile(path)
    h, w, n = vol.values.shape
    d0 = float(np.mean(vol.d0))
    path.with_suffix(path.suffix + ".txt").write_text(f"H {h}\nW {w}\nN {n}\nd0 {d0!r}\nstep {vol.step!r}\n")


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ParseError(path, e.lineno, e.msg) from None

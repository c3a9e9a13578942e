import numpy as np
import pytest

from mvsrefine.geometry import Camera, CameraRig, Extrinsics, Intrinsics, look_at


def make_camera(center=(0.0, 0.0, 0.0), target=None, f=100.0, w=32, h=24, cx=None, cy=None):
    intr = Intrinsics(f, f, w / 2 if cx is None else cx, h / 2 if cy is None else cy)
    center = np.asarray(center, dtype=np.float64)
    if target is None:
        ext = Extrinsics(np.eye(3), -center)
    else:
        ext = look_at(center, target)
    return Camera(intr, ext, w, h)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_rig():
    ref = make_camera()
    return CameraRig(ref, [make_camera((0.1, 0.0, 0.0)), make_camera((0.0, -0.3, 0.0))])


# -- acceptance reporting ----------------------------------------------------------------------

ACCEPTANCE = {}


@pytest.fixture
def record():
    """``record(n, ok, detail)`` stores one acceptance verdict for the terminal summary."""
    def _record(n: int, ok: bool, detail: str):
        ACCEPTANCE[n] = (bool(ok), detail)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")

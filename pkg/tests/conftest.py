import time

import numpy as np
import pytest


def disk_phantom(n, spacing, radius, supersample=8, value=1.0):
    """Anti-aliased centred disk: pixel value = covered area fraction."""
    sub = (np.arange(supersample) + 0.5) / supersample - 0.5
    c = (np.arange(n) - (n - 1) / 2.0) * spacing
    xx = (c[None, :, None, None] + sub[None, None, None, :] * spacing)
    yy = (c[:, None, None, None] + sub[None, None, :, None] * spacing)
    inside = (xx**2 + yy**2) <= radius**2
    return value * inside.mean(axis=(2, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_SESSIONS = {}
SESSION_SECONDS = {}
CRITERIA = []


def default_session(shape: str, preset: str = "bpagda"):
    """Noise-free default-resolution session of a built-in part, cached per test run."""
    key = (shape, preset)
    if key not in _SESSIONS:
        from ostvam.mesh import shape_mesh
        from ostvam.printsim import SessionOptions, run_session
        from ostvam.remap import OpticalConfig

        t0 = time.perf_counter()
        _SESSIONS[key] = run_session(shape_mesh(shape), OpticalConfig.preset(preset), SessionOptions(render="last"))
        SESSION_SECONDS[key] = time.perf_counter() - t0
    return _SESSIONS[key]


@pytest.fixture(scope="session")
def default_cylinder_session():
    return default_session("cylinder")


def report_criterion(number: int, ok: bool, detail: str) -> bool:
    CRITERIA.append((number, bool(ok), detail))
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

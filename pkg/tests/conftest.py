from contextlib import contextmanager
from types import SimpleNamespace

import numpy as np
import pytest

from voxsem.grid import CameraModel, GridSpec
from voxsem.scenes import SceneSpec, make_scene


def axis_camera(position, size=(8, 8), f=10.0):
    """Camera looking along world +z with image rows along world +y."""
    h, w = size
    return CameraModel(f, f, (w - 1) / 2.0, (h - 1) / 2.0, np.eye(3), np.asarray(position, float), size)


@pytest.fixture
def toy_grid():
    return GridSpec((16, 16, 16), 0.1)


@pytest.fixture(scope="session")
def scene():
    return make_scene(SceneSpec(), 3)


@pytest.fixture(scope="session")
def scenes():
    spec = SceneSpec()
    return [make_scene(spec, s) for s in range(6)]


class AcceptanceLog:
    """Collects one verdict line per acceptance criterion."""

    def __init__(self):
        self.lines = {}

    @contextmanager
    def criterion(self, key, title):
        rec = SimpleNamespace(detail="")
        try:
            yield rec
        except BaseException as exc:
            self._record(key, False, title, rec.detail or f"{type(exc).__name__}: {exc}".splitlines()[0])
            raise
        self._record(key, True, title, rec.detail)

    def _record(self, key, ok, title, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {key}: {title}" + (f" ({detail})" if detail else "")
        self.lines[key] = line
        print(line)


_ACCEPTANCE = AcceptanceLog()


@pytest.fixture(scope="session")
def acceptance():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE.lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(_ACCEPTANCE.lines):
        terminalreporter.write_line(_ACCEPTANCE.lines[key])

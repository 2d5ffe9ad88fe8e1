"""Shared fixtures: the trained toy stack and the acceptance verdict table."""

import logging
import os
from pathlib import Path

import pytest

from ddsmooth.models import ToyStack, train_toy_models

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_CACHE = ROOT / ".toy_cache" / "toy"

_VERDICTS: dict[int, tuple[bool, str]] = {}


def toy_models_dir() -> Path:
    return Path(os.environ.get("DDSMOOTH_TOY_MODELS", DEFAULT_CACHE))


@pytest.fixture(scope="session")
def trained_dir() -> Path:
    """Directory of the trained toy stack; trained (about 20 minutes) on first use."""
    d = toy_models_dir()
    if not (d / "weights.pt").exists():
        logging.getLogger(__name__).warning("training the toy stack into %s", d)
        stack, _ = train_toy_models()
        stack.save(d)
    return d


@pytest.fixture(scope="session")
def trained_stack(trained_dir) -> ToyStack:
    return ToyStack.load(trained_dir)


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records criterion ``n`` and fails the test when not ok."""

    def _record(n: int, ok: bool, detail: str = ""):
        _VERDICTS[n] = (bool(ok), detail)
        assert ok, f"criterion {n} failed: {detail}"

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        ok, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

"""Shared fixtures and the acceptance-criterion reporting hook.

Acceptance tests register a one-line verdict per criterion through the
`criterion` fixture; the lines are replayed in the terminal summary so they
are visible even under captured output.
"""

import os

import numpy as np
import pytest

from satlayer import tasks

_CRITERION_LINES: list[str] = []


@pytest.fixture(scope="session", autouse=True)
def _hermetic_data_dir():
    """Force the bundled fallback digit corpus regardless of the host env."""
    old = os.environ.pop("SATLAYER_DATA", None)
    yield
    if old is not None:
        os.environ["SATLAYER_DATA"] = old


@pytest.fixture(scope="session")
def criterion():
    def report(number: int, ok: bool, detail: str) -> None:
        line = f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'} — {detail}"
        _CRITERION_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERION_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def digit_corpus():
    return tasks.load_digit_corpus()


@pytest.fixture(scope="session")
def mnist_spec():
    return tasks.mnist_add_spec()


@pytest.fixture(scope="session")
def visalg_spec():
    return tasks.visual_algebra_spec()


@pytest.fixture(scope="session")
def liars_spec():
    return tasks.liars_puzzle_spec()


def pm1(bits) -> np.ndarray:
    """{0,1} bit sequence -> ±1.0 vector (the layer's logit convention)."""
    return np.array([1.0 if b else -1.0 for b in bits])

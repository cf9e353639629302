import json
from pathlib import Path

import numpy as np
import pytest

from cmwf.scene import HarmonicSourceParams, SceneConfig, simulate_scene

FROZEN = json.loads((Path(__file__).parent / "oracles" / "frozen.json").read_text())


@pytest.fixture(scope="session")
def frozen():
    return FROZEN


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def short_scene():
    """Two-microphone scene, 2 s long, default levels."""
    return simulate_scene(SceneConfig(), HarmonicSourceParams(duration=2.0), seed=11)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record and print one ``PASS``/``FAIL`` line for an acceptance criterion."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _VERDICTS.append(line)
        print(line, flush=True)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

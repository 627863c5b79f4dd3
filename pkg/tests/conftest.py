import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from inputtune.param_space import DEFAULT_HW, HardwareDescriptor  # noqa: E402


def permissive_hw(**overrides) -> HardwareDescriptor:
    """Device whose limits never bind for small tunings (warp size 1, large budgets)."""
    doc = dict(
        max_shared_bytes_per_block=1 << 30,
        max_registers_per_thread=1 << 20,
        max_threads_per_block=1 << 20,
        max_warps_per_multiprocessor=1 << 20,
        warp_size=1,
        alu_latency=6.0,
        alu_throughput=0.25,
        mem_latency=400.0,
        mem_throughput=1.0,
        clock_hz=1e9,
        num_multiprocessors=4,
    )
    doc.update(overrides)
    return HardwareDescriptor(**doc)


@pytest.fixture
def hw():
    return DEFAULT_HW


@pytest.fixture
def loose_hw():
    return permissive_hw()


@pytest.fixture
def cache_env(tmp_path, monkeypatch):
    d = tmp_path / "cache"
    monkeypatch.setenv("INPUTTUNE_CACHE_DIR", str(d))
    return d


ACCEPTANCE_LINES = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Remember one acceptance outcome; all of them are echoed after the run."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

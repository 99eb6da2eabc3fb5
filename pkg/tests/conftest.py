from __future__ import annotations

import time
from contextlib import contextmanager

import pytest

from vgdm.denoiser import DenoiserConfig

_CRITERIA: list[tuple[str, bool | None, float, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance criterion outcome for the end-of-run summary."""

    @contextmanager
    def record(name: str, budget_s: float | None = None):
        start = time.perf_counter()
        detail = {"note": ""}
        try:
            yield detail
        except pytest.skip.Exception as exc:
            _CRITERIA.append((name, None, time.perf_counter() - start, str(exc)))
            raise
        except BaseException:
            _CRITERIA.append((name, False, time.perf_counter() - start, detail["note"]))
            raise
        elapsed = time.perf_counter() - start
        ok = budget_s is None or elapsed < budget_s
        note = detail["note"]
        if not ok:
            note = f"{note} over time budget {budget_s:.0f}s".strip()
        _CRITERIA.append((name, ok, elapsed, note))
        assert ok, f"{name}: {elapsed:.1f}s exceeds budget {budget_s}s"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, elapsed, note in _CRITERIA:
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] {name} ({elapsed:.1f}s) {note}".rstrip())


@pytest.fixture
def tiny_config() -> DenoiserConfig:
    return DenoiserConfig(
        image_size=8, in_channels=2, patch_size=2, embed_dim=16, depth=1, num_heads=2, window_size=2, mlp_ratio=2.0
    )

from __future__ import annotations

import numpy as np
import pytest

from irtscale import ItemBank, ItemParameters, bundled_aicos_bank

# (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_LINES: list[tuple[str, bool, str]] = []


def record(criterion: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append((criterion, bool(passed), detail))
    print(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}")


def make_bank(a, b, c=None, kind="3PL", prefix="i") -> ItemBank:
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.broadcast_to(np.asarray(b, dtype=float), a.shape)
    c = np.zeros_like(a) if c is None else np.broadcast_to(np.asarray(c, dtype=float), a.shape)
    width = len(str(len(a)))
    return ItemBank(
        ItemParameters(f"{prefix}{j:0{width}d}", float(a[j]), float(b[j]), float(c[j]), kind)
        for j in range(len(a))
    )


def random_2pl_bank(rng: np.random.Generator, k: int, a_range=(0.5, 2.0),
                    b_range=(-2.0, 2.0)) -> ItemBank:
    return make_bank(rng.uniform(*a_range, k), rng.uniform(*b_range, k), kind="2PL")


@pytest.fixture(scope="session")
def aicos():
    return bundled_aicos_bank()

import numpy as np
import pytest

from mmdpt.domain import FrameSchedule, InstanceConfig


def single_pair(p=1.0, pmf=(0.0, 1.0), S_max=1, B=1):
    """M = N = 1 instance with one delivery pmf."""
    pmf = np.asarray(pmf, dtype=float)
    return InstanceConfig(1, 1, B, S_max, pmf.size - 1, np.array([p]),
                          FrameSchedule(pmf[None, None, None]))


def random_tiny(rng, max_M=2, max_N=2, max_S=3, B=1, max_d=2):
    """Guard-sized random instance with sum(p) < N * B."""
    M, N = int(rng.integers(1, max_M + 1)), int(rng.integers(1, max_N + 1))
    S, d = int(rng.integers(1, max_S + 1)), int(rng.integers(1, max_d + 1))
    p = rng.uniform(0.1, 0.9, M)
    if p.sum() > N * B:
        p *= 0.95 * N * B / p.sum()
    pmf = rng.dirichlet(np.ones(d + 1), (M, N))
    return InstanceConfig(M, N, B, S, d, p, FrameSchedule(pmf[None]))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# -- acceptance reporting ------------------------------------------------------
# Each acceptance test records one or more parts per criterion; the terminal
# summary prints a single PASS/FAIL line per criterion.

ACCEPTANCE: dict = {}


def record_criterion(k: int, part: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(k, []).append((part, bool(ok), detail))
    print(f"criterion {k} [{part}] {'PASS' if ok else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for k in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[k]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{name} {'ok' if good else 'FAILED'} ({d})" for name, good, d in parts)
        tr.write_line(f"criterion {k:2d} {'PASS' if ok else 'FAIL'}: {detail}")

import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from patchem.basis import BandlimitParams, build_pswf_basis, build_rotation_grid  # noqa: E402
from patchem.forward import CoefficientLayout, compute_beta_table  # noqa: E402

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class Tables:
    def __init__(self, L, ell_max):
        self.params = BandlimitParams(L=L, ell_max=ell_max)
        self.basis = build_pswf_basis(self.params)
        self.beta = compute_beta_table(self.basis)
        self.layout = CoefficientLayout.from_params(self.params)

    def grid(self, K, seed=0, include_identity=False):
        return build_rotation_grid(K, seed, self.params.ell_max, include_identity)


@pytest.fixture(scope="session")
def t5():
    return Tables(5, 2)


@pytest.fixture(scope="session")
def t7():
    return Tables(7, 3)


@pytest.fixture(scope="session")
def t9():
    return Tables(9, 4)


@pytest.fixture(scope="session")
def t11():
    return Tables(11, 6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance report

ACCEPTANCE: dict = {}


def record(criterion: int, part: str, ok: bool, detail: str) -> None:
    """Store one checked part of an acceptance criterion and echo it."""
    ACCEPTANCE.setdefault(criterion, []).append((part, bool(ok), detail))
    print(f"criterion {criterion} [{part}]: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[c]
        status = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{p}: {'ok' if ok else 'FAIL'} ({d})" for p, ok, d in parts)
        terminalreporter.write_line(f"CRITERION {c}: {status}  {detail}")

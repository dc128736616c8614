from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from urbanstate.data_model import IncidentCatalog, ObservationPanel
from urbanstate.synthetic import SyntheticSpec, make_synthetic_panel

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture(params=["numba", "numpy"])
def backend(request, monkeypatch):
    """Run a test under both kernel backends."""
    monkeypatch.setenv("URBANSTATE_BACKEND", request.param)
    return request.param


@pytest.fixture(scope="session")
def small_world():
    spec = SyntheticSpec(n_nodes=40, n_types=6, n_rated=2, n_weeks=30, seed=11)
    return make_synthetic_panel(spec)


def make_panel(reports, obs=None, rated=None, start_date=None) -> ObservationPanel:
    """Panel from a report array and optional (sub, node, type, week, rating, report) rows."""
    reports = np.asarray(reports, dtype=bool)
    tau = reports.shape[1]
    rows = list(obs or [])
    cols = list(zip(*rows)) if rows else [[] for _ in range(6)]
    rated = rated if rated is not None else [any(r[2] == k for r in rows) for k in range(tau)]
    cat = IncidentCatalog(tuple(f"t{k}" for k in range(tau)), tuple(rated), tuple("" for _ in range(tau)))
    return ObservationPanel(reports, np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=np.int64),
                            np.array(cols[2], dtype=np.int64), np.array(cols[3], dtype=np.int64),
                            np.array(cols[4], dtype=float), np.array(cols[5], dtype=np.int64),
                            cat, start_date)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)

import json
from pathlib import Path

import numpy as np
import pytest

from indiffvol.model_spec import TaylorTable, heston_model, reciprocal_heston_model, taylor_table

FROZEN = json.loads((Path(__file__).parent / "frozen_values.json").read_text())

HESTON_REF = dict(delta=0.2, theta=0.04, kappa=1.15, rho=-0.4)
RECIP_REF = dict(a=5.0, b=0.04, kappa=0.001, mu=0.02, rho=0.2)


@pytest.fixture(scope="session")
def frozen():
    return FROZEN


@pytest.fixture(scope="session")
def heston():
    return heston_model(**HESTON_REF, lambda_fn=0.5)


@pytest.fixture(scope="session")
def heston_affine():
    return heston_model(**HESTON_REF, lambda_fn=(0.25, 0.0, 2.0))


@pytest.fixture(scope="session")
def heston_table(heston):
    return taylor_table(heston, 0.0, 0.04)


@pytest.fixture(scope="session")
def recip():
    return reciprocal_heston_model(**RECIP_REF)


def random_table(rng, a0=None, xbar=0.0, ybar=0.0, scale=0.05):
    """Order-2 table with a0 in [0.005, 0.125] and a valid covariance."""
    a0 = rng.uniform(0.005, 0.125) if a0 is None else a0
    b0 = rng.uniform(0.0, 0.05)
    g0 = rng.uniform(-0.9, 0.9) * 2.0 * np.sqrt(a0 * b0)
    ent = {}
    for name, c0 in (("a", a0), ("b", b0), ("f", rng.normal(0, 0.5)), ("g", g0), ("h", rng.uniform(0, 0.2))):
        d = {(0, 0): c0}
        for ij in ((1, 0), (0, 1), (2, 0), (1, 1), (0, 2)):
            d[ij] = rng.normal(0.0, scale)
        ent[name] = d
    return TaylorTable.from_entries(xbar, ybar, rng.uniform(-0.95, 0.95), ent)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

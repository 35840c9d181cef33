import shutil
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from mvmrp.data import QuestionSpec, SurveyTable, TableSchema


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow desk-scale tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test outputs."""
    temp_path = Path(tempfile.mkdtemp())
    yield temp_path
    shutil.rmtree(temp_path, ignore_errors=True)


@pytest.fixture
def questions():
    """Three-level party by two-level policy, six joint categories."""
    return [QuestionSpec("party", ("D", "R", "I")), QuestionSpec("policy", ("support", "oppose"))]


@pytest.fixture
def survey_frame():
    """Small respondent table over 3 states and 2 races."""
    rng = np.random.default_rng(11)
    n = 120
    return pd.DataFrame({
        "case_id": [f"r{i}" for i in range(n)],
        "state": rng.choice(["AA", "BB", "CC"], size=n),
        "race": rng.choice(["w", "b"], size=n),
        "income": rng.normal(size=n).round(3),
        "party": rng.choice(["D", "R", "I"], size=n, p=[0.45, 0.4, 0.15]),
        "policy": rng.choice(["support", "oppose"], size=n),
    })


@pytest.fixture
def survey(survey_frame, questions):
    schema = TableSchema(factors={"state": None, "race": None,
                                  **{q.name: list(q.levels) for q in questions}},
                         numerics=["income"])
    return SurveyTable.from_frame(survey_frame, schema)


@pytest.fixture
def cells_frame():
    """Cells over state x race with a shared income covariate."""
    rows = []
    for s, state in enumerate(["AA", "BB", "CC"]):
        for r, race in enumerate(["w", "b"]):
            rows.append({"cell_id": f"{state}-{race}", "geography": state, "state": state, "race": race,
                         "income": 0.25 * s - 0.5 * r, "weight": float(10 + 5 * s + 3 * r)})
    return pd.DataFrame(rows)


@pytest.fixture
def copart_frame():
    """Lagged copartisanship keyed by state and party level."""
    values = {"AA": (0.6, 0.3, 0.1), "BB": (0.2, 0.7, 0.1), "CC": (0.4, 0.4, 0.2)}
    return pd.DataFrame([
        {"state": state, "party": party, "lag_copart": share}
        for state, shares in values.items()
        for party, share in zip(("D", "R", "I"), shares)
    ])

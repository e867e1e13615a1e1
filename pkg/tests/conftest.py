import json
from pathlib import Path

import pytest

from gcngrasp.dataset import Ontology

DATA = Path(__file__).parent / "data"
PACKAGE_DATA = Path(__file__).parents[1] / "src" / "gcngrasp" / "data"


@pytest.fixture
def mini_ontology():
    return Ontology.from_json(json.loads((PACKAGE_DATA / "mini_ontology.json").read_text()))


@pytest.fixture
def mini_dataset_root():
    return DATA / "mini_dataset"


# Acceptance criteria report one verdict line each; they are printed together
# at the end of the run so they are visible even with output capture on.
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def verdict():
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])

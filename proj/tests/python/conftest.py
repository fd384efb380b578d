import os
from pathlib import Path

import pytest

SOURCE = Path(os.environ.get("BIFAIR_SOURCE_DIR", Path(__file__).resolve().parents[2]))


@pytest.fixture(scope="session")
def source_dir():
    return SOURCE


@pytest.fixture(scope="session")
def desk_config():
    return SOURCE / "configs" / "desk.json"


@pytest.fixture(scope="session")
def report_schema():
    import json

    return json.loads((SOURCE / "schemas" / "report.schema.json").read_text())

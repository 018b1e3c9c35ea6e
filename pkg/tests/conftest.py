import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import example1, two_table_db  # noqa: E402


@pytest.fixture
def ex1():
    return example1()


@pytest.fixture
def two_table():
    return two_table_db()

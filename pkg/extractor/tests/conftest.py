from pathlib import Path

import pytest

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def slide_path() -> Path:
    return DATA_DIR / "slide.png"


@pytest.fixture(scope="session")
def spots_path() -> Path:
    return DATA_DIR / "spots.csv"

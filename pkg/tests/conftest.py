import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def minicorpus_dir() -> Path:
    return DATA_DIR / "minicorpus"


@pytest.fixture(scope="session")
def golden_dir() -> Path:
    return DATA_DIR / "golden"


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(20250808)

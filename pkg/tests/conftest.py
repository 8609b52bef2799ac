import sys
from pathlib import Path

import numpy as np
import pytest

# Make sibling helper modules (oracles.py, toynets.py) importable regardless
# of how pytest was invoked.
sys.path.insert(0, str(Path(__file__).parent))

ASSETS = Path(__file__).resolve().parent.parent / "assets"


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def assets_dir():
    return ASSETS

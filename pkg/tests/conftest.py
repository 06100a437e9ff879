import pathlib

import numpy as np
import pytest

REPO = pathlib.Path(__file__).resolve().parent.parent
DECKS = REPO / "decks"


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def deck_path(name):
    return DECKS / name

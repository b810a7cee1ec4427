from __future__ import annotations

import os
import sys
from pathlib import Path

_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, _ROOT)

import numpy as np
import pytest

from lti_core import AffineMatrix, FirStructure, ParametricLtiModel, StateSpaceStructure

CONFIG_DIR = Path(_ROOT) / "configs"


@pytest.fixture
def fir_model():
    return ParametricLtiModel(FirStructure(2), [10.0, -9.0], 1.0, name="fir2")


@pytest.fixture
def two_tank():
    structure = StateSpaceStructure(
        AffineMatrix.parse([["theta3", "theta4"], [1.0, 0.0]], "a"),
        AffineMatrix.parse([[4.5], [0.0]], "b"),
        AffineMatrix.parse([["theta1", "theta2"]], "c"),
    )
    return ParametricLtiModel(structure, [0.12, 0.059, 0.74, -0.14], 0.01, name="two-tank")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def config_dir():
    return CONFIG_DIR

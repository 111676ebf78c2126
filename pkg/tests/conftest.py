import numpy as np
import pytest

from labtamp.kinematics import panda7, panda8
from labtamp.scene import load_scene
from labtamp.taskplan import StreamEnv, run_alg1
from labtamp.xdl import load_xdl


@pytest.fixture(scope="session")
def arm8():
    return panda8()


@pytest.fixture(scope="session")
def arm7():
    return panda7()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def solubility_plan(arm8):
    """Reference plan for the shipped solubility fixtures (planned once)."""
    w = load_scene("solubility")
    plan = run_alg1(load_xdl("solubility"), w, StreamEnv(arm8), seed=0)
    return plan, w

import numpy as np
import pytest

from mtnas.search_space import desk_space, full_graph
from mtnas.supernet import init_supernet
from mtnas.tasks import default_tasks, generate_dataset


@pytest.fixture(scope="session")
def space():
    return desk_space()


@pytest.fixture(scope="session")
def tasks():
    return default_tasks()


@pytest.fixture(scope="session")
def scenes():
    return generate_dataset(12, seed=5)


@pytest.fixture
def supernet(space, tasks):
    return init_supernet(space, full_graph("single", [t.head for t in tasks]), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

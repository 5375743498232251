from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from graphood.data import Graph, GraphDataset, generate_triangles_dataset

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
torch.set_num_threads(1)

DATA = Path(__file__).parent / "data"


@pytest.fixture
def fixture_root():
    return DATA / "FIXTURE"


def complete_graph(n, label=0, gid=0, features=None):
    edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    x = np.ones((n, 1)) if features is None else features
    return Graph(x, np.array(edges, dtype=int).reshape(-1, 2), label, gid)


def path_graph(n, label=0, gid=0):
    return Graph(np.ones((n, 1)), np.array([(i, i + 1) for i in range(n - 1)]).reshape(-1, 2), label, gid)


def random_graph(rng, n, f=3, label=0, gid=0, p=0.4):
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(iu.size) < p
    return Graph(rng.normal(size=(n, f)), np.stack([iu[keep], ju[keep]], 1), label, gid)


def toy_dataset(per_class=10, num_classes=6, seed=0, f=2):
    rng = np.random.default_rng(seed)
    graphs = [random_graph(rng, int(rng.integers(3, 7)), f, c, c * per_class + i)
              for c in range(num_classes) for i in range(per_class)]
    return GraphDataset("toy", tuple(graphs), num_classes, tuple(f"c{c}" for c in range(num_classes)), f)


@pytest.fixture(scope="session")
def small_triangles():
    return generate_triangles_dataset(8, (8, 14), seed=3)

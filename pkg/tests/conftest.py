import numpy as np
import pytest

from micro.dataset import SplitSpec, generate_synthetic, make_warm_split
from micro.recommender import MicroModel, TrainerConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth():
    return generate_synthetic(200, 100, {"visual": 32, "textual": 16}, rank=8, noise=0.1, seed=0)


@pytest.fixture(scope="session")
def warm_table(synth):
    return make_warm_split(synth.table, SplitSpec("warm", seed=0))


def tiny_problem(seed=0, users=8, items=12, dims=None, **cfg):
    """8 users x 12 items toy used for full-model gradient checks."""
    dims = dims or {"visual": 6, "textual": 5}
    data = generate_synthetic(max(users, 10), max(items, 10), dims, rank=3, noise=0.1, seed=seed,
                              per_user=(4, 8))
    # trim to the requested size, keeping every user with at least one item
    keep = (data.table.users < users) & (data.table.items < items)
    from micro.dataset import InteractionTable

    table = InteractionTable(users, items, data.table.users[keep], data.table.items[keep],
                             np.zeros(int(keep.sum()), dtype=np.int8))
    features = {m: f[:items] for m, f in data.features.items()}
    config = TrainerConfig(**{"d": 4, "k": 3, "layers": 2, "batch": 16, "seed": seed, **cfg})
    return MicroModel(config, table, features), table

import numpy as np
import pytest
import torch

from crossmodal_attack.dataset import InteractionGraph, split_leave_one_out, synth_dataset
from crossmodal_attack.encoders import FeatureEncoder
from crossmodal_attack.victim import train_victim

torch.set_num_threads(1)


def random_graph(rng, n_users, n_items, p=0.3, prefix=("u", "i")):
    pairs = [(f"{prefix[0]}{u}", f"{prefix[1]}{i}") for u in range(n_users) for i in range(n_items)
             if rng.random() < p]
    return InteractionGraph.from_pairs(pairs, users=[f"{prefix[0]}{u}" for u in range(n_users)],
                                       items=[f"{prefix[1]}{i}" for i in range(n_items)])


@pytest.fixture(scope="session")
def planted():
    """The (100, 200, 0.05, 0.8, 7) planted fixture at 16x16 pixels."""
    return synth_dataset(100, 200, 0.05, 0.8, 7, image_size=16)


@pytest.fixture(scope="session")
def planted_split(planted):
    return split_leave_one_out(planted.graph, 0.1, 0)


@pytest.fixture(scope="session")
def planted_encoder(planted):
    return FeatureEncoder(d_f=32, epochs=15, seed=1).fit(planted.images.pixels)


@pytest.fixture(scope="session")
def vbpr(planted, planted_split, planted_encoder):
    return train_victim("vbpr", planted_split.train, planted.images.pixels, planted_encoder, seed=0,
                        dim=32, epochs=30, reg=0.01)


@pytest.fixture(scope="session")
def mf(planted_split):
    return train_victim("mf", planted_split.train, seed=0, dim=32, epochs=30, reg=0.01)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)

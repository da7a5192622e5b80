import numpy as np
import pytest

from globalmem.model import ModelConfig, init_params


def toy_config(**kw) -> ModelConfig:
    base = dict(vocab_size=17, d_model=16, n_layers=2, n_heads=2, ffn_mult=2, window_l=8, mem_k=2, max_seq=160)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def cfg():
    return toy_config()


@pytest.fixture
def params(cfg):
    return init_params(cfg, seed=3, init_std=0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_toy():
    """The end-to-end toy pipeline (a few minutes on one CPU); shared by every test that needs it."""
    from globalmem.evalbench import train_toy

    pipe, world, traces = train_toy()
    return pipe, world, traces

import numpy as np
import pytest

from cgls.curriculum import TIERS
from cgls.model import ModelConfig, TokenBatch, new_model
from cgls.stratify import synth_corpus
from cgls.trainer import config_from_dict

# PASS/FAIL lines from test_acceptance.py, echoed in the terminal summary
ACCEPTANCE: list[str] = []

TINY = dict(vocab_size=256, d_model=8, n_heads=2, d_ff=16, seq_len=16, depth=2)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY, init_std=0.02, seed=7)


@pytest.fixture
def tiny_params(tiny_config):
    return new_model(tiny_config)


def random_batch(seed, batch=3, width=17, low=1, high=256):
    rng = np.random.default_rng(seed)
    return TokenBatch(rng.integers(low, high, size=(batch, width)), pad_id=0)


def uniform_params(config):
    """Zero embeddings and head give equal logits for every token."""
    p = new_model(config)
    return p.replace_tensors({"embed": np.zeros_like(p.embed),
                              "lm_head": np.zeros_like(p.lm_head),
                              "pos_embed": np.zeros_like(p.pos_embed)})


@pytest.fixture(scope="session")
def small_corpora():
    return tuple(synth_corpus(t, 200, 0) for t in TIERS)


def small_pipeline(method="cgls", total_flops=2e10, **overrides):
    data = {
        "method": "cgls", "seed": 0,
        "model": {"d_model": 32, "n_heads": 4, "d_ff": 128, "seq_len": 32, "depth": 8},
        "growth": {"stage_depths": [4, 6, 8]}, "schedule": {"preset": "desk"},
        "budget": {"total_flops": total_flops}, "batch_size": 4,
        "optimizer": {"peak_lr": 3e-3, "new_layer_lr": 3e-3, "warmup_steps": 20},
    }
    data.update(overrides)
    return config_from_dict(data).for_method(method)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)

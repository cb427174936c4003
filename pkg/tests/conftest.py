import numpy as np
import pytest

from vicon.model import ModelConfig, init_params

TINY = ModelConfig(d=16, n_layers=2, n_heads=2, d_ffn=32, I=4, I_min=1, nx=4, ny=4, Rx=2, Ry=2)


def token_oracle(I, Nc, Nq):
    """Classify every token by (pair, role) and apply the block rule directly."""
    tokens = []
    for i in range(I):
        tokens += [(i, 0)] * Nc + [(i, 1)] * Nq
    n = len(tokens)
    mask = np.zeros((n, n), bool)
    for r, (pr, rr) in enumerate(tokens):
        for c, (pc, rc) in enumerate(tokens):
            if pc < pr:
                mask[r, c] = True
            elif pc == pr:
                mask[r, c] = rc == 0 or rr == 1
    return mask


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_params64():
    return init_params(TINY, np.random.default_rng(0), np.float64)


@pytest.fixture
def random_prompt():
    def make(cfg, J, B=1, seed=0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        shape = (B, J, cfg.nx, cfg.ny, cfg.C_union)
        return rng.normal(size=shape).astype(dtype), rng.normal(size=shape).astype(dtype)
    return make


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)

import numpy as np
import pytest

import acceptance_log
from fissionvae.models import FissionVAE, ModelConfig


def tiny(kind, prior=None, recon="bernoulli", input_dim=6, z1=4, z2=2, k=2, **kw):
    cfg = ModelConfig(kind=kind, k=k, input_dim=input_dim, z1_dim=z1, z2_dim=z2, enc_hidden=(5,),
                      enc2_hidden=(3,), hidden_activation="tanh", prior=prior, recon=recon, **kw)
    return FissionVAE(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = acceptance_log.summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

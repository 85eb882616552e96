import numpy as np
import pytest

from csrep.reptdnn import RepTdnnConfig
from csrep.runtime import BatchNormParams, TdnnLayer

ACCEPTANCE_LINES = []

# 2 blocks of 2 multi-branch layers on 16 channels: fast to run, same structure
SMALL = RepTdnnConfig(input_channels=12, channels=16, head_contexts=(5, 1), layers_per_block=2,
                      se_bottleneck=4, fc_dim=24, embedding_dim=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_conv(rng, cin, cout, context, groups=1, dilation=1, dtype="float64", bias=True):
    w = rng.standard_normal((cout, cin // groups, context)).astype(dtype)
    b = rng.standard_normal(cout).astype(dtype) if bias else np.zeros(cout, dtype)
    return TdnnLayer(w, b, dilation, groups)


def random_bn(rng, n, dtype="float64"):
    return BatchNormParams(rng.normal(0, 0.5, n).astype(dtype), rng.uniform(0.5, 2.0, n).astype(dtype),
                           rng.uniform(0.5, 1.5, n).astype(dtype), rng.normal(0, 0.5, n).astype(dtype))


def record_acceptance(line: str):
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

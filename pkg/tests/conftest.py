import numpy as np
import pytest

from ticketlab.encoder import ModelConfig, SubnetworkMask, init_params
from ticketlab.tasks import Dataset, TaskSpec
from ticketlab.training import Checkpoint, FineTunedModel

TOY = ModelConfig(num_layers=2, num_heads=2, model_dim=8, ff_dim=12, vocab_size=16, max_seq_len=6)


def toy_params(config=TOY, seed=0, scale=15.0, num_labels=2):
    """Init with weights large enough that attention is far from uniform."""
    params = init_params(config, seed, num_labels)
    rng = np.random.default_rng(seed + 1)
    for k, v in params.items():
        if v.ndim == 2:
            params[k] = v * scale
        else:
            params[k] = v + rng.normal(0, 0.1, size=v.shape)
    return params


def toy_tokens(n=4, config=TOY, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, config.vocab_size, size=(n, config.max_seq_len))


def toy_task(kind="classification", n_train=24, n_dev=10, seed=0, config=TOY):
    rng = np.random.default_rng([seed, 99])
    tr = rng.integers(4, config.vocab_size, size=(n_train, config.max_seq_len))
    dv = rng.integers(4, config.vocab_size, size=(n_dev, config.max_seq_len))
    if kind == "regression":
        train = Dataset(tr, rng.random(n_train))
        dev = Dataset(dv, rng.random(n_dev))
        return TaskSpec("toy_reg", "regression", "pearson", seed, n_train, n_dev, 2, True, train, dev)
    train = Dataset(tr, (tr[:, 1] > tr[:, 2]).astype(np.int64))
    dev = Dataset(dv, (dv[:, 1] > dv[:, 2]).astype(np.int64))
    return TaskSpec("toy", "classification", "accuracy", seed, n_train, n_dev, 2, True, train, dev)


def toy_model(kind="classification", seed=0, config=TOY):
    task = toy_task(kind, seed=seed, config=config)
    params = toy_params(config, seed, num_labels=task.num_outputs)
    return FineTunedModel(config, params, task, SubnetworkMask.full(config))


def toy_checkpoint(config=TOY, seed=0):
    params = toy_params(config, seed)
    return Checkpoint(config, {k: v for k, v in params.items() if not k.startswith("classifier.")})


@pytest.fixture
def toy():
    return TOY


# Acceptance criteria lines, filled by test_acceptance and echoed after the run.
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])

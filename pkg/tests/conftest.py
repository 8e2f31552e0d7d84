from __future__ import annotations

import os
import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(int(os.environ.get("ROBUST_PREFIX_THREADS", "1")))

from robust_prefix.data import SyntheticTaskSpec, lm_corpus, synth_dataset  # noqa: E402
from robust_prefix.model import MicroLM, ModelConfig, PrefixParameters  # noqa: E402
from robust_prefix.training import TrainConfig, pretrain_lm, train_standard_prefix  # noqa: E402

TINY_SPEC = SyntheticTaskSpec(
    vocab_size=64, num_classes=2, signal_per_class=4, min_len=3, max_len=5, max_signal=2,
    n_train=400, n_dev=100, n_test=100, noise_ratio=0.0,
)


def tiny_config(task) -> ModelConfig:
    return ModelConfig(num_layers=2, hidden_dim=32, num_heads=2, vocab_size=len(task.vocab), max_seq_len=24,
                       prefix_len=4)


@pytest.fixture(scope="session")
def tiny_task():
    return synth_dataset(TINY_SPEC, seed=0)


@pytest.fixture(scope="session")
def tiny_trained(tiny_task):
    """A pretrained tiny LM with a prefix tuned on the tiny task."""
    torch.manual_seed(0)
    model = MicroLM(tiny_config(tiny_task))
    pretrain_lm(model, lm_corpus(tiny_task, 3000, seed=1, label_rate=0.5, framed=True), epochs=4, lr=3e-3, seed=0)
    model.freeze()
    pool = tiny_task.filler
    prefix = PrefixParameters.init_from_embeddings(model, torch.Generator().manual_seed(0), pool)
    res = train_standard_prefix(model, prefix, tiny_task.train, tiny_task.dev,
                                TrainConfig(epochs=4, lr=3e-3, batch_size=32), tiny_task.label_ids)
    return model, res.prefix


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES):
            terminalreporter.write_line(line)

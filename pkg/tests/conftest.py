# /tests/conftest.py

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from qsf.config import RunConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def abab_corpus_file(tmp_path):
    path = tmp_path / "abab.txt"
    path.write_bytes(b"ab" * 600)
    return path


@pytest.fixture
def micro_run_config(tmp_path, abab_corpus_file):
    """A run small enough to train in a second or two."""
    def build(stage=2, **overrides):
        values = dict(
            stage=stage, d=8, n_layers=1, d_ff=16, seq_len=8, dropout=0.0,
            batch_size=4, max_steps=20, warmup_steps=2, lr_max=1e-2, lr_min=1e-3,
            eval_interval=10, eval_batches=2, corpus_path=str(abab_corpus_file),
            output_dir=str(tmp_path / f"run-stage{stage}"), strict_deterministic=True,
        )
        values.update(overrides)
        return RunConfig.from_dict(values)
    return build

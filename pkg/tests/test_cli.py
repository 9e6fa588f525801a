# /tests/test_cli.py

import json
import os

import pytest

from qsf.cli import exit_code_for, main
from qsf.errors import ConditioningError, ConfigError, FormatError, TrainingDivergedError, TransferError


def write_config(tmp_path, corpus, **overrides):
    values = dict(stage=3, d=8, n_layers=1, d_ff=16, seq_len=8, dropout=0.0, batch_size=4, max_steps=10,
                  warmup_steps=2, lr_max=1e-2, lr_min=1e-3, eval_interval=5, eval_batches=2,
                  corpus_path=str(corpus), output_dir=str(tmp_path / "run"))
    values.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(values))
    return path


@pytest.fixture
def trained_run(tmp_path, abab_corpus_file):
    config = write_config(tmp_path, abab_corpus_file)
    assert main(['train', '--config', str(config), '--strict-deterministic']) == 0
    return tmp_path / "run"


def test_exit_codes():
    assert exit_code_for(ConfigError("x")) == 2
    assert exit_code_for(TransferError("x")) == 2
    assert exit_code_for(TrainingDivergedError("x")) == 3
    assert exit_code_for(FormatError("x")) == 4
    assert exit_code_for(FileNotFoundError("x")) == 4
    assert exit_code_for(ConditioningError("x")) == 5


def test_train_without_corpus_is_a_config_error(tmp_path):
    assert main(['train', '--out', str(tmp_path / "run")]) == 2


def test_unknown_config_key(tmp_path, abab_corpus_file, capsys):
    config = write_config(tmp_path, abab_corpus_file, learning_rate=0.1)
    assert main(['train', '--config', str(config)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_missing_corpus_file_is_an_io_error(tmp_path, abab_corpus_file):
    config = write_config(tmp_path, abab_corpus_file)
    assert main(['train', '--config', str(config), '--corpus', str(tmp_path / "nope.txt")]) == 4


def test_train_prints_summary(tmp_path, abab_corpus_file, capsys):
    config = write_config(tmp_path, abab_corpus_file)
    assert main(["train", "--config", str(config), "--strict-deterministic"]) == 0
    out = capsys.readouterr().out
    assert "checkpoint:" in out and "perplexity" in out
    assert (tmp_path / "run" / "checkpoint.qsfc").exists()


def test_generate_with_no_new_tokens_echoes_prompt(trained_run, capsys):
    capsys.readouterr()
    assert main(['generate', '--ckpt', str(trained_run / "checkpoint.qsfc"), '--prompt', 'abab',
                 '--max-tokens', '0']) == 0
    assert capsys.readouterr().out.strip() == 'abab'


def test_generate_prompt_longer_than_context(trained_run):
    assert main(['generate', '--ckpt', str(trained_run / "checkpoint.qsfc"), '--prompt', 'a' * 20]) == 2


def test_generate_missing_checkpoint(tmp_path):
    assert main(['generate', '--ckpt', str(tmp_path / "missing.qsfc"), '--prompt', 'a']) == 4


def test_generate_rejects_non_checkpoint(tmp_path):
    bogus = tmp_path / "bogus.qsfc"
    bogus.write_bytes(b"not a checkpoint at all")
    assert main(['generate', '--ckpt', str(bogus), '--prompt', 'a']) == 4


def test_spectrum_command(trained_run, tmp_path, capsys):
    out_csv = tmp_path / "spectrum.csv"
    capsys.readouterr()
    assert main(['spectrum', '--ckpt', str(trained_run / "checkpoint.qsfc"), '--out', str(out_csv)]) == 0
    assert 'total: decay' in capsys.readouterr().out
    assert len(out_csv.read_text().strip().splitlines()) == 1 + 8


def test_zeta_command(trained_run, tmp_path):
    out = tmp_path / "trace.csv"
    assert main(['zeta', '--run-dir', str(trained_run), '--out', str(out)]) == 0
    assert out.exists() and (tmp_path / "trace_summary.csv").exists()


def test_zeta_command_without_trace(tmp_path):
    empty = tmp_path / "empty"
    os.makedirs(empty)
    assert main(['zeta', '--run-dir', str(empty)]) == 4


def test_check_propagator(tmp_path, capsys):
    assert main(['check-propagator', '--dim', '1', '--trials', '2', '--out', str(tmp_path)]) == 0
    assert 'FAIL' not in capsys.readouterr().out
    assert (tmp_path / "propagator_report.csv").exists()


def test_check_propagator_without_noise():
    assert main(['check-propagator', '--dim', '2', '--trials', '1', '--sigma-noise', '0']) == 5


def test_check_grads():
    assert main(['check-grads', '--seeds', '1', '--skip-end-to-end']) == 0

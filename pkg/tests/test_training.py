# /tests/test_training.py

import csv
import os

import numpy as np
import pytest

from qsf.autodiff import ParamStore
from qsf.checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint
from qsf.data import Corpus, detokenize, sample_windows, to_text, tokenize
from qsf.errors import DimensionError, FormatError, NumericError, RangeError, TrainingDivergedError, TransferError
from qsf.ml_models.qsf_model import QSFModel, StageConfig, init_parameters
from qsf.optim import AdamW, clip_by_global_norm, onecycle_lr
from qsf.trainer import RowStreams, Trainer, generate, train_stage, transfer_and_freeze


def stage_config(stage, d=4, **overrides):
    values = dict(stage=stage, d=d, n_layers=2, d_ff=8, vocab_size=7, seq_len=6)
    values.update(overrides)
    return StageConfig(**values)


def fresh_checkpoint(stage, seed=0, **overrides):
    config = stage_config(stage, **overrides)
    return Checkpoint(config, init_parameters(config, np.random.default_rng(seed)))


# --- data ---

def test_tokenize_bytes():
    np.testing.assert_array_equal(tokenize("ab\n"), [97, 98, 10])
    assert to_text(tokenize("héllo")) == "héllo"


def test_tokenize_roundtrip_of_all_byte_values(rng):
    blob = rng.integers(0, 256, size=1 << 20, dtype=np.uint8).tobytes()
    assert detokenize(tokenize(blob)) == blob


def test_detokenize_rejects_out_of_range():
    with pytest.raises(RangeError):
        detokenize([65, 256])


def test_corpus_split():
    corpus = Corpus.from_bytes(b"x" * 100)
    assert len(corpus.train) == 90 and len(corpus.validation) == 10
    with pytest.raises(FormatError):
        corpus.require_windows(10)
    corpus.require_windows(9)


def test_sample_windows_are_shifted_by_one(rng):
    tokens = np.arange(50)
    inputs, targets = sample_windows(tokens, 8, 5, rng)
    assert inputs.shape == targets.shape == (8, 5)
    np.testing.assert_array_equal(targets, inputs + 1)


# --- optimisation ---

def test_onecycle_schedule():
    assert onecycle_lr(0, 1e-3, 1e-5, 10, 100) == 0.0
    assert onecycle_lr(5, 1e-3, 1e-5, 10, 100) == pytest.approx(5e-4)
    assert onecycle_lr(10, 1e-3, 1e-5, 10, 100) == pytest.approx(1e-3)
    assert onecycle_lr(55, 1e-3, 1e-5, 10, 100) == pytest.approx(0.5 * (1e-3 + 1e-5))
    assert onecycle_lr(100, 1e-3, 1e-5, 10, 100) == 1e-5
    assert onecycle_lr(500, 1e-3, 1e-5, 10, 100) == 1e-5


def scalar_store(value=1.0, frozen=False):
    params = ParamStore()
    params.create('w', np.array([value]), frozen=frozen)
    return params


def test_adamw_first_step_moves_by_lr():
    params = scalar_store()
    AdamW(params, weight_decay=0.0).step({'w': np.array([3.0])}, lr=0.1)
    assert params['w'][0] == pytest.approx(0.9, abs=1e-7)


def test_adamw_zero_gradient_without_decay_is_a_no_op():
    params = scalar_store()
    AdamW(params, weight_decay=0.0).step({'w': np.array([0.0])}, lr=0.1)
    assert params['w'][0] == 1.0


def test_adamw_decoupled_weight_decay():
    params = scalar_store()
    AdamW(params, weight_decay=0.1).step({'w': np.array([0.0])}, lr=0.1)
    assert params['w'][0] == pytest.approx(0.99)


def test_clip_by_global_norm():
    grads = {'a': np.array([3.0]), 'b': np.array([4.0])}
    assert clip_by_global_norm(grads, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(grads['a'], [0.6])
    np.testing.assert_allclose(grads['b'], [0.8])


def test_adamw_rejects_non_finite_gradients():
    params = scalar_store()
    with pytest.raises(NumericError):
        AdamW(params).step({'w': np.array([np.nan])}, lr=0.1)
    assert params['w'][0] == 1.0


def test_adamw_skips_frozen_parameters():
    params = scalar_store(frozen=True)
    AdamW(params, weight_decay=0.1).step({'w': np.array([np.nan])}, lr=0.1)
    assert params['w'][0] == 1.0


# --- checkpoints ---

def test_checkpoint_roundtrip_is_byte_identical():
    ckpt = fresh_checkpoint(3)
    ckpt.params.freeze(['tok_emb'])
    optimizer = AdamW(ckpt.params)
    optimizer.step({name: np.ones_like(data) for name, data in ckpt.params.items()}, lr=1e-3)
    ckpt.optimizer = optimizer.state_dict()
    ckpt.metadata = {'step': 1, 'val_loss': 1.25}
    blob = encode_checkpoint(ckpt)
    restored = decode_checkpoint(blob)
    assert encode_checkpoint(restored) == blob
    assert restored.params.frozen_names() == ['tok_emb']
    assert restored.optimizer['step'] == 1
    np.testing.assert_array_equal(restored.params['layers.0.koopman'], ckpt.params['layers.0.koopman'])


def test_checkpoint_architecture_mismatch():
    blob = encode_checkpoint(fresh_checkpoint(2))
    with pytest.raises(FormatError):
        decode_checkpoint(blob, expected_config=stage_config(2, d=6))


def test_checkpoint_bad_magic_and_truncation():
    blob = encode_checkpoint(fresh_checkpoint(2))
    with pytest.raises(FormatError):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:-8])
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:6])


# --- transfer ---

def test_transfer_stage_one_to_two_copies_and_freezes(rng):
    source = fresh_checkpoint(1)
    result = transfer_and_freeze(source, stage_config(2), rng)
    for name in ('tok_emb', 'pos_emb', 'out_proj', 'final_norm.gain', 'final_norm.bias'):
        assert np.array_equal(result.params[name], source.params[name])
        assert result.params.is_frozen(name)
    assert sorted(result.frozen) == sorted(result.transferred)
    assert not result.params.is_frozen('layers.0.koopman')


def test_transfer_stage_two_to_three(rng):
    source = fresh_checkpoint(2, seed=5)
    result = transfer_and_freeze(source, stage_config(3), rng)
    model = QSFModel(stage_config(3), result.params)
    assert model.zetas() == [1.0, 1.0]
    for layer in range(2):
        name = f"layers.{layer}.koopman"
        assert np.array_equal(result.params[name], source.params[name])
    assert result.frozen == []


def test_transfer_rejects_width_mismatch(rng):
    with pytest.raises(TransferError) as info:
        transfer_and_freeze(fresh_checkpoint(1, d=8), stage_config(2, d=4), rng)
    assert any('tok_emb' in item for item in info.value.offending)


def test_transfer_rejects_skipping_a_stage(rng):
    with pytest.raises(TransferError):
        transfer_and_freeze(fresh_checkpoint(1), stage_config(3), rng)


# --- training runs ---

def test_memorises_alternating_corpus(micro_run_config):
    rc = micro_run_config(2, max_steps=300, warmup_steps=20, lr_max=3e-2, eval_interval=100)
    trainer = Trainer(rc, Corpus.from_path(rc.corpus_path))
    initial = trainer.evaluate('train')
    result = trainer.train()
    assert result.final_train_loss < 0.1 * initial
    continuation = generate(result.checkpoint.model(), tokenize("a"), 6)
    assert to_text(continuation) == "abababa"


def test_generation_is_causal(micro_run_config):
    model = QSFModel(micro_run_config(3).stage_config(), rng=np.random.default_rng(3))
    long = generate(model, tokenize("ab"), 5)
    short = generate(model, tokenize("ab"), 3)
    np.testing.assert_array_equal(long[:5], short)


def test_generate_validates_prompt(micro_run_config):
    model = QSFModel(micro_run_config(2).stage_config(), rng=np.random.default_rng(0))
    with pytest.raises(DimensionError):
        generate(model, np.array([], dtype=np.int64), 3)
    with pytest.raises(RangeError):
        generate(model, tokenize("abababab" + "a"), 3)
    np.testing.assert_array_equal(generate(model, tokenize("ab"), 0), tokenize("ab"))


def test_strict_runs_are_reproducible(micro_run_config, tmp_path):
    paths = []
    for name in ('first', 'second'):
        rc = micro_run_config(3, output_dir=str(tmp_path / name))
        paths.append(train_stage(rc, Corpus.from_path(rc.corpus_path)).checkpoint_path)
    with open(paths[0], 'rb') as a, open(paths[1], 'rb') as b:
        assert a.read() == b.read()


def test_threaded_runs_are_reproducible(micro_run_config, tmp_path, monkeypatch):
    monkeypatch.setenv('QSF_THREADS', '2')
    paths = []
    for name in ('first', 'second'):
        rc = micro_run_config(2, dropout=0.1, strict_deterministic=False, output_dir=str(tmp_path / name))
        trainer = Trainer(rc, Corpus.from_path(rc.corpus_path))
        assert trainer.workers == 2
        trainer.train()
        paths.append(trainer.path['checkpoint'])
    with open(paths[0], 'rb') as a, open(paths[1], 'rb') as b:
        assert a.read() == b.read()


def test_threaded_gradients_match_serial(micro_run_config, monkeypatch, rng):
    monkeypatch.setenv('QSF_THREADS', '2')
    rc = micro_run_config(2, dropout=0.1)
    corpus = Corpus.from_path(rc.corpus_path)
    serial = Trainer(rc, corpus)
    threaded = Trainer(rc.with_overrides(strict_deterministic=False), corpus)
    assert (serial.workers, threaded.workers) == (1, 2)
    inputs, targets = sample_windows(corpus.train, 4, 8, rng)
    loss_a, grads_a = serial.compute_gradients(inputs, targets, step=1)
    loss_b, grads_b = threaded.compute_gradients(inputs, targets, step=1)
    np.testing.assert_allclose(loss_a, loss_b, rtol=1e-12)
    for name in grads_a:
        np.testing.assert_allclose(grads_a[name], grads_b[name], rtol=1e-9, atol=1e-12, err_msg=name)


def test_row_streams_do_not_depend_on_grouping():
    whole = RowStreams(seed=5, step=3, rows=[0, 1, 2, 3]).random((4, 2, 3))
    split = [RowStreams(seed=5, step=3, rows=rows).random((2, 2, 3)) for rows in ([0, 1], [2, 3])]
    np.testing.assert_array_equal(whole, np.concatenate(split))
    assert not np.array_equal(whole, RowStreams(seed=5, step=4, rows=[0, 1, 2, 3]).random((4, 2, 3)))


def test_explicit_freeze_is_permanent(micro_run_config):
    rc = micro_run_config(2, freeze=['tok_emb'])
    trainer = Trainer(rc, Corpus.from_path(rc.corpus_path))
    before = trainer.model.params['tok_emb'].copy()
    result = trainer.train()
    np.testing.assert_array_equal(result.checkpoint.params['tok_emb'], before)
    assert 'tok_emb' in result.checkpoint.params.frozen_names()


def test_transferred_tensors_unfreeze_after_the_frozen_phase(micro_run_config):
    stage1 = micro_run_config(1)
    corpus = Corpus.from_path(stage1.corpus_path)
    source = train_stage(stage1, corpus).checkpoint
    trainer = Trainer(micro_run_config(2), corpus, init_checkpoint=source)
    assert sorted(trainer.phase_frozen) == sorted(trainer.transferred)
    assert trainer.unfreeze_step == 5
    result = trainer.train()
    assert result.checkpoint.params.frozen_names() == []
    assert not np.array_equal(result.checkpoint.params['tok_emb'], source.params['tok_emb'])


def test_stage_four_stays_orthogonal(micro_run_config):
    rc = micro_run_config(4)
    result = train_stage(rc, Corpus.from_path(rc.corpus_path))
    for U in result.checkpoint.model().koopman_operators():
        assert np.linalg.norm(U.T @ U - np.eye(rc.d)) < 1e-8


def test_stage_three_run_directory(micro_run_config):
    rc = micro_run_config(3)
    result = train_stage(rc, Corpus.from_path(rc.corpus_path))
    for name in ('config.json', 'checkpoint.qsfc', 'last_good.qsfc', 'metrics.csv', 'zeta.csv',
                 'zeta_summary.csv', 'runs.db'):
        assert os.path.exists(os.path.join(rc.output_dir, name)), name
    with open(os.path.join(rc.output_dir, 'zeta.csv'), newline='') as f:
        rows = list(csv.DictReader(f))
    assert [int(r['step']) for r in rows] == [0, 10, 20]
    assert len(result.zeta_trace) == 3
    with open(os.path.join(rc.output_dir, 'metrics.csv'), newline='') as f:
        assert len(list(csv.DictReader(f))) == 6
    saved = load_checkpoint(result.checkpoint_path, expected_config=rc.stage_config())
    assert saved.metadata['zeta_trace'] == result.zeta_trace.to_dict()


def test_divergence_keeps_last_good_checkpoint(micro_run_config, monkeypatch):
    rc = micro_run_config(2)
    trainer = Trainer(rc, Corpus.from_path(rc.corpus_path))
    original = Trainer.compute_gradients

    def poisoned(self, inputs, targets, step):
        loss, grads = original(self, inputs, targets, step)
        return (float('nan') if step == 3 else loss), grads

    monkeypatch.setattr(Trainer, 'compute_gradients', poisoned)
    with pytest.raises(TrainingDivergedError) as info:
        trainer.train()
    assert info.value.step == 3
    assert load_checkpoint(info.value.last_good).metadata['step'] == 0
    assert not os.path.exists(os.path.join(rc.output_dir, 'checkpoint.qsfc'))


def test_non_finite_gradient_is_divergence(micro_run_config, monkeypatch):
    rc = micro_run_config(2)
    trainer = Trainer(rc, Corpus.from_path(rc.corpus_path))
    original = Trainer.compute_gradients

    def poisoned(self, inputs, targets, step):
        loss, grads = original(self, inputs, targets, step)
        if step == 3:
            grads['layers.0.koopman'] = np.full_like(grads['layers.0.koopman'], np.inf)
        return loss, grads

    monkeypatch.setattr(Trainer, 'compute_gradients', poisoned)
    with pytest.raises(TrainingDivergedError) as info:
        trainer.train()
    assert info.value.step == 3
    assert load_checkpoint(info.value.last_good).metadata['step'] == 0
    assert not os.path.exists(os.path.join(rc.output_dir, 'checkpoint.qsfc'))

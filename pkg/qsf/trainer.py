# /qsf/trainer.py

"""Stage training loop, cross-stage parameter transfer and text generation."""

import concurrent.futures
import csv
import dataclasses
import json
import logging
import math
import os

import numpy as np
import scipy.special

from . import config as cfg
from . import database
from .autodiff import ParamStore, Tape, backward
from .checkpoint import Checkpoint, save_checkpoint
from .data import sample_windows
from .errors import ConfigError, DimensionError, NumericError, RangeError, TrainingDivergedError, TransferError
from .ml_models.layers import hamiltonian_unitary
from .ml_models.qsf_model import QSFModel, init_parameters
from .ml_models.spectral import ZetaTrace, export_zeta_csv
from .optim import AdamW, onecycle_lr
from .utils.helpers import atomic_write, spawn_rngs

logger = logging.getLogger(__name__)

# target stage -> parameter patterns copied from the source checkpoint
TRANSFER_RULES = {
    2: ('tok_emb', 'pos_emb', 'final_norm.*', 'out_proj'),
    3: ('tok_emb', 'pos_emb', 'final_norm.*', 'out_proj', 'layers.*.norm.*', 'layers.*.koopman',
        'layers.*.mlp.*'),
    4: ('tok_emb', 'pos_emb', 'final_norm.*', 'out_proj', 'layers.*.norm.*', 'layers.*.attn.*',
        'layers.*.mlp.*'),
}
# target stage -> stages it may be initialised from (besides itself)
TRANSFER_SOURCES = {1: (), 2: (1,), 3: (2,), 4: (2, 3)}
GLOBAL_TENSORS = ('tok_emb', 'pos_emb', 'final_norm.gain', 'final_norm.bias', 'out_proj')


@dataclasses.dataclass
class TransferResult:
    params: ParamStore
    transferred: list
    frozen: list


def transfer_and_freeze(source, target_config, rng, freeze=None):
    """Builds the parameters of ``target_config`` from a source checkpoint.

    Tensors selected by the target stage's transfer rules are copied bit-exactly;
    everything else is freshly initialised. ``freeze`` is a list of name
    patterns; by default a Stage II target freezes exactly what it received.
    """
    src_stage, dst_stage = source.config.stage, target_config.stage
    if dst_stage != src_stage and src_stage not in TRANSFER_SOURCES[dst_stage]:
        raise TransferError(f"cannot initialise Stage {dst_stage} from a Stage {src_stage} checkpoint")
    rules = ('*',) if dst_stage == src_stage else TRANSFER_RULES[dst_stage]
    params = init_parameters(target_config, rng)
    selected = params.match(rules)

    offending = []
    for name in selected:
        if name not in source.params:
            if name in GLOBAL_TENSORS:
                offending.append(f"{name} (missing in source)")
            continue
        if source.params[name].shape != params[name].shape:
            offending.append(f"{name} {source.params[name].shape} -> {params[name].shape}")
    if offending:
        raise TransferError(f"incompatible source checkpoint: {'; '.join(offending)}", offending=offending)

    transferred = []
    for name in selected:
        if name in source.params:
            params.set_value(name, source.params[name])
            transferred.append(name)
    if freeze is None:
        frozen = params.freeze(transferred) if dst_stage == 2 and src_stage == 1 else []
    else:
        frozen = params.freeze(freeze)
    logger.info("Transferred %d tensors from Stage %d, froze %d.", len(transferred), src_stage, len(frozen))
    return TransferResult(params, transferred, frozen)


class RowStreams:
    """Dropout draws from one generator per batch row, seeded by (seed, step, row).

    A row sees the same masks whichever shard it is computed in.
    """

    def __init__(self, seed, step, rows):
        self.generators = [np.random.default_rng([seed, step, int(row)]) for row in rows]

    def random(self, shape):
        return np.stack([g.random(shape[1:]) for g in self.generators])


@dataclasses.dataclass
class TrainResult:
    checkpoint: Checkpoint
    checkpoint_path: str
    metrics: list
    zeta_trace: ZetaTrace
    final_train_loss: float
    final_val_loss: float


class Trainer:
    """Trains one stage on a corpus and writes its run directory.

    The run directory holds the config snapshot, the final and last-good
    checkpoints, the metric CSV, the zeta CSVs (Stages III-IV) and the run
    database.
    """

    def __init__(self, run_config, corpus, init_checkpoint=None, session=None):
        self.run_config = run_config
        self.stage_config = run_config.stage_config()
        self.corpus = corpus
        self.run_dir = cfg.initialize_run_directory(run_config.output_dir)
        corpus.require_windows(self.stage_config.seq_len)
        init_rng, self.batch_rng, eval_rng = spawn_rngs(run_config.seed, 3)

        transferred = []
        if init_checkpoint is None:
            params = init_parameters(self.stage_config, init_rng)
            if run_config.freeze:
                params.freeze(run_config.freeze)
        else:
            result = transfer_and_freeze(init_checkpoint, self.stage_config, init_rng, run_config.freeze)
            params, transferred = result.params, result.transferred
        self.transferred = transferred
        self.model = QSFModel(self.stage_config, params)
        self.phase_frozen = params.frozen_names() if run_config.freeze is None else []
        self.unfreeze_step = int(run_config.freeze_fraction * run_config.max_steps)

        self.optimizer = AdamW(params, betas=(run_config.beta1, run_config.beta2), eps=run_config.adam_eps,
                               weight_decay=run_config.weight_decay, grad_clip=run_config.grad_clip)
        self.workers = 1 if run_config.strict_deterministic else cfg.worker_threads()
        n = self.stage_config.seq_len
        self.eval_sets = {
            split: [sample_windows(tokens, run_config.batch_size, n, eval_rng) for _ in range(run_config.eval_batches)]
            for split, tokens in (('train', corpus.train), ('val', corpus.validation))
        }
        self.session = session
        self.metrics = []
        self.zeta_trace = ZetaTrace()
        self.path = {name: os.path.join(self.run_dir, f) for name, f in (
            ('config', cfg.CONFIG_SNAPSHOT_FILE), ('checkpoint', cfg.CHECKPOINT_FILE),
            ('last_good', cfg.LAST_GOOD_CHECKPOINT_FILE), ('metrics', cfg.METRICS_FILE),
            ('zeta', cfg.ZETA_FILE), ('zeta_summary', cfg.ZETA_SUMMARY_FILE))}

    # --- gradients ---

    def _shard_grads(self, inputs, targets, step, rows, denominator):
        tape = Tape(self.model.params)
        rng = None
        if self.stage_config.dropout > 0:
            rng = RowStreams(self.run_config.seed, step, rows)
        loss = self.model.loss(tape, inputs, targets, rng=rng, denominator=denominator)
        return float(loss.value), backward(tape, loss)

    def compute_gradients(self, inputs, targets, step):
        """Mean cross-entropy and its gradients, summed over batch shards in fixed order."""
        denominator = targets.size
        shards = [idx for idx in np.array_split(np.arange(len(inputs)), min(self.workers, len(inputs))) if idx.size]
        if len(shards) == 1:
            parts = [self._shard_grads(inputs, targets, step, shards[0], denominator)]
        else:
            with concurrent.futures.ThreadPoolExecutor(max_workers=len(shards)) as pool:
                futures = [pool.submit(self._shard_grads, inputs[idx], targets[idx], step, idx, denominator)
                           for idx in shards]
                parts = [f.result() for f in futures]
        loss = sum(p[0] for p in parts)
        grads = dict(parts[0][1])
        for _, shard_grads in parts[1:]:
            for name, g in shard_grads.items():
                grads[name] = grads[name] + g
        return loss, grads

    # --- evaluation ---

    def evaluate(self, split):
        losses = [self.model.evaluate_loss(x, y) for x, y in self.eval_sets[split]]
        return float(np.mean(losses))

    def audit_unitarity(self, step):
        d = self.stage_config.d
        for layer in range(self.stage_config.n_layers):
            U = hamiltonian_unitary(self.model.params[f"layers.{layer}.hamiltonian"])
            err = float(np.linalg.norm(U.T @ U - np.eye(d)))
            if err > cfg.ORTHOGONALITY_TOL:
                raise NumericError(f"layer {layer} lost orthogonality at step {step}: ||U^T U - I||_F = {err:.3e}")

    def _record_eval(self, step, lr):
        train_loss, val_loss = self.evaluate('train'), self.evaluate('val')
        for split, loss in (('train', train_loss), ('val', val_loss)):
            self.metrics.append((step, split, loss, lr))
            if self.session is not None:
                database.log_metric(self.session, self.db_run, step, split, loss, lr)
        if self.stage_config.has_attention:
            zetas = self.model.zetas()
            self.zeta_trace.append(step, zetas)
            if self.session is not None:
                database.log_zeta(self.session, self.db_run, step, zetas)
        logger.info("Stage %d step %d: train %.4f, val %.4f, lr %.2e",
                    self.stage_config.stage, step, train_loss, val_loss, lr)
        return train_loss, val_loss

    # --- artifacts ---

    def checkpoint(self, step, train_loss, val_loss):
        metadata = {
            'step': step,
            'seed': self.run_config.seed,
            'train_loss': train_loss,
            'val_loss': val_loss,
            'parameter_count': self.model.parameter_count(),
            'transferred': list(self.transferred),
            'zeta_trace': self.zeta_trace.to_dict(),
        }
        return Checkpoint(self.stage_config, self.model.params.copy(), self.optimizer.state_dict(), metadata)

    def write_logs(self):
        with atomic_write(self.path['metrics'], newline='') as f:
            writer = csv.writer(f)
            writer.writerow(['step', 'split', 'loss', 'lr'])
            for step, split, loss, lr in self.metrics:
                writer.writerow([step, split, repr(float(loss)), repr(float(lr))])
        if self.stage_config.has_attention:
            export_zeta_csv(self.zeta_trace, self.path['zeta'], self.path['zeta_summary'])

    def _diverged(self, step, what):
        self.write_logs()
        if self.session is not None:
            database.finish_run(self.session, self.db_run, 'diverged')
        last_good = self.path['last_good'] if os.path.exists(self.path['last_good']) else None
        raise TrainingDivergedError(f"{what} became non-finite at step {step}", last_good=last_good, step=step)

    # --- loop ---

    def train(self):
        rc = self.run_config
        with atomic_write(self.path['config']) as f:
            json.dump(rc.to_dict(), f, indent=2, sort_keys=True)
        if self.session is not None:
            self.db_run = database.start_run(self.session, self.stage_config.stage, rc.seed)
        logger.info("Training Stage %d (%d parameters, %d worker thread(s)).",
                    self.stage_config.stage, self.model.parameter_count(), self.workers)

        train_loss, val_loss = self._record_eval(0, onecycle_lr(0, rc.lr_max, rc.lr_min, rc.warmup_steps, rc.max_steps))
        if not math.isfinite(val_loss):
            self._diverged(0, "validation loss")
        save_checkpoint(self.path['last_good'], self.checkpoint(0, train_loss, val_loss))

        for step in range(1, rc.max_steps + 1):
            if self.phase_frozen and step == self.unfreeze_step + 1:
                self.model.params.unfreeze(self.phase_frozen)
                logger.info("Step %d: unfroze %d transferred tensors for joint fine-tuning.",
                            step, len(self.phase_frozen))
            lr = onecycle_lr(step, rc.lr_max, rc.lr_min, rc.warmup_steps, rc.max_steps)
            inputs, targets = sample_windows(self.corpus.train, rc.batch_size, self.stage_config.seq_len,
                                             self.batch_rng)
            loss, grads = self.compute_gradients(inputs, targets, step)
            if not math.isfinite(loss):
                self._diverged(step, "training loss")
            try:
                self.optimizer.step(grads, lr)
            except NumericError as e:
                logger.error("%s", e)
                self._diverged(step, "gradient")
            if self.stage_config.unitary:
                self.audit_unitarity(step)
            if step % rc.eval_interval == 0 or step == rc.max_steps:
                train_loss, val_loss = self._record_eval(step, lr)
                if not math.isfinite(val_loss):
                    self._diverged(step, "validation loss")
                save_checkpoint(self.path['last_good'], self.checkpoint(step, train_loss, val_loss))

        final = self.checkpoint(rc.max_steps, train_loss, val_loss)
        save_checkpoint(self.path['checkpoint'], final)
        self.write_logs()
        if self.session is not None:
            database.finish_run(self.session, self.db_run, 'finished', val_loss)
        logger.info("Stage %d finished: val loss %.4f (perplexity %.2f).",
                    self.stage_config.stage, val_loss, math.exp(min(val_loss, 700.0)))
        return TrainResult(final, self.path['checkpoint'], list(self.metrics), self.zeta_trace,
                           train_loss, val_loss)


def check_stage_init(run_config, init_checkpoint):
    """Stage/init compatibility: a stage may start from itself or from its predecessors in the protocol."""
    if init_checkpoint is None:
        return
    src = init_checkpoint.config.stage
    if src != run_config.stage and src not in TRANSFER_SOURCES[run_config.stage]:
        raise ConfigError(f"Stage {run_config.stage} cannot be initialised from a Stage {src} checkpoint",
                          field='init_from')


def train_stage(run_config, corpus, init_checkpoint=None):
    """Validates the pairing, trains with a run database in the output directory and returns a TrainResult."""
    check_stage_init(run_config, init_checkpoint)
    session = database.create_session(os.path.join(run_config.output_dir, cfg.RUN_DATABASE_FILE))
    try:
        return Trainer(run_config, corpus, init_checkpoint, session=session).train()
    finally:
        database.close_session(session)


def generate(model, prompt_ids, max_tokens, temperature=0.0, seed=0):
    """Autoregressive continuation of ``prompt_ids``; greedy when temperature is 0.

    The context fed to the model is the last N tokens.
    """
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    N = model.config.seq_len
    if prompt_ids.ndim != 1 or prompt_ids.size == 0:
        raise DimensionError("prompt must be a non-empty 1-D token sequence")
    if prompt_ids.size > N:
        raise RangeError(f"prompt of {prompt_ids.size} tokens is longer than the context length N={N}")
    if temperature < 0 or max_tokens < 0:
        raise RangeError("temperature and max_tokens must be non-negative")
    rng = np.random.default_rng(seed)
    ids = list(prompt_ids)
    for _ in range(max_tokens):
        logits = model.model_forward(np.array(ids[-N:], dtype=np.int64))[-1]
        if temperature == 0:
            next_id = int(np.argmax(logits))
        else:
            probs = scipy.special.softmax(logits / temperature)
            next_id = int(rng.choice(len(probs), p=probs))
        ids.append(next_id)
    return np.array(ids, dtype=np.int64)

# /qsf/config.py

import dataclasses
import json
import os

from .errors import ConfigError

BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

# --- Output Paths ---
RUNS_DIR = os.path.join(BASE_DIR, 'outputs', 'runs')

# Files written inside one run directory
CONFIG_SNAPSHOT_FILE = 'config.json'
CHECKPOINT_FILE = 'checkpoint.qsfc'
LAST_GOOD_CHECKPOINT_FILE = 'last_good.qsfc'
METRICS_FILE = 'metrics.csv'
ZETA_FILE = 'zeta.csv'
ZETA_SUMMARY_FILE = 'zeta_summary.csv'
RUN_DATABASE_FILE = 'runs.db'

# --- Model Defaults (desk scale; the full-size model is d=320, L=32, V=50257) ---
DEFAULT_D = 64
DEFAULT_LAYERS = 4
DEFAULT_VOCAB = 256            # byte-level tokenizer
DEFAULT_SEQ_LEN = 128
DEFAULT_DROPOUT = 0.1
LAYERNORM_EPS = 1e-5
INIT_STD = 0.02
ZETA_INIT = 1.0

# --- Training Defaults ---
DEFAULT_BATCH_SIZE = 16
DEFAULT_MAX_STEPS = 2000
DEFAULT_WARMUP_STEPS = 100
LR_MAX = 1e-3
LR_MIN = 2e-5
ADAM_BETAS = (0.9, 0.95)
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.1
GRAD_CLIP = 1.0
EVAL_INTERVAL = 100
EVAL_BATCHES = 50
FREEZE_FRACTION = 0.25         # Stage II frozen-transfer phase
TRAIN_FRACTION = 0.9

# --- Numerical Settings ---
MAT_EXP_MAX_NORM = 50.0
EIGEN_RESIDUAL_TOL = 1e-8
ORTHOGONALITY_TOL = 1e-8
NEUTRAL_TOL = 0.02
INTRA_TOKEN_TIME = 1.0
CHAIN_TOL = 1e-10

# --- Command-line exit codes ---
EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4
EXIT_NUMERIC = 5

STAGES = (1, 2, 3, 4)
NORM_MODES = ('layernorm', 'linear-scale')
FFN_MODES = ('gelu-mlp', 'linear', 'none')


def worker_threads():
    """Worker thread cap taken from the QSF_THREADS environment variable."""
    raw = os.environ.get('QSF_THREADS', '').strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"QSF_THREADS must be an integer, got {raw!r}", field='QSF_THREADS')
    if value < 1:
        raise ConfigError("QSF_THREADS must be at least 1", field='QSF_THREADS')
    return value


def initialize_run_directory(path):
    """Creates the run directory (and parents) if needed and returns it."""
    os.makedirs(path, exist_ok=True)
    return path


@dataclasses.dataclass
class RunConfig:
    """Everything one training or analysis run needs, loaded from flat JSON."""

    # model
    stage: int = 3
    d: int = DEFAULT_D
    n_layers: int = DEFAULT_LAYERS
    d_ff: int | None = None
    vocab_size: int = DEFAULT_VOCAB
    seq_len: int = DEFAULT_SEQ_LEN
    norm_mode: str = 'layernorm'
    ffn_mode: str = 'gelu-mlp'
    dropout: float = DEFAULT_DROPOUT
    n_heads: int = 1
    attention_mlp: bool = False
    zeta_init: float = ZETA_INIT
    init_std: float = INIT_STD

    # optimisation
    batch_size: int = DEFAULT_BATCH_SIZE
    max_steps: int = DEFAULT_MAX_STEPS
    warmup_steps: int = DEFAULT_WARMUP_STEPS
    lr_max: float = LR_MAX
    lr_min: float = LR_MIN
    beta1: float = ADAM_BETAS[0]
    beta2: float = ADAM_BETAS[1]
    adam_eps: float = ADAM_EPS
    weight_decay: float = WEIGHT_DECAY
    grad_clip: float = GRAD_CLIP
    eval_interval: int = EVAL_INTERVAL
    eval_batches: int = EVAL_BATCHES
    freeze_fraction: float = FREEZE_FRACTION
    freeze: list | None = None
    train_fraction: float = TRAIN_FRACTION

    # run
    corpus_path: str | None = None
    init_from: str | None = None
    seed: int = 0
    output_dir: str = RUNS_DIR
    strict_deterministic: bool = False
    neutral_tol: float = NEUTRAL_TOL

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}", field=unknown[0])
        config = cls(**data)
        config.validate()
        return config

    @classmethod
    def from_json(cls, path):
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}", field='config')
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}", field='config')
        return cls.from_dict(data)

    def with_overrides(self, **overrides):
        """Returns a validated copy with every non-None override applied."""
        values = {k: v for k, v in overrides.items() if v is not None}
        merged = {**self.to_dict(), **values}
        return type(self).from_dict(merged)

    def to_dict(self):
        return dataclasses.asdict(self)

    def validate(self, require_corpus=False):
        _check(self.stage in STAGES, 'stage', f"stage must be one of {STAGES}, got {self.stage!r}")
        for name in ('d', 'n_layers', 'vocab_size', 'seq_len', 'batch_size', 'max_steps',
                     'eval_interval', 'eval_batches'):
            value = getattr(self, name)
            _check(isinstance(value, int) and value > 0, name, f"{name} must be a positive integer, got {value!r}")
        if self.d_ff is not None:
            _check(isinstance(self.d_ff, int) and self.d_ff > 0, 'd_ff', "d_ff must be a positive integer")
        _check(self.norm_mode in NORM_MODES, 'norm_mode', f"norm_mode must be one of {NORM_MODES}")
        _check(self.ffn_mode in FFN_MODES, 'ffn_mode', f"ffn_mode must be one of {FFN_MODES}")
        _check(0.0 <= self.dropout < 1.0, 'dropout', "dropout must lie in [0, 1)")
        _check(self.n_heads == 1, 'n_heads', "only single-head linear attention is implemented (n_heads=1)")
        _check(self.init_std > 0, 'init_std', "init_std must be positive")
        _check(isinstance(self.warmup_steps, int) and 0 <= self.warmup_steps <= self.max_steps,
               'warmup_steps', "warmup_steps must lie in [0, max_steps]")
        _check(0 < self.lr_min <= self.lr_max, 'lr_min', "learning rates must satisfy 0 < lr_min <= lr_max")
        _check(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, 'beta1', "Adam betas must lie in [0, 1)")
        _check(self.adam_eps > 0, 'adam_eps', "adam_eps must be positive")
        _check(self.weight_decay >= 0, 'weight_decay', "weight_decay must be non-negative")
        _check(self.grad_clip > 0, 'grad_clip', "grad_clip must be positive")
        _check(0.0 <= self.freeze_fraction <= 1.0, 'freeze_fraction', "freeze_fraction must lie in [0, 1]")
        _check(0.0 < self.train_fraction < 1.0, 'train_fraction', "train_fraction must lie in (0, 1)")
        _check(self.neutral_tol > 0, 'neutral_tol', "neutral_tol must be positive")
        _check(isinstance(self.seed, int) and self.seed >= 0, 'seed', "seed must be a non-negative integer")
        if self.freeze is not None:
            _check(isinstance(self.freeze, list) and all(isinstance(p, str) for p in self.freeze),
                   'freeze', "freeze must be a list of parameter-name patterns")
        if require_corpus:
            _check(bool(self.corpus_path), 'corpus_path', "corpus_path is required for training")

    def stage_config(self):
        from .ml_models.qsf_model import StageConfig
        return StageConfig(
            stage=self.stage, d=self.d, n_layers=self.n_layers,
            d_ff=self.d_ff if self.d_ff is not None else 4 * self.d,
            vocab_size=self.vocab_size, seq_len=self.seq_len,
            norm_mode=self.norm_mode, ffn_mode=self.ffn_mode, dropout=self.dropout,
            n_heads=self.n_heads, attention_mlp=self.attention_mlp,
            zeta_init=self.zeta_init, init_std=self.init_std,
        )


def _check(condition, field, message):
    if not condition:
        raise ConfigError(message, field=field)

# /qsf/ml_models/qsf_model.py

import dataclasses
import logging

import numpy as np

from ..autodiff import ParamStore, Tape
from ..config import FFN_MODES, INIT_STD, LAYERNORM_EPS, NORM_MODES, STAGES, ZETA_INIT
from ..errors import ConfigError, DimensionError, RangeError
from .layers import LAYER_FUNCTIONS, hamiltonian_unitary, norm
from .propagator import AffineStep

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class StageConfig:
    """Architecture of one QSF stage."""
    stage: int
    d: int
    n_layers: int
    d_ff: int
    vocab_size: int
    seq_len: int
    norm_mode: str = 'layernorm'
    ffn_mode: str = 'gelu-mlp'
    dropout: float = 0.0
    n_heads: int = 1
    attention_mlp: bool = False
    zeta_init: float = ZETA_INIT
    init_std: float = INIT_STD
    norm_eps: float = LAYERNORM_EPS

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}", field='stage')
        for name in ('d', 'n_layers', 'd_ff', 'vocab_size', 'seq_len'):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive", field=name)
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"norm_mode must be one of {NORM_MODES}", field='norm_mode')
        if self.ffn_mode not in FFN_MODES:
            raise ConfigError(f"ffn_mode must be one of {FFN_MODES}", field='ffn_mode')
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)", field='dropout')
        if self.n_heads != 1:
            raise ConfigError("only single-head linear attention is implemented", field='n_heads')

    @property
    def unitary(self):
        return self.stage == 4

    @property
    def has_attention(self):
        return self.stage >= 3

    @property
    def has_layer_mlp(self):
        if self.ffn_mode == 'none':
            return False
        return self.stage <= 2 or self.attention_mlp

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def parameter_shapes(config):
    """Name -> shape of every trainable tensor of a stage, in creation order."""
    d, V = config.d, config.vocab_size
    shapes = {'tok_emb': (V, d), 'pos_emb': (config.seq_len, d)}
    for layer in range(config.n_layers):
        prefix = f"layers.{layer}"
        shapes[f"{prefix}.norm.gain"] = (d,)
        shapes[f"{prefix}.norm.bias"] = (d,)
        if config.stage in (2, 3):
            shapes[f"{prefix}.koopman"] = (d, d)
        elif config.stage == 4:
            shapes[f"{prefix}.hamiltonian"] = (d, d)
        if config.has_attention:
            for name in ('wq', 'wk', 'wv'):
                shapes[f"{prefix}.attn.{name}"] = (d, d)
            shapes[f"{prefix}.attn.c"] = (d,)
            shapes[f"{prefix}.attn.zeta"] = ()
        if config.has_layer_mlp:
            shapes[f"{prefix}.mlp.w1"] = (config.d_ff, d)
            shapes[f"{prefix}.mlp.b1"] = (config.d_ff,)
            shapes[f"{prefix}.mlp.w2"] = (d, config.d_ff)
            shapes[f"{prefix}.mlp.b2"] = (d,)
    shapes['final_norm.gain'] = (d,)
    shapes['final_norm.bias'] = (d,)
    shapes['out_proj'] = (V, d)
    return shapes


def initial_value(name, shape, config, rng):
    """Gains 1, biases and c 0, zeta zeta_init, every matrix N(0, init_std^2)."""
    if name.endswith('.gain'):
        return np.ones(shape)
    if name.endswith(('.bias', '.b1', '.b2', '.attn.c')):
        return np.zeros(shape)
    if name.endswith('.zeta'):
        return np.full(shape, config.zeta_init)
    return rng.normal(0.0, config.init_std, size=shape)


def init_parameters(config, rng):
    params = ParamStore()
    for name, shape in parameter_shapes(config).items():
        params.create(name, initial_value(name, shape, config, rng))
    return params


class QSFModel:
    """A stage architecture bound to its parameters."""

    def __init__(self, config, params=None, rng=None):
        self.config = config
        if params is None:
            params = init_parameters(config, rng if rng is not None else np.random.default_rng(0))
        expected = parameter_shapes(config)
        missing = sorted(set(expected) - set(params.names()))
        if missing:
            raise DimensionError(f"parameter store lacks {', '.join(missing)}")
        for name, shape in expected.items():
            if params[name].shape != tuple(shape):
                raise DimensionError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")
        self.params = params

    # --- forward pass ---

    def check_tokens(self, tokens):
        tokens = np.asarray(tokens)
        if tokens.ndim not in (1, 2) or not np.issubdtype(tokens.dtype, np.integer):
            raise DimensionError(f"tokens must be a 1-D or 2-D integer array, got {tokens.dtype} {tokens.shape}")
        if tokens.shape[-1] > self.config.seq_len:
            raise DimensionError(f"sequence of length {tokens.shape[-1]} exceeds N={self.config.seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise RangeError(f"token ids must lie in [0, {self.config.vocab_size})")
        return tokens

    def embed(self, tape, tokens):
        positions = np.broadcast_to(np.arange(tokens.shape[-1]), tokens.shape)
        tok = tape.apply('embedding', tape.param('tok_emb'), ids=tokens)
        pos = tape.apply('embedding', tape.param('pos_emb'), ids=positions)
        return tape.apply('add', tok, pos)

    def layer(self, tape, x, index, rng=None):
        return LAYER_FUNCTIONS[self.config.stage](tape, x, f"layers.{index}", self.config, rng=rng)

    def head(self, tape, x):
        return tape.apply('matmul', norm(tape, x, 'final_norm', self.config), tape.param('out_proj'))

    def forward(self, tape, tokens, rng=None):
        """Logits Var of shape tokens.shape + (V,). ``rng`` enables dropout (training)."""
        tokens = self.check_tokens(tokens)
        x = self.embed(tape, tokens)
        for index in range(self.config.n_layers):
            x = self.layer(tape, x, index, rng=rng)
        return self.head(tape, x)

    def loss(self, tape, inputs, targets, rng=None, denominator=None):
        logits = self.forward(tape, inputs, rng=rng)
        return tape.apply('cross_entropy', logits, targets=np.asarray(targets), denominator=denominator)

    def model_forward(self, tokens):
        """Logits (T, V) for one token sequence, no dropout."""
        tokens = self.check_tokens(tokens)
        return self.forward(Tape(self.params, record=False), tokens).value

    def hidden_states(self, tokens):
        """Inputs of every layer plus the last layer's output: L + 1 arrays."""
        tokens = self.check_tokens(tokens)
        tape = Tape(self.params, record=False)
        x = self.embed(tape, tokens)
        states = [x.value]
        for index in range(self.config.n_layers):
            x = self.layer(tape, x, index)
            states.append(x.value)
        return states

    def evaluate_loss(self, inputs, targets):
        tape = Tape(self.params, record=False)
        return float(self.loss(tape, inputs, targets).value)

    # --- structure ---

    def koopman_operators(self):
        """Per-layer Koopman matrices K^(l) (Stages II-III) or unitary U^(l) (Stage IV)."""
        if self.config.stage == 1:
            return []
        if self.config.unitary:
            return [hamiltonian_unitary(self.params[f"layers.{i}.hamiltonian"]) for i in range(self.config.n_layers)]
        return [self.params[f"layers.{i}.koopman"].copy() for i in range(self.config.n_layers)]

    def zetas(self):
        if not self.config.has_attention:
            return []
        return [float(self.params[f"layers.{i}.attn.zeta"]) for i in range(self.config.n_layers)]

    def parameter_count(self):
        return self.params.num_values()

    # --- frozen-context affine structure ---

    def _require_linear(self):
        c = self.config
        if c.stage == 1:
            raise ConfigError("layer affine maps are defined for stages II-IV", field='stage')
        if c.norm_mode != 'linear-scale':
            raise ConfigError("layer affine maps need norm_mode 'linear-scale'", field='norm_mode')
        if c.has_layer_mlp and c.ffn_mode != 'linear':
            raise ConfigError("layer affine maps need ffn_mode 'linear' or 'none'", field='ffn_mode')

    def layer_affine_maps(self, tokens, position):
        """Per-layer maps psi -> U psi + b at ``position`` with the attention state frozen.

        The attention state S_t = sum_{s<=t} phi(k_s) v_s^T is read from the forward
        pass over ``tokens[:position + 1]``; with it fixed each layer is affine in its
        input, so chaining the maps from the layer-0 state at ``position`` reproduces
        the forward pass there.
        """
        self._require_linear()
        tokens = self.check_tokens(tokens)
        if tokens.ndim != 1 or not 0 <= position < tokens.shape[0]:
            raise RangeError(f"position {position} out of range for a sequence of length {tokens.shape[-1]}")
        states = self.hidden_states(tokens[:position + 1])
        d = self.config.d
        operators = self.koopman_operators()
        maps = []
        for layer in range(self.config.n_layers):
            prefix = f"layers.{layer}"
            gain, nbias = self.params[f"{prefix}.norm.gain"], self.params[f"{prefix}.norm.bias"]
            K = operators[layer]
            U = np.eye(d) + K * gain[np.newaxis, :]
            b = K @ nbias
            if self.config.has_attention:
                x = states[layer]
                c = self.params[f"{prefix}.attn.c"]
                features = x @ self.params[f"{prefix}.attn.wk"].T + c
                values = x @ self.params[f"{prefix}.attn.wv"].T
                S = features.T @ values
                zeta = float(self.params[f"{prefix}.attn.zeta"])
                U = U + zeta * S.T @ self.params[f"{prefix}.attn.wq"]
                b = b + zeta * S.T @ c
            if self.config.has_layer_mlp:
                w1, b1 = self.params[f"{prefix}.mlp.w1"], self.params[f"{prefix}.mlp.b1"]
                w2, b2 = self.params[f"{prefix}.mlp.w2"], self.params[f"{prefix}.mlp.b2"]
                U = U + (w2 @ w1) * gain[np.newaxis, :]
                b = b + w2 @ (w1 @ nbias + b1) + b2
            maps.append(AffineStep(U, b))
        return maps

    def readout(self, psi):
        """Logits for final-layer hidden state(s) ``psi`` (final norm + projection)."""
        tape = Tape(self.params, record=False)
        return self.head(tape, tape.constant(np.asarray(psi, dtype=np.float64))).value

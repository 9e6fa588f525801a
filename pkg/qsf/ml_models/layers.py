# /qsf/ml_models/layers.py

"""Layer equations of the four stages, written against the autodiff tape.

Every function takes the tape, the layer input ``x`` (a Var of shape
(B, N, d) or (N, d)), the parameter-name prefix of its layer and the
StageConfig. Dropout is only ever applied to the MLP path of Stages I and II.
"""

import numpy as np

from ..autodiff import skew_exp


def norm(tape, x, prefix, config):
    gain, bias = tape.param(f"{prefix}.gain"), tape.param(f"{prefix}.bias")
    if config.norm_mode == 'layernorm':
        return tape.apply('layernorm', x, gain, bias, eps=config.norm_eps)
    return tape.apply('linear_scale', x, gain, bias)


def mlp(tape, h, prefix, config):
    """W2 phi(W1 h + b1) + b2, with phi = GELU or the identity (ffn_mode 'linear')."""
    hidden = tape.apply('add', tape.apply('matmul', h, tape.param(f"{prefix}.w1")), tape.param(f"{prefix}.b1"))
    if config.ffn_mode == 'gelu-mlp':
        hidden = tape.apply('gelu', hidden)
    return tape.apply('add', tape.apply('matmul', hidden, tape.param(f"{prefix}.w2")), tape.param(f"{prefix}.b2"))


def _dropout(tape, x, config, rng):
    if rng is None or config.dropout <= 0.0:
        return x
    keep = 1.0 - config.dropout
    mask = (rng.random(x.shape) < keep) / keep
    return tape.apply('dropout', x, mask=mask)


def fnetar_layer(tape, x, prefix, config, rng=None):
    """Stage I: x + Re(causal DFT(norm(x))) + MLP(x)."""
    mixed = tape.apply('causal_dft', norm(tape, x, f"{prefix}.norm", config))
    out = tape.apply('add', x, mixed)
    if config.ffn_mode != 'none':
        out = tape.apply('add', out, _dropout(tape, mlp(tape, x, f"{prefix}.mlp", config), config, rng))
    return out


def koopman_layer(tape, x, prefix, config, rng=None):
    """Stage II: h = norm(x), k = K h, x + k + MLP(h)."""
    h = norm(tape, x, f"{prefix}.norm", config)
    out = tape.apply('add', x, tape.apply('matmul', h, tape.param(f"{prefix}.koopman")))
    if config.ffn_mode != 'none':
        out = tape.apply('add', out, _dropout(tape, mlp(tape, h, f"{prefix}.mlp", config), config, rng))
    return out


def linear_attention(tape, x, prefix):
    """phi(q_t)^T sum_{s<=t} phi(k_s) v_s^T with q, k, v = W_Q x, W_K x, W_V x and phi(x) = x + c."""
    q = tape.apply('matmul', x, tape.param(f"{prefix}.wq"))
    k = tape.apply('matmul', x, tape.param(f"{prefix}.wk"))
    v = tape.apply('matmul', x, tape.param(f"{prefix}.wv"))
    return tape.apply('linear_attention', q, k, v, tape.param(f"{prefix}.c"))


def koopman_operator(tape, prefix, config):
    """K^(l) for Stages II-III, the unitary exp(W - W^T) for Stage IV."""
    if config.stage == 4:
        return tape.apply('skew_expm', tape.param(f"{prefix}.hamiltonian"))
    return tape.param(f"{prefix}.koopman")


def hybrid_layer(tape, x, prefix, config, rng=None):
    """Stages III-IV: x + K(norm(x)) + zeta * LinearAttention(x) [+ MLP(norm(x))]."""
    h = norm(tape, x, f"{prefix}.norm", config)
    out = tape.apply('add', x, tape.apply('matmul', h, koopman_operator(tape, prefix, config)))
    attended = linear_attention(tape, x, f"{prefix}.attn")
    out = tape.apply('add', out, tape.apply('scale', attended, tape.param(f"{prefix}.attn.zeta")))
    if config.attention_mlp and config.ffn_mode != 'none':
        out = tape.apply('add', out, mlp(tape, h, f"{prefix}.mlp", config))
    return out


def hamiltonian_unitary(W):
    """U = exp(-iH) with H = i(W - W^T); algebraically exp(W - W^T), real orthogonal."""
    return skew_exp(np.asarray(W, dtype=np.float64))


LAYER_FUNCTIONS = {1: fnetar_layer, 2: koopman_layer, 3: hybrid_layer, 4: hybrid_layer}

# /tests/test_model.py

import dataclasses

import numpy as np
import pytest

from qsf.autodiff import Tape
from qsf.errors import ConfigError, DimensionError, RangeError
from qsf.ml_models.layers import fnetar_layer, hamiltonian_unitary, hybrid_layer, koopman_layer, mlp, norm
from qsf.ml_models.propagator import chain_propagators
from qsf.ml_models.qsf_model import QSFModel, StageConfig, init_parameters, parameter_shapes


def make_model(stage, seed=0, **overrides):
    values = dict(stage=stage, d=6, n_layers=2, d_ff=12, vocab_size=11, seq_len=9, init_std=0.2)
    values.update(overrides)
    return QSFModel(StageConfig(**values), rng=np.random.default_rng(seed))


@pytest.mark.parametrize("stage", [1, 2, 3, 4])
def test_forward_shapes(stage):
    model = make_model(stage)
    tokens = np.arange(7) % 11
    assert model.model_forward(tokens).shape == (7, 11)
    assert len(model.hidden_states(tokens)) == 3


@pytest.mark.parametrize("stage", [1, 2, 3, 4])
def test_causality(stage, rng):
    model = make_model(stage)
    for _ in range(50):
        tokens = rng.integers(0, 11, size=9)
        t = int(rng.integers(0, 9))
        mutated = tokens.copy()
        mutated[t:] = rng.integers(0, 11, size=9 - t)
        a, b = model.model_forward(tokens), model.model_forward(mutated)
        assert np.array_equal(a[:t], b[:t])


def test_token_validation():
    model = make_model(2)
    with pytest.raises(DimensionError):
        model.model_forward(np.zeros(10, dtype=np.int64))
    with pytest.raises(RangeError):
        model.model_forward(np.array([0, 11]))
    with pytest.raises(DimensionError):
        model.model_forward(np.array([0.0, 1.0]))


def test_stage_four_operators_are_orthogonal_at_init():
    model = make_model(4)
    for U in model.koopman_operators():
        assert np.linalg.norm(U.T @ U - np.eye(6)) < 1e-8
        assert np.max(np.abs(np.abs(np.linalg.eigvals(U)) - 1.0)) < 1e-6


def test_parameter_layout_per_stage():
    shapes = {stage: parameter_shapes(make_model(stage).config) for stage in (1, 2, 3, 4)}
    assert 'layers.0.koopman' not in shapes[1]
    assert 'layers.0.koopman' in shapes[2] and 'layers.0.mlp.w1' in shapes[2]
    assert 'layers.0.attn.zeta' in shapes[3] and 'layers.0.mlp.w1' not in shapes[3]
    assert 'layers.1.hamiltonian' in shapes[4] and 'layers.1.koopman' not in shapes[4]
    assert shapes[3]['layers.0.attn.zeta'] == ()


def test_parameter_count_sums_tensor_sizes():
    model = make_model(3)
    expected = sum(int(np.prod(s)) for s in parameter_shapes(model.config).values())
    assert model.parameter_count() == expected


def test_zeta_initialised_to_config_value():
    assert make_model(3, zeta_init=0.25).zetas() == [0.25, 0.25]
    assert make_model(2).zetas() == []


@pytest.mark.parametrize("stage,overrides", [
    (2, dict(ffn_mode='linear')),
    (3, dict(ffn_mode='linear', attention_mlp=True)),
    (3, dict(ffn_mode='none')),
    (4, dict(ffn_mode='linear', attention_mlp=True)),
])
def test_layer_affine_maps_reproduce_forward_pass(stage, overrides, rng):
    model = make_model(stage, norm_mode='linear-scale', **overrides)
    tokens = rng.integers(0, 11, size=8)
    states = model.hidden_states(tokens)
    for position in (0, 3, 7):
        maps = model.layer_affine_maps(tokens, position)
        psi = chain_propagators(maps, states[0][position])
        np.testing.assert_allclose(psi, states[-1][position], rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(model.readout(psi), model.model_forward(tokens)[position], rtol=1e-10, atol=1e-10)


def test_layer_affine_maps_need_linear_configuration():
    with pytest.raises(ConfigError):
        make_model(3).layer_affine_maps(np.arange(4), 2)
    with pytest.raises(ConfigError):
        make_model(1, norm_mode='linear-scale', ffn_mode='linear').layer_affine_maps(np.arange(4), 2)


def test_stage_config_validation():
    with pytest.raises(ConfigError):
        StageConfig(stage=5, d=4, n_layers=1, d_ff=4, vocab_size=4, seq_len=4)
    with pytest.raises(ConfigError):
        StageConfig(stage=3, d=4, n_layers=1, d_ff=4, vocab_size=4, seq_len=4, n_heads=8)


# --- single layers ---

def layer_params(stage, seed=0, **overrides):
    values = dict(stage=stage, d=6, n_layers=1, d_ff=12, vocab_size=11, seq_len=9, init_std=0.2)
    values.update(overrides)
    config = StageConfig(**values)
    return config, init_parameters(config, np.random.default_rng(seed))


def run_layer(layer_fn, config, params, x):
    tape = Tape(params, record=False)
    return layer_fn(tape, tape.constant(x), 'layers.0', config).value


def test_hybrid_with_zero_zeta_is_the_koopman_path(rng):
    config, params = layer_params(3)
    params.set_value('layers.0.attn.zeta', 0.0)
    x = rng.normal(size=(7, 6))
    hybrid = run_layer(hybrid_layer, config, params, x)
    koopman_only = run_layer(koopman_layer, dataclasses.replace(config, stage=2, ffn_mode='none'), params, x)
    np.testing.assert_array_equal(hybrid, koopman_only)


def test_koopman_layer_with_zero_operator_and_mlp_is_the_identity(rng):
    config, params = layer_params(2)
    params.set_value('layers.0.koopman', np.zeros((6, 6)))
    params.set_value('layers.0.mlp.w2', np.zeros((6, 12)))
    params.set_value('layers.0.mlp.b2', np.zeros(6))
    x = rng.normal(size=(5, 6))
    np.testing.assert_array_equal(run_layer(koopman_layer, config, params, x), x)


def test_koopman_layer_with_identity_operator_doubles(rng):
    config, params = layer_params(2, norm_mode='linear-scale', ffn_mode='none')
    params.set_value('layers.0.koopman', np.eye(6))
    x = rng.normal(size=(5, 6))
    np.testing.assert_array_equal(run_layer(koopman_layer, config, params, x), 2.0 * x)


def test_koopman_layer_is_position_equivariant(rng):
    config, params = layer_params(2)
    x = rng.normal(size=(8, 6))
    perm = rng.permutation(8)
    out = run_layer(koopman_layer, config, params, x)
    np.testing.assert_allclose(run_layer(koopman_layer, config, params, x[perm]), out[perm], rtol=1e-13, atol=1e-14)


def test_fnetar_single_token(rng):
    config, params = layer_params(1)
    x = rng.normal(size=(1, 6))
    tape = Tape(params, record=False)
    xv = tape.constant(x)
    expected = x + norm(tape, xv, 'layers.0.norm', config).value + mlp(tape, xv, 'layers.0.mlp', config).value
    np.testing.assert_allclose(run_layer(fnetar_layer, config, params, x), expected, rtol=1e-13, atol=1e-14)
    model = make_model(1)
    logits = model.model_forward(np.array([3]))
    assert logits.shape == (1, 11) and np.all(np.isfinite(logits))


def test_hamiltonian_unitary_is_a_rotation():
    theta = 0.6
    W = np.array([[0.0, -theta / 2], [theta / 2, 0.0]])
    expected = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    np.testing.assert_allclose(hamiltonian_unitary(W), expected, atol=1e-14)


def test_hamiltonian_unitary_of_symmetric_matrix_is_identity(rng):
    S = rng.normal(size=(4, 4))
    np.testing.assert_allclose(hamiltonian_unitary(S + S.T), np.eye(4), atol=1e-14)


def test_stages_three_and_four_have_equal_parameter_counts():
    assert make_model(3).parameter_count() == make_model(4).parameter_count()

# /qsf/autodiff.py

"""Minimal reverse-mode differentiation over the fixed op set the QSF stages use.

A ``Tape`` records each op applied to ``Var`` values; ``backward`` walks the
records in reverse and returns gradients for the non-frozen parameters of the
``ParamStore`` the tape reads from. There is no general broadcasting: each op
accepts exactly the shapes the model needs.
"""

import dataclasses
import fnmatch
import logging

import numpy as np
import scipy.special

from .config import LAYERNORM_EPS
from .errors import DimensionError, QSFError, UnknownOpError
from .linalg import dft_causal_matrix, mat_exp

logger = logging.getLogger(__name__)


# --- Parameters ---

@dataclasses.dataclass
class Parameter:
    name: str
    data: np.ndarray
    frozen: bool = False

    @property
    def shape(self):
        return self.data.shape


class ParamStore:
    """Named, shaped, freezable float64 tensors."""

    def __init__(self):
        self._entries = {}

    def create(self, name, data, frozen=False):
        if name in self._entries:
            raise QSFError(f"parameter {name!r} already exists")
        array = np.array(data, dtype=np.float64)
        self._entries[name] = Parameter(name, array, frozen)
        return array

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name):
        return self._entries[name].data

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return [(name, p.data) for name, p in self._entries.items()]

    def parameter(self, name):
        return self._entries[name]

    def set_value(self, name, value):
        """Replaces a parameter's values in place; shapes are immutable."""
        entry = self._entries[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != entry.data.shape:
            raise DimensionError(f"parameter {name!r} has shape {entry.data.shape}, got {value.shape}")
        entry.data[...] = value

    def is_frozen(self, name):
        return self._entries[name].frozen

    def frozen_names(self):
        return [name for name, p in self._entries.items() if p.frozen]

    def match(self, patterns):
        """Names matching any of the glob ``patterns``."""
        return [name for name in self._entries if any(fnmatch.fnmatchcase(name, pat) for pat in patterns)]

    def freeze(self, patterns):
        names = self.match(patterns)
        for name in names:
            self._entries[name].frozen = True
        return names

    def unfreeze(self, patterns=("*",)):
        names = self.match(patterns)
        for name in names:
            self._entries[name].frozen = False
        return names

    def copy(self):
        clone = ParamStore()
        for name, p in self._entries.items():
            clone.create(name, p.data.copy(), p.frozen)
        return clone

    def num_values(self):
        return int(sum(p.data.size for p in self._entries.values()))


# --- Tape ---

@dataclasses.dataclass(eq=False)
class Var:
    id: int
    value: np.ndarray
    param: str | None = None

    @property
    def shape(self):
        return self.value.shape


@dataclasses.dataclass
class OpRecord:
    kind: str
    input_ids: tuple
    output_id: int
    saved: object


OPS = {}


def register_op(kind):
    def decorator(cls):
        cls.kind = kind
        OPS[kind] = cls()
        return cls
    return decorator


class Tape:
    """Single-threaded op record. Distinct tapes may share a read-only ParamStore."""

    def __init__(self, params=None, record=True):
        self.params = params
        self.record = record
        self.records = []
        self._next_id = 0
        self._param_vars = {}

    def _new_var(self, value, param=None):
        var = Var(self._next_id, value, param)
        self._next_id += 1
        return var

    def param(self, name):
        if self.params is None:
            raise QSFError("tape has no parameter store")
        if name not in self._param_vars:
            self._param_vars[name] = self._new_var(self.params[name], param=name)
        return self._param_vars[name]

    def constant(self, value):
        return self._new_var(np.asarray(value, dtype=np.float64))

    def apply(self, kind, *inputs, **attrs):
        try:
            op = OPS[kind]
        except KeyError:
            raise UnknownOpError(f"unknown op kind {kind!r}; registered: {', '.join(sorted(OPS))}")
        values = [v.value for v in inputs]
        out, saved = op.forward(*values, **attrs)
        var = self._new_var(out)
        if self.record:
            self.records.append(OpRecord(kind, tuple(v.id for v in inputs), var.id, saved))
        return var

    def backward(self, loss):
        return backward(self, loss)


def forward_op(tape, kind, *inputs, **attrs):
    return tape.apply(kind, *inputs, **attrs)


def backward(tape, loss):
    """Gradients of scalar ``loss`` for every non-frozen parameter read on ``tape``."""
    if loss.value.size != 1:
        raise DimensionError(f"loss must be a scalar, got shape {loss.value.shape}")
    grads = {loss.id: np.ones_like(loss.value)}
    for record in reversed(tape.records):
        upstream = grads.pop(record.output_id, None)
        if upstream is None:
            continue
        input_grads = OPS[record.kind].backward(record.saved, upstream)
        for input_id, g in zip(record.input_ids, input_grads):
            if g is None:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + g
            else:
                grads[input_id] = g
    result = {}
    for name, var in tape._param_vars.items():
        if tape.params.is_frozen(name):
            continue
        g = grads.get(var.id)
        result[name] = np.zeros_like(var.value) if g is None else np.asarray(g, dtype=np.float64)
    return result


# --- Op set ---

class Op:
    kind = None
    # inputs excluded from finite-difference checks (e.g. fixed masks)
    nondiff_inputs = ()

    def forward(self, *values, **attrs):
        raise NotImplementedError

    def backward(self, saved, grad):
        raise NotImplementedError

    def sample(self, rng):
        """Random (inputs, attrs) for grad_check."""
        raise NotImplementedError


def _sum_to(grad, shape):
    """Sums leading axes of ``grad`` so it matches the trailing ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _check_trailing(a, b, kind):
    if b.shape != a.shape and (b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape):
        raise DimensionError(f"{kind}: shape {b.shape} does not match trailing shape of {a.shape}")


@register_op("matmul")
class MatMul(Op):
    """Position-wise linear map: (..., n) x W(m, n) -> (..., m), i.e. y = W x."""

    def forward(self, x, w):
        if w.ndim != 2 or x.shape[-1] != w.shape[1]:
            raise DimensionError(f"matmul: input {x.shape} incompatible with weight {w.shape}")
        return x @ w.T, (x, w)

    def backward(self, saved, grad):
        x, w = saved
        m, n = w.shape
        dx = grad @ w
        dw = grad.reshape(-1, m).T @ x.reshape(-1, n)
        return dx, dw

    def sample(self, rng):
        return [rng.normal(size=(2, 3, 4)), rng.normal(size=(5, 4))], {}


@register_op("add")
class Add(Op):
    """a + b, where b has a's shape or a's trailing shape (a bias)."""

    def forward(self, a, b):
        _check_trailing(a, b, "add")
        return a + b, b.shape

    def backward(self, saved, grad):
        return grad, _sum_to(grad, saved)

    def sample(self, rng):
        return [rng.normal(size=(2, 3, 4)), rng.normal(size=(4,))], {}


@register_op("scale")
class Scale(Op):
    """a * s for a scalar parameter s."""

    def forward(self, a, s):
        if s.size != 1:
            raise DimensionError(f"scale: factor must be a scalar, got shape {s.shape}")
        return a * s.reshape(()), (a, s)

    def backward(self, saved, grad):
        a, s = saved
        return grad * s.reshape(()), np.asarray(np.sum(grad * a)).reshape(s.shape)

    def sample(self, rng):
        return [rng.normal(size=(2, 3, 4)), np.asarray(rng.normal())], {}


@register_op("sum")
class Sum(Op):
    """Scalar sum, optionally weighted elementwise by a constant of the same shape."""

    def forward(self, a, weights=None):
        if weights is None:
            return np.asarray(np.sum(a)), (a.shape, None)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != a.shape:
            raise DimensionError(f"sum: weights {weights.shape} must match input {a.shape}")
        return np.asarray(np.sum(a * weights)), (a.shape, weights)

    def backward(self, saved, grad):
        shape, weights = saved
        g = np.broadcast_to(grad, shape)
        return (g * weights if weights is not None else np.array(g),)

    def sample(self, rng):
        return [rng.normal(size=(3, 4))], {"weights": rng.normal(size=(3, 4))}


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@register_op("gelu")
class Gelu(Op):
    """x/2 [1 + erf(x / sqrt 2)]."""

    def forward(self, x):
        cdf = 0.5 * (1.0 + scipy.special.erf(x * _SQRT_HALF))
        return x * cdf, (x, cdf)

    def backward(self, saved, grad):
        x, cdf = saved
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (grad * (cdf + x * pdf),)

    def sample(self, rng):
        return [rng.normal(size=(3, 5)) * 2.0], {}


@register_op("layernorm")
class LayerNorm(Op):
    """Standardize the last axis, then gain * x_hat + bias."""

    def forward(self, x, gain, bias, eps=LAYERNORM_EPS):
        if gain.shape != (x.shape[-1],) or bias.shape != gain.shape:
            raise DimensionError(f"layernorm: gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
        x_hat = centered * inv_std
        return x_hat * gain + bias, (x_hat, inv_std, gain)

    def backward(self, saved, grad):
        x_hat, inv_std, gain = saved
        dx_hat = grad * gain
        dx = inv_std * (dx_hat - dx_hat.mean(axis=-1, keepdims=True)
                        - x_hat * (dx_hat * x_hat).mean(axis=-1, keepdims=True))
        dgain = _sum_to(grad * x_hat, gain.shape)
        dbias = _sum_to(grad, gain.shape)
        return dx, dgain, dbias

    def sample(self, rng):
        return [rng.normal(size=(2, 3, 6)), 1.0 + 0.1 * rng.normal(size=6), rng.normal(size=6)], {}


@register_op("linear_scale")
class LinearScale(Op):
    """gain * x + bias, the fully linear replacement for layernorm (no epsilon)."""

    def forward(self, x, gain, bias):
        if gain.shape != (x.shape[-1],) or bias.shape != gain.shape:
            raise DimensionError(f"linear_scale: gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
        return x * gain + bias, (x, gain)

    def backward(self, saved, grad):
        x, gain = saved
        return grad * gain, _sum_to(grad * x, gain.shape), _sum_to(grad, gain.shape)

    def sample(self, rng):
        return [rng.normal(size=(2, 3, 4)), rng.normal(size=4), rng.normal(size=4)], {}


@register_op("embedding")
class Embedding(Op):
    """Row lookup table[ids]; ids is an integer array attribute."""

    def forward(self, table, ids):
        ids = np.asarray(ids)
        if not np.issubdtype(ids.dtype, np.integer):
            raise DimensionError("embedding: ids must be integers")
        if table.ndim != 2:
            raise DimensionError(f"embedding: table must be 2-D, got {table.shape}")
        return table[ids], (table.shape, ids)

    def backward(self, saved, grad):
        shape, ids = saved
        dtable = np.zeros(shape)
        np.add.at(dtable, ids.reshape(-1), grad.reshape(-1, shape[1]))
        return (dtable,)

    def sample(self, rng):
        return [rng.normal(size=(7, 3))], {"ids": rng.integers(0, 7, size=(2, 5))}


@register_op("causal_dft")
class CausalDFT(Op):
    """Per position p: Re of the last bin of the DFT over positions 0..p (axis -2)."""

    def forward(self, x):
        if x.ndim < 2:
            raise DimensionError(f"causal_dft: expected (..., N, d), got {x.shape}")
        C = dft_causal_matrix(x.shape[-2])
        return C @ x, C

    def backward(self, saved, grad):
        return (saved.T @ grad,)

    def sample(self, rng):
        return [rng.normal(size=(2, 6, 3))], {}


def linear_attention_prefix(q, k, v, c):
    """z_t = sum_{s<=t} (phi(q_t) . phi(k_s)) v_s with phi(x) = x + c.

    Runs the recurrence S_t = S_{t-1} + phi(k_t) v_t^T, z_t = S_t^T phi(q_t) over
    the position axis (-2); inputs are (N, d) or (B, N, d).
    """
    fq, fk = q + c, k + c
    batched = q.ndim == 3
    if not batched:
        fq, fk, v = fq[np.newaxis], fk[np.newaxis], v[np.newaxis]
    B, N, d = fq.shape
    S = np.zeros((B, d, v.shape[-1]))
    out = np.empty((B, N, v.shape[-1]))
    for t in range(N):
        S += fk[:, t, :, np.newaxis] * v[:, t, np.newaxis, :]
        out[:, t] = np.einsum('bi,bij->bj', fq[:, t], S)
    return out if batched else out[0]


@register_op("linear_attention")
class LinearAttention(Op):
    """Causal linear attention over projected q, k, v with affine features x + c."""

    def forward(self, q, k, v, c):
        if q.shape != k.shape or q.shape[:-1] != v.shape[:-1] or c.shape != (q.shape[-1],) or q.ndim not in (2, 3):
            raise DimensionError(f"linear_attention: q {q.shape}, k {k.shape}, v {v.shape}, c {c.shape}")
        return linear_attention_prefix(q, k, v, c), (q, k, v, c)

    def backward(self, saved, grad):
        q, k, v, c = saved
        batched = q.ndim == 3
        fq, fk, g = q + c, k + c, grad
        if not batched:
            fq, fk, v, g = fq[np.newaxis], fk[np.newaxis], v[np.newaxis], g[np.newaxis]
        B, N, d = fq.shape
        dv_dim = v.shape[-1]
        dfq = np.empty_like(fq)
        S = np.zeros((B, d, dv_dim))
        for t in range(N):
            S += fk[:, t, :, np.newaxis] * v[:, t, np.newaxis, :]
            dfq[:, t] = np.einsum('bij,bj->bi', S, g[:, t])
        # R_s = sum_{t>=s} phi(q_t) g_t^T, accumulated backwards
        dfk = np.empty_like(fk)
        dv = np.empty_like(v)
        R = np.zeros((B, d, dv_dim))
        for s in range(N - 1, -1, -1):
            R += fq[:, s, :, np.newaxis] * g[:, s, np.newaxis, :]
            dfk[:, s] = np.einsum('bij,bj->bi', R, v[:, s])
            dv[:, s] = np.einsum('bij,bi->bj', R, fk[:, s])
        dc = dfq.sum(axis=(0, 1)) + dfk.sum(axis=(0, 1))
        if not batched:
            dfq, dfk, dv = dfq[0], dfk[0], dv[0]
        return dfq, dfk, dv, dc

    def sample(self, rng):
        shape = (2, 5, 3)
        return [rng.normal(size=shape), rng.normal(size=shape), rng.normal(size=shape), rng.normal(size=3)], {}


@register_op("cross_entropy")
class CrossEntropy(Op):
    """sum over positions of -log softmax(logits)[target], divided by ``denominator``."""

    def forward(self, logits, targets, denominator=None):
        targets = np.asarray(targets)
        if logits.shape[:-1] != targets.shape:
            raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
        count = targets.size if denominator is None else denominator
        lse = scipy.special.logsumexp(logits, axis=-1)
        picked = np.take_along_axis(logits, targets[..., np.newaxis], axis=-1)[..., 0]
        loss = np.sum(lse - picked) / count
        return np.asarray(loss), (logits, lse, targets, count)

    def backward(self, saved, grad):
        logits, lse, targets, count = saved
        probs = np.exp(logits - lse[..., np.newaxis])
        np.put_along_axis(probs, targets[..., np.newaxis],
                          np.take_along_axis(probs, targets[..., np.newaxis], axis=-1) - 1.0, axis=-1)
        return (probs * (grad / count),)

    def sample(self, rng):
        return [rng.normal(size=(2, 3, 6))], {"targets": rng.integers(0, 6, size=(2, 3))}


def skew_exp(W):
    """U = exp(W - W^T), a real orthogonal matrix."""
    W = np.asarray(W, dtype=np.float64)
    return mat_exp(W - W.T, 1.0)


def grad_skew_mat_exp(W, upstream):
    """Vector-Jacobian product of U = exp(W - W^T) with respect to W.

    With A = W - W^T, dL/dA is the Frechet derivative of exp at A^T applied to
    the upstream gradient, read from the top-right block of
    exp([[A^T, E], [0, A^T]]). dL/dW = dL/dA - (dL/dA)^T.
    """
    W = np.asarray(W, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1] or upstream.shape != W.shape:
        raise DimensionError(f"grad_skew_mat_exp: W {W.shape}, upstream {upstream.shape}")
    d = W.shape[0]
    A = W - W.T
    # the Frechet derivative is linear in E, so unit-normalise E to keep the block in range
    scale = float(np.linalg.norm(upstream, 1))
    if scale == 0.0:
        return np.zeros_like(W)
    block = np.zeros((2 * d, 2 * d))
    block[:d, :d] = A.T
    block[d:, d:] = A.T
    block[:d, d:] = upstream / scale
    dA = mat_exp(block, 1.0)[:d, d:] * scale
    return dA - dA.T


@register_op("skew_expm")
class SkewExpm(Op):
    """Hamiltonian-constrained operator U = exp(W - W^T) = exp(-iH), H = i(W - W^T)."""

    def forward(self, w):
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DimensionError(f"skew_expm: W must be square, got {w.shape}")
        return skew_exp(w), w

    def backward(self, saved, grad):
        return (grad_skew_mat_exp(saved, grad),)

    def sample(self, rng):
        return [0.5 * rng.normal(size=(4, 4))], {}


@register_op("dropout")
class Dropout(Op):
    """x * mask, where mask already carries the 1/(1-p) rescaling."""

    def forward(self, x, mask):
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != x.shape:
            raise DimensionError(f"dropout: mask {mask.shape} vs input {x.shape}")
        return x * mask, mask

    def backward(self, saved, grad):
        return (grad * saved,)

    def sample(self, rng):
        return [rng.normal(size=(3, 4))], {"mask": (rng.random((3, 4)) > 0.3) / 0.7}


# --- Finite-difference oracle ---

def _loss_fn(op, values, attrs, weights):
    out, _ = op.forward(*values, **attrs)
    return float(np.sum(out * weights))


def grad_check(op_kind, seed=0, h=1e-5):
    """Max relative discrepancy between the backward rule and central differences.

    The op output is contracted with a fixed random weight so every output
    element contributes. The relative error of each input is
    max|analytic - numeric| / max(max|numeric|, 1e-8).
    """
    try:
        op = OPS[op_kind]
    except KeyError:
        raise UnknownOpError(f"unknown op kind {op_kind!r}")
    rng = np.random.default_rng(seed)
    values, attrs = op.sample(rng)
    values = [np.asarray(v, dtype=np.float64) for v in values]
    out, saved = op.forward(*values, **attrs)
    weights = rng.normal(size=np.shape(out))
    analytic = op.backward(saved, weights)
    worst = 0.0
    for index, (value, grad) in enumerate(zip(values, analytic)):
        if grad is None:
            continue
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + h
            plus = _loss_fn(op, values, attrs, weights)
            flat[j] = original - h
            minus = _loss_fn(op, values, attrs, weights)
            flat[j] = original
            numeric.reshape(-1)[j] = (plus - minus) / (2.0 * h)
        scale = max(float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
        err = float(np.max(np.abs(np.asarray(grad) - numeric), initial=0.0)) / scale
        logger.debug("grad_check %s input %d: rel err %.3e", op_kind, index, err)
        worst = max(worst, err)
    return worst


def params_grad_check(params, loss_fn, h=1e-5, names=None):
    """End-to-end check: ``loss_fn(tape) -> Var`` differentiated against central differences.

    Returns {parameter name: relative error} over ``names`` (default: all non-frozen).
    """
    tape = Tape(params)
    analytic = backward(tape, loss_fn(tape))
    names = list(analytic) if names is None else names
    errors = {}
    for name in names:
        data = params[name]
        flat = data.reshape(-1)
        numeric = np.zeros(flat.size)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + h
            plus = float(loss_fn(Tape(params, record=False)).value)
            flat[j] = original - h
            minus = float(loss_fn(Tape(params, record=False)).value)
            flat[j] = original
            numeric[j] = (plus - minus) / (2.0 * h)
        scale = max(float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
        errors[name] = float(np.max(np.abs(analytic[name].reshape(-1) - numeric), initial=0.0)) / scale
    return errors

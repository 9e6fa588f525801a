# /qsf/linalg.py

"""Dense real/complex matrix kernels.

Matrices are plain numpy arrays: float64 for real matrices, complex128 for
complex ones. Every function here is pure.
"""

import logging

import numpy as np
import scipy.linalg

from .config import EIGEN_RESIDUAL_TOL, MAT_EXP_MAX_NORM
from .errors import DimensionError, NumericError, RangeError

logger = logging.getLogger(__name__)


def as_square(A, name="A"):
    """Returns ``A`` as a 2-D square array or raises DimensionError."""
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"{name} must be a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise RangeError(f"{name} has non-finite entries")
    return A


def _as_vector(v, dim, name):
    v = np.asarray(v)
    if v.ndim != 1 or v.shape[0] != dim:
        raise DimensionError(f"{name} must be a vector of length {dim}, got shape {v.shape}")
    return v


def mat_exp(A, t=1.0):
    """Matrix exponential e^{At} by scaling-and-squaring with a Pade approximant.

    Accurate to ~1e-12 relative for ||At|| <= MAT_EXP_MAX_NORM (1-norm); larger
    arguments raise RangeError instead of returning an inaccurate result.
    """
    return _expm(_scaled_generator(A, t))


def _scaled_generator(A, t):
    """Returns A t after checking ||A t||_1 against MAT_EXP_MAX_NORM."""
    A = as_square(A)
    if not np.isfinite(t):
        raise RangeError(f"time must be finite, got {t}")
    At = A * t
    norm = float(np.linalg.norm(At, 1)) if At.size else 0.0
    if norm > MAT_EXP_MAX_NORM:
        raise RangeError(f"||At||_1 = {norm:.3g} exceeds the supported range {MAT_EXP_MAX_NORM}")
    return At


def _expm(M):
    result = scipy.linalg.expm(M)
    if not np.all(np.isfinite(result)):
        raise RangeError("matrix exponential overflowed")
    return result


def phi1_apply(G, T, beta):
    """Computes G^{-1}(e^{GT} - I) beta as T * phi1(GT) beta.

    Uses the augmented exponential exp([[GT, T beta], [0, 0]]), whose top-right
    column is exactly T * phi1(GT) beta, so singular G needs no special case.
    Only ||GT|| is range-checked; the drive column is normalised to unit 1-norm
    and the result rescaled, since the map is linear in beta.
    """
    G = as_square(G, "G")
    d = G.shape[0]
    beta = _as_vector(beta, d, "beta")
    GT = _scaled_generator(G, T)
    dtype = np.result_type(G, beta, float)
    drive = beta * T
    scale = float(np.sum(np.abs(drive)))
    if scale == 0.0:
        return np.zeros(d, dtype=dtype)
    M = np.zeros((d + 1, d + 1), dtype=dtype)
    M[:d, :d] = GT
    M[:d, d] = drive / scale
    return scale * _expm(M)[:d, d]


def eigenvalues(A):
    """All eigenvalues of ``A`` with multiplicity, in no particular order."""
    A = as_square(A)
    try:
        return scipy.linalg.eigvals(A).astype(complex)
    except scipy.linalg.LinAlgError as e:
        raise NumericError(f"eigenvalue iteration did not converge for a {A.shape[0]}x{A.shape[0]} "
                           f"matrix with ||A||_F={np.linalg.norm(A):.3e}: {e}")


def eigen_residual(A):
    """Largest ||(A - lambda I) v|| / ||A|| over unit eigenvectors; used to audit eigenvalues()."""
    A = as_square(A)
    if A.size == 0:
        return 0.0
    lambdas, vectors = scipy.linalg.eig(A)
    vectors = vectors / np.linalg.norm(vectors, axis=0, keepdims=True)
    residual = A @ vectors - vectors * lambdas[np.newaxis, :]
    scale = max(float(np.linalg.norm(A, 2)), np.finfo(float).tiny)
    return float(np.max(np.linalg.norm(residual, axis=0))) / scale


def check_eigenvalues(A, tol=EIGEN_RESIDUAL_TOL):
    residual = eigen_residual(A)
    if residual > tol:
        raise NumericError(f"eigenvalue residual {residual:.3e} exceeds {tol:.1e}")
    return residual


def lyapunov_covariance(G, sigma_noise, T):
    """Covariance of d psi = (G psi + beta) dt + sigma dW at time T, Sigma(0) = 0.

    Solves dSigma/dt = G Sigma + Sigma G^T + sigma^2 I through the block exponential
    exp([[G, I], [0, -G^T]] T) = [[F11, F12], [0, F22]], Sigma = sigma^2 F12 F11^T.
    Plain transpose throughout, also for complex G. Only ||GT|| is range-checked.
    """
    G = as_square(G, "G")
    d = G.shape[0]
    q = float(sigma_noise) ** 2
    GT = _scaled_generator(G, T)
    M = np.zeros((2 * d, 2 * d), dtype=np.result_type(G, float))
    M[:d, :d] = GT
    M[:d, d:] = T * np.eye(d)
    M[d:, d:] = -GT.T
    F = _expm(M)
    sigma = q * (F[:d, d:] @ F[:d, :d].T)
    return 0.5 * (sigma + sigma.T)


def dft_causal_matrix(n):
    """Lower-triangular C with (C @ X)[p] = Re(DFT_{p+1}(X[:p+1]))[p].

    Row p holds cos(2 pi p s / (p + 1)) for s <= p: the last bin of the
    length-(p+1) transform over the causal prefix.
    """
    p = np.arange(n)[:, np.newaxis]
    s = np.arange(n)[np.newaxis, :]
    C = np.cos(2.0 * np.pi * p * s / (p + 1.0))
    return np.tril(C)


def prefix_dft_last_bin(X, i):
    """Real part of bin i-1 of the length-i DFT of X[0:i], per channel (i is 1-based)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, np.newaxis]
    if not 1 <= i <= X.shape[0]:
        raise RangeError(f"position {i} out of range 1..{X.shape[0]}")
    return np.fft.fft(X[:i], axis=0)[i - 1].real

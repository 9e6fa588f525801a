# /qsf/ml_models/propagator.py

"""Closed-form machinery for affine Koopman dynamics d psi/dt = G psi + beta.

Covers the Hermitian/dissipative split of a generator, the classical
(noise-free) solution, the Lyapunov covariance of the stochastic version,
the attention energy, the guided propagator N(nu, Lambda), multi-token
chaining and the discretised action functional.
"""

import dataclasses
import logging
from typing import NamedTuple

import numpy as np
import scipy.integrate

from ..config import CHAIN_TOL, INTRA_TOKEN_TIME
from ..errors import ConditioningError, DimensionError, NumericError, RangeError
from ..linalg import as_square, eigenvalues, lyapunov_covariance, mat_exp, phi1_apply

logger = logging.getLogger(__name__)

# Largest condition number accepted for Sigma_T and Lambda^{-1}
MAX_CONDITION = 1e12


@dataclasses.dataclass
class GeneratorDecomposition:
    H: np.ndarray
    Gamma: np.ndarray
    omega: np.ndarray
    gamma: np.ndarray

    def reconstruct(self):
        return -1j * self.H + self.Gamma


@dataclasses.dataclass
class GuidedPropagator:
    mu_K: np.ndarray
    Sigma_T: np.ndarray
    Lambda: np.ndarray
    nu: np.ndarray
    sigma_guidance: float
    sigma_noise: float


class AffineStep(NamedTuple):
    """One affine update psi -> U psi + b."""
    U: np.ndarray
    b: np.ndarray


@dataclasses.dataclass
class TokenStepParams:
    """Generator G_t and drive beta_t held constant over one token interval of length T."""
    G: np.ndarray
    beta: np.ndarray
    T: float = INTRA_TOKEN_TIME

    @property
    def U(self):
        return mat_exp(self.G, self.T)

    @property
    def b(self):
        return phi1_apply(self.G, self.T, self.beta)


def decompose_generator(G):
    """G = -iH + Gamma with Gamma = (G + G^H)/2 and H = i(G - G^H)/2, both Hermitian."""
    G = as_square(G, "G").astype(complex)
    G_h = G.conj().T
    Gamma = 0.5 * (G + G_h)
    H = 0.5j * (G - G_h)
    omega = np.sort(np.linalg.eigvalsh(H))
    gamma = np.sort(np.linalg.eigvalsh(Gamma))
    return GeneratorDecomposition(H=H, Gamma=Gamma, omega=omega, gamma=gamma)


def affine_evolve(G, beta, psi0, T):
    """psi(T) = e^{GT} psi0 + G^{-1}(e^{GT} - I) beta; exact psi0 at T = 0."""
    G = as_square(G, "G")
    psi0 = np.asarray(psi0)
    if psi0.shape != (G.shape[0],):
        raise DimensionError(f"psi0 must have shape ({G.shape[0]},), got {psi0.shape}")
    if T < 0:
        raise RangeError(f"evolution time must be non-negative, got {T}")
    if T == 0:
        return psi0.copy()
    return mat_exp(G, T) @ psi0 + phi1_apply(G, T, beta)


def classical_path(G, beta, psi0, times, t0=0.0):
    """psi_cl(t) for every t in ``times``: rows of an array of shape (len(times), d)."""
    return np.stack([affine_evolve(G, beta, psi0, float(t) - t0) for t in times])


def feature_gram(U_feat, d):
    U_feat = np.eye(d) if U_feat is None else np.asarray(U_feat, dtype=float)
    if U_feat.ndim != 2 or U_feat.shape[1] != d:
        raise DimensionError(f"U_feat must have {d} columns, got shape {U_feat.shape}")
    return U_feat.T @ U_feat


def attention_energy(psi0, psi1, W_Q, W_K, U_feat=None):
    """||phi(W_Q psi0) - phi(W_K psi1)||^2 for affine features phi(x) = U_feat x + c (c cancels)."""
    W_Q, W_K = np.asarray(W_Q), np.asarray(W_K)
    diff = W_Q @ np.asarray(psi0) - W_K @ np.asarray(psi1)
    if U_feat is not None:
        diff = np.asarray(U_feat) @ diff
    return float(np.real(np.vdot(diff, diff)))


def _condition_check(matrix, label, extra):
    cond = float(np.linalg.cond(matrix))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise ConditioningError(f"{label} is numerically singular",
                                diagnostics={**extra, f"cond_{label}": cond})
    return cond


def guided_propagate(G, beta, psi0, T, W_Q, W_K, U_feat=None, sigma=1.0, sigma_noise=1.0):
    """Guided propagator N(nu, Lambda) for the attention-weighted endpoint law.

    Lambda^{-1} = Sigma_T^{-1} + (1/sigma^2) W_K^T U^T U W_K and
    nu = Lambda [Sigma_T^{-1} mu_K + (1/sigma^2) W_K^T U^T U W_Q psi0].
    ``sigma = inf`` switches guidance off. U_feat defaults to the identity.
    """
    G = as_square(G, "G")
    d = G.shape[0]
    if not sigma > 0:
        raise RangeError(f"guidance sigma must be positive, got {sigma}")
    if not T > 0:
        raise RangeError(f"evolution time must be positive, got {T}")
    if not sigma_noise > 0:
        raise ConditioningError("sigma_noise must be positive: deterministic dynamics give a singular Sigma_T",
                                diagnostics={"sigma_noise": float(sigma_noise)})
    W_Q, W_K = np.asarray(W_Q), np.asarray(W_K)
    mu_K = affine_evolve(G, beta, psi0, T)
    Sigma_T = lyapunov_covariance(G, sigma_noise, T)
    _condition_check(Sigma_T, "Sigma_T", {"sigma_noise": float(sigma_noise), "T": float(T)})
    Sigma_inv = np.linalg.inv(Sigma_T)

    inv_sigma2 = 0.0 if np.isinf(sigma) else 1.0 / sigma ** 2
    gram = feature_gram(U_feat, W_K.shape[0])
    precision = Sigma_inv + inv_sigma2 * (W_K.T @ gram @ W_K)
    precision = 0.5 * (precision + precision.T)
    _condition_check(precision, "Lambda_inv", {"sigma": float(sigma)})
    Lambda = np.linalg.inv(precision)
    Lambda = 0.5 * (Lambda + Lambda.T)
    nu = Lambda @ (Sigma_inv @ mu_K + inv_sigma2 * (W_K.T @ gram @ (W_Q @ np.asarray(psi0))))
    return GuidedPropagator(mu_K=mu_K, Sigma_T=Sigma_T, Lambda=Lambda, nu=nu,
                            sigma_guidance=float(sigma), sigma_noise=float(sigma_noise))


def guided_readout(propagator, W_V):
    """Expectation of the value readout W_V psi1 under the guided propagator."""
    return np.asarray(W_V) @ propagator.nu


def chain_closed_form(steps, psi0):
    """U_N...U_1 psi0 + sum_k (prod_{j>k} U_j) b_k."""
    psi0 = np.asarray(psi0)
    total = np.eye(psi0.shape[0], dtype=np.result_type(psi0, *(s.U for s in steps)))
    bias_sum = np.zeros_like(psi0, dtype=total.dtype)
    # accumulate from the last step backwards so the suffix product is reused
    suffix = np.eye(psi0.shape[0], dtype=total.dtype)
    for step in reversed(steps):
        bias_sum = bias_sum + suffix @ step.b
        suffix = suffix @ step.U
    total = suffix
    return total @ psi0 + bias_sum


def chain_propagators(steps, psi0, verify=True):
    """psi_N through the recursion psi_k = U_k psi_{k-1} + b_k.

    With ``verify`` the closed product-sum form is evaluated as well and the two
    must agree to CHAIN_TOL relative to the result's magnitude.
    """
    if not steps:
        raise DimensionError("chain_propagators needs at least one step")
    materialized = [AffineStep(np.asarray(s.U), np.asarray(s.b)) for s in steps]
    psi = np.asarray(psi0)
    for step in materialized:
        if step.U.shape != (psi.shape[0], psi.shape[0]) or step.b.shape != psi.shape:
            raise DimensionError(f"step shapes U {step.U.shape}, b {step.b.shape} do not match state {psi.shape}")
        psi = step.U @ psi + step.b
    if verify:
        closed = chain_closed_form(materialized, psi0)
        scale = max(1.0, float(np.max(np.abs(psi))))
        delta = float(np.max(np.abs(closed - psi))) / scale
        if delta > CHAIN_TOL:
            raise NumericError(f"closed-form chain disagrees with the recursion by {delta:.3e}")
    return psi


def evaluate_action(path, G, beta, t0=0.0, t1=1.0):
    """S = int 1/2 ||d psi/dt - G psi - beta||^2 dt on a uniform grid.

    Derivatives are second-order centred differences (one-sided at the ends);
    the integral is the trapezoidal rule.
    """
    path = np.asarray(path)
    if path.ndim == 1:
        path = path[:, np.newaxis]
    if path.shape[0] < 3:
        raise DimensionError(f"a path needs at least 3 samples, got {path.shape[0]}")
    G = as_square(G, "G")
    times = np.linspace(t0, t1, path.shape[0])
    velocity = np.gradient(path, times, axis=0, edge_order=2)
    residual = velocity - path @ G.T - np.asarray(beta)
    density = 0.5 * np.real(np.sum(residual * np.conj(residual), axis=1))
    return float(scipy.integrate.trapezoid(density, times))


def spectral_mapping_gap(G, T=1.0):
    """max over eigenvalues of | |lambda(e^{GT})| - e^{Re lambda(G) T} | after sorting both."""
    G = as_square(G, "G")
    lam_K = np.sort(np.abs(eigenvalues(mat_exp(G, T))))
    lam_G = np.sort(np.exp(np.real(eigenvalues(G)) * T))
    return float(np.max(np.abs(lam_K - lam_G), initial=0.0))

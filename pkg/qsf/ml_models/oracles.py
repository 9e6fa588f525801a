# /qsf/ml_models/oracles.py

"""Brute-force reference computations.

None of these share code with the closed forms they check: the matrix
exponential is a scaled Taylor series, ODE solutions come from fixed-step RK4,
the guided posterior from tensor-grid quadrature. They are slow and only meant
for verification.
"""

import itertools
import logging

import numpy as np

logger = logging.getLogger(__name__)

RK4_STEP = 1e-4
QUADRATURE_POINTS = 81
QUADRATURE_HALF_WIDTH = 8.0
MAX_QUADRATURE_DIM = 3
REFINEMENT_PASSES = 2


def taylor_expm(A, terms=200):
    """e^A from a compensated Taylor sum on A / 2^s, squared s times."""
    A = np.asarray(A)
    norm = float(np.linalg.norm(A, 1)) if A.size else 0.0
    s = max(0, int(np.ceil(np.log2(norm / 0.5)))) if norm > 0.5 else 0
    B = A / (2.0 ** s)
    n = A.shape[0]
    total = np.eye(n, dtype=np.result_type(A, float))
    carry = np.zeros_like(total)
    term = np.eye(n, dtype=total.dtype)
    for k in range(1, terms + 1):
        term = term @ B / k
        # Kahan summation
        y = term - carry
        t = total + y
        carry = (t - total) - y
        total = t
        if not np.any(term):
            break
    for _ in range(s):
        total = total @ total
    return total


def rk4(f, y0, T, h=RK4_STEP):
    """Classical fourth-order Runge-Kutta from t=0 to T with fixed step ``h`` (last step shortened)."""
    y = np.array(y0, dtype=np.result_type(y0, float))
    t = 0.0
    while t < T - 1e-15:
        step = min(h, T - t)
        k1 = f(y)
        k2 = f(y + 0.5 * step * k1)
        k3 = f(y + 0.5 * step * k2)
        k4 = f(y + step * k3)
        y = y + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t += step
    return y


def affine_ode_solution(G, beta, psi0, T, h=RK4_STEP):
    G, beta = np.asarray(G), np.asarray(beta)
    return rk4(lambda psi: G @ psi + beta, psi0, T, h)


def lyapunov_ode_solution(G, sigma_noise, T, h=RK4_STEP):
    """Integrates dSigma/dt = G Sigma + Sigma G^T + sigma^2 I from Sigma(0) = 0."""
    G = np.asarray(G)
    q = float(sigma_noise) ** 2 * np.eye(G.shape[0])
    return rk4(lambda S: G @ S + S @ G.T + q, np.zeros_like(G, dtype=float), T, h)


def scalar_lyapunov(g, sigma_noise, T):
    """Sigma(T) = sigma^2 (e^{2gT} - 1) / (2g), or sigma^2 T for g = 0."""
    if g == 0:
        return sigma_noise ** 2 * T
    return sigma_noise ** 2 * np.expm1(2.0 * g * T) / (2.0 * g)


def phi1_direct(G, T, beta):
    """G^{-1}(e^{GT} - I) beta by a linear solve; only valid for non-singular G."""
    G = np.asarray(G)
    return np.linalg.solve(G, (taylor_expm(G * T) - np.eye(G.shape[0])) @ np.asarray(beta))


def naive_causal_dft(X):
    """Per position p the real part of sum_{s<=p} x_s exp(-2 pi i p s / (p+1)), by explicit loops."""
    X = np.asarray(X, dtype=float)
    out = np.zeros_like(X)
    for p in range(X.shape[0]):
        acc = np.zeros(X.shape[1:], dtype=complex)
        for s in range(p + 1):
            acc += X[s] * np.exp(-2j * np.pi * p * s / (p + 1))
        out[p] = acc.real
    return out


def naive_linear_attention(q, k, v, c):
    """Double loop over (t, s <= t) of (phi(q_t) . phi(k_s)) v_s."""
    q, k, v, c = (np.asarray(a, dtype=float) for a in (q, k, v, c))
    N = q.shape[0]
    out = np.zeros((N, v.shape[1]))
    for t in range(N):
        for s in range(t + 1):
            out[t] += float(np.dot(q[t] + c, k[s] + c)) * v[s]
    return out


def _log_density(points, mu_K, Sigma_inv, W_Q, W_K, gram, psi0, inv_sigma2):
    diff = points - mu_K
    log_prior = -0.5 * np.einsum('ni,ij,nj->n', diff, Sigma_inv, diff)
    key_diff = (W_Q @ psi0)[np.newaxis, :] - points @ W_K.T
    energy = np.einsum('ni,ij,nj->n', key_diff, gram, key_diff)
    return log_prior - 0.5 * inv_sigma2 * energy


def _grid_moments(center, chol, log_density):
    d = center.shape[0]
    axis = np.linspace(-QUADRATURE_HALF_WIDTH, QUADRATURE_HALF_WIDTH, QUADRATURE_POINTS)
    z = np.array(list(itertools.product(axis, repeat=d)))
    points = center[np.newaxis, :] + z @ chol.T
    logp = log_density(points)
    weights = np.exp(logp - logp.max())
    weights /= weights.sum()
    mean = weights @ points
    centered = points - mean
    cov = (centered * weights[:, np.newaxis]).T @ centered
    return mean, 0.5 * (cov + cov.T)


def quadrature_posterior(mu_K, Sigma_T, psi0, W_Q, W_K, U_feat=None, sigma=1.0):
    """Mean and covariance of N(psi; mu_K, Sigma_T) exp(-E_attn(psi) / 2 sigma^2), by tensor-grid quadrature.

    The first pass spans +-8 prior standard deviations (whitened by the prior
    Cholesky factor); each further pass re-centres and re-scales the grid on
    the previous pass's moments.
    """
    mu_K = np.asarray(mu_K, dtype=float)
    d = mu_K.shape[0]
    if d > MAX_QUADRATURE_DIM:
        raise ValueError(f"quadrature oracle supports d <= {MAX_QUADRATURE_DIM}, got {d}")
    W_Q, W_K = np.asarray(W_Q, dtype=float), np.asarray(W_K, dtype=float)
    U = np.eye(W_K.shape[0]) if U_feat is None else np.asarray(U_feat, dtype=float)
    gram = U.T @ U
    Sigma_inv = np.linalg.inv(Sigma_T)
    inv_sigma2 = 0.0 if np.isinf(sigma) else 1.0 / sigma ** 2
    psi0 = np.asarray(psi0, dtype=float)

    def log_density(points):
        return _log_density(points, mu_K, Sigma_inv, W_Q, W_K, gram, psi0, inv_sigma2)

    mean, cov = _grid_moments(mu_K, np.linalg.cholesky(Sigma_T), log_density)
    for _ in range(REFINEMENT_PASSES):
        mean, cov = _grid_moments(mean, np.linalg.cholesky(cov), log_density)
    return mean, cov


def perturbation_actions(action, path, times, rng, count=50, amplitude=0.1):
    """Action of ``count`` smooth perturbations of ``path`` that keep both endpoints fixed."""
    path = np.asarray(path)
    if path.ndim == 1:
        path = path[:, np.newaxis]
    t0, t1 = times[0], times[-1]
    u = (np.asarray(times) - t0) / (t1 - t0)
    actions = []
    for _ in range(count):
        mode = rng.integers(1, 6)
        direction = rng.normal(size=path.shape[1])
        direction /= max(np.linalg.norm(direction), 1e-12)
        bump = amplitude * np.sin(mode * np.pi * u)[:, np.newaxis] * direction[np.newaxis, :]
        actions.append(action(path + bump))
    return np.array(actions)

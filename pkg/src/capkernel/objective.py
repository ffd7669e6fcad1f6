"""Entropy-regularized training objective and its analytic gradient.

Loss convention (minimized)::

    F = -[mean_pos log phi(z) + mean_neg log(1 - phi(z))] - eta * H(p) + R

with ``z_ij = a_i + a_j + beta * K_ij``, ``p_j = sigma_j^2 / sum(sigma^2)``
and ``R = reg_weight * (|sigma|^2 + |a|^2 + beta^2)``. Since ``Q`` is
orthonormal, ``H(p)`` is exactly ``log d_spec(K)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .model import KernelView, ModelParams, NumericalError, log_odds, mean_log_likelihood, sigmoid
from .spectral import entropy


@dataclass(frozen=True)
class ObjectiveConfig:
    eta: float = 0.0
    reg_weight: float = 1e-4
    neg_ratio: int = 5
    reg_on_raw: bool = False  # penalize pre-softplus sigma/beta instead

    def __post_init__(self):
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be >= 0")
        if self.neg_ratio < 1:
            raise ValueError("neg_ratio must be >= 1")


@dataclass
class GradientBundle:
    d_q: np.ndarray
    d_sigma_raw: np.ndarray
    d_offsets: np.ndarray
    d_beta_raw: float

    def check_finite(self) -> None:
        for name in ("d_q", "d_sigma_raw", "d_offsets", "d_beta_raw"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericalError(f"non-finite gradient in {name}")


def entropy_term(m: ModelParams) -> float:
    s2 = m.sigma ** 2
    return entropy(s2 / s2.sum())


def grad_entropy(m: ModelParams) -> np.ndarray:
    """dH/d sigma_raw."""
    sigma = m.sigma
    s2 = sigma ** 2
    total = s2.sum()
    p = s2 / total
    logp = np.log(np.where(p > 0, p, 1.0))
    h = -np.sum(p * logp)
    d_sigma = -(2.0 * sigma / total) * (logp + h)
    return d_sigma * sigmoid(m.sigma_raw)


def regularizer(m: ModelParams, cfg: ObjectiveConfig) -> float:
    if cfg.reg_weight == 0:
        return 0.0
    sig, beta = (m.sigma_raw, m.beta_raw) if cfg.reg_on_raw else (m.sigma, m.beta)
    return cfg.reg_weight * float(np.sum(sig ** 2) + np.sum(m.offsets ** 2) + beta ** 2)


def _pairs(x) -> np.ndarray:
    return np.asarray(x, dtype=np.int64).reshape(-1, 2)


def objective_value(m: ModelParams, cfg: ObjectiveConfig, positives, negatives) -> float:
    positives, negatives = _pairs(positives), _pairs(negatives)
    if len(positives) == 0 and len(negatives) == 0:
        raise ValueError("empty batch")
    view = m.view()
    z_pos = log_odds(m, positives, view)
    z_neg = log_odds(m, negatives, view)
    value = -mean_log_likelihood(z_pos, z_neg) - cfg.eta * entropy_term(m) + regularizer(m, cfg)
    if not np.isfinite(value):
        sigma = m.sigma
        raise NumericalError(
            f"non-finite objective (eta={cfg.eta}, sigma min={sigma.min():.3e} max={sigma.max():.3e})")
    return value


# the dense route forms all N^2 kernel entries once; it wins over per-pair
# row gathers while N^2 stays within this multiple of the batch size
DENSE_ROUTE_FACTOR = 16


def _use_dense(n: int, n_pairs: int, route: str) -> bool:
    if route == "auto":
        return n * n <= DENSE_ROUTE_FACTOR * n_pairs
    if route not in ("dense", "pairs"):
        raise ValueError(f"unknown route {route!r}")
    return route == "dense"


def objective_and_gradients(m: ModelParams, cfg: ObjectiveConfig, positives,
                            negatives, route: str = "auto") -> tuple[float, GradientBundle]:
    """Objective value and its full analytic gradient.

    ``route='pairs'`` touches only the batch rows of ``Q`` (``O(|batch| r + N r)``);
    ``route='dense'`` builds ``K`` once (``O(N^2 r)``), which is faster on small
    graphs. Both give the same result up to rounding.
    """
    positives, negatives = _pairs(positives), _pairs(negatives)
    if len(positives) == 0 and len(negatives) == 0:
        raise ValueError("empty batch")
    n = m.n_nodes
    q = m.q_basis
    view = KernelView(m)
    pairs = np.concatenate([positives, negatives])
    i, j = pairs[:, 0], pairs[:, 1]
    dense = _use_dense(n, len(pairs), route)
    if dense:
        k_vals = (n * (q * view.weights) @ q.T)[i, j]
    else:
        k_vals = n * np.einsum("ij,ij->i", q[i] * view.weights, q[j])
    beta = m.beta
    z = m.offsets[i] + m.offsets[j] + beta * k_vals
    n_pos = len(positives)
    z_pos, z_neg = z[:n_pos], z[n_pos:]

    # dLoss/dz per pair
    w = np.empty(len(z))
    if n_pos:
        w[:n_pos] = -sigmoid(-z_pos) / n_pos
    if len(z_neg):
        w[n_pos:] = sigmoid(z_neg) / len(z_neg)

    d_offsets = np.bincount(i, weights=w, minlength=n) + np.bincount(j, weights=w, minlength=n)
    wk = float(np.dot(w, k_vals))
    d_beta = wk

    # symmetric pair-weight matrix times Q; W_sym Q drives both the Q and sigma terms
    if dense:
        wmat = np.bincount(i * n + j, weights=w, minlength=n * n).reshape(n, n)
        wq = wmat @ q + wmat.T @ q
    else:
        wmat = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))),
                             shape=(n, n))
        wq = wmat @ q
    s2 = view.sigma ** 2
    total = view.sigma_sq_sum
    # dK_ij/dQ_il = N/S * s_l * Q_jl (and symmetric)
    d_q = (beta * n / total) * wq * s2

    # dK_ij/ds_l = (N Q_il Q_jl - K_ij) / S, with sum_p w_p Q_il Q_jl = colsum(Q * W_sym Q) / 2
    w_qq = 0.5 * np.sum(q * wq, axis=0)
    d_s = beta * (n * w_qq - wk) / total
    d_sigma = 2.0 * view.sigma * d_s

    sigma = view.sigma
    p = s2 / total
    logp = np.log(np.where(p > 0, p, 1.0))
    h = -float(np.sum(p * logp))
    d_sigma += -cfg.eta * (-(2.0 * sigma / total) * (logp + h))

    d_offsets = d_offsets + 2.0 * cfg.reg_weight * m.offsets
    if cfg.reg_on_raw:
        d_sigma_raw = d_sigma * sigmoid(m.sigma_raw) + 2.0 * cfg.reg_weight * m.sigma_raw
        d_beta_raw = d_beta * sigmoid(m.beta_raw) + 2.0 * cfg.reg_weight * m.beta_raw
    else:
        d_sigma += 2.0 * cfg.reg_weight * sigma
        d_beta += 2.0 * cfg.reg_weight * beta
        d_sigma_raw = d_sigma * sigmoid(m.sigma_raw)
        d_beta_raw = d_beta * sigmoid(m.beta_raw)

    value = -mean_log_likelihood(z_pos, z_neg) - cfg.eta * h + regularizer(m, cfg)
    grads = GradientBundle(d_q, d_sigma_raw, d_offsets, float(d_beta_raw))
    if not np.isfinite(value):
        raise NumericalError(
            f"non-finite objective (eta={cfg.eta}, sigma min={sigma.min():.3e} max={sigma.max():.3e})")
    grads.check_finite()
    return value, grads


def gradients(m: ModelParams, cfg: ObjectiveConfig, positives, negatives,
              route: str = "auto") -> GradientBundle:
    return objective_and_gradients(m, cfg, positives, negatives, route)[1]

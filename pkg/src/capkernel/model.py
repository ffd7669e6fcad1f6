"""SVD-form latent parameterization and the logistic edge model.

The factor is stored as ``L = Q diag(sigma)`` with ``Q`` column-orthonormal
and ``sigma = softplus(sigma_raw)``. The trace-normalized kernel is

    K = N * Q diag(sigma^2) Q^T / sum(sigma^2)

so its nonzero eigenvalues are ``N * sigma_j^2 / sum(sigma^2)`` with
eigenvectors ``Q[:, j]``, read off without an eigensolve. Entries are formed
on demand; the dense ``N x N`` kernel is only built for small oracle checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit

from .graph import Graph
from .spectral import Spectrum, d_spec

ORTHO_ATOL = 1e-6


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


sigmoid = expit
log_sigmoid = log_expit


class NumericalError(FloatingPointError):
    """Non-finite parameters, losses or gradients."""


@dataclass(eq=False)
class ModelParams:
    q_basis: np.ndarray
    sigma_raw: np.ndarray
    offsets: np.ndarray
    beta_raw: float

    @property
    def n_nodes(self) -> int:
        return self.q_basis.shape[0]

    @property
    def rank_cap(self) -> int:
        return self.q_basis.shape[1]

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.sigma_raw)

    @property
    def beta(self) -> float:
        return float(softplus(self.beta_raw))

    def copy(self) -> "ModelParams":
        return ModelParams(self.q_basis.copy(), self.sigma_raw.copy(),
                           self.offsets.copy(), float(self.beta_raw))

    def orthonormality_error(self) -> float:
        q = self.q_basis
        return float(np.max(np.abs(q.T @ q - np.eye(self.rank_cap))))

    def check_orthonormal(self, atol: float = ORTHO_ATOL) -> None:
        err = self.orthonormality_error()
        if err > atol:
            raise NumericalError(f"q_basis lost orthonormality (max dev {err:.2e})")

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.q_basis)) and np.all(np.isfinite(self.sigma_raw))
                    and np.all(np.isfinite(self.offsets)) and np.isfinite(self.beta_raw))

    def view(self) -> "KernelView":
        return KernelView(self)


def orthonormalize(x: np.ndarray) -> np.ndarray:
    """Thin QR with the sign convention ``diag(R) > 0``."""
    q, r = np.linalg.qr(x)
    s = np.sign(np.diag(r))
    s[s == 0] = 1.0
    return q * s


def init_params(g: Graph, rank_cap: int, seed=None) -> ModelParams:
    """Random orthonormal basis, uniform spectrum (``sigma = 1``), ``beta = 1``,
    offsets at the clamped density logit."""
    if not 1 <= rank_cap <= g.n_nodes:
        raise ValueError(f"rank_cap must lie in [1, {g.n_nodes}]")
    rng = np.random.default_rng(seed)
    q = orthonormalize(rng.standard_normal((g.n_nodes, rank_cap)))
    n = g.n_nodes
    density = g.n_edges / max(n * (n - 1) / 2, 1)
    density = min(max(density, 1e-12), 1 - 1e-12)
    beta = 1.0
    a0 = np.log(density / (1 - density)) - beta * (n / rank_cap) / 2
    a0 = float(np.clip(a0, -6.0, 0.0))
    return ModelParams(
        q_basis=q,
        sigma_raw=np.full(rank_cap, float(softplus_inv(1.0))),
        offsets=np.full(n, a0),
        beta_raw=float(softplus_inv(beta)),
    )


@dataclass(eq=False)
class KernelView:
    """Derived quantities of a parameter snapshot. Do not hold across
    optimizer steps."""

    params: ModelParams
    _order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.sigma = self.params.sigma
        s2 = self.sigma ** 2
        self.sigma_sq_sum = float(s2.sum())
        if not self.sigma_sq_sum > 0:
            raise NumericalError("all singular values underflowed to zero")
        self.weights = s2 / self.sigma_sq_sum
        self._order = np.argsort(-self.weights, kind="stable")

    @property
    def permutation(self) -> np.ndarray:
        """Column order of ``q_basis`` that sorts eigenvalues descending."""
        return self._order

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.params.n_nodes * self.weights[self._order]

    @property
    def eigenbasis(self) -> np.ndarray:
        return self.params.q_basis[:, self._order]

    def spectrum(self) -> Spectrum:
        self.params.check_orthonormal()
        return Spectrum(self.eigenvalues, float(self.params.n_nodes))

    def d_spec(self) -> float:
        return d_spec(self.spectrum())

    def entries(self, pairs) -> np.ndarray:
        """``K_ij`` for each row of an ``(k, 2)`` index array, O(k r)."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        q = self.params.q_basis
        return self.params.n_nodes * ((q[pairs[:, 0]] * q[pairs[:, 1]]) @ self.weights)

    def dense(self) -> np.ndarray:
        q = self.params.q_basis
        return self.params.n_nodes * (q * self.weights) @ q.T


def kernel_entry(m: ModelParams, i: int, j: int) -> float:
    return float(m.view().entries([[i, j]])[0])


def log_odds(m: ModelParams, pairs, view: KernelView | None = None) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if np.any(pairs[:, 0] == pairs[:, 1]):
        raise ValueError("self-pairs have no edge log-odds")
    view = view or m.view()
    return m.offsets[pairs[:, 0]] + m.offsets[pairs[:, 1]] + m.beta * view.entries(pairs)


def edge_log_odds(m: ModelParams, i: int, j: int) -> float:
    return float(log_odds(m, [[i, j]])[0])


def mean_log_likelihood(z_pos: np.ndarray, z_neg: np.ndarray) -> float:
    """Equal-weight sum of the positive and negative mean log-likelihoods."""
    if len(z_pos) == 0 and len(z_neg) == 0:
        raise ValueError("both pair lists are empty")
    total = 0.0
    if len(z_pos):
        total += float(np.mean(log_sigmoid(z_pos)))
    if len(z_neg):
        total += float(np.mean(log_sigmoid(-z_neg)))
    return total


def log_likelihood(m: ModelParams, positives, negatives) -> float:
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(-1, 2)
    view = m.view()
    z_pos = log_odds(m, positives, view) if len(positives) else np.empty(0)
    z_neg = log_odds(m, negatives, view) if len(negatives) else np.empty(0)
    return mean_log_likelihood(z_pos, z_neg)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, m: ModelParams, seed: int | None = None, iteration: int = 0,
                    node_labels: list[str] | None = None, extra: dict | None = None) -> None:
    payload = {
        "n_nodes": m.n_nodes,
        "rank_cap": m.rank_cap,
        "q_basis": m.q_basis.ravel().tolist(),
        "sigma_raw": m.sigma_raw.tolist(),
        "offsets": m.offsets.tolist(),
        "beta_raw": float(m.beta_raw),
        "seed": seed,
        "iteration": int(iteration),
    }
    if node_labels is not None:
        payload["node_labels"] = list(node_labels)
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    payload = json.loads(Path(path).read_text())
    n, r = int(payload["n_nodes"]), int(payload["rank_cap"])
    m = ModelParams(
        q_basis=np.asarray(payload["q_basis"], dtype=float).reshape(n, r),
        sigma_raw=np.asarray(payload["sigma_raw"], dtype=float),
        offsets=np.asarray(payload["offsets"], dtype=float),
        beta_raw=float(payload["beta_raw"]),
    )
    return m, payload

"""Spectral summaries of trace-normalized PSD kernels.

Everything here works on a :class:`Spectrum` (descending eigenvalues that sum
to a fixed trace budget) and, for prefixes, on an orthonormal eigenbasis.
Entropies use the natural log.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

NEG_CLAMP = 1e-9
TRACE_RTOL = 1e-8


class SpectrumError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Descending nonnegative eigenvalues with ``sum == trace_target``.

    Values in ``[-1e-9 * lambda_1, 0)`` are clamped to zero; anything more
    negative means an upstream invariant broke and raises.
    """

    eigenvalues: np.ndarray
    trace_target: float

    def __post_init__(self):
        lam = np.sort(np.asarray(self.eigenvalues, dtype=float).ravel())[::-1]
        if lam.size == 0:
            raise SpectrumError("empty spectrum")
        if not np.all(np.isfinite(lam)):
            raise SpectrumError("non-finite eigenvalue")
        top = max(lam[0], 0.0)
        if lam[-1] < -NEG_CLAMP * top:
            raise SpectrumError(f"negative eigenvalue {lam[-1]:.3e} below clamp window")
        lam = np.where(lam < 0, 0.0, lam)
        total = lam.sum()
        target = float(self.trace_target)
        if abs(total - target) > TRACE_RTOL * max(abs(target), 1e-300):
            raise SpectrumError(f"eigenvalues sum to {total!r}, expected trace {target!r}")
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "trace_target", target)

    @classmethod
    def normalized(cls, values, trace_target: float | None = None) -> "Spectrum":
        """Rescale arbitrary nonnegative values to sum to ``trace_target``
        (default: the number of values)."""
        lam = np.asarray(values, dtype=float).ravel()
        if trace_target is None:
            trace_target = float(lam.size)
        top = lam.max(initial=0.0)
        if not top > 0:
            raise SpectrumError("zero spectrum")
        lam = lam / top  # guards subnormal inputs
        return cls(lam * (trace_target / lam[lam > 0].sum()), trace_target)

    def __len__(self):
        return len(self.eigenvalues)


def occupancy(s: Spectrum) -> np.ndarray:
    if s.trace_target <= 0 or s.eigenvalues[0] <= 0:
        raise SpectrumError("zero spectrum")
    return s.eigenvalues / s.trace_target


def entropy(p) -> float:
    """Shannon entropy in nats with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=float)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def d_spec(s: Spectrum) -> float:
    """Shannon effective rank ``exp(H(p))`` of the occupancy distribution."""
    return float(np.exp(entropy(occupancy(s))))


def participation_ratio(s: Spectrum) -> float:
    p = occupancy(s)
    return float(1.0 / np.sum(p * p))


def thresholded_rank(s: Spectrum, tau: float) -> int:
    """Number of eigenvalues ``>= tau * lambda_1`` (exact comparison)."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    lam = s.eigenvalues
    if lam[0] <= 0:
        raise SpectrumError("lambda_1 must be positive")
    return int(np.count_nonzero(lam >= tau * lam[0]))


def min_adjacent_gap_rel(s: Spectrum) -> float:
    """Smallest gap between adjacent positive eigenvalues, relative to
    ``lambda_1``; ``inf`` when fewer than two are positive."""
    lam = s.eigenvalues[s.eigenvalues > 0]
    if len(lam) < 2:
        return float("inf")
    return float(np.min(lam[:-1] - lam[1:]) / lam[0])


# ---------------------------------------------------------------- prefixes

@dataclass(frozen=True, eq=False)
class PrefixKernel:
    k: int
    basis: np.ndarray
    prefix_eigenvalues: np.ndarray
    trace_target: float

    def dense(self) -> np.ndarray:
        return (self.basis * self.prefix_eigenvalues) @ self.basis.T

    def d_spec(self, renormalize: bool = True) -> float:
        """Effective rank of the prefix.

        With ``renormalize`` the retained eigenvalues are rescaled to the full
        trace budget first; otherwise ``p_i = lambda_i / N`` is used as is,
        leaving a sub-probability vector.
        """
        lam = self.prefix_eigenvalues
        if renormalize:
            return d_spec(Spectrum.normalized(lam, self.trace_target))
        return float(np.exp(entropy(lam / self.trace_target)))

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "eigenvalues": self.prefix_eigenvalues.tolist(),
            "d_spec_of_prefix": self.d_spec(renormalize=True),
            "d_spec_of_prefix_unrenormalized": self.d_spec(renormalize=False),
        }


def extract_prefix(basis, s: Spectrum, k: int, atol: float = 1e-8) -> PrefixKernel:
    """Top-``k`` eigenpair truncation ``U[:, :k] diag(lam[:k]) U[:, :k]^T``.

    ``basis`` columns must be orthonormal and ordered like ``s.eigenvalues``.
    """
    basis = np.asarray(basis, dtype=float)
    m = basis.shape[1]
    if m != len(s):
        raise ValueError(f"basis has {m} columns but spectrum has {len(s)} values")
    if not 1 <= k <= m:
        raise ValueError(f"prefix size {k} outside [1, {m}]")
    gram = basis.T @ basis
    if np.max(np.abs(gram - np.eye(m))) > atol:
        raise ValueError("basis columns are not orthonormal")
    return PrefixKernel(int(k), basis[:, :k].copy(), s.eigenvalues[:k].copy(), s.trace_target)


def mode_assignment(p: PrefixKernel) -> np.ndarray:
    """Dominant retained mode per node, 1-based; ties go to the lower mode."""
    return np.argmax(p.basis ** 2, axis=1) + 1


def soft_membership(p: PrefixKernel) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized squared loadings and a mask of rows that had zero mass
    (those get the uniform row)."""
    sq = p.basis ** 2
    tot = sq.sum(axis=1, keepdims=True)
    degenerate = tot[:, 0] <= 0
    pi = np.where(degenerate[:, None], 1.0 / p.k, sq / np.where(tot > 0, tot, 1.0))
    return pi, degenerate


# ---------------------------------------------------------------- gauge

def align_modes(reference, other) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Signed permutation that best maps the columns of ``other`` onto
    ``reference``.

    Returns ``(aligned, perm, signs)`` with ``aligned = other[:, perm] * signs``.
    """
    reference = np.asarray(reference, dtype=float)
    other = np.asarray(other, dtype=float)
    overlap = np.abs(reference.T @ other)
    _, perm = linear_sum_assignment(-overlap)
    aligned = other[:, perm]
    signs = np.sign(np.sum(reference * aligned, axis=0))
    signs[signs == 0] = 1.0
    return aligned * signs, perm, signs

"""Link-prediction metrics and the paired Wilcoxon signed-rank test."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

from .model import ModelParams, log_odds, mean_log_likelihood


@dataclass(frozen=True)
class ScoredPairs:
    positive_scores: np.ndarray
    negative_scores: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positive_scores, dtype=float).ravel()
        neg = np.asarray(self.negative_scores, dtype=float).ravel()
        if len(pos) == 0 or len(neg) == 0:
            raise ValueError("need at least one positive and one negative score")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "positive_scores", pos)
        object.__setattr__(self, "negative_scores", neg)


def auc_roc(s: ScoredPairs) -> float:
    """Mann-Whitney AUC; ties between a positive and a negative count 1/2."""
    pos, neg = s.positive_scores, s.negative_scores
    ranks = rankdata(np.concatenate([pos, neg]))
    n_pos = len(pos)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * len(neg)))


def auc_pr(s: ScoredPairs) -> float:
    """Average precision over descending score thresholds.

    Equal scores form one threshold group, so the result does not depend on
    the order of tied items.
    """
    scores = np.concatenate([s.positive_scores, s.negative_scores])
    labels = np.concatenate([np.ones(len(s.positive_scores)), np.zeros(len(s.negative_scores))])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    # last index of every tie group
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    tp = np.cumsum(labels)[ends]
    seen = ends + 1.0
    precision = tp / seen
    d_tp = np.diff(np.r_[0.0, tp])
    return float(np.sum(d_tp * precision) / len(s.positive_scores))


def test_ll(m: ModelParams, test_edges, test_non_edges) -> float:
    """Mean log-likelihood of held-out edges plus that of held-out non-edges."""
    test_edges = np.asarray(test_edges, dtype=np.int64).reshape(-1, 2)
    test_non_edges = np.asarray(test_non_edges, dtype=np.int64).reshape(-1, 2)
    if len(test_edges) == 0 or len(test_non_edges) == 0:
        raise ValueError("test sets must be nonempty")
    view = m.view()
    return mean_log_likelihood(log_odds(m, test_edges, view), log_odds(m, test_non_edges, view))


test_ll.__test__ = False  # keep pytest from collecting it


def gen_gap(train_nll: float, tll: float) -> float:
    """Train NLL plus test log-likelihood; lower is better."""
    return float(train_nll) + float(tll)


def evaluate(m: ModelParams, test_edges, test_non_edges, train_nll: float) -> dict:
    view = m.view()
    pos = log_odds(m, test_edges, view)
    neg = log_odds(m, test_non_edges, view)
    scored = ScoredPairs(pos, neg)
    tll = mean_log_likelihood(pos, neg)
    return {
        "auc_roc": auc_roc(scored),
        "auc_pr": auc_pr(scored),
        "tll": tll,
        "train_nll": float(train_nll),
        "gen_gap": gen_gap(train_nll, tll),
        "n_pos": int(len(pos)),
        "n_neg": int(len(neg)),
    }


# ---------------------------------------------------------------- Wilcoxon

EXACT_MAX_N = 20


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    w_plus: float
    w_minus: float
    n: int
    method: str


def _signed_rank_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments giving each value of ``2 * W+``."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    top = 0
    for r in doubled_ranks.tolist():
        counts[r:top + r + 1] = counts[r:top + r + 1] + counts[:top + 1]
        top += r
    return counts


def wilcoxon_signed_rank(differences, alternative: str = "two_sided",
                         method: str = "auto") -> WilcoxonResult:
    """Paired signed-rank test on per-pair differences.

    Exact zeros are dropped. ``statistic`` is ``min(W+, W-)`` with midranks of
    ``|d|``. ``alternative='greater'`` tests for positive location. The exact
    null distribution (all ``2^n`` sign flips, counted by convolution) is used
    for ``n <= 20``, else a normal approximation with tie-corrected variance
    and continuity correction.
    """
    if alternative not in ("two_sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    d = np.asarray(differences, dtype=float).ravel()
    if d.size == 0:
        raise ValueError("no differences given")
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError("all differences are zero")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "approx"

    if method == "exact":
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _signed_rank_counts(doubled)
        total = 2 ** n
        obs = int(round(2 * w_plus))
        p_ge = float(sum(counts[obs:]) / total)
        p_le = float(sum(counts[:obs + 1]) / total)
    elif method == "approx":
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
        sd = math.sqrt(var)
        p_ge = float(norm.sf((w_plus - mean - 0.5) / sd))
        p_le = float(norm.cdf((w_plus - mean + 0.5) / sd))
    else:
        raise ValueError(f"unknown method {method!r}")

    if alternative == "greater":
        p = p_ge
    elif alternative == "less":
        p = p_le
    else:
        p = min(1.0, 2.0 * min(p_ge, p_le))
    return WilcoxonResult(min(w_plus, w_minus), p, w_plus, w_minus, n, method)

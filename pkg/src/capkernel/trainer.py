"""Adam training loop with QR retraction of the orthonormal basis."""

from __future__ import annotations

import csv
import logging
import zlib
from collections.abc import Callable
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .graph import Graph, sample_negatives
from .model import ModelParams, NumericalError, init_params, log_likelihood, orthonormalize
from .objective import ObjectiveConfig, objective_and_gradients
from .spectral import entropy

logger = logging.getLogger(__name__)

POSITIVE_BATCH_CAP = 2 ** 15


def derive_seed(seed: int, tag: str) -> np.random.SeedSequence:
    """Independent stream for ``(seed, tag)``; stable across processes."""
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode())])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    iterations: int = 6000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    neg_ratio: int = 5
    reg_weight: float = 1e-4
    seed: int = 0
    probe_mode: bool = False
    probe_window: int = 200
    probe_rel_tol: float = 0.005
    probe_stable_windows: int = 2  # consecutive stable window-mean comparisons required
    dspec_log_every: int = 50

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.probe_rel_tol <= 0:
            raise ValueError("probe_rel_tol must be > 0")
        if self.probe_window < 1 or self.dspec_log_every < 1:
            raise ValueError("probe_window and dspec_log_every must be >= 1")
        if self.probe_stable_windows < 1:
            raise ValueError("probe_stable_windows must be >= 1")

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitResult:
    params: ModelParams | None
    d_spec_trace: list[tuple[int, float]]
    final_d_spec: float
    train_nll: float
    iterations_run: int
    seed: int
    eta: float
    rank_cap: int = 0
    loss_log: list[tuple[int, float, float]] = field(default_factory=list)
    stopped_early: bool = False

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "d_spec"])
            for it, loss, ds in self.loss_log:
                w.writerow([it, repr(loss), repr(ds)])


class Adam:
    """Bias-corrected Adam over a dict of named arrays."""

    def __init__(self, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return the additive update for each parameter block."""
        self.t += 1
        out = {}
        for key, g in grads.items():
            g = np.asarray(g, dtype=float)
            if key not in self.m:
                self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            out[key], self.m[key], self.v[key] = adam_step(
                self.m[key], self.v[key], g, self.lr, self.t, self.beta1, self.beta2, self.eps)
        return out


def adam_step(m, v, grad, lr, t, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update; returns ``(delta, m_new, v_new)``."""
    if t < 1:
        raise ValueError("t must be >= 1")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return -lr * m_hat / (np.sqrt(v_hat) + eps), m, v


def _positive_batch(g: Graph, rng: np.random.Generator) -> np.ndarray:
    if g.n_edges <= POSITIVE_BATCH_CAP:
        return g.edges
    return g.edges[rng.choice(g.n_edges, size=POSITIVE_BATCH_CAP, replace=False)]


def training_nll(m: ModelParams, g: Graph, neg_ratio: int, seed: int) -> float:
    """Equal-weight NLL on all training edges against a fixed seed-derived
    negative sample."""
    rng = np.random.default_rng(derive_seed(seed, "train-nll"))
    negs = sample_negatives(g, neg_ratio * g.n_edges, seed=rng)
    return -log_likelihood(m, g.edges, negs)


def _d_spec_of(params: ModelParams) -> float:
    # O(r) read-off; orthonormality is asserted at the logging cadence
    s2 = params.sigma ** 2
    return float(np.exp(entropy(s2 / s2.sum())))


def _plateaued(history: np.ndarray, t: int, win: int, n_cmp: int, rel_tol: float) -> bool:
    """Whether the last ``n_cmp`` pairs of adjacent ``win``-step window means
    of ``history[:t + 1]`` all differ by less than ``rel_tol`` relative.

    A single comparison can be fooled by a trough, where the windows either
    side of the minimum have similar means; chaining comparisons avoids that.
    """
    means = [history[t - (k + 1) * win + 1:t - k * win + 1].mean() for k in range(n_cmp + 1)]
    return all(abs(means[k] - means[k + 1]) / means[k + 1] < rel_tol for k in range(n_cmp))


def fit(g: Graph, eta: float, rank_cap: int, cfg: TrainConfig = TrainConfig(),
        init: ModelParams | None = None, callback: Callable[[int, ModelParams], None] | None = None,
        seed_tag: str = "") -> FitResult:
    """Minimize the entropy-regularized objective on ``g``.

    Deterministic given ``cfg.seed`` (and ``seed_tag``, which lets callers
    derive fresh but reproducible initializations from the same seed).
    """
    if rank_cap < 1 or rank_cap > g.n_nodes:
        raise ValueError(f"rank_cap must lie in [1, {g.n_nodes}], got {rank_cap}")
    if g.n_edges == 0:
        raise ValueError("training graph has no edges")
    obj = ObjectiveConfig(eta=float(eta), reg_weight=cfg.reg_weight, neg_ratio=cfg.neg_ratio)
    params = init.copy() if init is not None else init_params(
        g, rank_cap, np.random.default_rng(derive_seed(cfg.seed, "init" + seed_tag)))
    rng = np.random.default_rng(derive_seed(cfg.seed, "batches" + seed_tag))
    opt = Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    history = np.empty(cfg.iterations + 1)
    history[0] = params.view().d_spec()  # also asserts orthonormality
    trace = [(0, float(history[0]))]
    loss_log = []
    stopped = False
    win = cfg.probe_window
    n_cmp = cfg.probe_stable_windows
    t = 0
    for t in range(1, cfg.iterations + 1):
        pos = _positive_batch(g, rng)
        neg = sample_negatives(g, cfg.neg_ratio * len(pos), seed=rng)
        loss, grads = objective_and_gradients(params, obj, pos, neg)
        upd = opt.step({"q": grads.d_q, "sigma": grads.d_sigma_raw,
                        "a": grads.d_offsets, "beta": np.array(grads.d_beta_raw)})
        params.q_basis = orthonormalize(params.q_basis + upd["q"])
        params.sigma_raw = params.sigma_raw + upd["sigma"]
        params.offsets = params.offsets + upd["a"]
        params.beta_raw = float(params.beta_raw + upd["beta"])
        if not params.is_finite():
            sigma = params.sigma
            raise NumericalError(
                f"non-finite parameters at iteration {t} (eta={eta}, "
                f"sigma min={np.nanmin(sigma):.3e} max={np.nanmax(sigma):.3e})")
        history[t] = _d_spec_of(params)
        if callback is not None:
            callback(t, params)
        if t % cfg.dspec_log_every == 0 or t == cfg.iterations:
            params.check_orthonormal()
            trace.append((t, float(history[t])))
            loss_log.append((t, float(loss), float(history[t])))
        if cfg.probe_mode and t >= (n_cmp + 1) * win and _plateaued(history, t, win, n_cmp,
                                                                 cfg.probe_rel_tol):
            stopped = True
            if trace[-1][0] != t:
                trace.append((t, float(history[t])))
                loss_log.append((t, float(loss), float(history[t])))
            break

    params.check_orthonormal()
    return FitResult(
        params=params,
        d_spec_trace=trace,
        final_d_spec=float(history[t]),
        train_nll=training_nll(params, g, cfg.neg_ratio, cfg.seed),
        iterations_run=t,
        seed=cfg.seed,
        eta=float(eta),
        rank_cap=rank_cap,
        loss_log=loss_log,
        stopped_early=stopped,
    )

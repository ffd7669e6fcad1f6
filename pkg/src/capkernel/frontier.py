"""Adaptive cold-start eta sweeps, structural-event flags and aggregation."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from collections.abc import Callable
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .evaluation import evaluate
from .graph import EdgeSplit
from .spectral import Spectrum, min_adjacent_gap_rel, thresholded_rank
from .trainer import FitResult, TrainConfig, fit

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SweepConfig:
    eta_min: float = -0.25
    eta_max: float = 0.25
    rank_caps: tuple[int, ...] = (64, 128, 256)
    seeds: tuple[int, ...] = (0, 1, 2)
    step_init: float = 0.02
    step_min: float = 1e-3
    step_max: float = 0.05
    upper_move_threshold: float = 0.15
    lower_move_threshold: float = 0.03
    event_tau: float = 0.01
    event_gap_rel: float = 1e-3
    log_scale_moves: bool = False  # measure moves as |log d1 - log d0|

    def __post_init__(self):
        if not self.eta_min < self.eta_max:
            raise ValueError("eta_min must be < eta_max")
        if not self.lower_move_threshold < self.upper_move_threshold:
            raise ValueError("lower_move_threshold must be < upper_move_threshold")
        if not 0 < self.step_min <= self.step_init <= self.step_max:
            raise ValueError("need 0 < step_min <= step_init <= step_max")
        if not self.rank_caps:
            raise ValueError("rank_caps is empty")
        if not self.seeds:
            raise ValueError("seeds is empty")


@dataclass
class FrontierPoint:
    eta: float
    rank_cap: int
    seed: int
    achieved_dspec: float = math.nan
    test_auc_roc: float = math.nan
    test_auc_pr: float = math.nan
    test_ll: float = math.nan
    train_nll: float = math.nan
    support_k_tau: int = -1
    min_adjacent_gap_rel: float = math.nan
    event_flags: frozenset = field(default_factory=frozenset)
    iterations: int = 0
    error: str = ""

    def row(self) -> dict:
        d = asdict(self)
        d["event_flags"] = ";".join(sorted(self.event_flags))
        return d


FIELDS = list(FrontierPoint(0.0, 0, 0).row())


def detect_events(prev: Spectrum | None, curr: Spectrum, tau: float = 0.01,
                  gap_rel: float = 1e-3) -> frozenset:
    """``support_change`` when the thresholded rank differs from ``prev``;
    ``near_degeneracy`` when adjacent positive eigenvalues of ``curr`` are
    closer than ``gap_rel * lambda_1``."""
    flags = set()
    if prev is not None and thresholded_rank(prev, tau) != thresholded_rank(curr, tau):
        flags.add("support_change")
    if min_adjacent_gap_rel(curr) < gap_rel:
        flags.add("near_degeneracy")
    return frozenset(flags)


def next_step(step: float, prev_d: float | None, d: float, cfg: SweepConfig) -> float:
    if prev_d is None or not np.isfinite(d):
        return step
    if cfg.log_scale_moves:
        move = abs(math.log(d) - math.log(prev_d))
    else:
        move = abs(d - prev_d) / prev_d
    if move > cfg.upper_move_threshold:
        return max(step / 2.0, cfg.step_min)
    if move < cfg.lower_move_threshold:
        return min(step * 2.0, cfg.step_max)
    return step


def eta_path(response: Callable[[float], float], cfg: SweepConfig) -> list[tuple[float, float, float]]:
    """Walk the adaptive grid against ``response``; returns ``(eta, d, step)``
    triples in probe order. Zero and ``eta_max`` are always visited."""
    out = []
    eta, step, prev_d = cfg.eta_min, cfg.step_init, None
    must = sorted({0.0, cfg.eta_max} if cfg.eta_min < 0 < cfg.eta_max else {cfg.eta_max})
    while True:
        d = response(eta)
        step = next_step(step, prev_d, d, cfg)
        out.append((eta, d, step))
        if np.isfinite(d):
            prev_d = d
        if eta >= cfg.eta_max:
            break
        nxt = eta + step
        for m in must:
            if eta < m <= nxt:
                nxt = m
                break
        eta = min(nxt, cfg.eta_max)
    return out


def _trajectory(split: EdgeSplit, cfg: SweepConfig, tcfg: TrainConfig, rank_cap: int, seed: int,
                fit_fn=fit) -> list[FrontierPoint]:
    points: list[FrontierPoint] = []
    state = {"prev_spec": None}
    cfg_seed = tcfg.with_(seed=seed)

    def response(eta: float) -> float:
        pt = FrontierPoint(eta=float(eta), rank_cap=rank_cap, seed=seed)
        try:
            res: FitResult = fit_fn(split.train_graph, eta, rank_cap, cfg_seed)
            spec = res.params.view().spectrum()
            metrics = evaluate(res.params, split.test_edges, split.test_non_edges, res.train_nll) \
                if len(split.test_edges) else {}
            pt.achieved_dspec = res.final_d_spec
            pt.test_auc_roc = metrics.get("auc_roc", math.nan)
            pt.test_auc_pr = metrics.get("auc_pr", math.nan)
            pt.test_ll = metrics.get("tll", math.nan)
            pt.train_nll = res.train_nll
            pt.support_k_tau = thresholded_rank(spec, cfg.event_tau)
            pt.min_adjacent_gap_rel = min_adjacent_gap_rel(spec)
            pt.event_flags = detect_events(state["prev_spec"], spec, cfg.event_tau, cfg.event_gap_rel)
            pt.iterations = res.iterations_run
            state["prev_spec"] = spec
        except Exception as exc:  # a failed probe is recorded, the sweep goes on
            logger.error("probe failed (r=%d seed=%d eta=%+.4f): %s", rank_cap, seed, eta, exc)
            pt.error = f"{type(exc).__name__}: {exc}"
        points.append(pt)
        return pt.achieved_dspec

    eta_path(response, cfg)
    return points


def _run_trajectory(args):
    return _trajectory(*args)


def sweep(split: EdgeSplit, cfg: SweepConfig = SweepConfig(), tcfg: TrainConfig = TrainConfig(),
          jobs: int = 1, fit_fn=fit) -> list[FrontierPoint]:
    """Cold-start adaptive sweep for every ``(rank_cap, seed)`` trajectory.

    Output order is rank caps, then seeds, then probe order, regardless of
    ``jobs``.
    """
    tasks = [(split, cfg, tcfg, r, s, fit_fn) for r in cfg.rank_caps for s in cfg.seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_trajectory, tasks))
    else:
        results = [_run_trajectory(t) for t in tasks]
    return [p for traj in results for p in traj]


def aggregate_frontier(points: list[FrontierPoint], eta_decimals: int = 9):
    """Mean and sample std (ddof=1, 0 for singletons) of achieved d_spec and
    AUC per ``(rank_cap, eta)``, plus the per-rank peak by mean AUC."""
    if not points:
        raise ValueError("no points to aggregate")
    groups = defaultdict(list)
    for p in points:
        if p.error:
            continue
        groups[(p.rank_cap, round(p.eta, eta_decimals))].append(p)

    def stats(vals):
        vals = np.asarray(vals, dtype=float)
        return float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0

    records = []
    for (r, eta), pts in sorted(groups.items()):
        d_mean, d_std = stats([p.achieved_dspec for p in pts])
        a_mean, a_std = stats([p.test_auc_roc for p in pts])
        records.append({"rank_cap": r, "eta": eta, "n": len(pts), "dspec_mean": d_mean,
                        "dspec_std": d_std, "auc_mean": a_mean, "auc_std": a_std})
    peaks = {}
    for rec in records:
        best = peaks.get(rec["rank_cap"])
        if np.isfinite(rec["auc_mean"]) and (best is None or rec["auc_mean"] > best["auc_mean"]):
            peaks[rec["rank_cap"]] = rec
    peaks = {r: {"eta": rec["eta"], "dspec": rec["dspec_mean"], "auc": rec["auc_mean"]}
             for r, rec in sorted(peaks.items())}
    return records, peaks


def write_points_csv(path, points: list[FrontierPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS)
        w.writeheader()
        for p in points:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in p.row().items()})


def write_aggregate_csv(path, records: list[dict]) -> None:
    cols = ["rank_cap", "eta", "n", "dspec_mean", "dspec_std", "auc_mean", "auc_std"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for rec in records:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items()})

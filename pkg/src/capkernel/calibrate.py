"""Calibrate the entropy weight so a fit lands on a target effective rank.

The realized effective rank is treated as a monotone response of ``eta``:
anchor at ``eta = 0``, expand geometrically in the direction that moves
toward the target until the target is bracketed, bisect, then retrain the
chosen ``eta`` from a fresh initialization at the full budget.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

from .graph import Graph
from .trainer import FitResult, TrainConfig, fit

logger = logging.getLogger(__name__)

FitFn = Callable[..., FitResult]

PROBE_NOISE_REL = 0.02


class CalibrationError(RuntimeError):
    def __init__(self, message: str, probes=None, bracket=None, nearest=None):
        super().__init__(message)
        self.probes = probes or []
        self.bracket = bracket
        self.nearest = nearest


@dataclass(frozen=True)
class CalibrationConfig:
    target_dspec: float
    rel_tol: float = 0.02
    eta_init_step: float = 0.01
    eta_max_abs: float = 4.0
    expansion_factor: float = 2.0
    max_probes: int = 40
    bidirectional: bool = False      # expand both ways from the start
    probe_full_budget: bool = False  # probes without early stopping

    def __post_init__(self):
        if self.target_dspec <= 1:
            raise ValueError("target_dspec must exceed 1")
        if self.rel_tol <= 0 or self.eta_init_step <= 0:
            raise ValueError("rel_tol and eta_init_step must be positive")
        if self.expansion_factor <= 1:
            raise ValueError("expansion_factor must exceed 1")
        if self.max_probes < 1:
            raise ValueError("max_probes must be >= 1")


@dataclass
class Probe:
    eta: float
    achieved_dspec: float
    iterations: int

    def as_tuple(self):
        return (self.eta, self.achieved_dspec, self.iterations)


@dataclass
class CalibrationResult:
    eta_star: float
    achieved_dspec: float
    probe_log: list[Probe]
    final_fit: FitResult
    fallback_used: bool
    target: float
    probe_dspec: float
    within_tolerance: bool
    bracket: tuple[float, float] | None = None
    bisection_probes: int = 0
    final_eta_gap: float | None = None
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "target": self.target,
            "eta_star": self.eta_star,
            "achieved": self.achieved_dspec,
            "probe_achieved": self.probe_dspec,
            "within_tolerance": self.within_tolerance,
            "probes": [{"eta": p.eta, "achieved_dspec": p.achieved_dspec,
                        "iterations": p.iterations} for p in self.probe_log],
            "fallback_used": self.fallback_used,
            "bracket": list(self.bracket) if self.bracket else None,
            "bisection_probes": self.bisection_probes,
            "warnings": list(self.warnings),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n")


def probe_count_bound(bracket_width: float, eta_precision: float) -> int:
    """Bisection steps needed to shrink ``bracket_width`` to ``eta_precision``."""
    if bracket_width <= 0 or eta_precision <= 0:
        raise ValueError("both arguments must be positive")
    return max(0, math.ceil(math.log2(bracket_width / eta_precision) - 1e-12))


class _Prober:
    def __init__(self, g, rank_cap, ccfg, tcfg, fit_fn):
        self.g, self.rank_cap, self.ccfg = g, rank_cap, ccfg
        self.cfg = tcfg.with_(probe_mode=not ccfg.probe_full_budget)
        self.fit_fn = fit_fn
        self.log: list[Probe] = []
        self.cache: dict[float, float] = {}

    def __call__(self, eta: float) -> float:
        eta = float(eta)
        if eta in self.cache:
            return self.cache[eta]
        if len(self.log) >= self.ccfg.max_probes:
            raise CalibrationError("probe budget exhausted", probes=self.log,
                                   nearest=self._nearest())
        res = self.fit_fn(self.g, eta, self.rank_cap, self.cfg)
        self.log.append(Probe(eta, float(res.final_d_spec), int(res.iterations_run)))
        self.cache[eta] = float(res.final_d_spec)
        logger.info("probe eta=%+.6f d_spec=%.4f", eta, res.final_d_spec)
        return self.cache[eta]

    def _nearest(self):
        if not self.log:
            return None
        t = self.ccfg.target_dspec
        best = min(self.log, key=lambda p: abs(p.achieved_dspec - t))
        return best.as_tuple()

    def accepted(self, d: float) -> bool:
        return abs(d - self.ccfg.target_dspec) / self.ccfg.target_dspec <= self.ccfg.rel_tol


def _find_bracket(points: dict[float, float], target: float):
    """Adjacent probed etas whose responses straddle the target."""
    etas = sorted(points)
    for lo, hi in zip(etas, etas[1:]):
        if (points[lo] - target) * (points[hi] - target) < 0:
            return lo, hi
    return None


def calibrate_eta(g: Graph, rank_cap: int, ccfg: CalibrationConfig,
                  tcfg: TrainConfig = TrainConfig(), fit_fn: FitFn = fit) -> CalibrationResult:
    """Search ``eta`` so that the retrained fit has effective rank within
    ``rel_tol`` of ``ccfg.target_dspec``.

    ``fit_fn`` has the signature of :func:`capkernel.trainer.fit`; tests swap in
    a cheap response double.
    """
    target = ccfg.target_dspec
    if not 1 < target <= rank_cap:
        raise ValueError(f"target {target} must lie in (1, {rank_cap}]")
    probe = _Prober(g, rank_cap, ccfg, tcfg, fit_fn)
    fallback = False
    bracket = None
    eta_star = None
    n_bisect = 0
    gap = None

    d0 = probe(0.0)
    if probe.accepted(d0):
        eta_star = 0.0
    else:
        direction = 1.0 if d0 < target else -1.0
        step = ccfg.eta_init_step
        prev_eta, prev_d = 0.0, d0
        last_step = 0.0
        while eta_star is None and bracket is None:
            if step > ccfg.eta_max_abs and last_step < ccfg.eta_max_abs:
                step = ccfg.eta_max_abs  # last expansion lands exactly on the cap
            elif step > ccfg.eta_max_abs:
                raise CalibrationError(
                    f"target {target} not bracketed within |eta| <= {ccfg.eta_max_abs}",
                    probes=probe.log, bracket=(min(probe.cache), max(probe.cache)),
                    nearest=probe._nearest())
            last_step = step
            sides = (direction, -direction) if (fallback or ccfg.bidirectional) else (direction,)
            for sgn in sides:
                eta = sgn * step
                d = probe(eta)
                if probe.accepted(d):
                    eta_star = eta
                    break
                if sgn == direction and not fallback and not ccfg.bidirectional:
                    # monotone guard: response moved away from the target
                    moved = (d - prev_d) * direction
                    if moved < -PROBE_NOISE_REL * prev_d:
                        fallback = True
                        logger.warning("monotone guard tripped at eta=%+.4f (d_spec %.3f -> %.3f); "
                                       "switching to bidirectional search", eta, prev_d, d)
                    prev_eta, prev_d = eta, d
            if eta_star is None:
                bracket = _find_bracket(probe.cache, target)
                step *= ccfg.expansion_factor

        if eta_star is None:
            lo, hi = bracket
            g_lo = probe.cache[lo] - target
            while True:
                mid = 0.5 * (lo + hi)
                d = probe(mid)
                n_bisect += 1
                if probe.accepted(d):
                    eta_star = mid
                    gap = 0.5 * (hi - lo)
                    break
                if (d - target) * g_lo < 0:
                    hi = mid
                else:
                    lo, g_lo = mid, d - target

    probe_d = probe.cache[eta_star]
    final_cfg = tcfg.with_(probe_mode=False)
    final = fit_fn(g, eta_star, rank_cap, final_cfg, seed_tag="/final")
    achieved = float(final.final_d_spec)
    ok = abs(achieved - target) / target <= ccfg.rel_tol
    warnings = []
    if not ok:
        warnings.append(f"final retrain d_spec {achieved:.4f} outside tolerance of target {target}")
    if abs(achieved - probe_d) / target > 2 * ccfg.rel_tol:
        warnings.append(f"probe ({probe_d:.4f}) and retrain ({achieved:.4f}) disagree by more "
                        f"than {2 * ccfg.rel_tol:.0%} of target")
    if fallback:
        warnings.append("monotone guard fallback used")
    for w in warnings:
        logger.warning(w)
    return CalibrationResult(
        eta_star=float(eta_star),
        achieved_dspec=achieved,
        probe_log=probe.log,
        final_fit=final,
        fallback_used=fallback,
        target=float(target),
        probe_dspec=probe_d,
        within_tolerance=ok,
        bracket=bracket,
        bisection_probes=n_bisect,
        final_eta_gap=gap,
        warnings=warnings,
    )

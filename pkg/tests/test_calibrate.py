import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capkernel.calibrate import (CalibrationConfig, CalibrationError, calibrate_eta,
                                 probe_count_bound)
from capkernel.trainer import FitResult, TrainConfig


class ResponseDouble:
    """Stands in for ``fit``: the achieved d_spec is a closed-form function of eta."""

    def __init__(self, response, final_response=None):
        self.response = response
        self.final_response = final_response or response
        self.calls = []

    def __call__(self, g, eta, rank_cap, cfg, seed_tag=""):
        final = seed_tag == "/final"
        self.calls.append((eta, cfg.probe_mode, seed_tag))
        d = (self.final_response if final else self.response)(eta)
        return FitResult(params=None, d_spec_trace=[], final_d_spec=float(d), train_nll=0.0,
                         iterations_run=cfg.iterations, seed=cfg.seed, eta=eta, rank_cap=rank_cap)


def run(double, target, rank_cap=64, **kw):
    return calibrate_eta(None, rank_cap, CalibrationConfig(target_dspec=target, **kw),
                         TrainConfig(iterations=10), fit_fn=double)


@pytest.mark.parametrize("w,delta,expected", [(1.0, 2 ** -10, 10), (0.5, 0.01, 6), (0.3, 0.3, 0)])
def test_probe_count_bound(w, delta, expected):
    assert probe_count_bound(w, delta) == expected


def test_anchor_accepted():
    double = ResponseDouble(lambda eta: 32.0 * math.exp(eta))
    res = run(double, 32.3)
    assert res.eta_star == 0.0 and len(res.probe_log) == 1
    assert double.calls == [(0.0, True, ""), (0.0, False, "/final")]


def test_exponential_response_closed_form_root():
    double = ResponseDouble(lambda eta: 32.0 * math.exp(eta))
    res = run(double, 40.0)
    root = math.log(40 / 32)
    assert abs(res.achieved_dspec - 40) / 40 <= 0.02
    # tolerance band in eta around the closed-form root
    assert math.log(40 * 0.98 / 32) <= res.eta_star <= math.log(40 * 1.02 / 32)
    assert res.eta_star == pytest.approx(root, abs=0.02)
    lo, hi = res.bracket
    assert res.bisection_probes <= probe_count_bound(hi - lo, res.final_eta_gap)
    assert not res.fallback_used and res.within_tolerance
    assert res.to_json()["eta_star"] == res.eta_star


@settings(max_examples=60, deadline=None)
@given(target=st.floats(2.5, 63.5), steep=st.floats(0.5, 20.0), shift=st.floats(-1.0, 1.0))
def test_monotone_double_converges_within_bound(target, steep, shift):
    r = 64
    resp = lambda eta: 1 + (r - 1) / (1 + math.exp(-(steep * eta + shift)))
    if not resp(-4) * 1.02 < target < resp(4) * 0.98:
        return
    res = run(ResponseDouble(resp), target, rank_cap=r)
    assert abs(res.achieved_dspec - target) / target <= 0.02
    d0 = resp(0.0)
    if abs(d0 - target) / target > 0.02:
        assert np.sign(res.eta_star) == np.sign(target - d0)
    if res.bracket is not None and res.final_eta_gap:
        lo, hi = res.bracket
        assert res.bisection_probes <= probe_count_bound(hi - lo, res.final_eta_gap)


def test_downward_search():
    res = run(ResponseDouble(lambda eta: 32.0 * math.exp(eta)), 20.0)
    assert res.eta_star < 0
    assert abs(res.achieved_dspec - 20) / 20 <= 0.02


def test_unreachable_target_reports_nearest():
    double = ResponseDouble(lambda eta: 10 + 0.1 * eta)
    with pytest.raises(CalibrationError, match="not bracketed") as info:
        run(double, 30.0)
    err = info.value
    assert err.nearest is not None and err.nearest[1] == pytest.approx(10.4) and err.nearest[0] == 4.0
    assert err.bracket[1] >= 4.0 - 1e-9


def test_probe_budget_exhausted():
    with pytest.raises(CalibrationError, match="budget"):
        run(ResponseDouble(lambda eta: 32.0 * math.exp(eta)), 60.0, max_probes=3)


def test_monotone_guard_falls_back_and_logs(caplog):
    # response dips on the first positive step, then the target lies at negative eta
    def resp(eta):
        return 20.0 - 100.0 * eta if eta > 0 else 20.0 - 40 * eta
    with caplog.at_level(logging.WARNING, logger="capkernel.calibrate"):
        res = run(ResponseDouble(resp), 24.0)
    assert res.fallback_used
    assert any("monotone guard" in r.message for r in caplog.records)
    assert abs(res.achieved_dspec - 24) / 24 <= 0.02


def test_retrain_checked_not_probe(caplog):
    double = ResponseDouble(lambda eta: 32.0 * math.exp(eta), final_response=lambda eta: 50.0)
    with caplog.at_level(logging.WARNING, logger="capkernel.calibrate"):
        res = run(double, 40.0)
    assert not res.within_tolerance
    assert any("outside tolerance" in w for w in res.warnings)
    assert any("disagree" in w for w in res.warnings)
    assert abs(res.probe_dspec - 40) / 40 <= 0.02


def test_bidirectional_and_full_budget_flags():
    double = ResponseDouble(lambda eta: 32.0 * math.exp(eta))
    res = run(double, 40.0, bidirectional=True, probe_full_budget=True, rel_tol=0.05)
    assert all(not probe_mode for _, probe_mode, _ in double.calls)
    assert any(eta < 0 for eta, _, _ in double.calls)
    assert abs(res.achieved_dspec - 40) / 40 <= 0.05


@pytest.mark.parametrize("kw", [dict(target_dspec=1.0), dict(target_dspec=5, rel_tol=0),
                                dict(target_dspec=5, expansion_factor=1.0),
                                dict(target_dspec=5, max_probes=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        CalibrationConfig(**kw)


def test_target_above_rank_cap():
    with pytest.raises(ValueError):
        run(ResponseDouble(lambda eta: 3.0), 10.0, rank_cap=8)

"""Command-line front end. Every command writes into its own ``--out``
directory, including a ``manifest.json`` with the resolved configuration and
sha256 hashes of inputs and artifacts.

Exit codes: 0 success, 2 usage, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .calibrate import CalibrationConfig, CalibrationError, calibrate_eta
from .evaluation import evaluate
from .frontier import SweepConfig, aggregate_frontier, sweep, write_aggregate_csv, write_points_csv
from .graph import EdgeSplit, GraphError, load_edge_list, split_edges
from .model import NumericalError, load_checkpoint, save_checkpoint
from .spectral import extract_prefix, mode_assignment
from .study import FitRunner, run_study
from .trainer import TrainConfig, fit

logger = logging.getLogger("capkernel")

SEED_ENV = "SPECTRA_SEED"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    return vals


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _write_manifest(out: Path, command: str, config: dict, inputs: list[str], artifacts: list[str]):
    _write_json(out / "manifest.json", {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "artifacts": {name: _sha256(out / name) for name in sorted(artifacts)},
    })


def _train_config(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, iterations=args.iters, neg_ratio=args.neg_ratio,
                       reg_weight=args.reg_weight, seed=args.seed)


def _load_split(path) -> tuple[EdgeSplit, list[str] | None]:
    payload = json.loads(Path(path).read_text())
    return EdgeSplit.from_json(payload), payload.get("node_labels")


def _check_rank_cap(rank_cap: int, n_nodes: int) -> None:
    if not 1 <= rank_cap <= n_nodes:
        raise UsageError(f"--rank-cap {rank_cap} must lie in [1, {n_nodes}]")


# ---------------------------------------------------------------- commands

def cmd_split(args, out: Path) -> None:
    g, labels = load_edge_list(args.edges, fmt=args.format)
    sp = split_edges(g, holdout_fraction=args.fraction, seed=args.seed)
    payload = sp.to_json()
    payload["node_labels"] = labels
    _write_json(out / "split.json", payload)
    logger.info("held out %d edges (%.4f of %d)", len(sp.test_edges), sp.achieved_fraction, g.n_edges)
    _write_manifest(out, "split", {"fraction": args.fraction, "seed": args.seed, "format": args.format},
                    [args.edges], ["split.json"])


def cmd_train(args, out: Path) -> None:
    sp, labels = _load_split(args.split)
    _check_rank_cap(args.rank_cap, sp.train_graph.n_nodes)
    tcfg = _train_config(args)
    res = fit(sp.train_graph, args.eta, args.rank_cap, tcfg)
    report = evaluate(res.params, sp.test_edges, sp.test_non_edges, res.train_nll)
    report.update(eta=args.eta, rank_cap=args.rank_cap, d_spec=res.final_d_spec,
                  eigenvalues=res.params.view().eigenvalues.tolist(),
                  iterations_run=res.iterations_run)
    save_checkpoint(out / "checkpoint.json", res.params, seed=args.seed,
                    iteration=res.iterations_run, node_labels=labels,
                    extra={"eta": args.eta})
    _write_json(out / "report.json", report)
    res.write_log(out / "train_log.csv")
    logger.info("auc_roc=%.4f d_spec=%.4f", report["auc_roc"], res.final_d_spec)
    config = {"eta": args.eta, "rank_cap": args.rank_cap, "train": tcfg.to_dict()}
    _write_manifest(out, "train", config, [args.split],
                    ["checkpoint.json", "report.json", "train_log.csv"])


def cmd_calibrate(args, out: Path) -> None:
    sp, labels = _load_split(args.split)
    _check_rank_cap(args.rank_cap, sp.train_graph.n_nodes)
    if not 1 < args.target_dspec <= args.rank_cap:
        raise UsageError(f"--target-dspec must lie in (1, rank_cap={args.rank_cap}]")
    tcfg = _train_config(args)
    ccfg = CalibrationConfig(target_dspec=args.target_dspec, rel_tol=args.tau,
                             max_probes=args.max_probes, bidirectional=args.bidirectional,
                             probe_full_budget=args.full_budget_probes)
    cal = calibrate_eta(sp.train_graph, args.rank_cap, ccfg, tcfg)
    final = cal.final_fit
    report = evaluate(final.params, sp.test_edges, sp.test_non_edges, final.train_nll)
    report.update(eta=cal.eta_star, rank_cap=args.rank_cap, d_spec=cal.achieved_dspec)
    cal.save(out / "calibration.json")
    _write_json(out / "report.json", report)
    save_checkpoint(out / "checkpoint.json", final.params, seed=args.seed,
                    iteration=final.iterations_run, node_labels=labels,
                    extra={"eta": cal.eta_star})
    logger.info("eta*=%+.5f achieved d_spec=%.4f in %d probes", cal.eta_star,
                cal.achieved_dspec, len(cal.probe_log))
    config = {"rank_cap": args.rank_cap, "calibration": ccfg.__dict__, "train": tcfg.to_dict()}
    _write_manifest(out, "calibrate", config, [args.split],
                    ["calibration.json", "report.json", "checkpoint.json"])


def cmd_sweep(args, out: Path) -> None:
    if not args.rank_caps:
        raise UsageError("--rank-caps is empty")
    if not args.seeds:
        raise UsageError("--seeds is empty")
    sp, _ = _load_split(args.split)
    for r in args.rank_caps:
        _check_rank_cap(r, sp.train_graph.n_nodes)
    try:
        scfg = SweepConfig(eta_min=args.eta_min, eta_max=args.eta_max,
                           rank_caps=tuple(args.rank_caps), seeds=tuple(args.seeds),
                           step_init=args.step)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    tcfg = _train_config(args).with_(probe_mode=args.probe_mode)
    points = sweep(sp, scfg, tcfg, jobs=args.jobs)
    records, peaks = aggregate_frontier(points)
    write_points_csv(out / "frontier.csv", points)
    write_aggregate_csv(out / "aggregate.csv", records)
    _write_json(out / "peaks.json", {str(r): v for r, v in peaks.items()})
    n_err = sum(bool(p.error) for p in points)
    logger.info("%d probes, %d failed", len(points), n_err)
    config = {"sweep": {k: list(v) if isinstance(v, tuple) else v for k, v in scfg.__dict__.items()},
              "train": tcfg.to_dict()}
    _write_manifest(out, "sweep", config, [args.split],
                    ["frontier.csv", "aggregate.csv", "peaks.json"])


def cmd_prefix(args, out: Path) -> None:
    m, payload = load_checkpoint(args.checkpoint)
    if not args.k:
        raise UsageError("--k is empty")
    for k in args.k:
        if not 1 <= k <= m.rank_cap:
            raise UsageError(f"prefix size {k} must lie in [1, rank_cap={m.rank_cap}]")
    labels = payload.get("node_labels") or [str(i) for i in range(m.n_nodes)]
    view = m.view()
    spec = view.spectrum()
    model_d = view.d_spec()
    artifacts = []
    for k in sorted(set(args.k)):
        pk = extract_prefix(view.eigenbasis, spec, k, atol=1e-6)
        data = pk.to_json()
        data["model_d_spec"] = model_d
        data["basis"] = pk.basis.tolist()
        _write_json(out / f"prefix_k{k}.json", data)
        with open(out / f"modes_k{k}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_label", "mode"])
            w.writerows(zip(labels, mode_assignment(pk).tolist()))
        artifacts += [f"prefix_k{k}.json", f"modes_k{k}.csv"]
    _write_manifest(out, "prefix", {"k": sorted(set(args.k))}, [args.checkpoint], artifacts)


def cmd_overparam(args, out: Path) -> None:
    if not args.rank_caps or not args.targets:
        raise UsageError("--targets and --rank-caps must be nonempty")
    sp, _ = _load_split(args.split)
    for r in args.rank_caps:
        _check_rank_cap(r, sp.train_graph.n_nodes)
    for t in args.targets:
        _check_rank_cap(int(t), sp.train_graph.n_nodes)
        if t <= 1:
            raise UsageError("targets must exceed 1")
    if args.n_seeds < 1:
        raise UsageError("--n-seeds must be >= 1")
    tcfg = _train_config(args)
    # placeholder target; each cell substitutes its own
    ccfg = CalibrationConfig(target_dspec=2.0, rel_tol=args.tau, bidirectional=True,
                             probe_full_budget=True, max_probes=args.max_probes)
    seeds = [args.seed + i for i in range(args.n_seeds)]
    result = run_study(args.targets, args.rank_caps, seeds, FitRunner(sp, tcfg, ccfg),
                       jobs=args.jobs)
    _write_json(out / "overparam.json", result)
    config = {"targets": args.targets, "rank_caps": args.rank_caps, "seeds": seeds,
              "tau": args.tau, "train": tcfg.to_dict()}
    _write_manifest(out, "overparam", config, [args.split], ["overparam.json"])


# ---------------------------------------------------------------- parser

def _add_train_flags(p: argparse.ArgumentParser, seed: int) -> None:
    d = TrainConfig()
    p.add_argument("--iters", type=int, default=d.iterations)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--neg-ratio", type=int, default=d.neg_ratio)
    p.add_argument("--reg-weight", type=float, default=d.reg_weight)
    p.add_argument("--seed", type=int, default=seed)


def build_parser(seed: int = 0) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capkernel", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="connectivity-preserving edge holdout")
    p.add_argument("--edges", required=True)
    p.add_argument("--format", choices=["whitespace", "csv"], default="whitespace")
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="fit one model at a fixed eta")
    p.add_argument("--split", required=True)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--rank-cap", type=int, default=16)
    _add_train_flags(p, seed)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="search eta for a target effective rank")
    p.add_argument("--split", required=True)
    p.add_argument("--rank-cap", type=int, default=64)
    p.add_argument("--target-dspec", type=float, required=True)
    p.add_argument("--tau", type=float, default=0.02)
    p.add_argument("--max-probes", type=int, default=40)
    p.add_argument("--bidirectional", action="store_true")
    p.add_argument("--full-budget-probes", action="store_true")
    _add_train_flags(p, seed)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("sweep", help="adaptive eta sweep over rank caps and seeds")
    p.add_argument("--split", required=True)
    p.add_argument("--rank-caps", type=_int_list, default=[64, 128, 256])
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--eta-min", type=float, default=-0.25)
    p.add_argument("--eta-max", type=float, default=0.25)
    p.add_argument("--step", type=float, default=0.02)
    p.add_argument("--probe-mode", action="store_true", help="early-stop each probe fit")
    p.add_argument("--jobs", type=int, default=1)
    _add_train_flags(p, seed)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("prefix", help="export spectral prefixes of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=_int_list, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prefix)

    p = sub.add_parser("overparam", help="paired anchor vs calibrated retrain study")
    p.add_argument("--split", required=True)
    p.add_argument("--targets", "--target-dspec", type=_float_list, default=[16.0, 32.0, 64.0])
    p.add_argument("--rank-caps", type=_int_list, default=[64, 128, 256])
    p.add_argument("--n-seeds", type=int, default=10)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--max-probes", type=int, default=40)
    p.add_argument("--jobs", type=int, default=1)
    _add_train_flags(p, seed)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overparam)
    return parser


def main(argv=None) -> int:
    try:
        seed = _default_seed()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    parser = build_parser(seed)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = Path(args.out) if getattr(args, "out", None) else None
    try:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        args.func(args, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError, CalibrationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GraphError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from capkernel.cli import main
from capkernel.evaluation import ScoredPairs, auc_roc
from capkernel.frontier import SweepConfig, eta_path
from capkernel.graph import stochastic_block_model


@pytest.fixture(scope="module")
def sbm_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("sbm")
    g, blocks = stochastic_block_model([100, 100], 0.2, 0.01, seed=1)
    (d / "edges.txt").write_text("\n".join(f"n{i} n{j}" for i, j in g.edges.tolist()) + "\n")
    assert main(["split", "--edges", str(d / "edges.txt"), "--seed", "3", "--out", str(d / "split")]) == 0
    return d, g, blocks


def files(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_triangle_split_and_determinism(tmp_path):
    edges = tmp_path / "tri.txt"
    edges.write_text("0 1\n1 2\n2 0\n")
    for out in ("a", "b"):
        assert main(["split", "--edges", str(edges), "--fraction", "0.5", "--seed", "7",
                     "--out", str(tmp_path / out)]) == 0
    payload = json.loads((tmp_path / "a" / "split.json").read_text())
    assert len(payload["test_edges"]) == 1 and payload["seed"] == 7
    assert files(tmp_path / "a") == files(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert set(manifest["artifacts"]) == {"split.json"}


def test_env_seed_overrides_default(tmp_path, monkeypatch, sbm_files):
    d, _, _ = sbm_files
    monkeypatch.setenv("SPECTRA_SEED", "3")
    assert main(["split", "--edges", str(d / "edges.txt"), "--out", str(tmp_path / "env")]) == 0
    assert (tmp_path / "env" / "split.json").read_bytes() == (d / "split" / "split.json").read_bytes()
    monkeypatch.setenv("SPECTRA_SEED", "x")
    assert main(["split", "--edges", str(d / "edges.txt"), "--out", str(tmp_path / "bad")]) == 2


@pytest.mark.parametrize("text", ["0 1\n1\n", ""])
def test_data_errors_exit_3(tmp_path, text):
    edges = tmp_path / "bad.txt"
    edges.write_text(text)
    assert main(["split", "--edges", str(edges), "--out", str(tmp_path / "o")]) == 3


def test_missing_file_exit_3(tmp_path):
    assert main(["split", "--edges", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "o")]) == 3


def test_usage_errors_exit_2(tmp_path, sbm_files):
    d, _, _ = sbm_files
    split = str(d / "split" / "split.json")
    out = str(tmp_path / "o")
    assert main(["train", "--split", split, "--rank-cap", "201", "--out", out]) == 2
    assert main(["calibrate", "--split", split, "--rank-cap", "4", "--target-dspec", "5",
                 "--out", out]) == 2
    assert main(["sweep", "--split", split, "--rank-caps", "", "--out", out]) == 2
    assert main(["train", "--split", split, "--bogus"]) == 2
    assert main([]) == 2


def test_train_report_determinism_and_prefix(tmp_path, sbm_files):
    d, _, _ = sbm_files
    split = str(d / "split" / "split.json")
    for out in ("t1", "t2"):
        assert main(["train", "--split", split, "--rank-cap", "4", "--iters", "150",
                     "--eta", "0.05", "--out", str(tmp_path / out)]) == 0
    assert files(tmp_path / "t1") == files(tmp_path / "t2")
    report = json.loads((tmp_path / "t1" / "report.json").read_text())
    assert {"auc_roc", "auc_pr", "tll", "train_nll", "gen_gap", "n_pos", "n_neg", "d_spec"} <= set(report)

    ck = str(tmp_path / "t1" / "checkpoint.json")
    assert main(["prefix", "--checkpoint", ck, "--k", "5", "--out", str(tmp_path / "p")]) == 2
    for out in ("p1", "p2"):
        assert main(["prefix", "--checkpoint", ck, "--k", "1,2,4", "--out", str(tmp_path / out)]) == 0
    assert files(tmp_path / "p1") == files(tmp_path / "p2")
    full = json.loads((tmp_path / "p1" / "prefix_k4.json").read_text())
    assert full["d_spec_of_prefix"] == pytest.approx(report["d_spec"], rel=1e-12)
    bases = {k: np.array(json.loads((tmp_path / "p1" / f"prefix_k{k}.json").read_text())["basis"])
             for k in (1, 2, 4)}
    for small, big in ((1, 2), (2, 4)):
        p_small, p_big = bases[small] @ bases[small].T, bases[big] @ bases[big].T
        assert np.linalg.norm((np.eye(len(p_big)) - p_big) @ p_small) < 1e-6
    with open(tmp_path / "p1" / "modes_k2.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["node_label", "mode"] and rows[1][0].startswith("n")
    assert {r[1] for r in rows[1:]} <= {"1", "2"}


def bayes_auc(split, blocks, p_in, p_out):
    """AUC of the generator's own edge probabilities on the held-out pairs."""
    def score(pairs):
        return np.where(blocks[pairs[:, 0]] == blocks[pairs[:, 1]], p_in, p_out)
    return auc_roc(ScoredPairs(score(split["test_edges"]), score(split["test_non_edges"])))


def test_sbm_train_against_planted_oracle(tmp_path, sbm_files):
    # Test edges are independent of training edges given the blocks, so no
    # scorer can beat the generator's own probabilities beyond sampling noise.
    d, g, blocks = sbm_files
    payload = json.loads((d / "split" / "split.json").read_text())
    split = {k: np.array(payload[k]) for k in ("test_edges", "test_non_edges")}
    labels = payload["node_labels"]
    relabel = np.array([blocks[int(lab[1:])] for lab in labels])
    oracle = bayes_auc(split, relabel, 0.2, 0.01)
    assert main(["train", "--split", str(d / "split" / "split.json"), "--rank-cap", "8",
                 "--iters", "1500", "--out", str(tmp_path / "t")]) == 0
    auc = json.loads((tmp_path / "t" / "report.json").read_text())["auc_roc"]
    assert 0.70 < oracle < 0.80
    assert 0.6 < auc <= oracle + 0.03


def test_sweep_rows_match_replayed_probe_count(tmp_path, sbm_files):
    d, _, _ = sbm_files
    out = tmp_path / "sw"
    args = ["sweep", "--split", str(d / "split" / "split.json"), "--rank-caps", "2,3",
            "--seeds", "0,1", "--eta-min", "-0.1", "--eta-max", "0.1", "--iters", "20"]
    assert main(args + ["--out", str(out)]) == 0
    with open(out / "frontier.csv") as fh:
        rows = list(csv.DictReader(fh))
    cfg = SweepConfig(eta_min=-0.1, eta_max=0.1, rank_caps=(2, 3), seeds=(0, 1))
    expected = 0
    for r in (2, 3):
        for s in (0, 1):
            traj = {float(x["eta"]): float(x["achieved_dspec"]) for x in rows
                    if x["rank_cap"] == str(r) and x["seed"] == str(s)}
            expected += len(eta_path(lambda eta: traj[eta], cfg))
    assert len(rows) == expected
    assert main(args + ["--jobs", "2", "--out", str(tmp_path / "sw2")]) == 0
    assert files(out) == files(tmp_path / "sw2")


def test_calibrate_unreachable_exit_4(tmp_path, sbm_files):
    d, _, _ = sbm_files
    assert main(["calibrate", "--split", str(d / "split" / "split.json"), "--rank-cap", "3",
                 "--target-dspec", "1.05", "--iters", "3", "--out", str(tmp_path / "c")]) == 4


def test_calibrate_writes_report(tmp_path, sbm_files):
    d, _, _ = sbm_files
    assert main(["calibrate", "--split", str(d / "split" / "split.json"), "--rank-cap", "4",
                 "--target-dspec", "3.9", "--tau", "0.05", "--iters", "100",
                 "--out", str(tmp_path / "c")]) == 0
    cal = json.loads((tmp_path / "c" / "calibration.json").read_text())
    assert {"target", "eta_star", "achieved", "probes", "fallback_used"} <= set(cal)


def test_overparam_small(tmp_path, sbm_files):
    d, _, _ = sbm_files
    args = ["overparam", "--split", str(d / "split" / "split.json"), "--targets", "2.5",
            "--rank-caps", "3", "--n-seeds", "2", "--iters", "40", "--tau", "0.2"]
    assert main(args + ["--out", str(tmp_path / "o1")]) == 0
    rep = json.loads((tmp_path / "o1" / "overparam.json").read_text())
    assert [c["rank_cap"] for c in rep["cells"]] == [3]  # ceil(2.5) == 3
    assert main(args + ["--out", str(tmp_path / "o2")]) == 0
    assert files(tmp_path / "o1") == files(tmp_path / "o2")


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "capkernel.cli", "prefix", "--checkpoint",
                          str(tmp_path / "missing.json"), "--k", "1", "--out", str(tmp_path / "o")],
                         capture_output=True, text=True)
    assert res.returncode == 3 and "data error" in res.stderr

import numpy as np
import pytest

from capkernel.graph import Graph
from capkernel.model import (ModelParams, NumericalError, edge_log_odds, init_params, kernel_entry,
                             load_checkpoint, log_likelihood, log_odds, orthonormalize,
                             save_checkpoint, sigmoid, softplus, softplus_inv)
from capkernel.spectral import d_spec

from conftest import random_params


def uniform_params(q, offsets=None, beta=1.0):
    n, r = q.shape
    return ModelParams(q, np.full(r, float(softplus_inv(1.0))),
                       np.zeros(n) if offsets is None else offsets, float(softplus_inv(beta)))


def test_softplus_inverse_roundtrip():
    y = np.array([1e-6, 0.5, 1.0, 20.0, 50.0])
    np.testing.assert_allclose(softplus(softplus_inv(y)), y, rtol=1e-12)


def test_orthonormalize_sign_convention(rng):
    x = rng.standard_normal((9, 4))
    q = orthonormalize(x)
    np.testing.assert_allclose(q.T @ q, np.eye(4), atol=1e-13)
    assert np.all(np.diag(q.T @ x) > 0)


def test_identity_basis_entry():
    n, r = 10, 4
    m = uniform_params(np.eye(n)[:, :r])
    assert kernel_entry(m, 0, 0) == pytest.approx(n / r)
    assert kernel_entry(m, 0, 1) == pytest.approx(0.0)


def test_isotropic_rotation_gauge(rng):
    q = orthonormalize(rng.standard_normal((12, 4)))
    o = orthonormalize(rng.standard_normal((4, 4)))
    a, b = uniform_params(q), uniform_params(q @ o)
    np.testing.assert_allclose(a.view().dense(), b.view().dense(), atol=1e-10)


def test_entries_match_dense_oracle(rng):
    m = random_params(rng, n=30, r=5)
    q, s2 = m.q_basis, m.sigma ** 2
    dense = 30 * q @ np.diag(s2) @ q.T / s2.sum()
    assert kernel_entry(m, 2, 5) == pytest.approx(dense[2, 5], rel=1e-12)
    pairs = np.array([[0, 1], [3, 29], [7, 7]])
    np.testing.assert_allclose(m.view().entries(pairs), dense[pairs[:, 0], pairs[:, 1]], rtol=1e-12)
    assert np.trace(dense) == pytest.approx(30, rel=1e-12)


def test_spectrum_readoff_matches_eigensolve(rng):
    m = random_params(rng, n=15, r=4)
    view = m.view()
    eig = np.sort(np.linalg.eigvalsh(view.dense()))[::-1][:4]
    np.testing.assert_allclose(view.eigenvalues, eig, rtol=1e-10)
    assert view.d_spec() == pytest.approx(d_spec(view.spectrum()))


def test_log_odds_examples():
    q = np.eye(4)[:, :2]
    m = uniform_params(q)
    assert edge_log_odds(m, 2, 3) == 0.0
    assert sigmoid(edge_log_odds(m, 2, 3)) == 0.5
    m.offsets[:] = -5.0
    assert sigmoid(edge_log_odds(m, 2, 3)) == pytest.approx(4.5397868702434395e-05, rel=1e-12)
    with pytest.raises(ValueError, match="self-pairs"):
        log_odds(m, [[1, 1]])


def test_log_likelihood_examples(rng):
    m = uniform_params(np.eye(4)[:, :2])
    assert -log_likelihood(m, [[2, 3]], [[2, 3]]) == pytest.approx(2 * np.log(2))
    m.offsets[:] = 30.0
    assert log_likelihood(m, [[2, 3]], []) == pytest.approx(0.0, abs=1e-20)

    m = random_params(rng, n=8, r=3)
    pos, neg = np.array([[0, 1], [2, 5]]), np.array([[3, 4], [1, 7]])
    dense = m.view().dense()
    z = lambda p: m.offsets[p[0]] + m.offsets[p[1]] + m.beta * dense[p[0], p[1]]
    naive = (sum(np.log(1 / (1 + np.exp(-z(p)))) for p in pos) / 2
             + sum(np.log(1 - 1 / (1 + np.exp(-z(p)))) for p in neg) / 2)
    assert log_likelihood(m, pos, neg) == pytest.approx(naive, rel=1e-12)
    with pytest.raises(ValueError):
        log_likelihood(m, [], [])


def test_init_params_valid(rng):
    g = Graph.from_pairs(20, [(i, i + 1) for i in range(19)])
    m = init_params(g, 5, seed=0)
    m.check_orthonormal()
    np.testing.assert_allclose(m.sigma, 1.0)
    assert m.beta == pytest.approx(1.0)
    assert np.all((-6 <= m.offsets) & (m.offsets <= 0))
    with pytest.raises(ValueError):
        init_params(g, 21, seed=0)


def test_orthonormality_check_raises(rng):
    m = random_params(rng)
    m.q_basis = m.q_basis * 1.01
    with pytest.raises(NumericalError):
        m.view().spectrum()


def test_checkpoint_roundtrip(tmp_path, rng):
    m = random_params(rng, n=7, r=3)
    path = tmp_path / "ck.json"
    save_checkpoint(path, m, seed=4, iteration=9, node_labels=list("abcdefg"))
    m2, payload = load_checkpoint(path)
    np.testing.assert_array_equal(m2.q_basis, m.q_basis)
    np.testing.assert_array_equal(m2.sigma_raw, m.sigma_raw)
    np.testing.assert_array_equal(m2.offsets, m.offsets)
    assert m2.beta_raw == m.beta_raw
    assert payload["seed"] == 4 and payload["node_labels"][0] == "a"
    first = path.read_bytes()
    save_checkpoint(path, m2, seed=4, iteration=9, node_labels=list("abcdefg"))
    assert path.read_bytes() == first

import math

import numpy as np
import pytest

from dnfs import ebm
from dnfs.infer import WeightedSampleSet
from dnfs.oracle import ExactEnumeration, all_states
from dnfs.path import AnnealedPath
from dnfs.targets import lattice_adjacency, make_ising


class TestMMD:
    def test_identical_sets(self):
        X = np.random.default_rng(0).integers(0, 2, size=(50, 8))
        assert ebm.mmd(X, X) == 0.0
        assert ebm.mmd(X, X[::-1]) == 0.0

    def test_disjoint_point_masses(self):
        # k(x, y) = exp(-d / (d * 0.1)) = e^-10 for complementary states
        X = np.zeros((3, 4), dtype=int)
        Y = np.ones((5, 4), dtype=int)
        assert abs(ebm.mmd(X, Y) - (2 - 2 * math.exp(-10))) < 1e-15
        assert abs(ebm.mmd(X, Y) - 1.999909200140475) < 1e-15

    def test_symmetric_and_nonnegative(self):
        rng = np.random.default_rng(1)
        X, Y = rng.integers(0, 2, size=(20, 6)), rng.integers(0, 2, size=(30, 6))
        assert ebm.mmd(X, Y) == ebm.mmd(Y, X)
        assert ebm.mmd(X, Y) > 0

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            ebm.mmd(np.zeros((2, 3)), np.zeros((2, 4)))
        with pytest.raises(ValueError):
            ebm.mmd(np.zeros((0, 3)), np.zeros((2, 3)))


class TestIsingEBM:
    def test_coupling_matrix_symmetric_zero_diagonal(self):
        m = ebm.IsingEBM(4, theta=np.arange(6.0))
        J = m.J
        np.testing.assert_array_equal(J, J.T)
        np.testing.assert_array_equal(np.diag(J), 0.0)

    def test_energy_matches_spin_form(self):
        rng = np.random.default_rng(2)
        m = ebm.IsingEBM(5, theta=rng.normal(size=10))
        X = rng.integers(0, 2, size=(7, 5))
        s = 2 * X - 1
        np.testing.assert_allclose(m.energy(X).data, -np.einsum("bi,ij,bj->b", s, m.J, s), atol=1e-12)

    def test_target_agrees_with_energy_up_to_constant(self):
        rng = np.random.default_rng(3)
        m = ebm.IsingEBM(4, theta=rng.normal(size=6))
        X = all_states(4, 2)
        diff = m.to_target().log_unnorm(X) + m.energy(X).data
        np.testing.assert_allclose(diff, diff[0], atol=1e-12)

    def test_l1_subgradient(self):
        m = ebm.IsingEBM(3, l1=0.05, theta=np.array([0.5, 0.0, -2.0]))
        np.testing.assert_allclose(m.l1_subgradient()["theta"], [0.1, 0.0, -0.1])


def test_cd_gradient_vanishes_at_the_data_distribution():
    # model samples weighted exactly by p_theta, data drawn from p_theta: gradient has mean zero
    rng = np.random.default_rng(4)
    m = ebm.IsingEBM(4, theta=0.3 * rng.normal(size=6))
    en = ExactEnumeration(AnnealedPath(m.to_target()))
    p = en.probs(1.0)
    ws = WeightedSampleSet(en.states, np.log(p))
    grads = []
    for _ in range(200):
        data = en.sample(1.0, 64, rng)
        grads.append(ebm.cd_gradient(m, data, ws).grads["theta"])
    G = np.array(grads)
    se = G.std(axis=0, ddof=1) / math.sqrt(len(G))
    assert np.all(np.abs(G.mean(axis=0)) < 3 * se + 1e-12)


def test_cd_gradient_direction():
    # data concentrated on aligned spins pushes couplings up
    m = ebm.IsingEBM(3)
    X = all_states(3, 2)
    ws = WeightedSampleSet(X, np.zeros(8))
    data = np.array([[0, 0, 0], [1, 1, 1]])
    res = ebm.cd_gradient(m, data, ws)
    # ascent on the log-likelihood is E_data[f] - E_model[f] with f = 2 s_i s_j: 2 - 0
    np.testing.assert_allclose(res.grads["theta"], 2.0, atol=1e-12)


def test_degenerate_weights_flagged(caplog):
    m = ebm.IsingEBM(3)
    ws = WeightedSampleSet(all_states(3, 2), np.array([0.0] + [-np.inf] * 7))
    res = ebm.cd_gradient(m, np.zeros((2, 3), dtype=int), ws)
    assert res.degenerate and abs(res.ess - 1 / 8) < 1e-15


def test_edge_precision_and_rmse():
    A = lattice_adjacency(3)
    J = 0.2 * A
    assert ebm.edge_precision(J, A) == 1.0
    assert ebm.edge_precision(-J, A) == 1.0
    assert ebm.edge_precision(np.ones((9, 9)) - A, A) < 1.0
    assert abs(ebm.neg_log_rmse(J + 0.1, J) - (-math.log(0.1))) < 1e-12


def test_config_validation():
    with pytest.raises(ValueError):
        ebm.EBMTrainConfig(ebm_steps=0)
    with pytest.raises(ValueError):
        ebm.EBMTrainConfig(lr=0.0)


def _tiny_cfg(**kw):
    return ebm.EBMTrainConfig(**{"ebm_steps": 3, "sampler_steps_per_ebm_step": 2, "lr": 0.01, "batch": 16,
                                 "num_samples": 16, "K": 4, "sampler_batch": 8, "hidden": 8, "layers": 1,
                                 "heads": 2, **kw})


def test_alternating_loop_is_deterministic():
    tgt = make_ising(2, 0.5)
    data = ExactEnumeration(AnnealedPath(tgt)).sample(1.0, 64, np.random.default_rng(5))
    a = ebm.train_ising_ebm(data, _tiny_cfg(), J_true=tgt.J)
    b = ebm.train_ising_ebm(data, _tiny_cfg(), J_true=tgt.J)
    assert a.model.params["theta"].data.tobytes() == b.model.params["theta"].data.tobytes()
    assert len(a.history) == 4 and set(a.history[-1]) == {"neg_log_rmse", "edge_precision"}


def test_deep_ebm_loop_runs():
    rng = np.random.default_rng(6)
    data = rng.integers(0, 2, size=(40, 6))
    res = ebm.train_deep_ebm(data, _tiny_cfg(ebm_steps=2), held_out=data[:10], energy_hidden=8)
    ev = res.history[-1]
    assert set(ev) == {"mmd", "nll", "log_z"} and math.isfinite(ev["nll"])


def test_matrix_csv(tmp_path):
    ebm.write_matrix_csv(tmp_path / "J.csv", np.eye(2) * 0.5)
    assert (tmp_path / "J.csv").read_text().splitlines() == ["0.5,0.0", "0.0,0.5"]

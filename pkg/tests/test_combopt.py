import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnfs import combopt
from dnfs.combopt import Graph
from dnfs.lenet import NetworkConfig, build_network
from dnfs.train import TrainConfig

TRIANGLE = Graph(3, [(0, 1), (1, 2), (0, 2)])
P3 = Graph(3, [(0, 1), (1, 2)])


def _brute_mis(g):
    best = 0
    for bits in itertools.product((0, 1), repeat=g.n):
        if combopt.is_independent(g, np.array(bits)):
            best = max(best, sum(bits))
    return best


class TestGraph:
    def test_rejects_bad_edges(self):
        with pytest.raises(ValueError):
            Graph(3, [(0, 0)])
        with pytest.raises(ValueError):
            Graph(3, [(0, 3)])
        with pytest.raises(ValueError):
            Graph(3, [(0, 1), (1, 0)])

    def test_jsonl_roundtrip(self, tmp_path):
        gs = [TRIANGLE, P3, Graph(4)]
        combopt.write_graphs(tmp_path / "g.jsonl", gs)
        back = combopt.read_graphs(tmp_path / "g.jsonl")
        assert [(g.n, g.edges) for g in back] == [(g.n, g.edges) for g in gs]


class TestGenerators:
    def test_er_extremes(self):
        rng = np.random.default_rng(0)
        assert combopt.make_er_graph((6, 6), 0.0, rng).edges == []
        assert len(combopt.make_er_graph((6, 6), 1.0, rng).edges) == 15
        with pytest.raises(ValueError):
            combopt.make_er_graph((6, 6), 1.5, rng)

    @pytest.mark.parametrize("m", [1, 2, 4])
    def test_ba_edge_count(self, m):
        rng = np.random.default_rng(m)
        for _ in range(5):
            g = combopt.make_ba_graph((10, 20), m, rng)
            assert len(g.edges) == m * (m - 1) // 2 + m * (g.n - m)

    def test_size_range(self):
        rng = np.random.default_rng(1)
        sizes = {combopt.make_er_graph((16, 20), 0.25, rng).n for _ in range(60)}
        assert sizes == {16, 17, 18, 19, 20}


class TestMIS:
    def test_empty_graph_all_ones(self):
        tgt = combopt.mis_target(Graph(4), invT=2.0)
        assert tgt.log_unnorm(np.ones(4, dtype=int)) == 8.0

    def test_violation_penalised(self):
        tgt = combopt.mis_target(Graph(2, [(0, 1)]))
        assert tgt.log_unnorm(np.array([1, 1])) < tgt.log_unnorm(np.array([1, 0]))

    def test_closed_form_flip_ratios(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            g = combopt.make_er_graph((12, 12), 0.3, rng)
            X = rng.integers(0, 2, size=(20, 12))
            tgt = combopt.mis_target(g, invT=1.7)
            np.testing.assert_allclose(combopt.mis_flip_log_ratios(g, X, invT=1.7),
                                       tgt.flip_log_ratios(X), atol=1e-10)

    def test_lambda_must_exceed_one(self):
        with pytest.raises(ValueError):
            combopt.mis_target(TRIANGLE, lam=1.0)

    def test_exact_small_cases(self):
        assert combopt.exact_mis(TRIANGLE) == 1
        assert combopt.exact_mis(P3) == 2
        assert combopt.exact_mis(Graph(5)) == 5

    def test_exact_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(15):
            g = combopt.make_er_graph((6, 12), 0.35, rng)
            assert combopt.exact_mis(g) == _brute_mis(g)

    def test_postprocess(self):
        np.testing.assert_array_equal(combopt.postprocess_mis(TRIANGLE, np.ones(3, dtype=int)), [1, 0, 0])
        x = np.array([1, 0, 1])
        np.testing.assert_array_equal(combopt.postprocess_mis(P3, x), x)
        np.testing.assert_array_equal(combopt.postprocess_mis(Graph(3), np.ones(3, dtype=int)), [1, 1, 1])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_postprocess_always_independent(self, seed):
        rng = np.random.default_rng(seed)
        g = combopt.make_er_graph((5, 12), 0.4, rng)
        X = rng.integers(0, 2, size=(8, g.n))
        Y = combopt.postprocess_mis(g, X)
        assert np.all(combopt.is_independent(g, Y))
        assert np.all(Y <= X)


class TestMaxCut:
    def test_single_edge(self):
        g = Graph(2, [(0, 1)])
        assert combopt.cut_value(g, np.array([0, 1])) == 1
        assert combopt.maxcut_energy(g, np.array([0, 1])) == -0.5
        assert combopt.cut_value(g, np.array([1, 1])) == 0

    def test_energy_argmin_is_max_cut(self):
        rng = np.random.default_rng(4)
        g = combopt.make_er_graph((10, 10), 0.4, rng)
        X = np.array(list(itertools.product((0, 1), repeat=10)))
        best = X[np.argmin(combopt.maxcut_energy(g, X))]
        assert combopt.cut_value(g, best) == combopt.exact_maxcut(g)
        # the target ranks states exactly by cut size
        tgt = combopt.maxcut_target(g)
        np.testing.assert_allclose(tgt.log_unnorm(X) - tgt.log_unnorm(X[:1]),
                                   combopt.cut_value(g, X) - combopt.cut_value(g, X[:1]), atol=1e-12)

    def test_exact_small_cases(self):
        assert combopt.exact_maxcut(TRIANGLE) == 2
        assert combopt.exact_maxcut(P3) == 2
        assert combopt.exact_maxcut(Graph(4)) == 0

    def test_spin_flip_symmetry(self):
        g = combopt.make_er_graph((9, 9), 0.5, np.random.default_rng(5))
        X = np.random.default_rng(6).integers(0, 2, size=(30, 9))
        np.testing.assert_array_equal(combopt.cut_value(g, X), combopt.cut_value(g, 1 - X))
        tgt = combopt.maxcut_target(g)
        np.testing.assert_allclose(tgt.log_unnorm(X), tgt.log_unnorm(1 - X), atol=1e-12)


def test_annealing_schedule():
    cfg = combopt.CombOptConfig(invT_start=0.1, invT_end=5.0)
    assert cfg.invT(0, 11) == 0.1 and cfg.invT(10, 11) == 5.0
    assert abs(cfg.invT(5, 11) - 2.55) < 1e-12
    with pytest.raises(ValueError):
        combopt.CombOptConfig(kind="tsp")


def test_solve_returns_feasible_sets():
    g = combopt.make_er_graph((10, 10), 0.3, np.random.default_rng(7))
    net = build_network(NetworkConfig(variant="leGF", d=12, hidden=8, layers=1, heads=2, time_dim=4,
                                      zero_init_output=False))
    cfg = combopt.CombOptConfig(K=4, batch=16, refine_steps=1)
    out = combopt.solve(cfg, g, net, np.random.default_rng(8))
    assert np.all(combopt.is_independent(g, out["samples"]))
    assert out["objective"] == out["samples"].sum(axis=1).max()
    assert set(out) == {"solution", "objective", "mean_objective", "samples", "wallclock"}


def test_amortised_training_runs_and_is_deterministic():
    rng = np.random.default_rng(9)
    graphs = [combopt.make_er_graph((6, 8), 0.3, rng) for _ in range(2)]
    def run():
        net = build_network(NetworkConfig(variant="leGF", d=8, hidden=8, layers=1, heads=2, time_dim=4))
        rows = combopt.train_amortised(combopt.CombOptConfig(K=4), graphs, net,
                                       TrainConfig(K=4, outer_batch=8, inner_batch=8, inner_steps=2, epochs=3))
        return rows, net

    (r1, n1), (r2, n2) = run(), run()
    assert r1 == r2 and len(r1) == 3
    for name, p in n1.params.items():
        assert p.data.tobytes() == n2.params[name].data.tobytes()


def test_results_csv(tmp_path):
    combopt.write_results_csv(tmp_path / "r.csv", [{"instance": 0, "objective": 5, "oracle": 6,
                                                    "drop": 1 / 6, "seconds": 0.5}])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "instance,objective,oracle,drop,seconds"
    assert lines[1].startswith("0,5,6,")

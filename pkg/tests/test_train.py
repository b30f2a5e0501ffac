import math

import numpy as np
import pytest

from dnfs import tensor as T
from dnfs import train
from dnfs.ctmc import ZeroModel, xi_batch
from dnfs.lenet import NetworkConfig, build_network
from dnfs.oracle import ExactEnumeration, TabularRates, exact_dt_log_z, fit_tabular_rates
from dnfs.path import AnnealedPath, time_grid
from dnfs.targets import QuadraticBinaryTarget, make_ising


def _flat(d):
    return AnnealedPath(QuadraticBinaryTarget(np.zeros((d, d)), np.zeros(d)))


def _random_net(d, seed=0, hidden=8, layers=1):
    net = build_network(NetworkConfig(variant="leTF", d=d, hidden=hidden, layers=layers, heads=2,
                                      time_dim=4, zero_init_output=False, seed=seed))
    rng = np.random.default_rng(seed + 50)
    for name, p in net.params.items():
        net.params.set(name, p.data + 0.2 * rng.normal(size=p.data.shape))
    return net


class TestXi:
    def test_identity_chain_on_flat_target(self):
        assert train.xi(_flat(3), ZeroModel(3, 2), 0.4, np.array([1, 0, 1])) == 0.0

    def test_identity_chain_is_dt_log_p(self):
        path = AnnealedPath(make_ising(2, 0.3))
        x = np.array([1, 0, 0, 1])
        assert train.xi(path, ZeroModel(4, 2), 0.7, x) == path.dt_log_p_tilde(0.7, x)

    def test_single_outgoing_rate(self):
        # one outgoing rate 2 on a flat target: xi = 0 - (0 - 2) = 2
        rates = np.zeros((2, 4, 1, 2))
        rates[:, 0, 0, 1] = 2.0
        model = TabularRates(rates, 1, 2)
        assert train.xi(_flat(1), model, 0.0, np.array([0])) == 2.0

    def test_tensor_form_matches_numpy_form(self):
        path = AnnealedPath(make_ising(2, 0.5))
        net = _random_net(4)
        X = np.random.default_rng(1).integers(0, 2, size=(12, 4))
        ts = np.repeat([0.0, 0.25, 0.5, 1.0], 3)
        got = train.xi_tensor(path, net, ts, X).data
        for k in range(12):
            assert abs(got[k] - xi_batch(path, net, ts[k], X[k:k + 1])[0]) < 1e-12


def test_stein_term_vanishes_on_two_sites():
    path = AnnealedPath(QuadraticBinaryTarget(np.array([[0.2, -0.7], [0.1, 0.4]]), np.array([0.3, -0.2])))
    en = ExactEnumeration(path)
    net = _random_net(2)
    for t in (0.0, 0.3, 1.0):
        xi = xi_batch(path, net, t, en.states)
        assert abs(np.dot(en.probs(t), xi) - en.dt_log_z(t)) < 1e-12


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_exactly_weighted_ct_equals_dt_log_z(seed):
    path = AnnealedPath(make_ising(3, 0.1))
    en = ExactEnumeration(path)
    net = _random_net(9, seed=seed)
    K = 8
    grid = time_grid(K)
    ct = train.estimate_ct(path, net, [en.states] * (K + 1), [en.probs(t) for t in grid])
    for k, t in enumerate(grid):
        assert abs(ct.values[k] - exact_dt_log_z(path, float(t))) < 1e-8


def test_ct_of_one_sample_is_its_xi():
    path = AnnealedPath(make_ising(2, 0.2))
    net = _random_net(4)
    x = np.array([[0, 1, 1, 0]])
    ct = train.estimate_ct(path, net, [x, x, x])
    for k, t in enumerate(time_grid(2)):
        assert ct.values[k] == xi_batch(path, net, float(t), x)[0]


def test_ct_is_zero_for_identity_chain_on_flat_target():
    X = np.random.default_rng(0).integers(0, 2, size=(5, 3))
    np.testing.assert_array_equal(train.estimate_ct(_flat(3), ZeroModel(3, 2), [X] * 5).values, 0.0)


def test_ct_table_rejects_off_grid_time():
    ct = train.CtTable(time_grid(4), np.arange(5.0))
    assert ct(0.75) == 3.0
    with pytest.raises(ValueError):
        ct(0.3)


def test_fitted_rates_give_zero_loss():
    path = AnnealedPath(QuadraticBinaryTarget(np.array([[0.5, -1.0], [0.3, 0.1]]), np.array([0.4, -0.6])))
    model = fit_tabular_rates(path, 8)
    en = ExactEnumeration(path)
    for t in time_grid(8):
        xi = xi_batch(path, model, float(t), en.states)
        assert np.mean((xi - exact_dt_log_z(path, float(t))) ** 2) < 1e-10


def test_loss_is_zero_for_identity_chain_on_flat_target():
    net = build_network(NetworkConfig(variant="leTF", d=3, hidden=8, layers=1, heads=2, time_dim=4))
    ct = train.CtTable(time_grid(2), np.zeros(3))
    X = np.random.default_rng(0).integers(0, 2, size=(4, 3))
    assert float(train.loss_batch(_flat(3), net, np.full(4, 0.5), X, ct).data) == 0.0


def test_end_to_end_loss_gradient_on_tiny_letf():
    path = AnnealedPath(QuadraticBinaryTarget(np.array([[0.1, 0.5, 0.0], [0.0, -0.2, 0.3], [0.0, 0.0, 0.2]]),
                                              np.array([0.3, -0.1, 0.2])))
    net = _random_net(3, hidden=8, layers=1)
    X = np.random.default_rng(2).integers(0, 2, size=(6, 3))
    ts = np.array([0.0, 0.25, 0.5, 0.5, 0.75, 1.0])
    ct = train.CtTable(time_grid(4), np.linspace(0.1, 0.5, 5))
    f = lambda p: train.loss_batch(path, build_network(net.config, p), ts, X, ct)
    # central-difference error is U-shaped in eps; 1e-4 sits at its floor for this loss scale
    assert T.finite_diff_check(f, net.params, eps=1e-4) < 1e-5


class TestReplayBuffer:
    def test_fifo_capacity(self):
        buf = train.ReplayBuffer(2, K=1)
        for v in range(3):
            buf.push(np.full((1, 2, 1), v))
        assert len(buf) == 4
        _, xs = buf.sample(200, np.random.default_rng(0))
        assert set(xs.ravel().tolist()) == {1, 2}

    def test_pairs_carry_their_time(self):
        buf = train.ReplayBuffer(1, K=2)
        states = np.array([[[0], [1], [2]]])
        buf.push(states)
        ts, xs = buf.sample(50, np.random.default_rng(1))
        np.testing.assert_array_equal(ts * 2, xs[:, 0])

    def test_grid_mismatch_and_empty(self):
        buf = train.ReplayBuffer(1, K=2)
        with pytest.raises(ValueError):
            buf.push(np.zeros((1, 4, 1), dtype=int))
        with pytest.raises(ValueError):
            buf.sample(1, np.random.default_rng(0))


class TestPinn:
    def test_matches_table_loss_when_equal(self):
        path = AnnealedPath(make_ising(2, 0.2))
        net = _random_net(4)
        cnet = train.CtNet(seed=0)
        ts = np.array([0.0, 0.5, 1.0])
        X = np.random.default_rng(3).integers(0, 2, size=(3, 4))
        vals = cnet(np.array([0.0, 0.5, 1.0])).data
        table = train.CtTable(time_grid(2), vals)
        a = float(train.pinn_loss(path, net, cnet, ts, X).data)
        b = float(train.loss_batch(path, net, ts, X, table).data)
        assert abs(a - b) < 1e-12

    def test_flat_target_zero(self):
        net = build_network(NetworkConfig(variant="leTF", d=3, hidden=8, layers=1, heads=2, time_dim=4))
        X = np.zeros((2, 3), dtype=int)
        assert float(train.pinn_loss(_flat(3), net, train.CtNet(), np.array([0.1, 0.9]), X).data) == 0.0

    def test_ct_net_gradient(self):
        path = AnnealedPath(make_ising(2, 0.2))
        net = _random_net(4)
        cnet = train.CtNet(hidden=4, seed=1)
        cnet.params.set("w2", np.random.default_rng(4).normal(size=(4, 1)))
        X = np.random.default_rng(5).integers(0, 2, size=(3, 4))
        f = lambda p: train.pinn_loss(path, net, cnet, np.array([0.2, 0.4, 0.8]), X)
        assert T.finite_diff_check(f, cnet.params) < 1e-5


def _small_run(seed):
    path = AnnealedPath(make_ising(2, 0.3))
    net = build_network(NetworkConfig(variant="leTF", d=4, hidden=8, layers=1, heads=2, time_dim=4, seed=seed))
    cfg = train.TrainConfig(K=4, outer_batch=16, inner_batch=16, inner_steps=3, epochs=4, seed=seed)
    hist = train.train_loop(path, net, cfg)
    return net, hist


def test_training_is_deterministic():
    (n1, h1), (n2, h2) = _small_run(3), _small_run(3)
    assert h1.step_loss == h2.step_loss
    for name, p in n1.params.items():
        assert p.data.tobytes() == n2.params[name].data.tobytes()


def test_flat_target_loss_stays_zero():
    net = build_network(NetworkConfig(variant="leTF", d=3, hidden=8, layers=1, heads=2, time_dim=4))
    hist = train.train_loop(_flat(3), net, train.TrainConfig(K=4, outer_batch=8, inner_batch=8,
                                                             inner_steps=2, epochs=3))
    assert max(hist.step_loss) == 0.0


def test_history_and_callbacks():
    rows, saved = [], []
    path = AnnealedPath(make_ising(2, 0.3))
    net = build_network(NetworkConfig(variant="leTF", d=4, hidden=8, layers=1, heads=2, time_dim=4))
    cfg = train.TrainConfig(K=4, outer_batch=8, inner_batch=8, inner_steps=2, epochs=3)
    hist = train.train_loop(path, net, cfg, callback=rows.append, checkpoint=lambda m, h: saved.append(h))
    assert [r["epoch"] for r in rows] == [0, 1, 2]
    assert set(rows[0]) == {"epoch", "loss", "mean_abs_ct", "ess"}
    assert len(hist.step_loss) == 6 and saved == [hist]
    assert 0 < rows[-1]["ess"] <= 1


def test_training_reduces_loss_on_small_ising():
    path = AnnealedPath(make_ising(2, 0.4))
    net = build_network(NetworkConfig(variant="leTF", d=4, hidden=16, layers=1, heads=2, time_dim=8))
    cfg = train.TrainConfig(K=8, outer_batch=32, inner_batch=32, inner_steps=10, epochs=15, lr=3e-3)
    hist = train.train_loop(path, net, cfg)
    assert hist.final_loss < hist.initial_loss / 3


@pytest.mark.parametrize("field,value", [("K", 0), ("outer_batch", 0), ("lr", 0.0), ("epochs", -1)])
def test_config_validation(field, value):
    with pytest.raises(ValueError):
        train.TrainConfig(**{field: value})


def test_config_json_roundtrip():
    cfg = train.TrainConfig(K=7, seed=3)
    assert train.TrainConfig(**cfg.to_json()) == cfg
    assert math.isclose(cfg.lr, 1e-3)

import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnfs import tensor as T
from dnfs.tensor import ParamStore, ShapeError, Tensor


def _store(rng, **shapes):
    ps = ParamStore()
    for name, shape in shapes.items():
        ps.add(name, rng.normal(size=shape))
    return ps


def _probe(rng, shape):
    return Tensor(rng.normal(size=shape))


# one scalar-valued function per op kind; each exercises the op on random inputs
def _cases():
    rng = np.random.default_rng(0)
    cases = {}

    ps = _store(rng, a=(3, 4), b=(4, 5))
    Rm = _probe(rng, (3, 5))
    cases["matmul"] = (ps, lambda p: ((p["a"] @ p["b"]) * Rm).sum())

    ps_b = _store(rng, a=(2, 3, 4), b=(2, 4, 2))
    Rb = _probe(rng, (2, 3, 2))
    cases["matmul_batched"] = (ps_b, lambda p: ((p["a"] @ p["b"]) * Rb).sum())

    ps = _store(rng, a=(3, 4), b=(4,))
    R = _probe(rng, (3, 4))
    cases["add"] = (ps, lambda p: ((p["a"] + p["b"]) * R).sum())
    cases["sub"] = (ps, lambda p: ((p["a"] - p["b"]) * R).sum())
    cases["mul"] = (ps, lambda p: ((p["a"] * p["b"]) * R).sum())
    cases["relu"] = (ps, lambda p: (T.relu(p["a"]) * R).sum())
    cases["exp"] = (ps, lambda p: (T.exp(p["a"]) * R).sum())
    cases["square"] = (ps, lambda p: (T.square(p["a"]) * R).sum())
    cases["sigmoid"] = (ps, lambda p: (T.sigmoid(p["a"]) * R).sum())
    cases["tanh"] = (ps, lambda p: (T.tanh(p["a"]) * R).sum())
    cases["scale"] = (ps, lambda p: ((p["a"] * 2.5) * R).sum())
    cases["softmax"] = (ps, lambda p: (T.softmax(p["a"]) * R).sum())
    cases["sum"] = (ps, lambda p: (p["a"].sum(axis=1) * _probe(np.random.default_rng(1), (3,))).sum())
    cases["mean"] = (ps, lambda p: (p["a"].mean(axis=0, keepdims=True) * _probe(np.random.default_rng(2), (1, 4))).sum())
    cases["transpose"] = (ps, lambda p: (p["a"].transpose(1, 0) * _probe(np.random.default_rng(3), (4, 3))).sum())
    cases["reshape"] = (ps, lambda p: (p["a"].reshape(2, 6) * _probe(np.random.default_rng(4), (2, 6))).sum())
    cases["slice"] = (ps, lambda p: (p["a"][1:, :3] * _probe(np.random.default_rng(5), (2, 3))).sum())
    mask = rng.random((3, 4)) < 0.4
    cases["masked_fill"] = (ps, lambda p: (T.masked_fill(p["a"], mask, 0.7) * R).sum())

    ps_pos = ParamStore()
    ps_pos.add("a", rng.uniform(0.5, 2.0, size=(3, 4)))
    cases["log"] = (ps_pos, lambda p: (T.log(p["a"]) * R).sum())

    ps = _store(rng, table=(5, 3))
    idx = np.array([[0, 4, 4], [2, 1, 0]])
    Re = _probe(rng, (2, 3, 3))
    cases["embed"] = (ps, lambda p: (T.embed(p["table"], idx) * Re).sum())

    ps = _store(rng, x=(2, 3, 6), g=(6,), b=(6,))
    Rl = _probe(rng, (2, 3, 6))
    cases["layernorm"] = (ps, lambda p: (T.layernorm(p["x"], p["g"], p["b"]) * Rl).sum())

    ps = _store(rng, a=(2, 3), b=(2, 4))
    Rc = _probe(rng, (2, 7))
    cases["concat"] = (ps, lambda p: (T.concat([p["a"], p["b"]], axis=1) * Rc).sum())
    return cases


CASES = _cases()


@pytest.mark.parametrize("name", sorted(CASES))
def test_every_op_matches_finite_differences(name):
    ps, f = CASES[name]
    assert T.finite_diff_check(f, ps, eps=1e-5) < 1e-5


def test_every_op_kind_is_covered():
    covered = {k.split("_")[0] if k != "masked_fill" else k for k in CASES}
    assert set(T.OP_KINDS) <= covered


def test_softmax_cross_entropy_gradient():
    ps = ParamStore()
    ps.add("z", np.array([0.3, -1.2, 2.0]))
    onehot = Tensor(np.array([0.0, 1.0, 0.0]))
    f = lambda p: -(T.log(T.softmax(p["z"])) * onehot).sum()
    assert T.finite_diff_check(f, ps) < 1e-5


def test_two_layer_net_gradient():
    rng = np.random.default_rng(7)
    ps = _store(rng, w1=(4, 6), b1=(6,), w2=(6, 1), b2=(1,))
    X = Tensor(rng.normal(size=(5, 4)))
    y = Tensor(rng.normal(size=(5, 1)))
    f = lambda p: T.square(T.tanh(X @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"] - y).mean()
    assert T.finite_diff_check(f, ps) < 1e-5


def test_relu_kink_uses_half_subgradient():
    ps = ParamStore()
    ps.add("a", np.zeros(3))
    with T.Tape() as tape:
        loss = T.relu(ps["a"]).sum()
    np.testing.assert_array_equal(tape.gradient(loss, ps)["a"], 0.5)


class TestShapes:
    def test_mismatched_add_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3,\).*\(2, 4\)"):
            Tensor(np.zeros((2, 4))) + Tensor(np.zeros(3))

    def test_matmul_inner_dimension(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))

    def test_backward_needs_scalar(self):
        ps = ParamStore()
        ps.add("a", np.ones(3))
        with T.Tape() as tape:
            out = ps["a"] * 2.0
        with pytest.raises(ShapeError):
            tape.gradient(out, ps)

    def test_log_domain_propagates_nan(self):
        with np.errstate(invalid="ignore"):
            assert np.isnan(T.log(Tensor(np.array([-1.0]))).data[0])

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            T.apply("conv", [Tensor(1.0)])


def test_no_tape_records_nothing():
    ps = ParamStore()
    ps.add("a", np.ones(2))
    out = ps["a"] * 3.0
    assert out._node is None


def test_untouched_parameter_gets_zero_gradient():
    ps = ParamStore()
    ps.add("a", np.ones(2))
    ps.add("unused", np.ones(3))
    with T.Tape() as tape:
        loss = (ps["a"] * ps["a"]).sum()
    g = tape.gradient(loss, ps)
    np.testing.assert_array_equal(g["unused"], 0.0)
    np.testing.assert_allclose(g["a"], 2.0)


def test_gradient_accumulates_over_reuse():
    ps = ParamStore()
    ps.add("a", np.array([1.5]))
    with T.Tape() as tape:
        loss = (ps["a"] * ps["a"] * ps["a"]).sum()
    np.testing.assert_allclose(tape.gradient(loss, ps)["a"], 3 * 1.5 ** 2)


class TestParamStore:
    def test_duplicate_name(self):
        ps = ParamStore()
        ps.add("w", np.zeros(2))
        with pytest.raises(KeyError):
            ps.add("w", np.zeros(2))

    def test_set_keeps_shape(self):
        ps = ParamStore()
        ps.add("w", np.zeros(2))
        with pytest.raises(ShapeError):
            ps.set("w", np.zeros(3))


class TestAdamW:
    def test_first_step_moves_by_lr(self):
        ps = ParamStore()
        ps.add("w", np.array([1.0, -2.0]))
        hyper = T.AdamWConfig(lr=0.1, weight_decay=0.0)
        assert T.adamw_step(ps, {"w": np.array([3.0, -0.5])}, hyper)
        np.testing.assert_allclose(ps["w"].data, [0.9, -1.9], atol=1e-7)

    def test_decoupled_decay(self):
        ps = ParamStore()
        ps.add("w", np.array([2.0]))
        T.adamw_step(ps, {"w": np.zeros(1)}, T.AdamWConfig(lr=0.1, weight_decay=0.5))
        np.testing.assert_allclose(ps["w"].data, [2.0 * (1 - 0.05)])

    def test_nonfinite_gradient_skips(self):
        ps = ParamStore()
        ps.add("w", np.array([1.0]))
        assert not T.adamw_step(ps, {"w": np.array([np.nan])}, T.AdamWConfig())
        assert ps["w"].data[0] == 1.0 and ps.step == 0

    def test_rejects_nonpositive_lr(self):
        ps = ParamStore()
        ps.add("w", np.array([1.0]))
        with pytest.raises(ValueError):
            T.adamw_step(ps, {"w": np.zeros(1)}, T.AdamWConfig(lr=0.0))


def test_finite_diff_rejects_nonfinite():
    ps = ParamStore()
    ps.add("a", np.array([-1.0]))
    with pytest.raises(ValueError), np.errstate(invalid="ignore"):
        T.finite_diff_check(lambda p: T.log(p["a"]).sum(), ps)


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    ps = _store(rng, a=(3, 2), b=(5,))
    T.save_checkpoint(ps, tmp_path / "ck", {"note": "x"})
    man = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert man["format"] == "dnfs-params-v1"
    assert os.path.getsize(tmp_path / "ck" / "params.bin") == 8 * 11
    loaded, meta = T.load_checkpoint(tmp_path / "ck")
    assert meta == {"note": "x"}
    for name, p in ps.items():
        assert loaded[name].data.tobytes() == p.data.tobytes()


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        T.load_checkpoint(tmp_path / "nope")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_suffix_broadcast_gradient_sums_rows(a, b, c):
    ps = ParamStore()
    ps.add("x", np.ones((a, b, c)))
    ps.add("bias", np.zeros(c))
    with T.Tape() as tape:
        loss = (ps["x"] + ps["bias"]).sum()
    g = tape.gradient(loss, ps)
    np.testing.assert_array_equal(g["bias"], np.full(c, a * b))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(vals):
    out = T.softmax(Tensor(np.array(vals))).data
    assert abs(out.sum() - 1.0) < 1e-12 and np.all(out >= 0)

import numpy as np
import pytest

from aei.errors import FormatError, ShapeError, UsageError
from aei.nn import (
    OptState,
    ParamSet,
    adam_update,
    backward,
    clip_grad_norm,
    forward_mlp,
    global_grad_norm,
    grad_check,
    gru_step,
    init_gru,
    init_mlp,
    load_tensors,
    orthogonal,
    save_tensors,
)
from aei.tensor import Tensor


def mlp_params(sizes, seed=0, zero=False):
    p = ParamSet()
    init_mlp(p, "f.", sizes, np.random.default_rng(seed))
    if zero:
        for _, t in p.items():
            t.data = np.zeros_like(t.data)
    return p


def gru_params(din, dh, seed=0, zero=False):
    p = ParamSet()
    init_gru(p, "g.", din, dh, np.random.default_rng(seed))
    if zero:
        for _, t in p.items():
            t.data = np.zeros_like(t.data)
    return p


class TestParamSet:
    def test_names_sorted_and_unique(self):
        p = ParamSet()
        p.add("b", np.zeros(2))
        p.add("a", np.zeros(2))
        assert p.names() == ["a", "b"]
        with pytest.raises(UsageError):
            p.add("a", np.zeros(2))

    def test_merged_shares_tensors(self):
        a, b = ParamSet(), ParamSet()
        ta = a.add("x", np.zeros(2))
        b.add("y", np.zeros(2))
        m = a.merged(b)
        assert m["x"] is ta

    def test_load_state_shape_mismatch(self):
        p = ParamSet()
        p.add("w", np.zeros((2, 2)))
        with pytest.raises(FormatError, match="'w'"):
            p.load_state({"w": np.zeros(3)})


class TestMlp:
    def test_zero_params_zero_output(self):
        p = mlp_params([3, 4, 2], zero=True)
        out = forward_mlp(p, "f.", Tensor(np.ones((5, 3))), 2)
        np.testing.assert_array_equal(out.data, np.zeros((5, 2)))

    def test_identity_single_layer(self):
        p = ParamSet()
        p.add("f.w0", np.eye(3))
        p.add("f.b0", np.zeros(3))
        x = np.random.default_rng(0).standard_normal((2, 3))
        out = forward_mlp(p, "f.", Tensor(x), 1)
        np.testing.assert_array_equal(out.data, x)

    def test_two_layer_matches_hand_computation(self):
        # explicit forward: y = W1^T tanh(W0^T x + b0) + b1 on a 3-vector
        p = mlp_params([3, 4, 2], seed=3)
        x = np.array([[0.3, -1.2, 0.7]])
        h = np.tanh(x @ p["f.w0"].data + p["f.b0"].data)
        expected = h @ p["f.w1"].data + p["f.b1"].data
        out = forward_mlp(p, "f.", Tensor(x), 2)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_shape_error_names_layer(self):
        p = mlp_params([3, 4, 2])
        with pytest.raises(ShapeError, match="f.w0"):
            forward_mlp(p, "f.", Tensor(np.ones((1, 5))), 2)


class TestGru:
    def test_zero_params_halve_hidden(self):
        # z = sigmoid(0) = 0.5 and hbar = 0, so h' = 0.5 h
        p = gru_params(3, 4, zero=True)
        h = np.array([[1.0, -2.0, 0.5, 4.0]])
        out = gru_step(p, "g.", Tensor(np.ones((1, 3))), Tensor(h))
        np.testing.assert_allclose(out.data, 0.5 * h, atol=1e-15)

    def test_zero_params_zero_hidden_stays_zero(self):
        p = gru_params(3, 4, zero=True)
        out = gru_step(p, "g.", Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_matches_independent_numpy_implementation(self):
        # independent oracle: plain numpy GRU with the same update equations
        p = gru_params(4, 4, seed=9)
        rng = np.random.default_rng(10)
        x = rng.standard_normal((3, 4))
        h = rng.standard_normal((3, 4))

        def sigmoid(v):
            return 1.0 / (1.0 + np.exp(-v))

        z = sigmoid(x @ p["g.Wz"].data + h @ p["g.Uz"].data + p["g.bz"].data)
        r = sigmoid(x @ p["g.Wr"].data + h @ p["g.Ur"].data + p["g.br"].data)
        hbar = np.tanh(x @ p["g.Wh"].data + (r * h) @ p["g.Uh"].data + p["g.bh"].data)
        expected = (1.0 - z) * h + z * hbar

        out = gru_step(p, "g.", Tensor(x), Tensor(h))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_shape_error(self):
        p = gru_params(3, 4)
        with pytest.raises(ShapeError, match="width"):
            gru_step(p, "g.", Tensor(np.ones((1, 5))), Tensor(np.ones((1, 4))))


class TestBackward:
    def test_sum_of_squares(self):
        p = ParamSet()
        w = p.add("w", np.array([1.0, -2.0, 3.0]))
        grads = backward((w * w).sum(), p)
        np.testing.assert_allclose(grads["w"], 2 * w.data)

    def test_unreachable_parameter_gets_zeros(self):
        p = ParamSet()
        w = p.add("w", np.ones(3))
        p.add("unused", np.ones((2, 2)))
        grads = backward((w * 2).sum(), p)
        np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))

    def test_non_scalar_loss_rejected(self):
        p = ParamSet()
        w = p.add("w", np.ones(3))
        with pytest.raises(UsageError):
            backward(w * 2, p)

    def test_mlp_gru_composite_finite_differences(self):
        p = ParamSet()
        rng = np.random.default_rng(2)
        init_mlp(p, "m.", [3, 5, 4], rng)
        init_gru(p, "g.", 4, 4, rng)
        x = np.random.default_rng(4).standard_normal((2, 3))

        def fn(params):
            h = Tensor(np.zeros((2, 4)))
            enc = forward_mlp(params, "m.", Tensor(x), 2)
            for _ in range(3):
                h = gru_step(params, "g.", enc, h)
            return (h * h).mean()

        assert grad_check(fn, p, max_coords=150) < 1e-4


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = ParamSet()
        p.add("w", np.array([1.0, 2.0]))
        opt = OptState(p)
        adam_update(p, {"w": np.zeros(2)}, opt, lr=0.1)
        np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])
        assert opt.step == 1

    def test_first_step_magnitude_is_lr(self):
        p = ParamSet()
        p.add("w", np.array([1.0, -1.0]))
        opt = OptState(p)
        g = np.array([0.3, -4.0])
        adam_update(p, {"w": g}, opt, lr=0.05)
        # bias-corrected first step is lr * sign(g) up to epsilon
        np.testing.assert_allclose(
            p["w"].data, [1.0 - 0.05, -1.0 + 0.05], rtol=1e-6
        )

    def test_quadratic_descent_is_monotone(self):
        p = ParamSet()
        p.add("w", np.array([1.0]))
        opt = OptState(p)
        values = [abs(float(p["w"].data[0]))]
        for _ in range(3):
            grads = backward((p["w"] * p["w"]).sum(), p)
            adam_update(p, grads, opt, lr=0.1)
            values.append(abs(float(p["w"].data[0])))
        assert values == sorted(values, reverse=True)

    def test_shape_mismatch(self):
        p = ParamSet()
        p.add("w", np.ones(3))
        with pytest.raises(ShapeError):
            adam_update(p, {"w": np.ones(4)}, OptState(p), lr=0.1)


class TestGradCheck:
    def test_quadratic_is_tiny(self):
        p = ParamSet()
        p.add("w", np.random.default_rng(0).standard_normal(5))
        err = grad_check(lambda q: (q["w"] * q["w"]).sum(), p)
        assert err < 1e-8

    def test_gru_chain_of_ten(self):
        p = gru_params(3, 5, seed=13)
        x = np.random.default_rng(14).standard_normal((2, 3))

        def fn(params):
            h = Tensor(np.zeros((2, 5)))
            for _ in range(10):
                h = gru_step(params, "g.", Tensor(x), h)
            return (h * h).sum()

        assert grad_check(fn, p, max_coords=120) < 1e-4

    def test_softplus_at_large_input(self):
        p = ParamSet()
        p.add("w", np.array([30.0, -30.0, 0.5]))
        err = grad_check(lambda q: q["w"].softplus().sum(), p)
        assert err < 1e-4


class TestGradClip:
    def test_norm_and_scaling(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert global_grad_norm(grads) == pytest.approx(5.0)
        norm = clip_grad_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert global_grad_norm(grads) == pytest.approx(1.0)

    def test_below_threshold_untouched(self):
        grads = {"a": np.array([0.3])}
        clip_grad_norm(grads, 1.0)
        np.testing.assert_array_equal(grads["a"], [0.3])


class TestInit:
    def test_orthogonal_columns(self):
        for rows, cols in ((8, 4), (4, 8), (6, 6)):
            q = orthogonal(np.random.default_rng(3), rows, cols, gain=1.0)
            if rows >= cols:
                np.testing.assert_allclose(q.T @ q, np.eye(cols), atol=1e-12)
            else:
                np.testing.assert_allclose(q @ q.T, np.eye(rows), atol=1e-12)

    def test_seeded_init_is_bitwise_reproducible(self):
        a = mlp_params([3, 4, 2], seed=21)
        b = mlp_params([3, 4, 2], seed=21)
        for (_, ta), (_, tb) in zip(a.items(), b.items()):
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_forward_and_gradients_deterministic(self):
        x = np.random.default_rng(30).standard_normal((4, 3))
        outs, grads = [], []
        for _ in range(2):
            p = mlp_params([3, 4, 2], seed=22)
            out = forward_mlp(p, "f.", Tensor(x), 2)
            outs.append(out.data.copy())
            grads.append(backward((out * out).sum(), p)["f.w0"])
        np.testing.assert_array_equal(outs[0], outs[1])
        np.testing.assert_array_equal(grads[0], grads[1])


class TestCheckpointContainer:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "a/w": rng.standard_normal((3, 4)),
            "b" * 40: rng.standard_normal(7),
            "scalar": np.array(0.123456789012345678),
            "i3": rng.standard_normal((2, 1, 3)),
        }
        path = tmp_path / "t.bin"
        save_tensors(path, arrays)
        loaded = load_tensors(path)
        assert sorted(loaded) == sorted(arrays)
        for k in arrays:
            assert loaded[k].shape == np.asarray(arrays[k]).shape
            assert loaded[k].tobytes() == np.asarray(arrays[k], dtype="<f8").tobytes()

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "t.bin"
        save_tensors(path, {"w": np.ones((4, 4))})
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 9])
        with pytest.raises(FormatError, match="truncated"):
            load_tensors(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.bin"
        path.write_bytes(b"NOTATNSR" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            load_tensors(path)

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "t.bin"
        save_tensors(path, {"w": np.ones(2)})
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(FormatError, match="trailing"):
            load_tensors(path)

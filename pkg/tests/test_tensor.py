import numpy as np
import pytest

from aei.errors import ShapeError, UsageError
from aei.tensor import (
    Tensor,
    concat,
    gru_cell,
    linear,
    masked_mean_rows,
    masked_sq_loss,
    maximum,
    minimum,
    no_grad,
    repeat_rows,
)


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def numeric_grad(fn, x: Tensor, eps=1e-6):
    g = np.zeros_like(x.data)
    flat = x.data.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn().item()
        flat[i] = orig - eps
        fm = fn().item()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


OPS = {
    "add": lambda x: (x + 2.0) + x,
    "sub": lambda x: (3.0 - x) - x * 0.5,
    "mul": lambda x: x * x * 1.5,
    "div": lambda x: x / (x * x + 1.0),
    "pow": lambda x: x**3,
    "exp": lambda x: x.exp(),
    "log": lambda x: (x * x + 1.0).log(),
    "tanh": lambda x: x.tanh(),
    "sigmoid": lambda x: x.sigmoid(),
    "softplus": lambda x: x.softplus(),
    "clip": lambda x: x.clip(-0.5, 0.5),
    "reshape": lambda x: x.reshape(6),
    "getitem": lambda x: x[1:, :],
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_elementwise_grads_match_finite_differences(name):
    op = OPS[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    x = leaf(rng.uniform(0.2, 0.9, size=(2, 3)))
    loss = op(x).sum()
    loss.backward()
    analytic = x.grad.copy()
    x.grad = None
    numeric = numeric_grad(lambda: op(x).sum(), x)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)


def test_matmul_grads():
    rng = np.random.default_rng(0)
    a = leaf(rng.standard_normal((3, 4)))
    b = leaf(rng.standard_normal((4, 2)))
    (a @ b).sum().backward()
    ga, gb = a.grad.copy(), b.grad.copy()
    a.grad = b.grad = None
    np.testing.assert_allclose(ga, numeric_grad(lambda: (a @ b).sum(), a), atol=1e-7)
    np.testing.assert_allclose(gb, numeric_grad(lambda: (a @ b).sum(), b), atol=1e-7)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        leaf(np.ones((2, 3))) @ leaf(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        leaf(np.ones(3)) @ leaf(np.ones((3, 2)))


def test_broadcast_bias_grad_sums_over_rows():
    x = leaf(np.ones((4, 3)))
    b = leaf(np.zeros(3))
    (x + b).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full(3, 4.0))


def test_minimum_maximum_grads_and_ties():
    a = leaf([1.0, 5.0, 2.0])
    b = leaf([2.0, 3.0, 2.0])
    minimum(a, b).sum().backward()
    np.testing.assert_array_equal(a.grad, [1.0, 0.0, 1.0])  # tie routes to a
    np.testing.assert_array_equal(b.grad, [0.0, 1.0, 0.0])
    a.grad = b.grad = None
    maximum(a, b).sum().backward()
    np.testing.assert_array_equal(a.grad, [0.0, 1.0, 1.0])
    np.testing.assert_array_equal(b.grad, [1.0, 0.0, 0.0])


def test_concat_split_gradient():
    a = leaf(np.ones((2, 2)))
    b = leaf(np.ones((2, 3)))
    out = concat([a, b], axis=1)
    (out * np.arange(10.0).reshape(2, 5)).sum().backward()
    np.testing.assert_array_equal(a.grad, [[0, 1], [5, 6]])
    np.testing.assert_array_equal(b.grad, [[2, 3, 4], [7, 8, 9]])


def test_repeat_rows_gradient():
    x = leaf(np.arange(6.0).reshape(2, 3))
    out = repeat_rows(x, 2)
    assert out.shape == (4, 3)
    np.testing.assert_array_equal(out.data[0], out.data[1])
    (out * np.ones((4, 3))).sum().backward()
    np.testing.assert_array_equal(x.grad, np.full((2, 3), 2.0))


def test_backward_requires_scalar():
    x = leaf(np.ones((2, 2)))
    with pytest.raises(UsageError):
        (x * 2).backward()


def test_grad_accumulates_through_shared_subexpression():
    x = leaf([2.0])
    y = x * x  # used twice below
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_no_grad_skips_recording():
    x = leaf([1.0, 2.0])
    with no_grad():
        y = (x * 3).sum()
    assert y._backward is None and y._parents == ()
    assert not y.requires_grad


class TestMaskedMeanRows:
    def test_identical_rows_pass_through(self):
        row = np.arange(5.0)
        x = Tensor(np.stack([np.stack([row, row, row])] * 2))
        out = masked_mean_rows(x, np.ones((2, 3), dtype=bool))
        np.testing.assert_array_equal(out.data, np.stack([row, row]))

    @pytest.mark.parametrize("n", [2, 3, 5, 8])
    def test_permutation_invariance_is_exact(self, n):
        rng = np.random.default_rng(n)
        x = rng.standard_normal((4, n, 6))
        base = masked_mean_rows(Tensor(x), np.ones((4, n), dtype=bool)).data
        for _ in range(10):
            perm = rng.permutation(n)
            permuted = masked_mean_rows(
                Tensor(x[:, perm]), np.ones((4, n), dtype=bool)
            ).data
            np.testing.assert_array_equal(base, permuted)

    def test_masked_rows_are_ignored_even_if_garbage(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 4, 3))
        mask = np.array([[True, True, False, True], [True, False, False, True]])
        clean = masked_mean_rows(Tensor(x), mask).data
        dirty = x.copy()
        dirty[~mask] = np.nan
        np.testing.assert_array_equal(
            clean, masked_mean_rows(Tensor(dirty), mask).data
        )

    def test_all_masked_raises(self):
        with pytest.raises(UsageError):
            masked_mean_rows(Tensor(np.ones((1, 2, 3))), np.zeros((1, 2), dtype=bool))

    def test_gradient(self):
        rng = np.random.default_rng(8)
        x = leaf(rng.standard_normal((2, 3, 4)))
        mask = np.array([[True, False, True], [True, True, True]])
        w = rng.standard_normal((2, 4))
        fn = lambda: (masked_mean_rows(x, mask) * w).sum()
        fn().backward()
        analytic = x.grad.copy()
        x.grad = None
        np.testing.assert_allclose(analytic, numeric_grad(fn, x), atol=1e-8)


class TestFusedOps:
    def test_linear_matches_unfused(self):
        rng = np.random.default_rng(0)
        x = leaf(rng.standard_normal((5, 3)))
        w = leaf(rng.standard_normal((3, 4)))
        b = leaf(rng.standard_normal(4))
        np.testing.assert_allclose(
            linear(x, w, b, tanh_act=True).data,
            np.tanh(x.data @ w.data + b.data),
            atol=1e-15,
        )

    def test_linear_grads(self):
        rng = np.random.default_rng(1)
        x = leaf(rng.standard_normal((5, 3)))
        w = leaf(rng.standard_normal((3, 4)))
        b = leaf(rng.standard_normal(4))
        coef = rng.standard_normal((5, 4))
        fn = lambda: (linear(x, w, b, tanh_act=True) * coef).sum()
        fn().backward()
        grads = [t.grad.copy() for t in (x, w, b)]
        for t in (x, w, b):
            t.grad = None
        for t, g in zip((x, w, b), grads):
            np.testing.assert_allclose(g, numeric_grad(fn, t), atol=1e-7)

    def test_gru_cell_grads(self):
        rng = np.random.default_rng(2)
        din, dh = 3, 4
        x = leaf(rng.standard_normal((2, din)))
        h = leaf(rng.standard_normal((2, dh)))
        ps = [leaf(rng.standard_normal((din, dh)) * 0.5) for _ in range(3)]
        us = [leaf(rng.standard_normal((dh, dh)) * 0.5) for _ in range(3)]
        bs = [leaf(rng.standard_normal(dh) * 0.1) for _ in range(3)]
        coef = rng.standard_normal((2, dh))
        everything = [x, h] + ps + us + bs

        def fn():
            out = gru_cell(
                x, h, ps[0], us[0], bs[0], ps[1], us[1], bs[1], ps[2], us[2], bs[2]
            )
            return (out * coef).sum()

        fn().backward()
        grads = [t.grad.copy() for t in everything]
        for t in everything:
            t.grad = None
        for t, g in zip(everything, grads):
            np.testing.assert_allclose(g, numeric_grad(fn, t), atol=2e-7)

    def test_masked_sq_loss_grads(self):
        rng = np.random.default_rng(4)
        p = leaf(rng.standard_normal((3, 2, 4)))
        target = rng.standard_normal((3, 2, 4))
        w = (rng.uniform(size=(3, 2, 4)) > 0.3).astype(float)
        fn = lambda: masked_sq_loss(p, target, w).sum()
        fn().backward()
        analytic = p.grad.copy()
        p.grad = None
        np.testing.assert_allclose(analytic, numeric_grad(fn, p), atol=1e-7)
        expected = ((p.data - target) ** 2 * w).reshape(3, -1).sum(axis=1)
        np.testing.assert_allclose(masked_sq_loss(p, target, w).data, expected, atol=1e-13)

import numpy as np
import pytest

from polarized_vae import autodiff as ad
from polarized_vae.errors import (
    ContractError,
    DimensionError,
    DomainError,
    NumericError,
    OptimizerError,
)


def fd_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function of a flat array."""
    g = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + h
        fp = f(x)
        x.flat[i] = orig - h
        fm = f(x)
        x.flat[i] = orig
        g.flat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


class TestMatmul:
    def test_identity(self):
        eye = ad.Tensor(np.eye(2))
        m = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(eye, m)
        assert np.array_equal(out.data, m.data)

    def test_small_product(self):
        out = ad.matmul(ad.Tensor([[1.0, 2.0]]), ad.Tensor([[3.0], [4.0]]))
        assert out.data.shape == (1, 1)
        assert out.data[0, 0] == 11.0

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a0 = rng.normal(size=(3, 4))
        b0 = rng.normal(size=(4, 2))

        def f_a(x):
            return (x @ b0).sum()

        def f_b(x):
            return (a0 @ x).sum()

        a = ad.Tensor(a0.copy(), requires_grad=True)
        b = ad.Tensor(b0.copy(), requires_grad=True)
        loss = ad.tsum(ad.matmul(a, b))
        ga, gb = ad.gradients(loss, [a, b])
        assert rel_err(ga, fd_grad(f_a, a0.copy())) < 1e-6
        assert rel_err(gb, fd_grad(f_b, b0.copy())) < 1e-6


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(ad.Tensor(0.0)).item() == 0.5

    def test_tanh_at_zero_and_derivative(self):
        x = ad.Tensor(0.0, requires_grad=True)
        y = ad.tanh(x)
        assert y.item() == 0.0
        y.backward()
        assert x.grad == pytest.approx(1.0)

    def test_log_domain_error(self):
        with pytest.raises(DomainError):
            ad.log(ad.Tensor([1.0, 0.0]))

    def test_concat_and_slice_roundtrip(self):
        a = ad.Tensor(np.arange(6, dtype=float).reshape(2, 3))
        b = ad.Tensor(np.arange(4, dtype=float).reshape(2, 2))
        cat = ad.concat([a, b], axis=1)
        assert cat.shape == (2, 5)
        back = ad.columns(cat, 3, 5)
        assert np.array_equal(back.data, b.data)

    @pytest.mark.parametrize("kind", ["sum", "mean", "dot", "l2norm"])
    def test_reduction_gradients_match_fd(self, kind):
        rng = np.random.default_rng(7)
        x0 = rng.normal(size=8) + 2.0
        y0 = rng.normal(size=8)

        builders = {
            "sum": (lambda t: ad.tsum(ad.mul(t, t)), lambda x: (x * x).sum()),
            "mean": (lambda t: ad.tmean(ad.exp(t)), lambda x: np.exp(x).mean()),
            "dot": (lambda t: ad.dot(t, ad.Tensor(y0)), lambda x: x @ y0),
            "l2norm": (lambda t: ad.l2norm(t), lambda x: np.linalg.norm(x)),
        }
        build, ref = builders[kind]
        x = ad.Tensor(x0.copy(), requires_grad=True)
        loss = build(x)
        (g,) = ad.gradients(loss, [x])
        assert rel_err(g, fd_grad(ref, x0.copy())) < 1e-6

    def test_every_op_kind_gradient_at_random_points(self):
        # 20 random points per differentiable op kind, rel err < 1e-4.
        rng = np.random.default_rng(42)
        v = 6

        def scalarize(t):
            return ad.tsum(t)

        cases = {
            "add": lambda x, y: ad.add(x, y),
            "sub": lambda x, y: ad.sub(x, y),
            "mul": lambda x, y: ad.mul(x, y),
            "div": lambda x, y: ad.div(x, ad.add(ad.mul(y, y), 1.0)),
            "exp": lambda x, y: ad.exp(x),
            "log": lambda x, y: ad.log(ad.add(ad.mul(x, x), 1.0)),
            "sqrt": lambda x, y: ad.sqrt(ad.add(ad.mul(x, x), 1.0)),
            "sigmoid": lambda x, y: ad.sigmoid(x),
            "tanh": lambda x, y: ad.tanh(x),
            "relu": lambda x, y: ad.relu(ad.add(x, 0.3)),
            "concat": lambda x, y: ad.mul(ad.concat([x, y]), ad.concat([y, x])),
            "slice": lambda x, y: ad.columns(ad.mul(x, x), 1, 4),
            "matmul": lambda x, y: ad.matmul(_as_row(x), _as_col(y)),
            "gather": lambda x, y: ad.gather_rows(_outer(x, y), [0, 2, 2]),
        }

        def _as_row(t):
            return ad._reshape_row(t)

        def _as_col(t):
            return ad.transpose(ad._reshape_row(t))

        def _outer(x, y):
            return ad.matmul(ad.transpose(_as_row(x)), _as_row(y))

        for name, build in cases.items():
            for _ in range(20):
                x0 = rng.normal(size=v)
                y0 = rng.normal(size=v)
                if name == "relu":
                    # keep clear of the kink
                    x0 = np.where(np.abs(x0 + 0.3) < 1e-3, x0 + 0.1, x0)
                x = ad.Tensor(x0.copy(), requires_grad=True)
                y = ad.Tensor(y0.copy(), requires_grad=True)
                loss = scalarize(build(x, y))
                gx, gy = ad.gradients(loss, [x, y])

                def ref_x(arr):
                    xt = ad.Tensor(arr)
                    yt = ad.Tensor(y0)
                    return scalarize(build(xt, yt)).item()

                def ref_y(arr):
                    xt = ad.Tensor(x0)
                    yt = ad.Tensor(arr)
                    return scalarize(build(xt, yt)).item()

                assert rel_err(gx, fd_grad(ref_x, x0.copy())) < 1e-4, name
                assert rel_err(gy, fd_grad(ref_y, y0.copy())) < 1e-4, name


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = ad.softmax_cross_entropy(ad.Tensor(np.zeros(4)), 2)
        assert loss.item() == pytest.approx(np.log(4.0), abs=1e-12)

    def test_large_logit_is_stable(self):
        loss = ad.softmax_cross_entropy(ad.Tensor([1000.0, 0.0, 0.0]), 0)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            ad.softmax_cross_entropy(ad.Tensor(np.zeros(3)), 3)

    def test_softmax_normalizes(self):
        rng = np.random.default_rng(3)
        p = ad.softmax(rng.normal(size=(5, 9)) * 10)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(p >= 0)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            logits = ad.Tensor(rng.normal(size=7) * 3)
            assert ad.softmax_cross_entropy(logits, int(rng.integers(7))).item() >= 0

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(5)
        x0 = rng.normal(size=6) * 2

        def ref(arr):
            return ad.softmax_cross_entropy(ad.Tensor(arr), 2).item()

        x = ad.Tensor(x0.copy(), requires_grad=True)
        loss = ad.softmax_cross_entropy(x, 2)
        (g,) = ad.gradients(loss, [x])
        assert rel_err(g, fd_grad(ref, x0.copy())) < 1e-5

    def test_backward_is_softmax_minus_onehot(self):
        x0 = np.array([0.5, -1.0, 2.0])
        x = ad.Tensor(x0.copy(), requires_grad=True)
        loss = ad.softmax_cross_entropy(x, 1)
        (g,) = ad.gradients(loss, [x])
        expected = ad.softmax(x0)
        expected[1] -= 1.0
        assert np.allclose(g, expected, atol=1e-12)


class TestBackward:
    def test_constant_root_gives_zero_grads(self):
        x = ad.Tensor(2.0, requires_grad=True)
        c = ad.Tensor(5.0)
        (g,) = ad.gradients(ad.mul(c, 1.0), [x])
        assert g == 0.0

    def test_product_rule(self):
        x = ad.Tensor(2.0, requires_grad=True)
        y = ad.Tensor(3.0, requires_grad=True)
        gx, gy = ad.gradients(ad.mul(x, y), [x, y])
        assert gx == 3.0 and gy == 2.0

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ContractError):
            ad.Tensor(np.ones(3)).backward()

    def test_fanout_accumulates(self):
        x = ad.Tensor(3.0, requires_grad=True)
        y = ad.add(ad.mul(x, x), x)  # x^2 + x -> 2x + 1 = 7
        (g,) = ad.gradients(y, [x])
        assert g == pytest.approx(7.0)

    def test_backward_is_linear(self):
        rng = np.random.default_rng(11)
        x0 = rng.normal(size=5)

        def build(x):
            f = ad.tsum(ad.sigmoid(x))
            g = ad.tsum(ad.mul(x, x))
            return f, g

        x = ad.Tensor(x0.copy(), requires_grad=True)
        f, g = build(x)
        (gf,) = ad.gradients(f, [x])
        (gg,) = ad.gradients(g, [x])
        x2 = ad.Tensor(x0.copy(), requires_grad=True)
        f2, g2 = build(x2)
        (gsum,) = ad.gradients(ad.add(f2, g2), [x2])
        assert np.allclose(gsum, gf + gg, atol=1e-12)


class TestGradCheck:
    def test_quadratic(self):
        x = ad.Tensor(3.0, requires_grad=True)
        err = ad.grad_check(lambda: ad.mul(x, x), [x])
        assert err < 1e-9

    def test_sigmoid_at_zero(self):
        x = ad.Tensor(0.0, requires_grad=True)
        # numeric derivative should be ~0.25
        err = ad.grad_check(lambda: ad.sigmoid(x), [x])
        assert err < 1e-9

    def test_requires_positive_h(self):
        x = ad.Tensor(1.0, requires_grad=True)
        with pytest.raises(ContractError):
            ad.grad_check(lambda: ad.mul(x, x), [x], h=0.0)

    def test_nonfinite_objective_raises(self):
        x = ad.Tensor(800.0, requires_grad=True)
        with pytest.raises(NumericError):
            ad.grad_check(lambda: ad.exp(x), [x])


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = ad.AdamState([p])
        before = p.data.copy()
        ad.adam_step([p], [np.zeros(2)], state, lr=0.1)
        assert np.array_equal(p.data, before)

    def test_first_step_magnitude_is_lr(self):
        p = ad.Tensor(np.zeros(3), requires_grad=True)
        state = ad.AdamState([p])
        ad.adam_step([p], [np.ones(3)], state, lr=0.01)
        # bias-corrected first step moves by ~lr against the gradient sign
        assert np.allclose(np.abs(p.data), 0.01, rtol=1e-6)

    def test_nan_gradient_rejected_without_mutation(self):
        p = ad.Tensor(np.ones(2), requires_grad=True)
        state = ad.AdamState([p])
        bad = np.array([np.nan, 0.0])
        with pytest.raises(OptimizerError):
            ad.adam_step([p], [bad], state, lr=0.1)
        assert np.array_equal(p.data, np.ones(2))
        assert state.step_count == 0
        assert np.array_equal(state.m[0], np.zeros(2))

    def test_minimizes_quadratic_in_windows(self):
        target = np.array([1.5, -0.5, 2.0, 0.25])
        p = ad.Tensor(np.zeros(4), requires_grad=True)
        state = ad.AdamState([p])
        dists = []
        for _ in range(50):
            diff = ad.sub(p, ad.Tensor(target))
            loss = ad.tsum(ad.mul(diff, diff))
            (g,) = ad.gradients(loss, [p])
            dists.append(float(np.linalg.norm(p.data - target)))
            ad.adam_step([p], [g], state, lr=0.05)
        dists.append(float(np.linalg.norm(p.data - target)))
        window = [np.median(dists[i : i + 10]) for i in range(0, 50, 10)]
        assert all(b < a for a, b in zip(window, window[1:]))


class TestDeterminism:
    def test_fixed_seed_bit_identical(self):
        def run():
            rng = np.random.default_rng(123)
            p = ad.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            state = ad.AdamState([p])
            for _ in range(5):
                x = ad.Tensor(rng.normal(size=(4, 4)))
                loss = ad.tsum(ad.mul(ad.sub(ad.matmul(p, x), 1.0), ad.sub(ad.matmul(p, x), 1.0)))
                (g,) = ad.gradients(loss, [p])
                ad.adam_step([p], [g], state, lr=0.01)
            return p.data.tobytes()

        assert run() == run()


def test_nonfinite_forward_is_an_error():
    with pytest.raises(NumericError):
        ad.exp(ad.Tensor(1e6))

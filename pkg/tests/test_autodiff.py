import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptsearch import autodiff as ad
from promptsearch.autodiff import (
    SgdConfig,
    Tape,
    Tensor,
    backward,
    cross_entropy,
    kl_divergence,
    layer_norm,
    matmul,
    no_grad,
    sgd_step,
    softmax_rows,
)
from promptsearch.errors import ContractError, DimensionError


def finite_difference(loss_fn, param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar loss wrt every entry of param."""
    out = np.zeros_like(param.data)
    it = np.nditer(param.data, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = param.data[idx]
        param.data[idx] = orig + step
        lp = float(loss_fn().data)
        param.data[idx] = orig - step
        lm = float(loss_fn().data)
        param.data[idx] = orig
        out[idx] = (lp - lm) / (2 * step)
        it.iternext()
    return out


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float((np.abs(a - b) / denom).max())


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        out = matmul(eye, eye)
        assert np.array_equal(out.data, np.eye(2))

    def test_identity_right(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(a, Tensor(np.eye(2)))
        assert np.array_equal(out.data, a.data)

    def test_against_scalar_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        out = matmul(Tensor(a), Tensor(b)).data
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                s = 0.0
                for k in range(4):
                    s += a[i, k] * b[k, j]
                expected[i, j] = s
        assert np.allclose(out, expected, rtol=0, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
            matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))


class TestSoftmaxRows:
    def test_uniform_row(self):
        out = softmax_rows(Tensor([[0.0, 0.0, 0.0, 0.0]]))
        assert np.allclose(out.data, 0.25, atol=1e-15)

    def test_hand_value(self):
        out = softmax_rows(Tensor([[math.log(3), 0.0, 0.0, 0.0]]))
        assert np.allclose(out.data, [[0.5, 1 / 6, 1 / 6, 1 / 6]], atol=1e-12)

    def test_large_logits_do_not_overflow(self):
        out = softmax_rows(Tensor([[1000.0, 0.0]]))
        assert np.isfinite(out.data).all()
        assert out.data[0, 0] > 1 - 1e-12

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_rows_sum_to_one_and_in_open_interval(self, m, n, seed):
        a = np.random.default_rng(seed).normal(scale=5.0, size=(m, n))
        p = softmax_rows(Tensor(a)).data
        assert np.abs(p.sum(axis=1) - 1.0).max() <= 1e-12
        assert (p > 0).all() and (p < 1).all() or n == 1


class TestLayerNorm:
    def test_constant_row_is_zeroed(self):
        out = layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-5)
        assert np.allclose(out.data, 0.0, atol=1e-10)

    def test_hand_value(self):
        # mean 0, biased variance 1 -> entries scaled by 1/sqrt(1 + eps)
        out = layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-5)
        expected = 1.0 / math.sqrt(1.0 + 1e-5)
        assert np.allclose(out.data, [[expected, -expected]], atol=1e-12)

    def test_zero_gain_broadcasts_bias(self):
        bias = np.array([1.0, 2.0, 3.0])
        out = layer_norm(Tensor(np.random.default_rng(0).normal(size=(4, 3))),
                         Tensor(np.zeros(3)), Tensor(bias), 1e-5)
        assert np.allclose(out.data, np.tile(bias, (4, 1)), atol=1e-12)

    def test_normalizes_each_row(self):
        a = np.random.default_rng(1).normal(scale=3.0, size=(5, 8))
        out = layer_norm(Tensor(a), Tensor(np.ones(8)), Tensor(np.zeros(8)), 1e-8).data
        assert np.abs(out.mean(axis=1)).max() < 1e-10
        assert np.abs(out.var(axis=1) - 1.0).max() < 1e-6


class TestCrossEntropy:
    def test_uniform_prediction(self):
        for c in (2, 5, 7):
            probs = Tensor(np.full((3, c), 1.0 / c))
            out = cross_entropy(probs, [0, c - 1, c // 2])
            assert np.isclose(float(out.data), math.log(c), atol=1e-12)

    def test_one_hot_correct(self):
        p = np.zeros((2, 4))
        p[0, 1] = p[1, 2] = 1.0
        out = cross_entropy(Tensor(p), [1, 2])
        assert float(out.data) == pytest.approx(0.0, abs=1e-9)

    def test_hand_value(self):
        out = cross_entropy(Tensor([[0.7, 0.3]]), [1])
        assert float(out.data) == pytest.approx(-math.log(0.3), abs=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor([[0.5, 0.5]]), [2])


class TestKlDivergence:
    def test_equal_distributions(self):
        p = Tensor([[0.2, 0.8], [0.5, 0.5]])
        q = Tensor(p.data.copy())
        assert float(kl_divergence(p, q).data) == 0.0

    def test_hand_value_with_clamping(self):
        out = kl_divergence(Tensor([[1.0, 0.0]]), Tensor([[0.5, 0.5]]))
        assert float(out.data) == pytest.approx(math.log(2), abs=1e-12)

    @given(st.integers(2, 6), st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_nonnegative_on_random_rows(self, c, seed):
        rng = np.random.default_rng(seed)
        t = rng.dirichlet(np.ones(c), size=3)
        s = rng.dirichlet(np.ones(c), size=3)
        assert float(kl_divergence(Tensor(t), Tensor(s)).data) >= -1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            kl_divergence(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 3))))

    def test_gradient_only_into_student(self):
        t = Tensor(np.array([[0.3, 0.7]]), requires_grad=True)
        s = Tensor(np.array([[0.6, 0.4]]), requires_grad=True)
        with Tape():
            loss = kl_divergence(t, s)
            backward(loss)
        assert s.grad is not None and np.abs(s.grad).max() > 0
        assert t.grad is None


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        with Tape():
            backward(ad.sum_all(x))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_dot_with_itself(self):
        x = Tensor(np.array([[1.0, -2.0, 3.0]]), requires_grad=True)
        with Tape():
            loss = matmul(x, ad.transpose(x))
            backward(loss)
        assert np.allclose(x.grad, 2 * x.data, atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape():
            y = ad.scale(x, 2.0)
            with pytest.raises(ContractError):
                backward(y)

    def test_off_tape_loss_rejected(self):
        x = Tensor(np.ones((1, 1)), requires_grad=True)
        with pytest.raises(ContractError):
            backward(ad.sum_all(x))  # no tape active

    def test_additive_accumulation(self):
        x = Tensor(np.array([[2.0, -1.0]]), requires_grad=True)
        with Tape():
            backward(ad.sum_all(x))
        once = x.grad.copy()
        with Tape():
            backward(ad.sum_all(x))
        assert np.array_equal(x.grad, 2 * once)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(7)
            x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            with Tape():
                h = ad.gelu(matmul(x, w))
                p = softmax_rows(h)
                loss = cross_entropy(p, [0, 1, 2, 3])
                backward(loss)
            return x.grad.tobytes(), w.grad.tobytes(), loss.data.tobytes()

        assert run() == run()


OPS = {
    "matmul": lambda rng: (
        [Tensor(rng.normal(size=(3, 5)), requires_grad=True),
         Tensor(rng.normal(size=(5, 2)), requires_grad=True)],
        lambda a, b: matmul(a, b),
    ),
    "add": lambda rng: (
        [Tensor(rng.normal(size=(4, 3)), requires_grad=True),
         Tensor(rng.normal(size=(4, 3)), requires_grad=True)],
        lambda a, b: ad.add(a, b),
    ),
    "scale": lambda rng: (
        [Tensor(rng.normal(size=(3, 3)), requires_grad=True)],
        lambda a: ad.scale(a, -1.7),
    ),
    "transpose": lambda rng: (
        [Tensor(rng.normal(size=(2, 5)), requires_grad=True)],
        lambda a: ad.transpose(a),
    ),
    "concat_rows": lambda rng: (
        [Tensor(rng.normal(size=(2, 4)), requires_grad=True),
         Tensor(rng.normal(size=(3, 4)), requires_grad=True)],
        lambda a, b: ad.concat_rows([a, b]),
    ),
    "take_rows": lambda rng: (
        [Tensor(rng.normal(size=(5, 3)), requires_grad=True)],
        lambda a: ad.take_rows(a, [4, 0, 0]),
    ),
    "softmax_rows": lambda rng: (
        [Tensor(rng.normal(size=(3, 6)), requires_grad=True)],
        lambda a: softmax_rows(a),
    ),
    "gelu": lambda rng: (
        [Tensor(rng.normal(size=(4, 4)), requires_grad=True)],
        lambda a: ad.gelu(a),
    ),
    "layer_norm": lambda rng: (
        [Tensor(rng.normal(size=(3, 6)), requires_grad=True),
         Tensor(rng.normal(size=6), requires_grad=True),
         Tensor(rng.normal(size=6), requires_grad=True)],
        lambda a, g, b: layer_norm(a, g, b, 1e-5),
    ),
    "l2_normalize_rows": lambda rng: (
        [Tensor(rng.normal(size=(3, 5)), requires_grad=True)],
        lambda a: ad.l2_normalize_rows(a),
    ),
    "mix": lambda rng: (
        [Tensor(rng.normal(size=(3, 4)), requires_grad=True),
         Tensor(rng.normal(size=(3, 4)), requires_grad=True),
         Tensor(rng.normal(size=(1, 2)), requires_grad=True)],
        lambda a, b, w: ad.mix([a, b], w),
    ),
    "attention": lambda rng: (
        [Tensor(rng.normal(size=(8, 8)), requires_grad=True),
         Tensor(rng.normal(size=(8, 8)), requires_grad=True),
         Tensor(rng.normal(size=(8, 8)), requires_grad=True),
         Tensor(rng.normal(size=(3, 8)), requires_grad=True),
         Tensor(rng.normal(size=(3, 8)), requires_grad=True)],
        lambda q, kx, vx, kp, vp: ad.prompted_attention(q, kx, vx, kp, vp, 2, 2),
    ),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradients_match_finite_differences(name):
    """Analytic gradients of every differentiable op vs central differences."""
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    params, fn = OPS[name](rng)
    out_cols = fn(*params).data.shape[1]
    mixer = Tensor(np.random.default_rng(2).normal(size=(out_cols, 1)))

    def loss_fn():
        # nonlinear readout so the loss exercises curvature of the op output
        return ad.sum_all(ad.gelu(ad.matmul(fn(*params), mixer)))

    with Tape():
        backward(loss_fn())
    for p in params:
        fd = finite_difference(loss_fn, p)
        assert rel_err(p.grad, fd) < 1e-4, f"{name}: gradient mismatch"
        p.grad = None


class TestSgd:
    def test_zero_learning_rate_is_identity(self):
        p = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
        p.grad = np.array([[5.0, -3.0]])
        sgd_step([p], SgdConfig(0.0))
        assert np.array_equal(p.data, [[1.0, 2.0]])

    def test_definition(self):
        p = Tensor(np.array([[1.0]]), requires_grad=True)
        p.grad = np.array([[2.0]])
        sgd_step([p], SgdConfig(0.1))
        assert p.data.item() == pytest.approx(0.8, abs=1e-15)

    def test_two_steps_on_quadratic(self):
        # loss = x^2, grad = 2x; from x=1 with lr 0.1: 0.8 then 0.64
        x = Tensor(np.array([[1.0]]), requires_grad=True)
        for _ in range(2):
            with Tape():
                backward(ad.sum_all(matmul(x, ad.transpose(x))))
            sgd_step([x], SgdConfig(0.1))
        assert x.data.item() == pytest.approx(0.64, abs=1e-12)

    def test_missing_grad_rejected(self):
        with pytest.raises(ContractError):
            sgd_step([Tensor(np.ones((1, 1)), requires_grad=True)], SgdConfig(0.1))

    def test_grads_cleared_after_step(self):
        p = Tensor(np.ones((1, 1)), requires_grad=True)
        p.grad = np.ones((1, 1))
        sgd_step([p], SgdConfig(0.1))
        assert p.grad is None

    def test_negative_learning_rate_rejected(self):
        with pytest.raises(ContractError):
            SgdConfig(-0.1)


class TestTensor:
    def test_shape_values_invariant(self):
        t = Tensor(np.arange(6.0).reshape(2, 3))
        assert t.shape == [2, 3]
        assert int(np.prod(t.shape)) == len(t.values)

    def test_no_grad_blocks_recording(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            with no_grad():
                ad.scale(x, 2.0)
            assert len(tape) == 0

    def test_forward_values_finite(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(scale=50, size=(4, 6)))
        for out in (softmax_rows(a), ad.gelu(a),
                    layer_norm(a, Tensor(np.ones(6)), Tensor(np.zeros(6)), 1e-5),
                    ad.l2_normalize_rows(a)):
            assert np.isfinite(out.data).all()

import math

import numpy as np
import pytest

from rebq import tensor as T
from rebq.tensor import AdamW, ShapeError, Tensor, warmup_cosine_lr


def finite_diff_grad(build_loss, param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of build_loss() w.r.t. param.data."""
    base = param.data
    grad = np.zeros_like(base)
    flat = base.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = build_loss().item()
        flat[i] = orig - step
        lo = build_loss().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4):
    denom = np.maximum(np.abs(numeric), 1.0)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() < rtol, f"max relative error {rel.max():.3e}"


def rand(rng, *shape, trainable=True):
    return Tensor(rng.standard_normal(shape), trainable=trainable)


class TestElementwise:
    def test_multiply_hand_values(self):
        out = T.mul(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [3.0, 8.0])

    def test_add_identity(self):
        x = Tensor([1.5, -2.0, 0.25])
        out = T.add(x, T.zeros(3))
        np.testing.assert_array_equal(out.data, x.data)

    def test_multiply_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a = rand(rng, 3, 4)
        b = rand(rng, 3, 4, trainable=False)
        loss = T.tsum(T.mul(a, b))
        loss.backward()
        # closed form: d/da sum(a*b) = b
        assert_grad_close(a.grad, b.data, rtol=1e-12)
        numeric = finite_diff_grad(lambda: T.tsum(T.mul(a, b)), a)
        assert_grad_close(a.grad, numeric)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)

    def test_scalar_operand_broadcasts(self):
        out = Tensor([1.0, 2.0]) * 2.5
        np.testing.assert_array_equal(out.data, [2.5, 5.0])

    def test_dispatcher(self):
        out = T.elementwise("subtract", Tensor([3.0]), Tensor([1.0]))
        assert out.data[0] == 2.0
        with pytest.raises(ValueError):
            T.elementwise("modulo", Tensor([1.0]), Tensor([1.0]))


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((4, 4)))
        out = T.matmul(Tensor(np.eye(4)), x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_values(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(2)
        a = rand(rng, 3, 4)
        b = rand(rng, 4, 2)
        loss = T.tsum(T.square(T.matmul(a, b)))
        loss.backward()
        assert_grad_close(a.grad, finite_diff_grad(lambda: T.tsum(T.square(T.matmul(a, b))), a))
        assert_grad_close(b.grad, finite_diff_grad(lambda: T.tsum(T.square(T.matmul(a, b))), b))

    def test_batched_gradient(self):
        rng = np.random.default_rng(3)
        a = rand(rng, 2, 3, 4)
        w = rand(rng, 4, 5)
        def build():
            return T.tsum(T.square(T.matmul(a, w)))
        build().backward()
        assert_grad_close(a.grad, finite_diff_grad(build, a))
        assert_grad_close(w.grad, finite_diff_grad(build, w))


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax_rows(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(4)
        row = rng.standard_normal(6)
        a = T.softmax_rows(Tensor(row))
        b = T.softmax_rows(Tensor(row + 123.456))
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_hand_values(self):
        out = T.softmax_rows(Tensor([math.log(1.0), math.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((8, 7)) * 20)
        out = T.softmax_rows(x)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(8), atol=1e-9)
        assert (out.data >= 0).all()

    def test_gradient(self):
        rng = np.random.default_rng(6)
        x = rand(rng, 2, 5)
        c = Tensor(rng.standard_normal((2, 5)))
        def build():
            return T.tsum(T.mul(T.softmax_rows(x), c))
        build().backward()
        assert_grad_close(x.grad, finite_diff_grad(build, x))


class TestCosine:
    def test_self_similarity(self):
        rng = np.random.default_rng(7)
        v = Tensor(rng.standard_normal(6))
        assert T.cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        out = T.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0]))
        assert out.item() == 0.0

    def test_hand_value(self):
        out = T.cosine_similarity(Tensor([1.0, 1.0]), Tensor([1.0, 0.0]))
        assert out.item() == pytest.approx(math.sqrt(0.5), abs=1e-12)

    def test_zero_vectors_defined(self):
        out = T.cosine_similarity(Tensor([0.0, 0.0]), Tensor([0.0, 0.0]))
        assert out.item() == 0.0

    def test_positive_scale_invariance(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            a = Tensor(rng.standard_normal(5))
            b = Tensor(rng.standard_normal(5))
            c = float(rng.uniform(0.01, 100.0))
            base = T.cosine_similarity(a, b).item()
            scaled = T.cosine_similarity(Tensor(a.data * c), b).item()
            assert abs(base - scaled) < 1e-10


class TestLosses:
    def test_ce_uniform_logits(self):
        for c in (2, 5, 9):
            logits = T.zeros(c)
            target = Tensor(T.one_hot(0, c))
            assert T.cross_entropy(logits, target).item() == pytest.approx(math.log(c), abs=1e-12)

    def test_ce_gradient_is_softmax_minus_target(self):
        rng = np.random.default_rng(9)
        logits = rand(rng, 6)
        target = Tensor(T.one_hot(2, 6))
        T.cross_entropy(logits, target).backward()
        expected = T.softmax_rows(logits.detach()).data - target.data
        np.testing.assert_allclose(logits.grad, expected, atol=1e-12)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            T.one_hot(7, 5)

    def test_mse_zero_at_equality(self):
        q = Tensor([0.3, -1.0, 2.0])
        assert T.mean_squared_error(q, q).item() == 0.0

    def test_bce_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(10)
        logits = rand(rng, 4, 3)
        target = Tensor((rng.uniform(size=(4, 3)) > 0.5).astype(float))
        def build():
            return T.binary_cross_entropy(logits, target)
        build().backward()
        assert_grad_close(logits.grad, finite_diff_grad(build, logits))

    def test_loss_dispatcher(self):
        a, b = Tensor([1.0, 2.0]), Tensor([1.0, 2.0])
        assert T.loss("mse", a, b).item() == 0.0
        with pytest.raises(ValueError):
            T.loss("hinge", a, b)


class TestBackward:
    def test_sum_of_squares_closed_form(self):
        rng = np.random.default_rng(11)
        x = rand(rng, 5)
        T.tsum(T.square(x)).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-12)

    def test_composite_vs_finite_differences(self):
        rng = np.random.default_rng(12)
        w = rand(rng, 4, 3)
        x = Tensor(rng.standard_normal((3, 2)))
        def build():
            return T.tsum(T.softmax_rows(T.matmul(w, x).transpose((1, 0))))
        build().backward()
        assert_grad_close(w.grad, finite_diff_grad(build, w))

    def test_frozen_graph_writes_no_gradients(self):
        x = Tensor([1.0, 2.0], trainable=False)
        loss = T.tsum(T.square(x))
        loss.backward()
        assert x.grad is None

    def test_non_scalar_rejected(self):
        with pytest.raises(ShapeError):
            T.backward(Tensor([1.0, 2.0]))

    def test_reuse_accumulates_within_one_graph(self):
        x = Tensor([2.0], trainable=True)
        loss = T.tsum(T.add(T.square(x), T.square(x)))
        loss.backward()
        np.testing.assert_allclose(x.grad, [8.0])

    def test_grad_accumulates_across_backwards(self):
        x = Tensor([3.0], trainable=True)
        T.tsum(T.square(x)).backward()
        T.tsum(T.square(x)).backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_detach_blocks_flow(self):
        x = Tensor([1.0, 2.0], trainable=True)
        y = T.square(x).detach()
        loss = T.tsum(T.mul(y, Tensor([1.0, 1.0])))
        loss.backward()
        assert x.grad is None

    def test_layer_norm_gradient(self):
        rng = np.random.default_rng(13)
        x = rand(rng, 3, 6)
        gamma = Tensor(rng.standard_normal(6), trainable=True)
        beta = Tensor(rng.standard_normal(6), trainable=True)
        def build():
            return T.tsum(T.square(T.layer_norm(x, gamma, beta)))
        build().backward()
        assert_grad_close(x.grad, finite_diff_grad(build, x))
        assert_grad_close(gamma.grad, finite_diff_grad(build, gamma))
        assert_grad_close(beta.grad, finite_diff_grad(build, beta))

    def test_gelu_embedding_concat_getitem_gradients(self):
        rng = np.random.default_rng(14)
        table = rand(rng, 7, 4)
        ids = np.array([[1, 3], [6, 1]])
        other = rand(rng, 2, 2, 4)
        def build():
            emb = T.embedding(table, ids)
            seq = T.concat([T.gelu(emb), other], axis=1)
            return T.tsum(T.square(seq[:, 1:3]))
        build().backward()
        assert_grad_close(table.grad, finite_diff_grad(build, table))
        assert_grad_close(other.grad, finite_diff_grad(build, other))

    def test_no_grad_skips_tape(self):
        x = Tensor([1.0], trainable=True)
        with T.no_grad():
            y = T.square(x)
        assert y._parents is None


class TestDeterminism:
    def test_seeded_init_bit_identical(self):
        a = T.uniform_init(np.random.default_rng(42), (5, 5), -1.0, 1.0)
        b = T.uniform_init(np.random.default_rng(42), (5, 5), -1.0, 1.0)
        assert a.data.tobytes() == b.data.tobytes()

    def test_op_sequence_bit_identical(self):
        def run():
            rng = np.random.default_rng(7)
            x = T.normal_init(rng, (4, 4))
            y = T.softmax_rows(T.matmul(x, x))
            return y.data.tobytes()
        assert run() == run()


class TestOptimizer:
    def test_schedule_endpoints(self):
        base, total = 1e-4, 200
        assert warmup_cosine_lr(0, base, total, 0.1) == 0.0
        assert warmup_cosine_lr(20, base, total, 0.1) == base
        assert warmup_cosine_lr(total, base, total, 0.1) == pytest.approx(0.0, abs=1e-20)
        for s in range(0, total + 1):
            assert warmup_cosine_lr(s, base, total, 0.1) >= 0.0

    def test_zero_lr_step_keeps_parameters(self):
        p = Tensor([1.0, 2.0], trainable=True)
        opt = AdamW([p], base_lr=1e-2, total_steps=100, warmup_frac=0.5)
        p.grad = np.array([1.0, 1.0])
        before = p.data.copy()
        opt.step()  # step 0 of warmup: lr == 0
        np.testing.assert_array_equal(p.data, before)

    def test_step_without_gradients_rejected(self):
        p = Tensor([1.0], trainable=True)
        opt = AdamW([p], total_steps=10)
        with pytest.raises(RuntimeError):
            opt.step()

    def test_step_moves_parameters_and_clears_grads(self):
        rng = np.random.default_rng(15)
        p = rand(rng, 3)
        opt = AdamW([p], base_lr=1e-3, total_steps=10, warmup_frac=0.0)
        p.grad = np.ones(3)
        before = p.data.copy()
        opt.step()
        assert not np.array_equal(p.data, before)
        assert p.grad is None

    def test_non_trainable_param_rejected(self):
        with pytest.raises(ValueError):
            AdamW([Tensor([1.0])], total_steps=10)

    def test_decoupled_weight_decay_single_step(self):
        # one step from zero moments has a closed form
        p = Tensor([2.0], trainable=True)
        opt = AdamW([p], base_lr=0.1, total_steps=1, warmup_frac=0.0,
                    weight_decay=0.01)
        p.grad = np.array([0.5])
        opt.step()
        mhat = 0.5
        vhat = 0.25
        expected = 2.0 - 0.1 * (mhat / (math.sqrt(vhat) + 1e-8) + 0.01 * 2.0)
        np.testing.assert_allclose(p.data, [expected], atol=1e-12)


class TestGradientSuite:
    """Finite-difference checks on random instances with dims <= 8."""

    @pytest.mark.parametrize("seed", range(3))
    def test_random_small_graphs(self, seed):
        rng = np.random.default_rng(100 + seed)
        a = rand(rng, 4, 6)
        b = rand(rng, 6, 5)
        c = rand(rng, 5)
        def build():
            h = T.gelu(T.matmul(a, b))
            h = T.add(h, c)
            p = T.softmax_rows(h)
            return T.tmean(T.square(T.log(T.add(p, Tensor(1.0)))))
        build().backward()
        for p in (a, b, c):
            assert_grad_close(p.grad, finite_diff_grad(build, p))

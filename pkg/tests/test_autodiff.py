import numpy as np
import pytest

from promptshift.autodiff import (
    OP_KINDS,
    Graph,
    GraphConsumed,
    ShapeMismatch,
    Tensor,
    add,
    apply,
    backward,
    concat_rows,
    finite_diff_grad,
    frobenius_norm,
    l2_normalize_rows,
    layer_norm_rows,
    log,
    matmul,
    mean_all,
    mul,
    neg,
    relu,
    scale,
    slice_rows,
    softmax_rows,
    square,
    sqrt,
    sub,
    sum_all,
    transpose,
)

# e^1 / (e^1 + e^-1), computed independently with scalar math
SOFTMAX_1_M1 = 1.0 / (1.0 + np.exp(-2.0))


def rand(rng, *shape):
    return rng.standard_normal(shape)


class TestForward:
    def test_matmul_scalar_product(self):
        out = matmul(Tensor([[2.0]]), Tensor([[3.0]]))
        assert out.data == np.array([[6.0]])

    def test_frobenius_345(self):
        out = frobenius_norm(Tensor([[3.0, 4.0], [0.0, 0.0]]))
        assert out.item() == 5.0

    def test_softmax_oracle(self):
        out = softmax_rows(Tensor([[1.0, -1.0]]))
        assert abs(out.data[0, 0] - SOFTMAX_1_M1) < 1e-4
        assert abs(out.data[0, 1] - (1.0 - SOFTMAX_1_M1)) < 1e-4

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = Tensor(rand(rng, 5, 7) * 10.0)
            p = softmax_rows(x).data
            assert np.all(np.abs(p.sum(axis=1) - 1.0) < 1e-12)
            assert np.all((p > 0.0) & (p < 1.0))

    def test_softmax_large_values_stable(self):
        p = softmax_rows(Tensor([[1000.0, 999.0]])).data
        assert np.isfinite(p).all()
        assert abs(p.sum() - 1.0) < 1e-12

    def test_l2_normalize_unit_rows(self):
        rng = np.random.default_rng(1)
        x = Tensor(rand(rng, 6, 4) + 0.1)
        y = l2_normalize_rows(x).data
        assert np.all(np.abs(np.sqrt((y * y).sum(axis=1)) - 1.0) < 1e-12)

    def test_layer_norm_standardizes(self):
        rng = np.random.default_rng(2)
        # variance large relative to eps so the eps term is negligible
        x = Tensor(rand(rng, 4, 8) * 100.0)
        y = layer_norm_rows(x).data
        assert np.all(np.abs(y.mean(axis=1)) < 1e-10)
        assert np.all(np.abs((y * y).mean(axis=1) - 1.0) < 1e-8)

    def test_layer_norm_unit_scale_close(self):
        rng = np.random.default_rng(3)
        x = Tensor(rand(rng, 4, 8))
        y = layer_norm_rows(x).data
        assert np.all(np.abs((y * y).mean(axis=1) - 1.0) < 1e-4)

    def test_concat_slice_inverse(self):
        a = Tensor([[1.0, 2.0]])
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        c = concat_rows([a, b])
        assert c.shape == (3, 2)
        back = slice_rows(c, 1, 3)
        assert np.array_equal(back.data, b.data)

    def test_transpose(self):
        x = Tensor([[1.0, 2.0, 3.0]])
        assert transpose(x).shape == (3, 1)


class TestErrors:
    def test_matmul_shape_error_names_kind(self):
        with pytest.raises(ShapeMismatch) as exc:
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        assert exc.value.kind == "matmul"
        assert (2, 3) in exc.value.shapes

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            apply("conv2d", [Tensor([[1.0]])])

    def test_softmax_empty_rows(self):
        with pytest.raises(ShapeMismatch):
            softmax_rows(Tensor(np.ones((2, 0))))

    def test_log_domain(self):
        with pytest.raises(ValueError):
            log(Tensor([[0.0]]))

    def test_l2_zero_row(self):
        with pytest.raises(ValueError):
            l2_normalize_rows(Tensor([[0.0, 0.0]]))

    def test_add_bad_broadcast(self):
        with pytest.raises(ShapeMismatch):
            add(Tensor(np.ones((3, 2))), Tensor(np.ones((2, 2))))

    def test_slice_bounds(self):
        with pytest.raises(ShapeMismatch):
            slice_rows(Tensor(np.ones((2, 2))), 1, 3)


class TestBackward:
    def test_square_power_rule(self):
        x = Tensor([[3.0]], requires_grad=True)
        with Graph() as g:
            sum_all(square(x))
        g.backward()
        assert x.grad[0, 0] == 6.0

    def test_frobenius_grad(self):
        x = Tensor([[3.0, 4.0], [0.0, 0.0]], requires_grad=True)
        with Graph() as g:
            frobenius_norm(x)
        g.backward()
        assert np.allclose(x.grad, [[0.6, 0.8], [0.0, 0.0]], atol=1e-12)

    def test_relu_gate(self):
        x = Tensor([[-1.0, 2.0]], requires_grad=True)
        with Graph() as g:
            sum_all(relu(x))
        g.backward()
        assert np.array_equal(x.grad, [[0.0, 1.0]])

    def test_seed_scales_gradient(self):
        x = Tensor([[2.0]], requires_grad=True)
        with Graph() as g:
            sum_all(square(x))
        g.backward(Tensor(np.asarray(3.0)))
        assert x.grad[0, 0] == 12.0

    def test_double_backward_raises(self):
        x = Tensor([[1.0]], requires_grad=True)
        with Graph() as g:
            sum_all(square(x))
        g.backward()
        with pytest.raises(GraphConsumed):
            g.backward()

    def test_seed_shape_mismatch(self):
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        with Graph() as g:
            relu(x)
        with pytest.raises(ShapeMismatch):
            g.backward(Tensor([[1.0]]))

    def test_accumulation_is_additive(self):
        x = Tensor([[2.0]], requires_grad=True)
        with Graph() as g1:
            sum_all(square(x))
        g1.backward()
        with Graph() as g2:
            sum_all(scale(x, 10.0))
        g2.backward()
        assert x.grad[0, 0] == 4.0 + 10.0

    def test_shared_intermediate_fanout(self):
        x = Tensor([[1.5]], requires_grad=True)
        with Graph() as g:
            y = square(x)
            sum_all(add(y, y))
        g.backward()
        # d/dx of 2x^2 at 1.5
        assert x.grad[0, 0] == pytest.approx(6.0, abs=1e-12)

    def test_zero_grad_reset(self):
        x = Tensor([[1.0]], requires_grad=True)
        with Graph() as g:
            sum_all(square(x))
        g.backward()
        x.zero_grad()
        assert np.array_equal(x.grad, [[0.0]])

    def test_no_recording_without_graph(self):
        x = Tensor([[1.0]], requires_grad=True)
        y = square(x)
        assert not y._recorded

    def test_replay_reproduces_bitwise(self):
        rng = np.random.default_rng(4)
        x = Tensor(rand(rng, 3, 3), requires_grad=True)
        with Graph() as g:
            h = softmax_rows(matmul(x, transpose(x)))
            sum_all(mul(h, Tensor(rand(rng, 3, 3))))
        g.replay()
        g.backward()
        g.replay()


class TestFiniteDiff:
    def test_linear_all_ones(self):
        x = Tensor(np.random.default_rng(5).standard_normal((2, 3)))
        fd = finite_diff_grad(lambda p: sum_all(p), x, eps=1e-5)
        assert np.all(np.abs(fd.data - 1.0) < 1e-9)

    def test_frobenius_analytic(self):
        x = Tensor([[3.0, 4.0], [0.0, 0.0]])
        fd = finite_diff_grad(lambda p: frobenius_norm(p), x, eps=1e-6)
        assert np.allclose(fd.data, [[0.6, 0.8], [0.0, 0.0]], atol=1e-6)

    def test_mean_square_analytic(self):
        x = Tensor([[1.0, 2.0]])
        fd = finite_diff_grad(lambda p: mean_all(square(p)), x, eps=1e-5)
        assert np.allclose(fd.data, [[1.0, 2.0]], atol=1e-6)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([[1.0, 2.0]])
        with pytest.raises(ValueError):
            finite_diff_grad(lambda p: relu(p), x)

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda p: sum_all(p), Tensor([[1.0]]), eps=0.0)


def _scalar_loss(kind, rng):
    """Build (loss_fn, input tensor) pairs where loss_fn ends in a scalar."""
    r = rng.integers(1, 9)
    c = rng.integers(1, 9)
    x = rng.standard_normal((r, c))
    if kind == "matmul":
        w = Tensor(rng.standard_normal((c, int(rng.integers(1, 9)))))
        return lambda p: sum_all(matmul(p, w)), Tensor(x, requires_grad=True)
    if kind == "add":
        other = Tensor(rng.standard_normal((1, c)))
        return lambda p: sum_all(square(add(p, other))), Tensor(x, requires_grad=True)
    if kind == "mul":
        other = Tensor(rng.standard_normal((r, c)))
        return lambda p: sum_all(mul(p, other)), Tensor(x, requires_grad=True)
    if kind == "scale":
        return lambda p: sum_all(scale(p, -2.5)), Tensor(x, requires_grad=True)
    if kind == "concat_rows":
        other = Tensor(rng.standard_normal((2, c)))
        return lambda p: sum_all(square(concat_rows([other, p]))), Tensor(x, requires_grad=True)
    if kind == "slice_rows":
        stop = int(rng.integers(1, r + 1))
        return lambda p: sum_all(square(slice_rows(p, 0, stop))), Tensor(x, requires_grad=True)
    if kind == "relu":
        # keep entries away from the kink
        x2 = np.where(np.abs(x) < 0.05, 0.3, x)
        return lambda p: sum_all(relu(p)), Tensor(x2, requires_grad=True)
    if kind == "softmax_rows":
        w = Tensor(rng.standard_normal((r, c)))
        return lambda p: sum_all(mul(softmax_rows(p), w)), Tensor(x, requires_grad=True)
    if kind == "layer_norm_rows":
        w = Tensor(rng.standard_normal((r, max(c, 2))))
        x2 = rng.standard_normal((r, max(c, 2)))
        return lambda p: sum_all(mul(layer_norm_rows(p), w)), Tensor(x2, requires_grad=True)
    if kind == "mean":
        return lambda p: mean_all(square(p)), Tensor(x, requires_grad=True)
    if kind == "sum":
        return lambda p: sum_all(square(p)), Tensor(x, requires_grad=True)
    if kind == "square":
        return lambda p: sum_all(square(p)), Tensor(x, requires_grad=True)
    if kind == "sqrt":
        pos = np.abs(x) + 0.5
        return lambda p: sum_all(sqrt(p)), Tensor(pos, requires_grad=True)
    if kind == "l2_normalize_rows":
        w = Tensor(rng.standard_normal((r, c)))
        x2 = x + np.sign(x) * 0.1 + 0.05
        return lambda p: sum_all(mul(l2_normalize_rows(p), w)), Tensor(x2, requires_grad=True)
    if kind == "frobenius_norm":
        x2 = x + np.sign(x) * 0.1 + 0.05
        return lambda p: frobenius_norm(p), Tensor(x2, requires_grad=True)
    if kind == "log":
        pos = np.abs(x) + 0.5
        return lambda p: sum_all(log(p)), Tensor(pos, requires_grad=True)
    if kind == "neg":
        return lambda p: sum_all(neg(square(p))), Tensor(x, requires_grad=True)
    if kind == "transpose":
        w = Tensor(rng.standard_normal((c, r)))
        return lambda p: sum_all(mul(transpose(p), w)), Tensor(x, requires_grad=True)
    raise AssertionError(kind)


@pytest.mark.parametrize("kind", OP_KINDS)
def test_backward_matches_finite_difference(kind):
    """Analytic backward vs central differences on randomized small shapes."""
    rng = np.random.default_rng(hash(kind) % 2**32)
    trials = 100 // len(OP_KINDS) + 7
    for _ in range(trials):
        loss_fn, x = _scalar_loss(kind, rng)
        with Graph() as g:
            loss_fn(x)
        g.backward()
        fd = finite_diff_grad(loss_fn, x, eps=1e-5)
        assert np.allclose(x.grad, fd.data, rtol=1e-4, atol=1e-6), kind


def test_sub_helper():
    a = Tensor([[5.0]])
    b = Tensor([[3.0]])
    assert sub(a, b).item() == 2.0

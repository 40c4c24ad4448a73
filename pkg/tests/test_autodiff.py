"""Tests for the reverse-mode autodiff engine.

Analytic gradients are verified against central finite differences
(grad_check), which serves as the independent oracle throughout.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from physio_recon import autodiff as ad
from physio_recon.autodiff import Tape, Tensor, backward, grad_check
from physio_recon.errors import ShapeError


def tsum(t):
    """Differentiable sum of all entries (mean scaled back by the size)."""
    return ad.scalar_multiply(ad.mean(t), float(t.size))


def rand_tensor(rng, shape, requires_grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=requires_grad)


class TestForwardShapes:
    def test_matmul_shape(self):
        rng = np.random.default_rng(0)
        out = ad.matmul(rand_tensor(rng, (2, 3)), rand_tensor(rng, (3, 4)))
        assert out.shape == (2, 4)

    def test_matmul_mismatch_names_shapes(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
            ad.matmul(rand_tensor(rng, (2, 3)), rand_tensor(rng, (4, 2)))

    def test_softmax_normalizes(self):
        rng = np.random.default_rng(1)
        s = ad.softmax(rand_tensor(rng, (5, 7)), axis=-1)
        np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, rtol=0, atol=1e-12)

    def test_layer_norm_standardizes(self):
        rng = np.random.default_rng(2)
        x = rand_tensor(rng, (4, 9))
        gain = Tensor(np.ones(9))
        bias = Tensor(np.zeros(9))
        y = ad.layer_norm(x, gain, bias).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)

    def test_concat_and_split_roundtrip(self):
        rng = np.random.default_rng(3)
        a, b = rand_tensor(rng, (2, 3)), rand_tensor(rng, (4, 3))
        out = ad.concat([a, b], axis=0)
        assert out.shape == (6, 3)
        np.testing.assert_array_equal(out.data[:2], a.data)


class TestBackwardExamples:
    def test_sum_of_squares_grad_is_2x(self):
        x = Tensor(np.array([[1.0, -2.0], [3.0, 0.5]]), requires_grad=True)
        with Tape():
            backward(tsum(ad.multiply(x, x)))
        np.testing.assert_array_equal(x.grad, 2.0 * x.data)

    def test_matmul_grad_matches_hand_expansion(self):
        # loss = sum(x @ W); d/dW[k, j] = sum_i x[i, k] (column sums of x)
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        w = Tensor(np.array([[0.5, -1.0], [2.0, 0.25]]), requires_grad=True)
        with Tape():
            backward(tsum(ad.matmul(x, w)))
        np.testing.assert_array_equal(w.grad, np.array([[4.0, 4.0], [6.0, 6.0]]))

    def test_disconnected_leaf_grad_is_zero(self):
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            backward(tsum(x))
        np.testing.assert_array_equal(unused.grad, np.zeros(3))
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_fanout_accumulates(self):
        x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        with Tape():
            backward(tsum(ad.add(ad.multiply(x, x), x)))
        np.testing.assert_allclose(x.grad, 2 * x.data + 1, rtol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape():
            y = ad.multiply(x, x)
            with pytest.raises(ShapeError, match="scalar"):
                backward(y)

    def test_backward_without_tape_rejected(self):
        x = Tensor(np.ones(1), requires_grad=True)
        y = ad.mean(x)  # no tape active, nothing recorded
        with pytest.raises(ValueError, match="no recorded"):
            backward(y)


def _case_add(rng, shape):
    c = rand_tensor(rng, shape, False)
    return lambda x: tsum(ad.add(x, c))


def _case_subtract(rng, shape):
    c = rand_tensor(rng, shape, False)
    return lambda x: tsum(ad.subtract(c, x))


def _case_multiply(rng, shape):
    c = rand_tensor(rng, shape, False)
    return lambda x: tsum(ad.multiply(x, c))


def _case_scalar_multiply(rng, shape):
    return lambda x: tsum(ad.scalar_multiply(x, -1.7))


def _case_matmul_left(rng, shape):
    c = rand_tensor(rng, (shape[-1], 3), False)
    return lambda x: tsum(ad.matmul(x, c))


def _case_matmul_right(rng, shape):
    c = rand_tensor(rng, tuple(shape[:-2]) + (3, shape[-2]), False)
    return lambda x: tsum(ad.matmul(c, x))


def _case_linear(rng, shape):
    w = rand_tensor(rng, (shape[-1], 4), False)
    b = rand_tensor(rng, (4,), False)
    return lambda x: tsum(ad.linear(x, w, b))


def _case_transpose(rng, shape):
    return lambda x: tsum(ad.multiply(t := ad.transpose(x), t))


def _case_reshape(rng, shape):
    return lambda x: tsum(ad.multiply(r := ad.reshape(x, (-1,)), r))


def _case_concat(rng, shape):
    c = rand_tensor(rng, shape, False)
    return lambda x: tsum(ad.multiply(cc := ad.concat([x, c], axis=-1), cc))


def _case_mean(rng, shape):
    return lambda x: ad.mean(ad.multiply(x, x))


def _case_mean_axis(rng, shape):
    return lambda x: ad.mean(ad.mean(x, axis=-1))


def _case_variance(rng, shape):
    return lambda x: ad.variance(x)


def _case_variance_axis(rng, shape):
    return lambda x: ad.mean(ad.variance(x, axis=0))


def _case_softmax(rng, shape):
    return lambda x: ad.mean(ad.multiply(s := ad.softmax(x, axis=-1), s))


def _case_layer_norm(rng, shape):
    gain = rand_tensor(rng, (shape[-1],), False)
    bias = rand_tensor(rng, (shape[-1],), False)
    return lambda x: ad.mean(ad.multiply(y := ad.layer_norm(x, gain, bias), y))


def _case_relu(rng, shape):
    return lambda x: tsum(ad.relu(x))


def _case_select_index(rng, shape):
    return lambda x: tsum(ad.multiply(s := ad.select_index(x, 0, 1), s))


OP_CASES = {
    name[len("_case_"):]: fn
    for name, fn in sorted(globals().items())
    if name.startswith("_case_")
}


@pytest.mark.parametrize("op", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(3))
def test_op_grad_check(op, seed):
    rng = np.random.default_rng(1000 * seed + abs(hash(op)) % 1000)
    shape = tuple(int(s) for s in rng.integers(2, 5, size=int(rng.integers(2, 4))))
    f = OP_CASES[op](rng, shape)
    x = rand_tensor(np.random.default_rng(seed), shape)
    assert grad_check(f, x) < 1e-4


def test_layer_norm_params_grad_check():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(3, 6)))
    bias = Tensor(rng.normal(size=6))

    def f_gain(g):
        return ad.mean(ad.multiply(y := ad.layer_norm(x, g, bias), y))

    assert grad_check(f_gain, Tensor(rng.normal(size=6), requires_grad=True)) < 1e-6


def test_linear_grad_tight():
    rng = np.random.default_rng(8)
    w = Tensor(rng.normal(size=(5, 3)))
    b = Tensor(rng.normal(size=3))
    assert grad_check(lambda x: tsum(ad.linear(x, w, b)), rand_tensor(rng, (4, 5))) < 1e-7


def test_softmax_mean_composition():
    # mean(softmax) alone is constant (rows sum to 1), so weight by a fixed probe
    rng = np.random.default_rng(9)
    probe = rand_tensor(rng, (4, 6), requires_grad=False)
    assert (
        grad_check(
            lambda x: ad.mean(ad.multiply(ad.softmax(x, axis=-1), probe)),
            rand_tensor(rng, (4, 6)),
        )
        < 1e-5
    )
    # squared softmax exercises the off-diagonal jacobian
    assert (
        grad_check(
            lambda x: ad.mean(ad.multiply(s := ad.softmax(x, axis=-1), s)),
            rand_tensor(rng, (4, 6)),
        )
        < 1e-5
    )


def test_random_composition_grad_check():
    rng = np.random.default_rng(10)
    w1 = Tensor(rng.normal(size=(6, 8)))
    b1 = Tensor(rng.normal(size=8))
    g = Tensor(np.ones(8))
    b = Tensor(np.zeros(8))

    def f(x):
        h = ad.relu(ad.linear(x, w1, b1))
        h = ad.layer_norm(h, g, b)
        h = ad.softmax(h, axis=-1)
        return ad.mean(ad.multiply(h, h))

    assert grad_check(f, rand_tensor(rng, (5, 6))) < 1e-4


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = Tensor(np.arange(12.0).reshape(3, 4))
        assert ad.dropout(x, 0.3, train=False) is x

    def test_inverted_scaling_and_keep_fraction(self):
        rng = np.random.default_rng(11)
        x = Tensor(np.ones(100_000))
        out = ad.dropout(x, 0.3, train=True, rng=rng).data
        kept = out != 0.0
        assert abs(kept.mean() - 0.7) < 0.01
        np.testing.assert_allclose(out[kept], 1.0 / 0.7, rtol=1e-12)

    def test_same_seed_bitwise_reproducible(self):
        x = Tensor(np.linspace(0, 1, 64).reshape(8, 8))
        a = ad.dropout(x, 0.4, train=True, rng=np.random.default_rng(5)).data
        b = ad.dropout(x, 0.4, train=True, rng=np.random.default_rng(5)).data
        np.testing.assert_array_equal(a, b)

    def test_dropout_grad_masks(self):
        x = Tensor(np.ones(1000), requires_grad=True)
        with Tape():
            out = ad.dropout(x, 0.5, train=True, rng=np.random.default_rng(6))
            backward(tsum(out))
        mask = out.data != 0
        np.testing.assert_array_equal(x.grad[mask], 2.0)
        np.testing.assert_array_equal(x.grad[~mask], 0.0)

    def test_bad_rate_rejected(self):
        with pytest.raises(ValueError, match="rate"):
            ad.dropout(Tensor(np.ones(3)), 1.0, train=True, rng=np.random.default_rng(0))


def brute_force_overlap_mean(feats, starts, length):
    """Oracle: per-position gather of covering windows, summed in window order."""
    n_w, window, d = feats.shape
    out = np.empty((length, d), dtype=feats.dtype)
    for t in range(length):
        acc = np.zeros(d, dtype=feats.dtype)
        n = 0
        for w, s in enumerate(starts):
            if s <= t < s + window:
                acc = acc + feats[w, t - s]
                n += 1
        assert n > 0, f"position {t} uncovered"
        out[t] = acc * feats.dtype.type(1.0 / n)
    return out


class TestWindowOps:
    def test_gather_windows_values(self):
        x = Tensor(np.arange(20.0).reshape(10, 2))
        out = ad.gather_windows(x, np.array([0, 4, 6]), 4)
        assert out.shape == (3, 4, 2)
        np.testing.assert_array_equal(out.data[1], x.data[4:8])

    def test_gather_scatter_grad(self):
        rng = np.random.default_rng(12)
        starts = np.array([0, 2, 4, 6])
        assert (
            grad_check(
                lambda x: tsum(ad.multiply(g := ad.gather_windows(x, starts, 4), g)),
                rand_tensor(rng, (10, 3)),
            )
            < 1e-6
        )

    def test_overlap_mean_single_window_identity(self):
        rng = np.random.default_rng(13)
        feats = rand_tensor(rng, (1, 8, 3), requires_grad=False)
        out = ad.overlap_mean(feats, np.array([0]), 8)
        np.testing.assert_array_equal(out.data, feats.data[0])

    def test_overlap_mean_uncovered_position_rejected(self):
        feats = Tensor(np.ones((2, 3, 1)))
        with pytest.raises(ValueError, match="not covered"):
            ad.overlap_mean(feats, np.array([0, 5]), 8)

    def test_overlap_mean_matches_brute_force_bitwise(self):
        rng = np.random.default_rng(14)
        for _ in range(10):
            window = int(rng.integers(2, 9))
            step = int(rng.integers(1, window + 1))
            length = int(rng.integers(window, 40))
            starts = list(range(0, length - window + 1, step))
            if starts[-1] != length - window:
                starts.append(length - window)
            starts = np.array(starts)
            feats = rng.normal(size=(len(starts), window, 3))
            got = ad.overlap_mean(Tensor(feats), starts, length).data
            expected = brute_force_overlap_mean(feats, starts, length)
            np.testing.assert_array_equal(got, expected)

    def test_overlap_mean_grad(self):
        rng = np.random.default_rng(15)
        starts = np.array([0, 2, 4, 5])
        assert (
            grad_check(
                lambda f: tsum(ad.multiply(m := ad.overlap_mean(f, starts, 9), m)),
                rand_tensor(rng, (4, 4, 2)),
            )
            < 1e-6
        )


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(scale=10.0, size=(3, 8)))
    np.testing.assert_allclose(ad.softmax(x, axis=-1).data.sum(axis=-1), 1.0, atol=1e-12)


def test_grad_check_rejects_nondeterministic_f():
    rng = np.random.default_rng(16)

    def noisy(x):
        return ad.mean(ad.add(x, Tensor(rng.normal(size=x.shape))))

    with pytest.raises(ValueError, match="deterministic"):
        grad_check(noisy, Tensor(np.ones(4), requires_grad=True))

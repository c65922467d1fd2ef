import numpy as np
import pytest

from logonet import tensor as T
from logonet.errors import (DataError, DimensionError, NumericError,
                            ParameterError)


def t(arr):
    return T.Tensor(np.asarray(arr, dtype=np.float64))


def rand(rng, shape):
    return T.Tensor(rng.normal(size=shape))


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

def naive_conv(x, w, b, stride=1, pad=0):
    """Direct-summation convolution, written independently of the library."""
    n, c, h, w_ = x.shape
    k, _, fh, fw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, w_ + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w_] = x
    oh = (h + 2 * pad - fh) // stride + 1
    ow = (w_ + 2 * pad - fw) // stride + 1
    out = np.zeros((n, k, oh, ow))
    for ni in range(n):
        for ki in range(k):
            for i in range(oh):
                for j in range(ow):
                    acc = b[ki]
                    for ci in range(c):
                        for u in range(fh):
                            for v in range(fw):
                                acc += xp[ni, ci, i * stride + u, j * stride + v] * w[ki, ci, u, v]
                    out[ni, ki, i, j] = acc
    return out


def naive_bilinear(plane, new_h, new_w):
    """Independent align-corners interpolation on one (h, w) plane."""
    h, w = plane.shape
    out = np.zeros((new_h, new_w))
    for i in range(new_h):
        for j in range(new_w):
            sy = i * (h - 1) / (new_h - 1) if new_h > 1 else 0.0
            sx = j * (w - 1) / (new_w - 1) if new_w > 1 else 0.0
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            top = plane[y0, x0] * (1 - fx) + plane[y0, x1] * fx
            bot = plane[y1, x0] * (1 - fx) + plane[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

class TestConv2d:
    def test_identity_kernel(self):
        x = t(np.arange(9).reshape(1, 1, 3, 3))
        y = T.conv2d(x, t(np.ones((1, 1, 1, 1))), t(np.zeros((1, 1, 1, 1))))
        assert np.array_equal(y.data, x.data)

    def test_ones_kernel_sums(self):
        # 3x3 all-ones input, 2x2 all-ones kernel: every output value is 4.0,
        # the window sum computed by the direct oracle.
        x = np.ones((1, 1, 3, 3))
        w = np.ones((1, 1, 2, 2))
        b = np.zeros(1)
        expected = naive_conv(x, w, b)
        assert expected.shape == (1, 1, 2, 2)
        assert np.all(expected == 4.0)
        y = T.conv2d(t(x), t(w), t(b.reshape(1, 1, 1, 1)))
        assert np.array_equal(y.data, expected)

    def test_matches_direct_oracle_random(self):
        rng = np.random.default_rng(42)
        for stride, pad in [(1, 0), (1, 1), (2, 1), (2, 3)]:
            x = rng.normal(size=(2, 3, 6, 7))
            w = rng.normal(size=(4, 3, 3, 3))
            b = rng.normal(size=4)
            got = T.conv2d(t(x), t(w), t(b.reshape(1, 4, 1, 1)), stride, pad).data
            assert np.allclose(got, naive_conv(x, w, b, stride, pad), atol=1e-12)

    def test_fast_path_agrees_with_reference_form(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(5, 3, 5, 5))
        b = rng.normal(size=(1, 5, 1, 1))
        fast = T.conv2d(t(x), t(w), t(b), stride=1, pad=2).data
        ref = T.conv2d_reference(x, w, b, stride=1, pad=2)
        assert np.abs(fast - ref).max() < 1e-12

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rand(rng, (2, 3, 5, 5))
        w = T.Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(1, 4, 1, 1)), requires_grad=True)
        err = T.finite_difference_check(
            lambda v: T.sum_all(T.conv2d(v, w, b, stride=1, pad=1)), x, step=1e-5)
        assert err < 1e-6
        err_w = T.finite_difference_check(
            lambda v: T.sum_all(T.conv2d(x, v, b, stride=1, pad=1)), w, step=1e-5)
        assert err_w < 1e-6

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as exc:
            T.conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((3, 5, 3, 3))),
                     t(np.zeros((1, 3, 1, 1))))
        assert "(1, 2, 4, 4)" in str(exc.value) and "(3, 5, 3, 3)" in str(exc.value)

    def test_empty_output_rejected(self):
        with pytest.raises(DimensionError):
            T.conv2d(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 3, 3))),
                     t(np.zeros((1, 1, 1, 1))))


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

class TestPooling:
    def test_maxpool_constant_invariance(self):
        x = t(np.full((1, 2, 4, 4), 3.5))
        assert np.all(T.maxpool2d(x, 2, 2).data == 3.5)

    def test_maxpool_enumeration(self):
        y = T.maxpool2d(t([[[[1, 2], [3, 4]]]]), 2, 2)
        assert y.shape == (1, 1, 1, 1)
        assert y.item() == 4.0

    def test_maxpool_gradient_routes_to_argmax(self):
        x = T.Tensor(np.array([[[[1, 2], [3, 4]]]], dtype=float), requires_grad=True)
        out = T.sum_all(T.maxpool2d(x, 2, 2))
        out.backward()
        assert np.array_equal(x.grad, [[[[0, 0], [0, 1]]]])

    def test_maxpool_tie_break_first_index(self):
        x = T.Tensor(np.full((1, 1, 2, 2), 7.0), requires_grad=True)
        T.sum_all(T.maxpool2d(x, 2, 2)).backward()
        assert np.array_equal(x.grad, [[[[1, 0], [0, 0]]]])

    def test_maxpool_fd(self):
        rng = np.random.default_rng(11)
        err = T.finite_difference_check(
            lambda v: T.sum_all(T.maxpool2d(v, 3, 2, pad=1)), rand(rng, (2, 2, 6, 6)))
        assert err < 1e-6

    def test_avgpool_fd(self):
        rng = np.random.default_rng(12)
        err = T.finite_difference_check(
            lambda v: T.sum_all(T.avgpool2d(v, 2, 2)), rand(rng, (2, 2, 6, 6)))
        assert err < 1e-6

    def test_invalid_window(self):
        with pytest.raises(DimensionError):
            T.maxpool2d(t(np.zeros((1, 1, 2, 2))), 4, 1)
        with pytest.raises(ParameterError):
            T.maxpool2d(t(np.zeros((1, 1, 2, 2))), 0, 1)

    def test_global_avg_pool_shapes(self):
        rng = np.random.default_rng(13)
        for hw in (4, 8):
            y = T.global_avg_pool(rand(rng, (2, 3, hw, hw)))
            assert y.shape == (2, 3, 1, 1)

    def test_global_avg_pool_constant(self):
        y = T.global_avg_pool(t(np.full((1, 2, 5, 3), -2.25)))
        assert np.all(y.data == -2.25)

    def test_global_avg_pool_is_plane_mean(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(2, 3, 4, 5))
        y = T.global_avg_pool(t(x))
        assert np.allclose(y.data[..., 0, 0], x.mean(axis=(2, 3)), atol=1e-15)


# ---------------------------------------------------------------------------
# relu / linear / concat
# ---------------------------------------------------------------------------

class TestElementwise:
    def test_relu_definition(self):
        y = T.relu(t(np.array([-1.0, 0.0, 2.0]).reshape(1, 3, 1, 1)))
        assert np.array_equal(y.data.reshape(-1), [0.0, 0.0, 2.0])

    def test_relu_fd_away_from_kink(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(1, 2, 4, 4))
        x = np.where(np.abs(x) < 0.05, 0.5, x)  # keep clear of the kink
        err = T.finite_difference_check(lambda v: T.sum_all(T.relu(v)), t(x))
        assert err < 1e-6

    def test_linear_identity(self):
        x = t(np.arange(3, dtype=float).reshape(1, 3, 1, 1))
        w = t(np.eye(3).reshape(3, 3, 1, 1))
        b = t(np.zeros((1, 3, 1, 1)))
        assert np.array_equal(T.linear(x, w, b).data, x.data)

    def test_linear_fd(self):
        rng = np.random.default_rng(16)
        x = rand(rng, (3, 5, 1, 1))
        w = T.Tensor(rng.normal(size=(4, 5, 1, 1)), requires_grad=True)
        b = T.Tensor(rng.normal(size=(1, 4, 1, 1)), requires_grad=True)
        for target in (x, w, b):
            err = T.finite_difference_check(
                lambda v, target=target: T.sum_all(
                    T.linear(v if target is x else x,
                             v if target is w else w,
                             v if target is b else b)), target)
            assert err < 1e-6

    def test_concat_ordering(self):
        rng = np.random.default_rng(17)
        a = rng.normal(size=(1, 3, 2, 2))
        b = rng.normal(size=(1, 5, 2, 2))
        y = T.concat_channels([t(a), t(b)])
        assert y.shape == (1, 8, 2, 2)
        assert np.array_equal(y.data[:, :3], a)
        assert np.array_equal(y.data[:, 3:], b)

    def test_concat_slice_roundtrip(self):
        rng = np.random.default_rng(18)
        parts = [rng.normal(size=(2, c, 3, 3)) for c in (1, 4, 2)]
        y = T.concat_channels([t(p) for p in parts])
        off = 0
        for p in parts:
            assert np.array_equal(y.data[:, off:off + p.shape[1]], p)
            off += p.shape[1]

    def test_concat_mismatch_names_offender(self):
        good = t(np.zeros((1, 2, 4, 4)))
        bad = t(np.zeros((1, 2, 5, 4)))
        with pytest.raises(DimensionError) as exc:
            T.concat_channels([good, bad])
        assert "input 1" in str(exc.value)

    def test_concat_backward_splits(self):
        a = T.Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
        b = T.Tensor(np.ones((1, 3, 2, 2)), requires_grad=True)
        T.sum_all(T.concat_channels([a, b])).backward()
        assert a.grad.shape == (1, 2, 2, 2) and np.all(a.grad == 1)
        assert b.grad.shape == (1, 3, 2, 2) and np.all(b.grad == 1)


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

class TestDropout:
    def test_p_zero_identity(self):
        rng = np.random.default_rng(19)
        x = rng.normal(size=(1, 2, 3, 3))
        assert np.array_equal(T.dropout(t(x), 0.0, "train", seed=1).data, x)

    def test_test_mode_identity(self):
        rng = np.random.default_rng(20)
        x = rng.normal(size=(1, 2, 3, 3))
        assert np.array_equal(T.dropout(t(x), 0.9, "test", seed=1).data, x)

    def test_inverted_scaling_preserves_mean(self):
        # 1e5 unit activations at p=0.9: sample mean within [0.97, 1.03].
        x = t(np.ones((1, 1, 100, 1000)))
        y = T.dropout(x, 0.9, "train", seed=123)
        assert 0.97 <= y.data.mean() <= 1.03

    def test_survivor_scale(self):
        y = T.dropout(t(np.ones((1, 1, 10, 10))), 0.75, "train", seed=5)
        vals = np.unique(y.data)
        assert set(np.round(vals, 12)) <= {0.0, 4.0}

    def test_p_out_of_range(self):
        with pytest.raises(ParameterError):
            T.dropout(t(np.zeros((1, 1, 1, 1))), 1.0, "train", seed=0)

    def test_same_seed_same_mask(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(1, 2, 4, 4))
        a = T.dropout(t(x), 0.5, "train", seed=9).data
        b = T.dropout(t(x), 0.5, "train", seed=9).data
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# softmax cross-entropy
# ---------------------------------------------------------------------------

class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        logits = t(np.zeros((2, 32, 1, 1)))
        loss, probs = T.softmax_cross_entropy(logits, np.array([0, 5]))
        assert np.allclose(probs, 1.0 / 32, atol=1e-15)
        assert abs(loss.item() - np.log(32)) < 1e-12

    def test_extreme_logit_is_stable(self):
        logits = np.zeros((1, 4, 1, 1))
        logits[0, 2] = 1000.0
        loss, probs = T.softmax_cross_entropy(t(logits), np.array([2]))
        assert np.isfinite(probs).all()
        assert probs[0, 2] > 0.999999
        assert loss.item() < 1e-6

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(22)
        _, probs = T.softmax_cross_entropy(
            rand(rng, (5, 9, 1, 1)), np.zeros(5, dtype=int))
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(probs >= 0) and np.all(probs <= 1)

    def test_gradient_formula(self):
        rng = np.random.default_rng(23)
        logits = T.Tensor(rng.normal(size=(3, 4, 1, 1)), requires_grad=True)
        labels = np.array([1, 0, 3])
        loss, probs = T.softmax_cross_entropy(logits, labels)
        loss.backward()
        onehot = np.zeros((3, 4))
        onehot[np.arange(3), labels] = 1.0
        assert np.allclose(logits.grad.reshape(3, 4), (probs - onehot) / 3, atol=1e-15)

    def test_fd(self):
        rng = np.random.default_rng(24)
        labels = rng.integers(0, 7, size=4)
        err = T.finite_difference_check(
            lambda v: T.softmax_cross_entropy(v, labels)[0], rand(rng, (4, 7, 1, 1)))
        assert err < 1e-6

    def test_label_out_of_range_reports_index(self):
        with pytest.raises(DataError) as exc:
            T.softmax_cross_entropy(t(np.zeros((3, 4, 1, 1))), np.array([0, 9, 1]))
        assert "index 1" in str(exc.value)


# ---------------------------------------------------------------------------
# SGD
# ---------------------------------------------------------------------------

class TestSgd:
    def _param(self, val):
        return T.Parameter("p", t(np.full((1, 1, 1, 1), val)))

    def test_vanilla_step(self):
        p = self._param(2.0)
        p.value.grad = np.full((1, 1, 1, 1), 0.5)
        T.sgd_step([p], lr=0.1)
        assert np.allclose(p.value.data, 2.0 - 0.1 * 0.5, atol=1e-15)

    def test_zero_gradient_fixed_point(self):
        p = self._param(1.5)
        T.sgd_step([p], lr=0.1, momentum=0.0, weight_decay=0.0)
        assert np.all(p.value.data == 1.5)

    def test_momentum_two_step_recurrence(self):
        # Hand-unrolled: v1 = g, v2 = 0.9 g + g, so step 2 moves lr*1.9*g.
        p = self._param(0.0)
        g = 2.0
        p.value.grad = np.full((1, 1, 1, 1), g)
        T.sgd_step([p], lr=0.1, momentum=0.9)
        w_after_1 = p.value.data.copy()
        p.value.grad = np.full((1, 1, 1, 1), g)
        T.sgd_step([p], lr=0.1, momentum=0.9)
        delta2 = w_after_1 - p.value.data
        assert np.allclose(delta2, 0.1 * 1.9 * g, atol=1e-15)

    def test_weight_decay(self):
        p = self._param(4.0)
        p.value.grad = np.zeros((1, 1, 1, 1))
        T.sgd_step([p], lr=0.5, weight_decay=0.1)
        assert np.allclose(p.value.data, 4.0 - 0.5 * 0.1 * 4.0, atol=1e-15)

    def test_bad_hyperparameters(self):
        p = self._param(0.0)
        with pytest.raises(ParameterError):
            T.sgd_step([p], lr=0.0)
        with pytest.raises(ParameterError):
            T.sgd_step([p], lr=0.1, momentum=1.0)

    def test_gradient_shape_mismatch(self):
        p = self._param(0.0)
        p.value.grad = np.zeros((1, 2, 1, 1))
        with pytest.raises(DimensionError):
            T.sgd_step([p], lr=0.1)


# ---------------------------------------------------------------------------
# finite-difference harness self-tests
# ---------------------------------------------------------------------------

class TestFiniteDifferenceCheck:
    def test_linear_layer_near_exact(self):
        rng = np.random.default_rng(25)
        w = t(rng.normal(size=(4, 6, 1, 1)))
        b = t(rng.normal(size=(1, 4, 1, 1)))
        err = T.finite_difference_check(
            lambda v: T.sum_all(T.linear(v, w, b)), rand(rng, (2, 6, 1, 1)), step=1e-5)
        assert err < 1e-7

    def test_sum_constant_gradient(self):
        rng = np.random.default_rng(26)
        x = rand(rng, (1, 2, 3, 3))
        err = T.finite_difference_check(T.sum_all, x, step=1e-5)
        assert err < 1e-10
        assert np.all(x.grad == 1.0)

    def test_relu_bounded_away_from_zero(self):
        rng = np.random.default_rng(27)
        data = rng.normal(size=(1, 2, 3, 3))
        data = np.sign(data) * (np.abs(data) + 0.2)
        err = T.finite_difference_check(lambda v: T.sum_all(T.relu(v)), t(data))
        assert err < 1e-6

    def test_rejects_bad_step(self):
        with pytest.raises(ParameterError):
            T.finite_difference_check(T.sum_all, t(np.zeros((1, 1, 1, 1))), step=0.0)

    def test_non_finite_raises(self):
        def bad(v):
            out = T.sum_all(v)
            out.data[...] = np.nan
            return out
        with pytest.raises(NumericError):
            T.finite_difference_check(bad, t(np.ones((1, 1, 1, 1))))


# ---------------------------------------------------------------------------
# bilinear resize
# ---------------------------------------------------------------------------

class TestBilinearResize:
    def test_same_size_identity_bit_exact(self):
        rng = np.random.default_rng(28)
        x = rng.normal(size=(1, 2, 5, 5))
        y = T.bilinear_resize(t(x), 5, 5)
        assert np.array_equal(y.data, x)

    def test_constant_invariance(self):
        x = t(np.full((1, 3, 4, 4), 0.7))
        for hw in [(2, 2), (7, 9), (1, 1)]:
            y = T.bilinear_resize(x, *hw)
            assert np.allclose(y.data, 0.7, atol=1e-15)

    def test_matches_independent_oracle(self):
        rng = np.random.default_rng(29)
        x = rng.normal(size=(1, 1, 3, 3))
        y = T.bilinear_resize(t(x), 5, 5)
        expected = naive_bilinear(x[0, 0], 5, 5)
        assert np.abs(y.data[0, 0] - expected).max() < 1e-12

    def test_downscale_matches_oracle(self):
        rng = np.random.default_rng(30)
        x = rng.normal(size=(2, 3, 7, 7))
        y = T.bilinear_resize(t(x), 3, 4)
        for n in range(2):
            for c in range(3):
                assert np.abs(y.data[n, c] - naive_bilinear(x[n, c], 3, 4)).max() < 1e-12

    def test_invalid_target(self):
        with pytest.raises(ParameterError):
            T.bilinear_resize(t(np.zeros((1, 1, 2, 2))), 0, 3)


# ---------------------------------------------------------------------------
# tensor plumbing / determinism
# ---------------------------------------------------------------------------

class TestTensorPlumbing:
    def test_requires_4d(self):
        with pytest.raises(DimensionError):
            T.Tensor(np.zeros((3, 3)))

    def test_backward_requires_scalar(self):
        x = T.Tensor(np.zeros((1, 2, 1, 1)), requires_grad=True)
        with pytest.raises(DimensionError):
            x.backward()

    def test_grad_accumulates_across_uses(self):
        x = T.Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        out = T.sum_all(x) + T.sum_all(x)
        out.backward()
        assert np.all(x.grad == 2.0)

    def test_no_grad_suppresses_tape(self):
        x = T.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with T.no_grad():
            y = T.relu(x)
        assert y.backward_fn is None and y.parents == ()

    def test_deterministic_op_sequence(self):
        def run(seed):
            rng = T.make_rng(seed)
            x = T.Tensor(rng.normal(size=(2, 3, 8, 8)))
            w = T.Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.01, requires_grad=True)
            b = T.Tensor(np.zeros((1, 4, 1, 1)), requires_grad=True)
            h = T.relu(T.conv2d(x, w, b, stride=1, pad=1))
            h = T.maxpool2d(h, 2, 2)
            h = T.dropout(h, 0.5, "train", seed=seed)
            loss, _ = T.softmax_cross_entropy(
                T.flatten(T.global_avg_pool(h)), np.array([0, 1]))
            loss.backward()
            return loss.item(), w.grad.copy()
        l1, g1 = run(99)
        l2, g2 = run(99)
        assert l1 == l2
        assert np.array_equal(g1, g2)

    def test_finite_after_forward_backward(self):
        rng = np.random.default_rng(31)
        x = T.Tensor(rng.normal(size=(2, 3, 6, 6)))
        w = T.Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        b = T.Tensor(np.zeros((1, 4, 1, 1)), requires_grad=True)
        out = T.relu(T.conv2d(x, w, b, pad=1))
        loss, _ = T.softmax_cross_entropy(
            T.flatten(T.global_avg_pool(out)), np.array([1, 2]))
        loss.backward()
        for arr in (out.data, loss.data, w.grad, b.grad):
            assert np.isfinite(arr).all()

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from isbkit import checks
from isbkit.layers import (
    ConvSpec, NormState, batch_norm, conv2d, instance_norm, silu, softmax,
)
from isbkit.tensor import ContractError, ShapeError, Tensor


def naive_conv(x, w, b, stride, pad):
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (H + 2 * pad - k) // stride + 1
    ow = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, O, oh, ow))
    for n in range(B):
        for o in range(O):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else b[o]
                    for c in range(C):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[n, c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                    out[n, o, i, j] = acc
    return out


class TestConv:
    def test_scaling_kernel(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        w = Tensor(np.full((1, 1, 1, 1), 2.0))
        b = Tensor(np.zeros(1))
        assert conv2d(x, w, b).data[0, 0].tolist() == [[2, 4], [6, 8]]

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(w)).data, x)

    @pytest.mark.parametrize("shape,cout,k,stride", [
        ((2, 3, 5, 5), 4, 3, 1),
        ((2, 4, 8, 8), 3, 3, 1),
        ((1, 2, 7, 7), 2, 3, 2),
        ((2, 4, 8, 8), 5, 1, 1),
    ])
    def test_matches_naive_oracle(self, rng, shape, cout, k, stride):
        x = rng.normal(size=shape)
        w = rng.normal(size=(cout, shape[1], k, k))
        b = rng.normal(size=cout)
        spec = ConvSpec(shape[1], cout, k, stride, bias=True)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), spec).data
        expected = naive_conv(x, w, b, stride, (k - 1) // 2)
        assert out.shape == expected.shape
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-10)

    def test_non_integral_extent(self):
        spec = ConvSpec(1, 1, 3, stride=2)
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), spec=spec)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


class TestInstanceNorm:
    def test_hand_values(self):
        st_ = NormState("instance", 1, eps=1e-12)
        out = instance_norm(Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)), st_)
        np.testing.assert_allclose(
            out.data.ravel(), [-1.3416407864998738, -0.4472135954999579,
                               0.4472135954999579, 1.3416407864998738], atol=1e-9)

    def test_constant_channel_is_zero(self):
        out = instance_norm(Tensor(np.full((2, 3, 4, 4), 7.5)), NormState("instance", 3))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_batch_decomposable(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        st_ = NormState("instance", 3, gain=Tensor(rng.normal(size=3)), shift=Tensor(rng.normal(size=3)))
        joint = instance_norm(Tensor(x), st_).data
        single = np.concatenate([instance_norm(Tensor(x[i:i + 1]), st_).data for i in range(2)])
        np.testing.assert_array_equal(joint, single)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (2, 3, 4, 4), elements=st.floats(-100, 100)))
    def test_standardized_statistics(self, x):
        var = x.var(axis=(2, 3))
        out = instance_norm(Tensor(x), NormState("instance", 3, eps=0.0 + 1e-5)).data
        ok = var >= 1e-2  # eps=1e-5 shrinks variance by var / (var + eps)
        m = out.mean(axis=(2, 3))
        v = out.var(axis=(2, 3))
        assert np.all(np.abs(m[ok]) <= 1e-6)
        assert np.all(np.abs(v[ok] - var[ok] / (var[ok] + 1e-5)) <= 1e-9)

    def test_wrong_kind(self):
        with pytest.raises(ContractError):
            instance_norm(Tensor(np.ones((1, 1, 2, 2))), NormState("batch", 1))


class TestBatchNorm:
    def test_eval_neutral(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        out = batch_norm(Tensor(x), NormState("batch", 3, mode="eval")).data
        np.testing.assert_allclose(out, x, atol=1e-5 * np.abs(x).max() + 1e-12)

    def test_train_odd_symmetry(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        a = batch_norm(Tensor(x), NormState("batch", 3)).data
        b = batch_norm(Tensor(-x), NormState("batch", 3)).data
        np.testing.assert_allclose(a, -b, atol=1e-12)

    def test_train_statistics_oracle(self, rng):
        x = rng.normal(2.0, 3.0, size=(4, 2, 3, 3))
        st_ = NormState("batch", 2, eps=1e-5, momentum=0.1)
        out = batch_norm(Tensor(x), st_).data
        for c in range(2):
            vals = x[:, c].ravel()
            mu = sum(vals) / len(vals)
            var = sum((v - mu) ** 2 for v in vals) / len(vals)
            np.testing.assert_allclose(out[:, c], (x[:, c] - mu) / np.sqrt(var + 1e-5), atol=1e-12)
            assert st_.running_mean[c] == pytest.approx(0.1 * mu)
            assert st_.running_var[c] == pytest.approx(0.9 + 0.1 * var)

    def test_train_needs_two_values(self):
        with pytest.raises(ContractError):
            batch_norm(Tensor(np.ones((1, 1, 1, 1))), NormState("batch", 1))

    def test_eval_batch_decomposable(self, rng):
        x = rng.normal(size=(3, 2, 4, 4))
        st_ = NormState("batch", 2, mode="eval", running_mean=np.array([0.3, -1.0]),
                        running_var=np.array([2.0, 0.5]))
        joint = batch_norm(Tensor(x), st_).data
        single = np.concatenate([batch_norm(Tensor(x[i:i + 1]), st_).data for i in range(3)])
        np.testing.assert_array_equal(joint, single)


class TestActivations:
    def test_silu_values(self):
        out = silu(Tensor([0.0, 1.0, 40.0])).data
        assert out[0] == 0.0
        assert out[1] == pytest.approx(0.7310585786300049, abs=1e-12)
        assert out[2] == pytest.approx(40.0, rel=1e-12)

    def test_softmax_uniform(self):
        np.testing.assert_allclose(softmax(Tensor(np.zeros(5))).data, 0.2)

    def test_softmax_hand_value(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, np.log(2.0)])).data, [1 / 3, 2 / 3], atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_softmax_properties(self, x, c):
        y = softmax(Tensor(x)).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(softmax(Tensor(x + c)).data, y, atol=1e-9)


def test_all_layers_pass_gradcheck():
    reports = checks.layer_suite()
    failed = {k: r.max_rel_error for k, r in reports.items() if not r.passed}
    assert not failed

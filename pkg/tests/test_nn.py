import numpy as np
import pytest
from hypothesis import given, strategies as st

from daegan import nn
from daegan.nn import Conv2d, Linear, SelfAttention, conv2d, conv2d_reference
from daegan.tensor import Tensor, backward, default_dtype


def test_conv_all_ones_sums_window():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 6)).astype(np.float32)
    k = np.zeros((1, 1, 3, 3), np.float32)
    k[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(k), padding=1).data, x)


def test_conv_matches_direct_loop(f64, rng):
    x, w, b = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), \
        rng.standard_normal(3)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, conv2d_reference(x, w, b), atol=1e-6)


@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(3, 7),
       st.sampled_from([1, 3]), st.integers(1, 2), st.integers(0, 1))
def test_conv_oracle_property(b, cin, cout, size, k, stride, pad):
    r = np.random.default_rng(size * 7 + cin)
    x = r.standard_normal((b, cin, size, size))
    w = r.standard_normal((cout, cin, k, k))
    with default_dtype(np.float64):
        got = conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, conv2d_reference(x, w, None, stride, pad), atol=1e-10)


def test_conv_shape_errors():
    with pytest.raises(ValueError, match="channel mismatch"):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_linear_examples(f64):
    out = nn.linear(Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]]), Tensor([5.0]))
    assert out.data.tolist() == [[16.0]]
    x = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(nn.linear(Tensor(x), Tensor(np.eye(4))).data, x)


def test_linear_weight_gradient_finite_difference(f64, rng):
    x, w = rng.standard_normal((3, 4)), rng.standard_normal((2, 4))
    wt = Tensor(w, requires_grad=True)
    backward((nn.linear(Tensor(x), wt) ** 2).sum())
    fd = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += 1e-6
        wm[idx] -= 1e-6
        fd[idx] = (((x @ wp.T) ** 2).sum() - ((x @ wm.T) ** 2).sum()) / 2e-6
    np.testing.assert_allclose(wt.grad, fd, rtol=1e-4)


def test_instance_norm_examples(f64):
    const = Tensor(np.full((1, 1, 2, 2), 3.0))
    np.testing.assert_array_equal(nn.instance_norm(const).data, 0.0)
    out = nn.instance_norm(Tensor(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))).data.ravel()
    expect = np.array([-1.0, 1.0]) / np.sqrt(1 + 1e-5)
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_instance_norm_statistics(rng):
    x = rng.standard_normal((3, 4, 5, 5)).astype(np.float32) * 3 + 2
    out = nn.instance_norm(Tensor(x)).data.astype(np.float64)
    assert np.abs(out.mean(axis=(2, 3))).max() < 1e-5
    assert np.abs(out.var(axis=(2, 3)) - 1).max() < 1e-3


def test_instance_norm_rejects_single_pixel():
    with pytest.raises(ValueError):
        nn.instance_norm(Tensor(np.ones((1, 1, 1, 1))))


def test_adain_cases(f64, rng):
    x = rng.standard_normal((2, 3, 4, 4))
    norm = nn.instance_norm(Tensor(x)).data
    ones, zeros = np.ones((2, 3)), np.zeros((2, 3))
    np.testing.assert_array_equal(nn.adain(Tensor(x), Tensor(ones), Tensor(zeros)).data, norm)
    beta = rng.standard_normal((2, 3))
    out = nn.adain(Tensor(x), Tensor(zeros), Tensor(beta)).data
    np.testing.assert_array_equal(out, np.broadcast_to(beta[:, :, None, None], x.shape))
    gamma = rng.standard_normal((2, 3))
    out = nn.adain(Tensor(x), Tensor(gamma), Tensor(beta)).data
    np.testing.assert_allclose(out, gamma[:, :, None, None] * norm + beta[:, :, None, None],
                               atol=1e-6)


def test_upsample_examples(f64):
    x = Tensor(np.arange(6.0).reshape(1, 1, 2, 3))
    np.testing.assert_array_equal(nn.upsample(x, 1).data, x.data)
    np.testing.assert_array_equal(nn.upsample(Tensor(np.full((1, 1, 1, 1), 7.0)), 2).data,
                                  np.full((1, 1, 2, 2), 7.0))
    row = nn.upsample(Tensor(np.array([[[[0.0, 1.0]]]])), 2, "bilinear").data
    np.testing.assert_allclose(row[0, 0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)
    with pytest.raises(ValueError):
        nn.upsample(x, 2, "cubic")


def test_self_attention_gate_closed_is_identity(rng):
    sa = SelfAttention(8, rng=rng)
    x = Tensor(rng.standard_normal((2, 8, 3, 3)).astype(np.float32))
    np.testing.assert_array_equal(sa(x).data, x.data)


def test_self_attention_dense_oracle(f64, rng):
    x = rng.standard_normal((1, 4, 2, 2))
    wq, wk, wv = rng.standard_normal((2, 4)), rng.standard_normal((2, 4)), \
        rng.standard_normal((4, 4))
    out, attn = nn.self_attention(Tensor(x), Tensor(wq), Tensor(wk), Tensor(wv),
                                  Tensor(0.5), return_attention=True)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-5)
    f = x.reshape(4, 4)
    logits = (wq @ f).T @ (wk @ f)
    a = np.exp(logits - logits.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    expect = f + 0.5 * (wv @ f) @ a.T
    np.testing.assert_allclose(out.data.reshape(4, 4), expect, atol=1e-5)


def test_spectral_norm_bounds_top_singular_value(f64, rng):
    w = rng.standard_normal((6, 3, 3, 3))
    u = rng.standard_normal(6)
    u /= np.linalg.norm(u)
    wn = nn.spectral_normalize(Tensor(w), u, n_power_iterations=50).data
    assert np.linalg.svd(wn.reshape(6, -1), compute_uv=False)[0] <= 1.05


def test_module_naming_and_buffers(rng):
    conv = Conv2d(2, 3, 3, rng=rng, spectral=True)
    assert [k for k, _ in conv.named_parameters()] == ["weight", "bias"]
    assert [k for k, _ in conv.named_buffers()] == ["sn_u"]
    lin = Linear(3, 2, rng=rng, bias_init=1.0)
    np.testing.assert_array_equal(lin.bias.data, [1.0, 1.0])


def test_spectral_buffer_updates_only_in_training(rng):
    conv = Conv2d(2, 3, 3, rng=rng, spectral=True)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)).astype(np.float32))
    before = conv.sn_u.copy()
    conv.eval()(x)
    np.testing.assert_array_equal(conv.sn_u, before)
    conv.train()(x)
    assert not np.array_equal(conv.sn_u, before)

"""Layer operations and a minimal parameter-container system."""
from functools import lru_cache

import numpy as np

from . import kernels
from .tensor import (Tensor, activation, concat, get_default_dtype, make_node, matmul,
                     reshape, softmax, transpose)

# ------------------------------------------------------------ functional


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation over NCHW input via im2col + one GEMM."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if cin != c:
        raise ValueError(f"conv2d channel mismatch: input has C={c}, weight expects Cin={cin}")
    if k != k2:
        raise ValueError(f"conv2d needs square kernels, got {k}x{k2}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d kernel {k} larger than padded input {hp}x{wp}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = kernels.im2col(xp, k, stride, ho, wo).reshape(c * k * k, b * ho * wo)
    w2 = weight.data.reshape(cout, -1)
    out = (w2 @ cols).reshape(cout, b, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def _conv2d_bw(g):
        gt = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gt @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = (w2.T @ gt).reshape(c, k, k, b, ho, wo)
            gx = kernels.col2im(gcols, hp, wp, stride)
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, _conv2d_bw)


def conv2d_reference(x, weight, bias=None, stride=1, padding=0):
    """Direct nested-loop convolution on raw arrays (forward only)."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    b, c, h, w = x.shape
    cout, _, k, _ = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((b, cout, ho, wo), dtype=np.result_type(x, weight))
    for n in range(b):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[n, ci, i * stride + di, j * stride + dj] * weight[o, ci, di, dj]
                    out[n, o, i, j] = acc + (0.0 if bias is None else bias[o])
    return out


def linear(x, weight, bias=None):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = out + bias
    return out


def instance_norm(x, eps=1e-5):
    if x.ndim != 4:
        raise ValueError(f"instance_norm expects B x C x H x W, got {x.shape}")
    n = x.shape[2] * x.shape[3]
    if n < 2:
        raise ValueError("instance_norm undefined for a 1x1 spatial extent")
    xd = x.data
    mu = xd.mean(axis=(2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def _instance_norm_bw(g):
        gs = g.sum(axis=(2, 3), keepdims=True)
        gx = (g * xhat).sum(axis=(2, 3), keepdims=True)
        return (inv * (g - gs / n - xhat * gx / n),)

    return make_node(xhat, (x,), _instance_norm_bw)


def adain(x, gamma, beta, eps=1e-5):
    """Instance-normalize ``x`` then apply per-(sample, channel) ``gamma``/``beta``."""
    b, c = x.shape[:2]
    if gamma.shape != (b, c) or beta.shape != (b, c):
        raise ValueError(f"adain: gamma {gamma.shape} / beta {beta.shape} must be {(b, c)}")
    xn = instance_norm(x, eps)
    return xn * reshape(gamma, (b, c, 1, 1)) + reshape(beta, (b, c, 1, 1))


@lru_cache(maxsize=64)
def _bilinear_matrix(n, factor, dtype):
    """Row-stochastic (n*factor, n) interpolation matrix, half-pixel centers."""
    m = np.zeros((n * factor, n), dtype=dtype)
    for i in range(n * factor):
        src = max((i + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    m.setflags(write=False)
    return m


def upsample(x, factor, mode="nearest"):
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"upsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if factor == 1:
        return x
    b, c, h, w = x.shape
    if mode == "nearest":
        out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

        def _up_nearest_bw(g):
            return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

        return make_node(out, (x,), _up_nearest_bw)
    if mode != "bilinear":
        raise ValueError(f"unknown upsample mode {mode!r}")
    mh = _bilinear_matrix(h, factor, x.dtype.type)
    mw = _bilinear_matrix(w, factor, x.dtype.type)
    out = mh @ x.data @ mw.T

    def _up_bilinear_bw(g):
        return (mh.T @ g @ mw,)

    return make_node(out, (x,), _up_bilinear_bw)


def self_attention(x, wq, wk, wv, gamma, return_attention=False):
    """Non-local block: ``x + gamma * V softmax(Q^T K)^T``.

    ``wq``/``wk`` are (C', C) and ``wv`` is (C, C) 1x1 projections; rows of the
    attention matrix (one per query position) sum to one.
    """
    b, c, h, w = x.shape
    n = h * w
    flat = reshape(x, (b, c, n))
    q = matmul(wq, flat)                    # B x C' x N
    k = matmul(wk, flat)
    v = matmul(wv, flat)                    # B x C x N
    logits = matmul(transpose(q, (0, 2, 1)), k)   # B x N(query) x N(key)
    attn = softmax(logits, axis=-1)
    o = matmul(v, transpose(attn, (0, 2, 1)))     # B x C x N
    out = x + reshape(o, (b, c, h, w)) * gamma
    if return_attention:
        return out, attn
    return out


def spectral_normalize(weight, u, n_power_iterations=1):
    """Return ``weight / sigma`` with sigma estimated by power iteration.

    ``u`` is the persistent left-singular-vector estimate; it is updated in
    place when ``n_power_iterations > 0`` and treated as a constant for
    differentiation.
    """
    wmat = weight.data.reshape(weight.shape[0], -1)
    for _ in range(n_power_iterations):
        v = wmat.T @ u
        v /= np.linalg.norm(v) + 1e-12
        u_new = wmat @ v
        u[:] = u_new / (np.linalg.norm(u_new) + 1e-12)
    v = wmat.T @ u
    v = v / (np.linalg.norm(v) + 1e-12)
    w2 = reshape(weight, (weight.shape[0], -1))
    sigma = (matmul(w2, Tensor(v.reshape(-1, 1).astype(weight.dtype))) *
             Tensor(u.reshape(-1, 1).astype(weight.dtype))).sum()
    return weight / sigma


# --------------------------------------------------------------- modules


class Module:
    """Attribute-ordered container of parameters, buffers and submodules."""

    training = True

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, np.ndarray):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_buffers(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def parameter(data):
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


def _init_uniform(rng, shape, fan_in, gain=1.0):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=None, rng=None, spectral=False,
                 gain=np.sqrt(2.0)):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = parameter(_init_uniform(rng, (cout, cin, k, k), cin * k * k, gain))
        self.bias = parameter(np.zeros(cout))
        if spectral:
            u = rng.standard_normal(cout)
            self.sn_u = (u / np.linalg.norm(u)).astype(get_default_dtype())
        else:
            self.sn_u = None

    def effective_weight(self):
        if self.sn_u is None:
            return self.weight
        return spectral_normalize(self.weight, self.sn_u, 1 if self.training else 0)

    def forward(self, x):
        return conv2d(x, self.effective_weight(), self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, din, dout, rng=None, gain=1.0, bias_init=0.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = parameter(_init_uniform(rng, (dout, din), din, gain))
        self.bias = parameter(np.full(dout, bias_init))

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class SelfAttention(Module):
    def __init__(self, c, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        cq = max(c // 8, 1)
        self.wq = parameter(_init_uniform(rng, (cq, c), c))
        self.wk = parameter(_init_uniform(rng, (cq, c), c))
        self.wv = parameter(_init_uniform(rng, (c, c), c))
        self.gamma = parameter(np.zeros(()))

    def forward(self, x, return_attention=False):
        return self_attention(x, self.wq, self.wk, self.wv, self.gamma, return_attention)


def act(x, alpha=0.2):
    return activation(x, "leaky_relu", alpha)


def cat_channels(a, b):
    return concat([a, b], axis=1)

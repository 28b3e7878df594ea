"""Stage-2 conditional generator G, discriminator D, and their losses."""
import contextlib
from dataclasses import dataclass

import numpy as np

from .embedders import reconstruction_loss
from .nn import Conv2d, Linear, Module, SelfAttention, adain, act, instance_norm, upsample
from .tensor import Tensor, relu, tanh


@dataclass
class GanConfig:
    resolution: int = 64
    d_p: int = 128
    g_width: int = 16
    n_res: int = 4
    attention_after: int = 2
    mlp_hidden: int = 128
    d_width: int = 32
    d_blocks: int = 4
    spectral_norm: bool = True


class ConditionMLP(Module):
    """Shared linear layer feeding two heads: AdaIN scale and shift."""

    def __init__(self, d_p, hidden, channels, rng):
        self.shared = Linear(d_p, hidden, rng=rng, gain=np.sqrt(2.0))
        self.to_gamma = Linear(hidden, channels, rng=rng, gain=0.1, bias_init=1.0)
        self.to_beta = Linear(hidden, channels, rng=rng, gain=0.1)

    def forward(self, code):
        h = act(self.shared(code))
        return self.to_gamma(h), self.to_beta(h)


class AdaINResBlock(Module):
    def __init__(self, c, cfg, rng):
        self.conv1 = Conv2d(c, c, 3, rng=rng)
        self.conv2 = Conv2d(c, c, 3, rng=rng, gain=1.0)
        self.mlp1 = ConditionMLP(cfg.d_p, cfg.mlp_hidden, c, rng)
        self.mlp2 = ConditionMLP(cfg.d_p, cfg.mlp_hidden, c, rng)

    def forward(self, x, code):
        h = act(adain(self.conv1(x), *self.mlp1(code)))
        h = adain(self.conv2(h), *self.mlp2(code))
        return x + h


class AdaINUpBlock(Module):
    def __init__(self, cin, cout, cfg, rng):
        self.conv = Conv2d(cin, cout, 3, rng=rng)
        self.mlp = ConditionMLP(cfg.d_p, cfg.mlp_hidden, cout, rng)

    def forward(self, x, code):
        h = self.conv(upsample(x, 2, "nearest"))
        return act(adain(h, *self.mlp(code)))


class Generator(Module):
    """Front-end encoder over fhat, AdaIN residual middle part with one
    self-attention block, AdaIN upsampling back-end, tanh output."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        w = cfg.g_width
        self.stem = Conv2d(3, w, 3, rng=rng)
        self.down1 = Conv2d(w, 2 * w, 3, stride=2, rng=rng)
        self.down2 = Conv2d(2 * w, 4 * w, 3, stride=2, rng=rng)
        self.middle = [AdaINResBlock(4 * w, cfg, rng) for _ in range(cfg.n_res)]
        self.attention = SelfAttention(4 * w, rng=rng)
        self.up = [AdaINUpBlock(4 * w, 2 * w, cfg, rng), AdaINUpBlock(2 * w, w, cfg, rng)]
        self.out = Conv2d(w, 3, 3, rng=rng, gain=1.0)
        self.use_attention = True

    def adain_sites(self):
        return 2 * len(self.middle) + len(self.up)

    def forward(self, fhat, code):
        if code.ndim != 2 or code.shape[1] != self.cfg.d_p:
            raise ValueError(f"pose code must be (B, {self.cfg.d_p}), got {code.shape}")
        if code.shape[0] != fhat.shape[0]:
            raise ValueError("pose code and embedded face batch sizes differ")
        h = act(instance_norm(self.stem(fhat)))
        h = act(instance_norm(self.down1(h)))
        h = act(instance_norm(self.down2(h)))
        for i, blk in enumerate(self.middle):
            h = blk(h, code)
            if self.use_attention and i + 1 == self.cfg.attention_after:
                h = self.attention(h)
        for blk in self.up:
            h = blk(h, code)
        return tanh(self.out(h))


class Discriminator(Module):
    """Strided conv stack; returns (score per sample, intermediate features)."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        chans = [3] + [cfg.d_width * 2 ** i for i in range(cfg.d_blocks)]
        self.blocks = [Conv2d(chans[i], chans[i + 1], 3, stride=2, rng=rng,
                              spectral=cfg.spectral_norm) for i in range(cfg.d_blocks)]
        self.head = Conv2d(chans[-1], 1, 3, rng=rng, spectral=cfg.spectral_norm, gain=1.0)

    def forward(self, x):
        feats = []
        h = x
        for blk in self.blocks:
            h = act(blk(h))
            feats.append(h)
        score = self.head(h).mean(axis=(1, 2, 3))
        return score, feats


@contextlib.contextmanager
def frozen(*modules):
    """Temporarily stop gradient tracking for the given modules' parameters."""
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def hinge_d_loss(score_real, score_fake):
    """``E[relu(1 - D(real))] + E[relu(1 + D(fake))]``."""
    score_real, score_fake = _as_tensor(score_real), _as_tensor(score_fake)
    return relu(1.0 - score_real).mean() + relu(1.0 + score_fake).mean()


def hinge_g_loss(score_fake):
    return -_as_tensor(score_fake).mean()


def feature_matching_loss(features_real, features_fake):
    """Mean over layers of the per-layer mean absolute difference.

    Real features are used as constants.
    """
    if len(features_real) != len(features_fake):
        raise ValueError(f"feature lists differ in length: {len(features_real)} vs "
                         f"{len(features_fake)}")
    if not features_real:
        raise ValueError("feature lists are empty")
    total = None
    for r, f in zip(features_real, features_fake):
        r = r.data if isinstance(r, Tensor) else np.asarray(r)
        f = _as_tensor(f)
        if r.shape != f.shape:
            raise ValueError(f"feature shapes differ: {r.shape} vs {f.shape}")
        term = (f - Tensor(r.astype(f.dtype, copy=False))).abs().mean()
        total = term if total is None else total + term
    return total * (1.0 / len(features_real))


def stage2_objective(G, D, fhat, code, target, lambda_r=1.0, lambda_fm=1.0):
    """Both stage-2 totals from one generator pass.

    ``L_G_total = L_G + lambda_r * L_R + lambda_fm * L_FM`` and
    ``L_D_total = hinge_d_loss``. Which parameters a backward pass may touch
    is decided by the caller (see :func:`frozen`).
    """
    target = _as_tensor(target)
    fake = G(fhat, code)
    s_real, f_real = D(target)
    s_fake, f_fake = D(fake)
    l_gan = hinge_g_loss(s_fake)
    l_r = reconstruction_loss(target, fake)
    l_fm = feature_matching_loss(f_real, f_fake)
    l_g = l_gan
    if lambda_r:
        l_g = l_g + l_r * lambda_r
    if lambda_fm:
        l_g = l_g + l_fm * lambda_fm
    l_d = hinge_d_loss(s_real, s_fake)
    return {"L_D_total": l_d, "L_G_total": l_g, "L_G": l_gan, "L_R": l_r, "L_FM": l_fm,
            "fake": fake, "score_real": s_real, "score_fake": s_fake}

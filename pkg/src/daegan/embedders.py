"""Face embedder F (multi-frame deforming autoencoder) and pose embedder P
(multi-scale deforming autoencoder), plus the stage-1 objective."""
from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, Linear, Module, act, instance_norm, upsample
from .tensor import Tensor, softplus, tanh
from .warp import compose_multiscale, fuse_embedded_face, tv_smoothness


@dataclass
class NetConfig:
    resolution: int = 64
    base_width: int = 32
    n_down: int = 4
    d_p: int = 128
    max_disp_frac: float = 0.35

    @property
    def widths(self):
        return [self.base_width * 2 ** i for i in range(self.n_down)]

    @property
    def max_disp(self):
        return self.max_disp_frac * self.resolution


class ConvBlock(Module):
    """conv3x3 -> instance norm -> leaky ReLU(0.2), optional 2x up/down."""

    def __init__(self, cin, cout, rng, down=False, up=False):
        self.up = up
        self.conv = Conv2d(cin, cout, 3, stride=2 if down else 1, rng=rng)

    def forward(self, x):
        if self.up:
            x = upsample(x, 2, "nearest")
        return act(instance_norm(self.conv(x)))


class Encoder(Module):
    def __init__(self, cfg, rng, cin=3):
        chans = [cin] + cfg.widths
        self.blocks = [ConvBlock(chans[i], chans[i + 1], rng, down=True)
                       for i in range(cfg.n_down)]

    def forward(self, x):
        feats = []
        for blk in self.blocks:
            x = blk(x)
            feats.append(x)
        return feats


class FaceEmbedderNet(Module):
    """Per-frame encoder-decoder with a shared trunk and two heads.

    The decoder stops at half resolution; both heads are upsampled
    bilinearly to full resolution. The displacement head is
    ``tanh * max_disp`` and the attention head is softplus, so attention is
    nonnegative by construction.
    """

    def __init__(self, cfg, rng):
        self.cfg = cfg
        w = cfg.widths
        self.encoder = Encoder(cfg, rng)
        dec = list(reversed(w))            # e.g. 256 128 64 32
        self.decoder = [ConvBlock(dec[i], dec[i + 1], rng, up=True)
                        for i in range(cfg.n_down - 1)]
        self.disp_head = Conv2d(w[0], 2, 3, rng=rng, gain=0.1)
        self.attn_head = Conv2d(w[0], 1, 3, rng=rng, gain=1.0)

    def per_frame(self, x):
        feats = self.encoder(x)
        h = feats[-1]
        for i, blk in enumerate(self.decoder):
            h = blk(h) + feats[len(feats) - 2 - i]
        field = upsample(tanh(self.disp_head(h)) * self.cfg.max_disp, 2, "bilinear")
        attn = upsample(softplus(self.attn_head(h)), 2, "bilinear")
        return field, attn

    def forward(self, frames):
        """``frames`` (B, K, 3, H, W) -> (fhat, fields, attentions), stacked over K."""
        if frames.ndim != 5:
            raise ValueError(f"face embedder expects (B, K, C, H, W), got {frames.shape}")
        b, k, c, h, w = frames.shape
        if (h, w) != (self.cfg.resolution, self.cfg.resolution):
            raise ValueError(f"frames are {h}x{w}, model expects {self.cfg.resolution}^2")
        field, attn = self.per_frame(frames.reshape(b * k, c, h, w))
        fields = field.reshape(b, k, 2, h, w)
        attns = attn.reshape(b, k, 1, h, w)
        fhat = fuse_embedded_face(frames, fields, attns)
        return fhat, fields, attns


class PoseEmbedderNet(Module):
    """Frame encoder to a pose code; decoder emits T^-1 (H/4), R^L (H/2), R^H (H)."""

    def __init__(self, cfg, rng):
        if cfg.n_down < 3:
            raise ValueError("pose embedder needs at least 3 down blocks")
        self.cfg = cfg
        w = cfg.widths
        self.bottom = cfg.resolution // 2 ** cfg.n_down
        flat = w[-1] * self.bottom ** 2
        self.encoder = Encoder(cfg, rng)
        self.to_code = Linear(flat, cfg.d_p, rng=rng)
        self.from_code = Linear(cfg.d_p, flat, rng=rng, gain=np.sqrt(2.0))
        dec = list(reversed(w))
        outs = dec[1:] + [w[0]]
        self.decoder = [ConvBlock(dec[i], outs[i], rng, up=True) for i in range(cfg.n_down)]
        n = cfg.n_down
        self.tinv_head = Conv2d(outs[n - 3], 2, 3, rng=rng, gain=0.1)
        # residual heads start at zero: P begins as a pure warp of the embedded face
        self.rlow_head = Conv2d(outs[n - 2], 3, 3, rng=rng, gain=0.0)
        self.rhigh_head = Conv2d(outs[n - 1], 3, 3, rng=rng, gain=0.0)

    def encode(self, frame):
        h, w = frame.shape[2:]
        if (h, w) != (self.cfg.resolution, self.cfg.resolution):
            raise ValueError(f"frame is {h}x{w}, model expects {self.cfg.resolution}^2")
        feat = self.encoder(frame)[-1]
        return self.to_code(feat.reshape(frame.shape[0], -1))

    def decode(self, code):
        b = code.shape[0]
        w = self.cfg.widths
        h = act(self.from_code(code)).reshape(b, w[-1], self.bottom, self.bottom)
        outs = []
        for blk in self.decoder:
            h = blk(h)
            outs.append(h)
        n = self.cfg.n_down
        t_inv = tanh(self.tinv_head(outs[n - 3])) * self.cfg.max_disp
        r_low = self.rlow_head(outs[n - 2])
        r_high = self.rhigh_head(outs[n - 1])
        return t_inv, r_low, r_high

    def forward(self, frame, fhat):
        """-> (pose code, T^-1, (R^L, R^H), reconstruction)."""
        if fhat.shape != frame.shape:
            raise ValueError(f"frame {frame.shape} and embedded face {fhat.shape} differ")
        code = self.encode(frame)
        t_inv, r_low, r_high = self.decode(code)
        xhat = compose_multiscale(fhat, t_inv, r_low, r_high)
        return code, t_inv, (r_low, r_high), xhat


def reconstruction_loss(x, xhat):
    """Mean absolute error over every pixel and channel."""
    if x.shape != xhat.shape:
        raise ValueError(f"reconstruction_loss: shapes differ {x.shape} vs {xhat.shape}")
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=xhat.dtype))
    return (x - xhat).abs().mean()


def smoothness_terms(fields, t_inv):
    """Fields the TV penalty runs over: the K per-frame T_k and T^-1."""
    k = fields.shape[1]
    return [fields[:, i] for i in range(k)] + [t_inv]


def flatten_drivers(driving, fhat):
    """(B, D, C, H, W) targets -> (B*D, C, H, W), with fhat repeated to match."""
    if not isinstance(driving, Tensor):
        driving = Tensor(driving)
    b, d = driving.shape[:2]
    rest = fhat.shape[1:]
    rep = fhat.reshape((b, 1) + rest) + Tensor(np.zeros((b, d) + rest, dtype=fhat.dtype))
    return driving.reshape((b * d,) + rest), rep.reshape((b * d,) + rest)


def embedder_objective(F, P, refs, driving, lambda_s=1.0, return_parts=False):
    """Stage-1 loss ``L_REC + lambda_s * L_S`` for one batch.

    ``refs`` is (B, K, 3, H, W); ``driving`` is (B, 3, H, W) or, to share one
    embedded face across D targets of the same video, (B, D, 3, H, W).
    """
    fhat, fields, _ = F(refs)
    if driving.ndim == 5:
        driving, fhat_rep = flatten_drivers(driving, fhat)
    else:
        fhat_rep = fhat
    _, t_inv, _, xhat = P(driving, fhat_rep)
    l_rec = reconstruction_loss(driving, xhat)
    l_s = tv_smoothness(smoothness_terms(fields, t_inv))
    total = l_rec + l_s * lambda_s if lambda_s else l_rec
    if return_parts:
        return total, {"L_REC": l_rec, "L_S": l_s, "xhat": xhat, "fhat": fhat}
    return total

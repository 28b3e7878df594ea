"""Differentiable warping primitives.

Conventions (channels-first, like every other tensor in the package):

* a displacement field is a ``(B, 2, H, W)`` tensor of pixel offsets, channel
  0 horizontal (du), channel 1 vertical (dv), measured in pixels of the image
  being sampled;
* an attention map is ``(B, 1, H, W)`` and nonnegative;
* sampling is backward (gather): output pixel ``(u, v)`` of a target grid
  ``Ht x Wt`` reads the source at ``(u * Ws / Wt + du, v * Hs / Ht + dv)``,
  clamped to the image border.
"""
import numpy as np

from . import kernels
from .nn import upsample
from .tensor import Tensor, make_node, stack, tabs

ATTENTION_EPS = 1e-6


def _base_grid(ht, wt, hs, ws, dtype):
    v, u = np.meshgrid(np.arange(ht, dtype=dtype) * (hs / ht),
                       np.arange(wt, dtype=dtype) * (ws / wt), indexing="ij")
    return u, v


def grid_sample_bilinear(image, field):
    """Bilinear backward warp of ``image`` (B, C, Hs, Ws) by ``field`` (B, 2, Ht, Wt)."""
    if image.ndim != 4 or field.ndim != 4 or field.shape[1] != 2:
        raise ValueError(f"grid_sample: bad shapes image={image.shape} field={field.shape}")
    if image.shape[0] != field.shape[0]:
        raise ValueError(f"grid_sample: batch mismatch {image.shape[0]} vs {field.shape[0]}")
    fd = field.data
    if not np.all(np.isfinite(fd)):
        raise ValueError("grid_sample: displacement field contains non-finite values")
    _, _, hs, ws = image.shape
    ht, wt = field.shape[2:]
    u, v = _base_grid(ht, wt, hs, ws, image.dtype.type)
    gx = u + fd[:, 0]
    gy = v + fd[:, 1]
    img = image.data
    out = kernels.grid_sample_fwd(img, gx, gy)

    def _grid_sample_bw(g):
        gimg, ggx, ggy = kernels.grid_sample_bwd(img, gx, gy, g)
        gfield = np.stack([ggx, ggy], axis=1) if field.requires_grad else None
        return (gimg if image.requires_grad else None), gfield

    return make_node(out, (image, field), _grid_sample_bw)


def _stacked(items):
    if isinstance(items, Tensor):
        return items
    items = list(items)
    if not items:
        raise ValueError("need at least one entry (K >= 1)")
    return stack(items, axis=1)


def normalize_attention(maps, eps=ATTENTION_EPS):
    """Per-pixel normalization across the K maps: ``(A_k + eps/K) / (sum A + eps)``.

    ``maps`` is a list of K ``(B, 1, H, W)`` tensors or a stacked
    ``(B, K, 1, H, W)`` tensor; the result has the same form.
    """
    as_list = not isinstance(maps, Tensor)
    if as_list:
        maps = list(maps)
        shapes = {m.shape for m in maps}
        if len(shapes) > 1:
            raise ValueError(f"attention maps disagree in shape: {sorted(shapes)}")
    a = _stacked(maps)
    k = a.shape[1]
    out = (a + eps / k) / (a.sum(axis=1, keepdims=True) + eps)
    if as_list:
        return [out[:, i] for i in range(k)]
    return out


def fuse_embedded_face(frames, fields, attentions, eps=ATTENTION_EPS):
    """Attention-weighted fusion of K warped frames into one embedded face.

    Accepts lists of K per-frame tensors or stacked ``(B, K, ...)`` tensors.
    """
    x = _stacked(frames)
    t = _stacked(fields)
    a = _stacked(attentions)
    b, k, c, h, w = x.shape
    if k == 0:
        raise ValueError("fusion needs K >= 1 frames")
    if t.shape != (b, k, 2, h, w) or a.shape != (b, k, 1, h, w):
        raise ValueError(f"fusion shape mismatch: frames {x.shape}, fields {t.shape}, "
                         f"attentions {a.shape}")
    warped = grid_sample_bilinear(x.reshape(b * k, c, h, w), t.reshape(b * k, 2, h, w))
    warped = warped.reshape(b, k, c, h, w)
    weights = normalize_attention(a, eps)
    return (warped * weights).sum(axis=1)


def compose_multiscale(fhat, t_inv, r_low, r_high, mode="bilinear"):
    """``R^H + U(R^L + U(T^-1(fhat)))`` with T^-1 sampled at quarter resolution."""
    b, c, h, w = fhat.shape
    if h % 4 or w % 4:
        raise ValueError(f"compose_multiscale needs H, W divisible by 4, got {h}x{w}")
    if t_inv.shape != (b, 2, h // 4, w // 4):
        raise ValueError(f"T^-1 must be {(b, 2, h // 4, w // 4)}, got {t_inv.shape}")
    if r_low.shape != (b, c, h // 2, w // 2) or r_high.shape != (b, c, h, w):
        raise ValueError(f"residual maps have wrong shapes: {r_low.shape}, {r_high.shape}")
    coarse = grid_sample_bilinear(fhat, t_inv)
    mid = r_low + upsample(coarse, 2, mode)
    return r_high + upsample(mid, 2, mode)


def _field_tv(field):
    if field.ndim != 4 or field.shape[1] != 2:
        raise ValueError(f"displacement field must be (B, 2, H, W), got {field.shape}")
    h, w = field.shape[2:]
    if h < 2 and w < 2:
        raise ValueError(f"tv_smoothness needs a spatial extent >= 2, got {h}x{w}")
    total = None
    if w >= 2:
        du = tabs(field[:, :, :, 1:] - field[:, :, :, :-1])
        total = du.sum(axis=1).mean()
    if h >= 2:
        dv = tabs(field[:, :, 1:, :] - field[:, :, :-1, :]).sum(axis=1).mean()
        total = dv if total is None else total + dv
    return total


def tv_smoothness(fields):
    """Sum over fields of the mean per-site L1 forward difference along u and v.

    The L1 norm at a site adds both displacement channels; each field is
    averaged over its own valid difference sites, so mixed resolutions are
    fine.
    """
    if isinstance(fields, Tensor):
        fields = [fields]
    fields = list(fields)
    if not fields:
        raise ValueError("tv_smoothness needs at least one field")
    total = _field_tv(fields[0])
    for f in fields[1:]:
        total = total + _field_tv(f)
    return total

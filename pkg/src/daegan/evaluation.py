"""Metrics: SSIM, embedded-face invariance, pose-code probe, pose retrieval."""
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .embedders import flatten_drivers, reconstruction_loss
from .synthdata import FrameStore
from .tensor import Tensor, default_dtype, no_grad

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
POSE_NAMES = ("theta", "tx", "ty", "scale", "mouth")


# ------------------------------------------------------------------ SSIM

def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img.mean(axis=0)
    if img.ndim != 2:
        raise ValueError(f"ssim expects C x H x W or H x W images, got shape {img.shape}")
    return img


def ssim(x, y, data_range=2.0):
    """Mean SSIM over all fully-inside 11x11 Gaussian windows.

    Color images are reduced to the channel mean; ``data_range`` is 2 for
    images in [-1, 1].
    """
    x, y = _gray(x), _gray(y)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shapes differ {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim: image {x.shape} smaller than the {SSIM_WINDOW}px window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    w = gaussian_window()

    def filt(a):
        return np.einsum("ijkl,kl->ij", sliding_window_view(a, w.shape), w)

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# ------------------------------------------------------------- retrieval

def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"cosine_similarity: lengths differ {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _unit(v):
    v = np.asarray(v, dtype=np.float64).ravel()
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


@dataclass
class RetrievalIndex:
    """Brute-force cosine index over unit-normalized pose codes."""

    ids: list = field(default_factory=list)
    codes: np.ndarray = None

    @classmethod
    def build(cls, ids, codes):
        ids = list(ids)
        if len(set(ids)) != len(ids):
            raise ValueError("retrieval index ids must be unique")
        codes = np.stack([_unit(c) for c in codes]) if len(ids) else np.zeros((0, 0))
        return cls(ids, codes)

    def __len__(self):
        return len(self.ids)

    def query(self, code, top=None):
        """-> [(id, similarity), ...] by descending similarity, ties by ascending id."""
        if not self.ids:
            raise ValueError("retrieval index is empty")
        q = _unit(code)
        if q.shape[0] != self.codes.shape[1]:
            raise ValueError(f"query code has length {q.shape[0]}, index stores "
                             f"{self.codes.shape[1]}")
        sims = np.clip(self.codes @ q, -1.0, 1.0)
        order = sorted(range(len(self.ids)), key=lambda i: (-sims[i], self.ids[i]))
        if top is not None:
            order = order[:max(int(top), 0)]
        return [(self.ids[i], float(sims[i])) for i in order]


def encode_frames(model, frames, chunk=32):
    """Pose codes for an (N, 3, H, W) array of frames."""
    out = []
    dtype = model.config.np_dtype
    with default_dtype(dtype), no_grad():
        for s in range(0, len(frames), chunk):
            out.append(model.P.encode(Tensor(np.asarray(frames[s:s + chunk], dtype=dtype))).data)
    return np.concatenate(out).astype(np.float64)


def pose_retrieval(query, index, model, top=None):
    """Rank ``index`` entries by pose-code cosine similarity to ``query`` image."""
    code = encode_frames(model, np.asarray(query)[None])[0]
    return index.query(code, top)


# ----------------------------------------------------------- invariance

def embed_face(model, frames):
    """Embedded face from a (K, 3, H, W) stack of frames of one video."""
    dtype = model.config.np_dtype
    with default_dtype(dtype), no_grad():
        fhat, _, _ = model.F(Tensor(np.asarray(frames, dtype=dtype)[None]))
    return fhat.data[0]


def embedded_face_invariance(model, frames, trials, rng, k=None):
    """Mean |fhat(S1) - fhat(S2)| over random disjoint K-subsets S1, S2."""
    k = k or model.config.K
    frames = np.asarray(frames)
    if len(frames) < 2 * k:
        raise ValueError(f"invariance needs >= 2K = {2 * k} frames, got {len(frames)}")
    vals = []
    for _ in range(trials):
        perm = rng.permutation(len(frames))
        a = embed_face(model, frames[np.sort(perm[:k])])
        b = embed_face(model, frames[np.sort(perm[k:2 * k])])
        vals.append(np.abs(a - b).mean())
    return float(np.mean(vals))


# ------------------------------------------------------------ pose probe

def ridge_fit(x, y, reg=1e-3):
    """Closed-form ridge with an unpenalized intercept -> (weights, intercept)."""
    xm, ym = x.mean(axis=0), y.mean(axis=0)
    xc = x - xm
    a = xc.T @ xc + reg * np.eye(x.shape[1])
    w = np.linalg.solve(a, xc.T @ (y - ym))
    return w, ym - xm @ w


def r2_score(y, pred):
    ss_res = ((y - pred) ** 2).sum(axis=0)
    ss_tot = ((y - y.mean(axis=0)) ** 2).sum(axis=0)
    return 1.0 - ss_res / np.where(ss_tot > 0, ss_tot, np.inf)


def pose_code_probe(codes, targets, rng, train_frac=0.7, reg=1e-3):
    """Held-out R^2 of a ridge map from codes to each target column."""
    codes = np.asarray(codes, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(codes) < 50:
        raise ValueError(f"pose probe needs at least 50 samples, got {len(codes)}")
    if len(codes) != len(targets):
        raise ValueError("codes and targets differ in length")
    perm = rng.permutation(len(codes))
    ntr = int(round(train_frac * len(codes)))
    tr, te = perm[:ntr], perm[ntr:]
    w, b = ridge_fit(codes[tr], targets[tr], reg)
    return r2_score(targets[te], codes[te] @ w + b)


# ------------------------------------------------------- reconstruction

def reconstruct(model, refs, driving):
    """Stage-1 reconstructions of (D, 3, H, W) driving frames from K references."""
    dtype = model.config.np_dtype
    with default_dtype(dtype), no_grad():
        fhat, _, _ = model.F(Tensor(np.asarray(refs, dtype=dtype)[None]))
        drv, rep = flatten_drivers(Tensor(np.asarray(driving, dtype=dtype)[None]), fhat)
        _, _, _, xhat = model.P(drv, rep)
    return xhat.data, fhat.data[0]


def reenact(model, source_frames, driving_frames):
    """G(fhat(source), pose(driving)) for each driving frame -> (N, 3, H, W), fhat."""
    dtype = model.config.np_dtype
    fhat = embed_face(model, source_frames)
    codes = encode_frames(model, driving_frames).astype(dtype)
    n = len(driving_frames)
    with default_dtype(dtype), no_grad():
        rep = Tensor(np.broadcast_to(fhat, (n,) + fhat.shape).astype(dtype))
        out = model.G(rep, Tensor(codes))
    return out.data, fhat


def reconstruction_l1(model, batches):
    vals = []
    for b in batches:
        for refs, drv in zip(b.refs, b.driving):
            xhat, _ = reconstruct(model, refs, drv)
            vals.append(float(reconstruction_loss(Tensor(np.asarray(drv, xhat.dtype)),
                                                  Tensor(xhat)).item()))
    return float(np.mean(vals))


# ---------------------------------------------------------------- report

@dataclass
class EvalReport:
    metrics: dict
    config: dict = field(default_factory=dict)
    checkpoint: str = ""

    def validate(self):
        bad = [k for k, v in self.metrics.items() if not math.isfinite(v)]
        if bad:
            raise ValueError(f"non-finite metrics: {', '.join(sorted(bad))}")

    def to_text(self):
        lines = [f"checkpoint={self.checkpoint}"]
        lines += [f"{k}={self.metrics[k]!r}" for k in sorted(self.metrics)]
        lines += [f"config.{k}={self.config[k]}" for k in sorted(self.config)]
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        metrics, config, ckpt = {}, {}, ""
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                key, _, val = line.partition("=")
                if key == "checkpoint":
                    ckpt = val
                elif key.startswith("config."):
                    config[key[7:]] = val
                else:
                    metrics[key] = float(val)
        return cls(metrics, config, ckpt)


# ------------------------------------------------------------- protocol

def _pose_table(index):
    return {v: np.array([p.as_array() for p in index.poses[v]]) for v in index.videos}


def heldout_reenactment(model, index, holdout, seed=0):
    """Self-reenactment on each video's last ``holdout`` frames.

    Sources are K random training frames of the same video (all of them when
    the video has fewer). Returns mean SSIM of
    G outputs and of the embedded face against the driving frames, plus the
    mean L1 of the G outputs (held-out L_R) and of the stage-1 reconstructions.
    ``ssim_reconstruct`` scores the stage-1 reconstructions the same way.
    """
    train, held = index.split(holdout)
    if held is None:
        raise ValueError("heldout_reenactment needs holdout >= 1")
    k = model.config.K
    rng = np.random.default_rng([seed, 7])
    tstore = FrameStore(train, model.config.np_dtype)
    hstore = FrameStore(held, model.config.np_dtype)
    s_gan, s_face, s_rec, l_r, l_rec = [], [], [], [], []
    lo, hi = np.inf, -np.inf
    for vid in index.videos:
        frames = tstore.video(vid)
        src = frames[np.sort(rng.choice(len(frames), min(k, len(frames)), replace=False))]
        drv = hstore.video(vid)
        out, fhat = reenact(model, src, drv)
        xhat, _ = reconstruct(model, src, drv)
        lo, hi = min(lo, float(out.min())), max(hi, float(out.max()))
        for o, x, d in zip(out, xhat, drv):
            s_gan.append(ssim(o, d))
            s_rec.append(ssim(x, d))
            s_face.append(ssim(fhat, d))
        l_r.append(float(np.abs(out - drv).mean()))
        l_rec.append(float(np.abs(xhat - drv).mean()))
    return {"ssim_reenact": float(np.mean(s_gan)), "ssim_embedded_face": float(np.mean(s_face)),
            "ssim_reconstruct": float(np.mean(s_rec)),
            "heldout_L_R": float(np.mean(l_r)), "heldout_L_REC": float(np.mean(l_rec)),
            "generator_min": lo, "generator_max": hi}


def disentanglement_metrics(model, index, holdout=0, seed=0, trials=4, top=5):
    """Embedded-face invariance, pose-code probe R^2 and cross-identity retrieval.

    Invariance uses training frames of videos with at least 2K of them. The
    probe fits on all frames and needs pose sidecars plus 50 frames. Retrieval
    queries each held-out frame (or every 4th frame when holdout is 0) against
    the training frames of the other videos. Parts the corpus cannot support
    are left out of the result.
    """
    train, held = index.split(holdout)
    dtype = model.config.np_dtype
    k = model.config.K
    rng = np.random.default_rng([seed, 11])
    tstore = FrameStore(train, dtype)
    out = {}
    inv = [embedded_face_invariance(model, tstore.video(v), trials, rng)
           for v in index.videos if train.n_frames(v) >= 2 * k]
    if inv:
        out["invariance"] = float(np.mean(inv))
    if any(v not in index.poses for v in index.videos):
        return out

    full = FrameStore(index, dtype)
    poses = _pose_table(index)
    codes = {v: encode_frames(model, full.video(v)) for v in index.videos}
    all_codes = np.concatenate([codes[v] for v in index.videos])
    all_poses = np.concatenate([poses[v] for v in index.videos])
    if len(all_codes) >= 50:
        r2 = pose_code_probe(all_codes, all_poses, np.random.default_rng([seed, 12]))
        for name, val in zip(POSE_NAMES, r2):
            out[f"probe_r2_{name}"] = float(val)
    if len(index.videos) < 2:
        return out

    ntr = {v: train.n_frames(v) for v in index.videos}
    ids, gal, gal_theta, owner = [], [], {}, {}
    for v in index.videos:
        for t in range(ntr[v]):
            key = f"{v}/{t:05d}"
            ids.append(key)
            gal.append(codes[v][t])
            gal_theta[key] = poses[v][t, 0]
            owner[key] = v
    idx = RetrievalIndex.build(ids, gal)
    d_top, d_all = [], []
    for v in index.videos:
        qs = range(ntr[v], index.n_frames(v)) if held is not None else range(0, ntr[v], 4)
        for t in qs:
            theta = poses[v][t, 0]
            ranked = [r for r in idx.query(codes[v][t]) if owner[r[0]] != v]
            d_top += [abs(gal_theta[r[0]] - theta) for r in ranked[:top]]
            d_all += [abs(gal_theta[r[0]] - theta) for r in ranked]
    out["retrieval_top_dtheta"] = float(np.mean(d_top))
    out["retrieval_mean_dtheta"] = float(np.mean(d_all))
    return out

"""Procedural "talking sprite" videos and the directory-of-frames dataset format.

Layout::

    root/index.tsv                      video_id <TAB> n_frames
    root/<video_id>/frame_00000.png     8-bit RGB
    root/<video_id>/poses.tsv           frame theta tx ty scale mouth   (synthetic only)
"""
import logging
import os
from dataclasses import astuple, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

THETA_RANGE = (-0.4, 0.4)
TRANS_FRAC = 0.12
SCALE_RANGE = (0.85, 1.15)
MOUTH_RANGE = (0.0, 1.0)
POSE_HEADER = "frame\ttheta\ttx\tty\tscale\tmouth"
SUPERSAMPLE = 2


@dataclass(frozen=True)
class PoseParams:
    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    scale: float = 1.0
    mouth: float = 0.0

    def check(self, resolution):
        tmax = TRANS_FRAC * resolution
        bad = []
        if not THETA_RANGE[0] <= self.theta <= THETA_RANGE[1]:
            bad.append(f"theta={self.theta}")
        if abs(self.tx) > tmax + 1e-9:
            bad.append(f"tx={self.tx}")
        if abs(self.ty) > tmax + 1e-9:
            bad.append(f"ty={self.ty}")
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            bad.append(f"scale={self.scale}")
        if not MOUTH_RANGE[0] <= self.mouth <= MOUTH_RANGE[1]:
            bad.append(f"mouth={self.mouth}")
        if bad:
            raise ValueError("pose out of range: " + ", ".join(bad))

    def as_array(self):
        return np.array(astuple(self), dtype=np.float64)


# ------------------------------------------------------------- identity

@dataclass
class SpriteIdentity:
    """Per-identity colors and part geometry, all in unit-square coordinates."""

    seed: int
    background: np.ndarray = field(init=False)
    parts: list = field(init=False)

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 7919])
        self.background = rng.uniform(0.05, 0.95, 3)
        skin = _distinct_color(rng, self.background)
        face_rx = rng.uniform(0.22, 0.30)
        face_ry = face_rx * rng.uniform(1.1, 1.35)
        cy = 0.5 + rng.uniform(-0.02, 0.02)
        eye_color = _distinct_color(rng, skin)
        eye_dx = face_rx * rng.uniform(0.35, 0.55)
        eye_y = cy - face_ry * rng.uniform(0.2, 0.35)
        eye_r = face_rx * rng.uniform(0.12, 0.2)
        mouth_color = _distinct_color(rng, skin)
        mouth_w = face_rx * rng.uniform(0.5, 0.9)
        mouth_h = face_ry * rng.uniform(0.06, 0.1)
        mouth_y = cy + face_ry * rng.uniform(0.4, 0.55)
        # (kind, cx, cy, rx, ry, color)
        self.parts = [
            ("ellipse", 0.5, cy, face_rx, face_ry, skin),
            ("ellipse", 0.5 - eye_dx, eye_y, eye_r, eye_r, eye_color),
            ("ellipse", 0.5 + eye_dx, eye_y, eye_r, eye_r, eye_color),
            ("mouth", 0.5, mouth_y, mouth_w / 2, mouth_h / 2, mouth_color),
        ]
        if rng.uniform() < 0.6:
            nose = _distinct_color(rng, skin)
            self.parts.append(("ellipse", 0.5, cy + face_ry * 0.1, face_rx * 0.1,
                               face_ry * 0.14, nose))
        if rng.uniform() < 0.5:
            hair = _distinct_color(rng, self.background)
            self.parts.insert(0, ("ellipse", 0.5, cy - face_ry * 0.55, face_rx * 1.05,
                                  face_ry * 0.6, hair))

    def canvas(self, size, mouth=0.0):
        """Render the undeformed sprite (mouth opened by ``mouth``) on a size^2 grid."""
        c = (np.arange(size) + 0.5) / size
        yy, xx = np.meshgrid(c, c, indexing="ij")
        img = np.broadcast_to(self.background, (size, size, 3)).copy()
        for kind, px, py, rx, ry, color in self.parts:
            if kind == "mouth":
                ry = ry * (1.0 + 3.0 * mouth)
                inside = (np.abs(xx - px) <= rx) & (np.abs(yy - py) <= ry)
            else:
                inside = ((xx - px) / rx) ** 2 + ((yy - py) / ry) ** 2 <= 1.0
            img[inside] = color
        return img


def _distinct_color(rng, other, min_dist=0.35):
    for _ in range(100):
        col = rng.uniform(0.0, 1.0, 3)
        if np.linalg.norm(col - other) >= min_dist:
            return col
    return 1.0 - other


# ------------------------------------------------------------- rendering

def _bilinear_clamped(img, sx, sy):
    h, w = img.shape[:2]
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (sx - x0)[..., None]
    wy = (sy - y0)[..., None]
    top = (1 - wx) * img[y0, x0] + wx * img[y0, x1]
    bot = (1 - wx) * img[y1, x0] + wx * img[y1, x1]
    return (1 - wy) * top + wy * bot


def similarity_warp(img, pose, pixel_scale=1.0):
    """Apply (scale, rotation, translation) about the image center.

    Output pixel p reads the input at ``c + R(-theta) (p - c - t) / s``; the
    translation is given in output pixels divided by ``pixel_scale``.
    """
    n = img.shape[0]
    c = (n - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64),
                         indexing="ij")
    px = xx - c - pose.tx * pixel_scale
    py = yy - c - pose.ty * pixel_scale
    ct, st = np.cos(pose.theta), np.sin(pose.theta)
    sx = (ct * px + st * py) / pose.scale + c
    sy = (-st * px + ct * py) / pose.scale + c
    return _bilinear_clamped(img, sx, sy)


def _downsample(img, f):
    n = img.shape[0] // f
    return img.reshape(n, f, n, f, 3).mean(axis=(1, 3))


def render_frame(identity, pose, resolution):
    """Render one frame as float RGB in [0, 1], shape (res, res, 3)."""
    pose.check(resolution)
    big = identity.canvas(resolution * SUPERSAMPLE, pose.mouth)
    if (pose.theta, pose.tx, pose.ty, pose.scale) != (0.0, 0.0, 0.0, 1.0):
        big = similarity_warp(big, pose, SUPERSAMPLE)
    return _downsample(big, SUPERSAMPLE)


def render_template(identity, resolution):
    return render_frame(identity, PoseParams(), resolution)


def to_uint8(img):
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


# --------------------------------------------------------------- poses

def sample_pose_walk(n, resolution, rng, step=0.08):
    """Smooth random walk over the pose box (reflecting at the bounds)."""
    tmax = TRANS_FRAC * resolution
    lo = np.array([THETA_RANGE[0], -tmax, -tmax, SCALE_RANGE[0], MOUTH_RANGE[0]])
    hi = np.array([THETA_RANGE[1], tmax, tmax, SCALE_RANGE[1], MOUTH_RANGE[1]])
    span = hi - lo
    x = rng.uniform(lo, hi)
    vel = np.zeros(5)
    out = []
    for _ in range(n):
        out.append(PoseParams(*np.clip(x, lo, hi)))
        vel = 0.7 * vel + rng.normal(0.0, step, 5) * span
        x = x + vel
        # reflect
        over = x > hi
        x[over] = 2 * hi[over] - x[over]
        vel[over] *= -1
        under = x < lo
        x[under] = 2 * lo[under] - x[under]
        vel[under] *= -1
        x = np.clip(x, lo, hi)
    return out


# --------------------------------------------------------------- on disk

@dataclass
class DatasetIndex:
    root: Path
    videos: list
    frames: dict
    poses: dict

    def n_frames(self, vid):
        return len(self.frames[vid])

    def split(self, holdout):
        """-> (train, held_out): the last ``holdout`` frames of each video are held out."""
        if holdout <= 0:
            return self, None
        too_short = [v for v in self.videos if self.n_frames(v) - holdout < 2]
        if too_short:
            raise ValueError(f"holdout={holdout} leaves fewer than 2 training frames in "
                             f"{len(too_short)} video(s), e.g. {too_short[0]}")
        train = DatasetIndex(self.root, list(self.videos),
                             {v: f[:-holdout] for v, f in self.frames.items()},
                             {v: p[:-holdout] for v, p in self.poses.items()})
        held = DatasetIndex(self.root, list(self.videos),
                            {v: f[-holdout:] for v, f in self.frames.items()},
                            {v: p[-holdout:] for v, p in self.poses.items()})
        return train, held

    @property
    def resolution(self):
        vid = self.videos[0]
        with Image.open(self.frames[vid][0]) as im:
            return im.size[1]


def _write_text(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def gen_dataset(n_videos, frames_per_video, resolution, seed, out_dir):
    """Write a synthetic corpus; returns its :class:`DatasetIndex`."""
    if n_videos < 1 or frames_per_video < 2:
        raise ValueError("need at least one video with two frames")
    if resolution % 4:
        raise ValueError(f"resolution must be divisible by 4, got {resolution}")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    ss = np.random.SeedSequence(seed)
    index_lines = ["video_id\tframes"]
    for vi, child in enumerate(ss.spawn(n_videos)):
        rng = np.random.default_rng(child)
        vid = f"video_{vi:04d}"
        identity = SpriteIdentity(int(rng.integers(0, 2 ** 31)))
        poses = sample_pose_walk(frames_per_video, resolution, rng)
        vdir = root / vid
        vdir.mkdir(exist_ok=True)
        lines = [POSE_HEADER]
        for t, pose in enumerate(poses):
            frame = to_uint8(render_frame(identity, pose, resolution))
            path = vdir / f"frame_{t:05d}.png"
            try:
                Image.fromarray(frame, "RGB").save(path, optimize=False)
            except OSError as exc:
                raise OSError(f"failed writing {path}: {exc}") from exc
            lines.append("\t".join([str(t)] + [repr(float(v)) for v in astuple(pose)]))
        _write_text(vdir / "poses.tsv", lines)
        index_lines.append(f"{vid}\t{frames_per_video}")
    _write_text(root / "index.tsv", index_lines)
    return load_index(root)


def read_poses(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != POSE_HEADER:
            raise ValueError(f"{path}: unexpected pose header {header!r}")
        for line in fh:
            if line.strip():
                vals = line.rstrip("\n").split("\t")
                out.append(PoseParams(*map(float, vals[1:6])))
    return out


def load_index(root):
    """Index a directory-of-frames corpus (``index.tsv`` optional)."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    idx = root / "index.tsv"
    if idx.exists():
        with open(idx, encoding="utf-8") as fh:
            fh.readline()
            videos = [ln.split("\t")[0] for ln in fh if ln.strip()]
    else:
        videos = sorted(p.name for p in root.iterdir() if p.is_dir())
    frames, poses = {}, {}
    for vid in videos:
        files = sorted((root / vid).glob("frame_*.png"))
        for f in files:
            if not f.exists():
                raise FileNotFoundError(f)
        if len(files) < 2:
            raise ValueError(f"video {vid} has {len(files)} frames; need at least 2")
        frames[vid] = files
        sidecar = root / vid / "poses.tsv"
        if sidecar.exists():
            poses[vid] = read_poses(sidecar)
    return DatasetIndex(root, videos, frames, poses)


def read_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def to_model_range(arr_uint8):
    """uint8 HWC -> float CHW in [-1, 1]."""
    return (arr_uint8.astype(np.float64).transpose(2, 0, 1) / 127.5) - 1.0


def from_model_range(chw):
    return to_uint8((np.asarray(chw, dtype=np.float64).transpose(1, 2, 0) + 1.0) / 2.0)


class FrameStore:
    """Decoded-frame cache keyed by (video, frame index), values in [-1, 1]."""

    def __init__(self, index, dtype=np.float32):
        self.index = index
        self.dtype = dtype
        self._cache = {}

    def video(self, vid):
        arr = self._cache.get(vid)
        if arr is None:
            arr = np.stack([to_model_range(read_png(p)) for p in self.index.frames[vid]])
            arr = arr.astype(self.dtype)
            self._cache[vid] = arr
        return arr

    def frame(self, vid, t):
        return self.video(vid)[t]


@dataclass
class Batch:
    refs: np.ndarray          # B x K x 3 x H x W
    driving: np.ndarray       # B x D x 3 x H x W
    video_ids: list
    ref_idx: list
    drive_idx: list
    poses: list = None        # per sample: list of D PoseParams, or None


def eligible_videos(index, k, drivers=1):
    out = []
    for vid in index.videos:
        if index.n_frames(vid) >= k + drivers:
            out.append(vid)
        else:
            log.warning("skipping video %s: %d frames < K + drivers = %d", vid,
                        index.n_frames(vid), k + drivers)
    if not out:
        raise ValueError(f"no video has at least K + drivers = {k + drivers} frames")
    return out


def _assemble(store, vids, refs_idx, drive_idx):
    index = store.index
    refs = np.stack([store.video(v)[r] for v, r in zip(vids, refs_idx)])
    drv = np.stack([store.video(v)[d] for v, d in zip(vids, drive_idx)])
    poses = None
    if all(v in index.poses for v in vids):
        poses = [[index.poses[v][t] for t in d] for v, d in zip(vids, drive_idx)]
    return Batch(refs, drv, list(vids), [list(r) for r in refs_idx],
                 [list(d) for d in drive_idx], poses)


def load_batch(index, k, batch_size, rng, store=None, drivers=1):
    """Sample ``batch_size`` videos; K references + ``drivers`` disjoint driving frames each."""
    store = store or FrameStore(index)
    vids = eligible_videos(index, k, drivers)
    chosen = [vids[i] for i in rng.integers(0, len(vids), batch_size)]
    refs_idx, drive_idx = [], []
    for vid in chosen:
        perm = rng.permutation(index.n_frames(vid))
        refs_idx.append(np.sort(perm[:k]))
        drive_idx.append(perm[k:k + drivers])
    return _assemble(store, chosen, refs_idx, drive_idx)


def epoch_batches(index, k, batch_size, rng, store=None, drivers=1):
    """One epoch: every frame of every eligible video is a driving target once.

    Each video's frames are shuffled and cut into groups of ``drivers``; every
    group gets K references drawn from the video's remaining frames. Groups
    from different videos are shuffled together and packed ``batch_size`` at
    a time.
    """
    store = store or FrameStore(index)
    vids = eligible_videos(index, k, drivers)
    groups = []
    for vid in vids:
        n = index.n_frames(vid)
        perm = rng.permutation(n)
        for s in range(0, n - drivers + 1, drivers):
            drive = perm[s:s + drivers]
            rest = np.setdiff1d(np.arange(n), drive)
            groups.append((vid, np.sort(rng.choice(rest, k, replace=False)), drive))
    order = rng.permutation(len(groups))
    for s in range(0, len(order), batch_size):
        chunk = [groups[i] for i in order[s:s + batch_size]]
        yield _assemble(store, [g[0] for g in chunk], [g[1] for g in chunk],
                        [g[2] for g in chunk])

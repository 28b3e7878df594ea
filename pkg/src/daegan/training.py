"""Two-stage training: embedders alone, then F/P/G/D optimized one by one."""
import logging
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .embedders import (FaceEmbedderNet, NetConfig, PoseEmbedderNet, embedder_objective,
                        flatten_drivers, reconstruction_loss, smoothness_terms)
from .gan import Discriminator, GanConfig, Generator, frozen, hinge_d_loss, stage2_objective
from .optim import AdamState, adam_step
from .synthdata import FrameStore, epoch_batches, eligible_videos
from .tensor import Tensor, backward, default_dtype, no_grad
from .warp import tv_smoothness

log = logging.getLogger(__name__)

NETS = ("F", "P", "G", "D")
# keys that change parameter shapes or numerics; must agree across a resume
ARCH_KEYS = ("resolution", "d_p", "base_width", "g_width", "d_width", "spectral_norm", "dtype")


@dataclass
class TrainConfig:
    resolution: int = 64
    K: int = 8
    d_p: int = 128
    batch_size: int = 1
    drivers: int = 1
    epochs_stage1: int = 30
    epochs_stage2: int = 30
    stage2_max_steps: int = 0
    lr_base: float = 1e-4
    lr_discriminator: float = 4e-4
    embedder_lr_decay_factor: float = 10.0
    lr_floor: float = 0.01
    beta1: float = 0.0
    beta2: float = 0.9
    lambda_s: float = 1.0
    lambda_r: float = 1.0
    lambda_fm: float = 1.0
    seed: int = 0
    spectral_norm: bool = True
    base_width: int = 32
    g_width: int = 16
    d_width: int = 32
    holdout: int = 0
    alternation: str = "FPGD"
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("lr_base", "lr_discriminator", "embedder_lr_decay_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("lambda_s", "lambda_r", "lambda_fm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("epoch counts must be >= 0")
        if sorted(self.alternation) != sorted(NETS):
            raise ValueError(f"alternation must be a permutation of FPGD, got {self.alternation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.K < 1 or self.drivers < 1 or self.batch_size < 1:
            raise ValueError("K, drivers and batch_size must be >= 1")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def total_epochs(self):
        return self.epochs_stage1 + self.epochs_stage2

    def net_config(self):
        return NetConfig(resolution=self.resolution, base_width=self.base_width, d_p=self.d_p)

    def gan_config(self):
        return GanConfig(resolution=self.resolution, d_p=self.d_p, g_width=self.g_width,
                         d_width=self.d_width, spectral_norm=self.spectral_norm)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


def lr_at(epoch, total_epochs, base, floor=0.01):
    """Linear decay from ``base`` toward 0 over ``total_epochs``, floored at ``floor * base``."""
    if total_epochs <= 0:
        return base
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return max(base * (1.0 - epoch / total_epochs), base * floor)


class Model:
    """The four networks, built deterministically from a config."""

    def __init__(self, config):
        self.config = config
        with default_dtype(config.np_dtype):
            self.F = FaceEmbedderNet(config.net_config(), np.random.default_rng([config.seed, 1]))
            self.P = PoseEmbedderNet(config.net_config(), np.random.default_rng([config.seed, 2]))
            self.G = Generator(config.gan_config(), np.random.default_rng([config.seed, 3]))
            self.D = Discriminator(config.gan_config(), np.random.default_rng([config.seed, 4]))
        self.D.eval()

    def nets(self):
        return {"F": self.F, "P": self.P, "G": self.G, "D": self.D}

    def state(self):
        out = {}
        for name, net in self.nets().items():
            for k, p in net.named_parameters(name + "."):
                out[k] = p.data
            for k, b in net.named_buffers(name + "."):
                out[k] = b
        return out

    def load_state(self, tensors):
        expected = self.state()
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        if missing or extra:
            raise CheckpointError(f"checkpoint tensors do not match the model: "
                                  f"missing {missing[:3]}, unexpected {extra[:3]}")
        for name, net in self.nets().items():
            for k, p in net.named_parameters(name + "."):
                _check_shape(k, tensors[k], p.data)
                p.data = tensors[k].astype(p.data.dtype, copy=True)
            for k, b in net.named_buffers(name + "."):
                _check_shape(k, tensors[k], b)
                b[...] = tensors[k]


def _check_shape(name, got, want):
    if got.shape != want.shape or got.dtype != want.dtype:
        raise CheckpointError(f"tensor {name}: checkpoint has {got.dtype}{list(got.shape)}, "
                              f"model expects {want.dtype}{list(want.shape)}")


class Trainer:
    """Holds networks, optimizer states, counters, and the per-epoch metric log."""

    def __init__(self, config, dataset, model=None):
        self.config = config
        self.dataset = dataset
        self.train_index = dataset.split(config.holdout)[0] if dataset is not None else None
        self.model = model or Model(config)
        self.opt = {name: AdamState.for_params(net.parameters(), config.beta1, config.beta2)
                    for name, net in self.model.nets().items()}
        self.stage = 1
        self.epoch = 0
        self.metrics = []
        self.step_log = []
        self.on_substep = None
        self._store = None

    # ------------------------------------------------------------ state
    @property
    def store(self):
        if self._store is None:
            self._store = FrameStore(self.train_index, self.config.np_dtype)
        return self._store

    def checkpoint(self):
        adam = {}
        for name, net in self.model.nets().items():
            st = self.opt[name]
            for (k, _), m, v in zip(net.named_parameters(name + "."), st.m, st.v):
                adam[f"adam.m.{k}"] = m.copy()
                adam[f"adam.v.{k}"] = v.copy()
            adam[f"adam.t.{name}"] = np.array(st.t, dtype=np.float64)
        tensors = {k: v.copy() for k, v in self.model.state().items()}
        return Checkpoint(self.stage, self.epoch, tensors, adam,
                          asdict(self.config), self.config.seed)

    @classmethod
    def from_checkpoint(cls, ckpt, config, dataset):
        check_compatible(ckpt.config, config)
        tr = cls(config, dataset)
        tr.model.load_state(ckpt.tensors)
        for name, net in tr.model.nets().items():
            st = tr.opt[name]
            for i, (k, p) in enumerate(net.named_parameters(name + ".")):
                for buf, key in ((st.m, f"adam.m.{k}"), (st.v, f"adam.v.{k}")):
                    if key not in ckpt.adam:
                        raise CheckpointError(f"checkpoint lacks optimizer state {key}")
                    _check_shape(key, ckpt.adam[key], buf[i])
                    buf[i] = ckpt.adam[key].copy()
            st.t = int(ckpt.adam.get(f"adam.t.{name}", 0))
        tr.stage = ckpt.stage
        tr.epoch = ckpt.epoch
        return tr

    def epoch_rng(self, epoch):
        return np.random.default_rng([self.config.seed, 1000 + epoch])

    def lr(self, net, epoch):
        c = self.config
        base = c.lr_discriminator if net == "D" else c.lr_base
        lr = lr_at(min(epoch, c.total_epochs), c.total_epochs, base, c.lr_floor)
        if self.stage == 2 and net in ("F", "P"):
            lr /= c.embedder_lr_decay_factor
        return lr

    def _record(self, **rec):
        self.step_log.append(rec)
        if self.on_substep is not None:
            self.on_substep(self, rec)

    def _batches(self, epoch):
        c = self.config
        return epoch_batches(self.train_index, c.K, c.batch_size, self.epoch_rng(epoch),
                             self.store, c.drivers)

    # ---------------------------------------------------------- stage 1
    def run_stage1_epoch(self):
        c, m = self.config, self.model
        self.stage = 1
        params = m.F.parameters() + m.P.parameters()
        t0 = time.perf_counter()
        acc = {"L_REC": [], "L_S": []}
        lr = self.lr("F", self.epoch)
        with default_dtype(c.np_dtype):
            for step, b in enumerate(self._batches(self.epoch)):
                for p in params:
                    p.grad = None
                loss, parts = embedder_objective(m.F, m.P, Tensor(b.refs), Tensor(b.driving),
                                                 c.lambda_s, return_parts=True)
                backward(loss, params=params)
                adam_step(m.F.parameters(), [p.grad for p in m.F.parameters()], self.opt["F"], lr)
                adam_step(m.P.parameters(), [p.grad for p in m.P.parameters()], self.opt["P"], lr)
                acc["L_REC"].append(parts["L_REC"].item())
                acc["L_S"].append(parts["L_S"].item())
                self._record(stage=1, epoch=self.epoch, step=step, net="FP", lr=lr)
        self.epoch += 1
        row = {"epoch": self.epoch, "stage": 1, "L_REC": float(np.mean(acc["L_REC"])),
               "L_S": float(np.mean(acc["L_S"])), "L_G": float("nan"), "L_D": float("nan"),
               "L_FM": float("nan"), "wall_seconds": time.perf_counter() - t0}
        self.metrics.append(row)
        return row

    # ---------------------------------------------------------- stage 2
    def _embedder_stage2_loss(self, b, train_f):
        c, m = self.config, self.model
        refs = Tensor(b.refs)
        if train_f:
            fhat, fields, _ = m.F(refs)
        else:
            with no_grad():
                fhat, fields, _ = m.F(refs)
        drv, fhat_rep = flatten_drivers(Tensor(b.driving), fhat)
        code, t_inv, _, xhat = m.P(drv, fhat_rep)
        l_rec = reconstruction_loss(drv, xhat)
        l_s = tv_smoothness(smoothness_terms(fields, t_inv))
        out = stage2_objective(m.G, m.D, fhat_rep, code, drv, c.lambda_r, c.lambda_fm)
        total = l_rec + out["L_G_total"]
        if c.lambda_s:
            total = total + l_s * c.lambda_s
        out.update(L_REC=l_rec, L_S=l_s, total=total)
        return out

    def _frozen_inputs(self, b, with_fake=False):
        m = self.model
        with no_grad():
            fhat, _, _ = m.F(Tensor(b.refs))
            drv, fhat_rep = flatten_drivers(Tensor(b.driving), fhat)
            code = m.P.encode(drv)
            fake = m.G(fhat_rep, code) if with_fake else None
        return drv, fhat_rep, code, fake

    def _substep(self, net, b, lr):
        c, m = self.config, self.model
        nets = m.nets()
        target = nets[net]
        others = [v for k, v in nets.items() if k != net]
        params = target.parameters()
        for p in params:
            p.grad = None
        parts = {}
        m.D.train(net == "D")
        with frozen(*others):
            if net in ("F", "P"):
                out = self._embedder_stage2_loss(b, train_f=(net == "F"))
                loss = out["total"]
                parts = {k: out[k].item() for k in ("L_REC", "L_S", "L_G", "L_R", "L_FM")}
            elif net == "G":
                drv, fhat, code, _ = self._frozen_inputs(b)
                out = stage2_objective(m.G, m.D, fhat, code, drv, c.lambda_r, c.lambda_fm)
                loss = out["L_G_total"]
                parts = {k: out[k].item() for k in ("L_G", "L_R", "L_FM")}
            else:
                drv, _, _, fake = self._frozen_inputs(b, with_fake=True)
                s_real, _ = m.D(drv)
                s_fake, _ = m.D(fake)
                loss = hinge_d_loss(s_real, s_fake)
                parts = {"L_D": loss.item()}
            backward(loss, params=params)
        m.D.eval()
        adam_step(params, [p.grad for p in params], self.opt[net], lr)
        return parts

    def run_stage2_epoch(self, max_steps=0):
        c = self.config
        self.stage = 2
        t0 = time.perf_counter()
        acc = {k: [] for k in ("L_REC", "L_S", "L_G", "L_D", "L_FM", "L_R")}
        lrs = {n: self.lr(n, self.epoch) for n in NETS}
        with default_dtype(c.np_dtype):
            for step, b in enumerate(self._batches(self.epoch)):
                if max_steps and step >= max_steps:
                    break
                for net in c.alternation:
                    parts = self._substep(net, b, lrs[net])
                    for k in _LOGGED_FROM[net]:
                        acc[k].append(parts[k])
                    self._record(stage=2, epoch=self.epoch, step=step, net=net,
                                 lr=lrs[net], **parts)
        self.epoch += 1
        row = {"epoch": self.epoch, "stage": 2}
        for k in ("L_REC", "L_S", "L_G", "L_D", "L_FM", "L_R"):
            row[k] = float(np.mean(acc[k])) if acc[k] else float("nan")
        row["wall_seconds"] = time.perf_counter() - t0
        self.metrics.append(row)
        return row


# which sub-step's value goes into the epoch averages
_LOGGED_FROM = {"F": ("L_REC", "L_S"), "P": (), "G": ("L_G", "L_R", "L_FM"), "D": ("L_D",)}

LOG_COLUMNS = ("epoch", "stage", "L_REC", "L_S", "L_G", "L_D", "L_FM", "wall_seconds")


def format_metric_line(row):
    vals = [str(row["epoch"]), str(row["stage"])]
    vals += [repr(float(row[k])) for k in LOG_COLUMNS[2:]]
    return "\t".join(vals)


def read_metric_log(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            vals = line.rstrip("\n").split("\t")
            row = {"epoch": int(vals[0]), "stage": int(vals[1])}
            row.update({k: float(v) for k, v in zip(LOG_COLUMNS[2:], vals[2:])})
            rows.append(row)
    return rows


def check_compatible(saved, config):
    cur = asdict(config)
    diffs = [f"{k}: checkpoint={saved.get(k)!r} run={cur[k]!r}" for k in ARCH_KEYS
             if saved.get(k) != cur[k]]
    if diffs:
        raise CheckpointError("checkpoint config is incompatible with this run: " +
                              "; ".join(diffs))


def _after_epoch(trainer, row, log_path, ckpt_dir):
    log.info("epoch %d stage %d  %s", row["epoch"], row["stage"],
             "  ".join(f"{k}={row[k]:.4f}" for k in LOG_COLUMNS[2:7] if np.isfinite(row[k])))
    if log_path is not None:
        with open(log_path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(format_metric_line(row) + "\n")
    if ckpt_dir is not None:
        save_checkpoint(trainer.checkpoint(), checkpoint_path(ckpt_dir, trainer.epoch))
        save_checkpoint(trainer.checkpoint(), f"{ckpt_dir}/latest.ckpt")


def checkpoint_path(ckpt_dir, epoch):
    return f"{ckpt_dir}/epoch_{epoch:04d}.ckpt"


def _check_dataset(config, dataset):
    train, _ = dataset.split(config.holdout)
    eligible_videos(train, config.K, config.drivers)
    if dataset.resolution != config.resolution:
        raise ValueError(f"dataset frames are {dataset.resolution}px, config expects "
                         f"{config.resolution}px")


def train_stage1(config, dataset, start=None, log_path=None, ckpt_dir=None, trainer=None):
    """Optimize F and P on the stage-1 objective up to ``epochs_stage1`` epochs."""
    _check_dataset(config, dataset)
    if trainer is None:
        trainer = (Trainer.from_checkpoint(start, config, dataset) if start is not None
                   else Trainer(config, dataset))
    if trainer.stage != 1 and trainer.epoch > 0:
        raise CheckpointError("stage-1 training cannot resume from a stage-2 checkpoint")
    while trainer.epoch < config.epochs_stage1:
        row = trainer.run_stage1_epoch()
        _after_epoch(trainer, row, log_path, ckpt_dir)
    return trainer.checkpoint()


def train_stage2(config, dataset, start, log_path=None, ckpt_dir=None, trainer=None):
    """Alternating F, P, G, D optimization from a stage-1 (or later) checkpoint.

    ``config.stage2_max_steps`` (0 = no cap) bounds the alternation cycles run
    by this call.
    """
    _check_dataset(config, dataset)
    if trainer is None:
        if start is None:
            raise ValueError("stage 2 needs a starting checkpoint")
        trainer = Trainer.from_checkpoint(start, config, dataset)
    if trainer.epoch < config.epochs_stage1:
        raise CheckpointError(f"stage 2 needs a finished stage 1 (epoch >= "
                              f"{config.epochs_stage1}), checkpoint is at epoch {trainer.epoch}")
    if config.epochs_stage2 == 0 and start is not None:
        return start
    budget = config.stage2_max_steps
    while trainer.epoch < config.total_epochs:
        remaining = budget - _stage2_steps(trainer) if budget else 0
        if budget and remaining <= 0:
            break
        row = trainer.run_stage2_epoch(max_steps=remaining)
        _after_epoch(trainer, row, log_path, ckpt_dir)
    return trainer.checkpoint()


def _stage2_steps(trainer):
    """Completed stage-2 alternation cycles recorded by this trainer."""
    net = trainer.config.alternation[-1]
    return sum(1 for r in trainer.step_log if r["stage"] == 2 and r["net"] == net)

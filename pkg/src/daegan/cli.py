"""``daegan`` command line: gen-data, train, reenact, retrieve, gradcheck, eval.

Settings come from three layers. Command-line flags override keys from the
``--config`` file, which override built-in defaults. The config file is UTF-8
``key = value`` lines; ``#`` starts a comment. Unknown keys are an error.

Exit codes: 0 success, 1 a check or metric failed, 2 usage or environment error.
"""
import argparse
import hashlib
import logging
import shutil
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import evaluation as ev
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import TOLERANCE, run_suite
from .synthdata import (from_model_range, gen_dataset, load_index, read_png,
                        to_model_range)
from .training import (Model, TrainConfig, Trainer, read_metric_log, format_metric_line,
                       train_stage1, train_stage2)

log = logging.getLogger("daegan")

PATH_KEYS = {"dataset_dir": "", "checkpoint_dir": "checkpoints", "output_dir": "out"}
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config

def _coerce(name, typ, raw):
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        return typ(raw)
    except ValueError:
        raise UsageError(f"config key {name}: cannot parse {raw!r} as {typ.__name__}") from None


def _field_types():
    types = {f.name: f.type for f in fields(TrainConfig)}
    types.update({k: str for k in PATH_KEYS})
    return types


def parse_config_text(text, source="<config>"):
    """``key = value`` lines -> dict of typed values (unknown keys rejected)."""
    types = _field_types()
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise UsageError(f"{source}:{n}: unknown config key {key!r}")
        out[key] = _coerce(key, types[key], raw)
    return out


def load_settings(config_path=None, overrides=None, base=None):
    """Defaults <- ``base`` <- config file <- flag overrides -> (TrainConfig, paths).

    ``base`` is the config snapshot of a checkpoint being resumed.
    """
    settings = dict(asdict(TrainConfig()), **PATH_KEYS)
    settings.update(base or {})
    if config_path:
        p = Path(config_path)
        if not p.is_file():
            raise UsageError(f"config file {p} not found")
        settings.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    types = _field_types()
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in types:
            raise UsageError(f"unknown config key {key!r}")
        settings[key] = _coerce(key, types[key], val) if isinstance(val, str) else val
    paths = {k: settings.pop(k) for k in PATH_KEYS}
    try:
        cfg = TrainConfig(**settings)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg, paths


def _set_pairs(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# --------------------------------------------------------------- helpers

def _model_from_checkpoint(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint {p} not found")
    ckpt = load_checkpoint(p)
    config = TrainConfig.from_dict(ckpt.config)
    model = Model(config)
    model.load_state(ckpt.tensors)
    return model, ckpt


def _checkpoint_id(path):
    digest = hashlib.sha1(Path(path).read_bytes()).hexdigest()[:16]
    return f"{Path(path).name}@{digest}"


def _read_frame(path, resolution):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"image {p} not found")
    arr = read_png(p)
    if arr.shape[:2] != (resolution, resolution):
        raise UsageError(f"{p} is {arr.shape[1]}x{arr.shape[0]}, the checkpoint expects "
                         f"{resolution}x{resolution}")
    return to_model_range(arr)


def _png_list(path):
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.png"))
        if not files:
            raise UsageError(f"no PNG files in {p}")
        return files
    if not p.is_file():
        raise UsageError(f"{p} not found")
    return [p]


def _write_png(path, chw):
    Image.fromarray(from_model_range(np.clip(chw, -1.0, 1.0)), "RGB").save(path)


# -------------------------------------------------------------- commands

def cmd_gen_data(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} exists and is not empty (use --force to replace it)")
        shutil.rmtree(out)
    index = gen_dataset(args.videos, args.frames, args.res, args.seed, out)
    total = sum(index.n_frames(v) for v in index.videos)
    print(f"wrote {len(index.videos)} videos, {total} frames at {args.res}x{args.res} to {out}")
    return EXIT_OK


def _truncate_log(path, epoch):
    """Drop rows past ``epoch`` so a resumed run continues the log cleanly."""
    if not path.exists():
        return
    rows = [r for r in read_metric_log(path) if r["epoch"] <= epoch]
    path.write_text("".join(format_metric_line(r) + "\n" for r in rows), encoding="utf-8")


def cmd_train(args):
    overrides = _set_pairs(args.set)
    overrides.update(dataset_dir=args.data, checkpoint_dir=args.ckpt_dir, seed=args.seed,
                     stage2_max_steps=args.steps)
    if args.epochs is not None:
        if args.stage in ("1", "auto"):
            overrides["epochs_stage1"] = args.epochs
        if args.stage in ("2", "auto"):
            overrides["epochs_stage2"] = args.epochs
    config, paths = load_settings(args.config, overrides)
    ckpt_dir = Path(paths["checkpoint_dir"])
    start = None
    resume = args.resume
    if resume is None and args.stage == "2":
        resume = ckpt_dir / "latest.ckpt"
        if not resume.exists():
            raise UsageError(f"stage 2 needs a stage-1 checkpoint: pass --resume or train "
                             f"stage 1 into {ckpt_dir} first")
    if resume is not None:
        if not Path(resume).is_file():
            raise UsageError(f"checkpoint {resume} not found")
        start = load_checkpoint(resume)
        # a resumed run keeps the checkpoint's settings unless told otherwise
        config, paths = load_settings(args.config, overrides, base=start.config)
        ckpt_dir = Path(paths["checkpoint_dir"])
    if not paths["dataset_dir"]:
        raise UsageError("no dataset: pass --data or set dataset_dir in the config")
    index = load_index(paths["dataset_dir"])
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = ckpt_dir / "metrics.tsv"
    if start is not None:
        _truncate_log(log_path, start.epoch)
    elif log_path.exists():
        log_path.unlink()

    if args.stage == "2" and start.epoch < config.epochs_stage1:
        raise UsageError(f"stage 2 needs a finished stage 1: checkpoint is at epoch "
                         f"{start.epoch}, epochs_stage1={config.epochs_stage1}")
    trainer = Trainer.from_checkpoint(start, config, index) if start else Trainer(config, index)
    if args.stage in ("1", "auto") and trainer.epoch < config.epochs_stage1:
        train_stage1(config, index, log_path=log_path, ckpt_dir=ckpt_dir, trainer=trainer)
    if args.stage in ("2", "auto"):
        train_stage2(config, index, None, log_path=log_path, ckpt_dir=ckpt_dir,
                     trainer=trainer)
    save_checkpoint(trainer.checkpoint(), ckpt_dir / "latest.ckpt")
    print(f"stage {trainer.stage} epoch {trainer.epoch}; checkpoint {ckpt_dir / 'latest.ckpt'}")
    return EXIT_OK


def cmd_reenact(args):
    model, _ = _model_from_checkpoint(args.ckpt)
    res = model.config.resolution
    sources = np.stack([_read_frame(p, res) for p in args.source]).astype(model.config.np_dtype)
    drv_files = _png_list(args.driving)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chunk = 16
    for s in range(0, len(drv_files), chunk):
        files = drv_files[s:s + chunk]
        drv = np.stack([_read_frame(p, res) for p in files]).astype(model.config.np_dtype)
        if args.no_gan:
            images, _ = ev.reconstruct(model, sources, drv)
        else:
            images, _ = ev.reenact(model, sources, drv)
        if not np.all(np.isfinite(images)):
            print("error: non-finite output", file=sys.stderr)
            return EXIT_FAIL
        for f, img in zip(files, images):
            _write_png(out / f"{f.stem}.png", img)
    print(f"wrote {len(drv_files)} frames to {out}")
    return EXIT_OK


def cmd_retrieve(args):
    model, _ = _model_from_checkpoint(args.ckpt)
    res = model.config.resolution
    root = Path(args.index_dir)
    if not root.is_dir():
        raise UsageError(f"index directory {root} not found")
    files = sorted(root.rglob("*.png"))
    if not files:
        raise UsageError(f"no PNG files under {root}")
    ids = [f.relative_to(root).with_suffix("").as_posix() for f in files]
    frames = np.stack([_read_frame(f, res) for f in files])
    index = ev.RetrievalIndex.build(ids, ev.encode_frames(model, frames))
    ranked = ev.pose_retrieval(_read_frame(args.query, res), index, model, top=args.top)
    for rank, (key, sim) in enumerate(ranked, 1):
        print(f"{rank}\t{key}\t{sim:.6f}")
    return EXIT_OK


def cmd_gradcheck(args):
    try:
        results = run_suite(args.op, seed=args.seed)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    ok = True
    print(f"{'op':24s}  max_rel_error  status")
    for name, err in results:
        good = err < TOLERANCE
        ok &= good
        print(f"{name:24s}  {err:13.3e}  {'ok' if good else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_eval(args):
    model, ckpt = _model_from_checkpoint(args.ckpt)
    index = load_index(args.data)
    if index.resolution != model.config.resolution:
        raise UsageError(f"dataset frames are {index.resolution}px, checkpoint expects "
                         f"{model.config.resolution}px")
    longest = max(index.n_frames(v) for v in index.videos)
    if args.holdout < 1 or args.holdout > longest - 2:
        raise UsageError(f"--holdout {args.holdout} must be in [1, {longest - 2}] so "
                         f"every video keeps 2 training frames")
    try:
        index.split(args.holdout)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    metrics = ev.heldout_reenactment(model, index, args.holdout, seed=args.seed)
    metrics.update(ev.disentanglement_metrics(model, index, args.holdout, seed=args.seed))
    report = ev.EvalReport(metrics, dict(ckpt.config), _checkpoint_id(args.ckpt))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    for k in sorted(metrics):
        print(f"{k}\t{metrics[k]:.6f}")
    try:
        report.validate()
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(
        prog="daegan", description=__doc__.split("\n\n")[0],
        epilog="Precedence: flags > --config file > defaults. Exit codes: 0 ok, "
               "1 check/metric failure, 2 usage/environment error. DAEGAN_THREADS caps "
               "kernel threads (0 = auto); DAEGAN_NUMBA=0 selects the numpy kernels.")
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic talking-sprite corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--videos", type=int, default=20)
    g.add_argument("--frames", type=int, default=48)
    g.add_argument("--res", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true", help="replace a non-empty --out")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run stage 1, stage 2, or both",
                       epilog="--epochs sets epochs_stage1 for --stage 1, epochs_stage2 for "
                              "--stage 2, and both for auto.")
    t.add_argument("--data", help="dataset directory (config key dataset_dir)")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--stage", choices=("1", "2", "auto"), default="auto")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps", type=int, help="cap on stage-2 alternation cycles")
    t.add_argument("--seed", type=int)
    t.add_argument("--ckpt-dir", help="config key checkpoint_dir")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reenact", help="drive a source identity with driving frames")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--source", required=True, nargs="+", help="one or more source frames")
    r.add_argument("--driving", required=True, help="PNG file or directory of PNGs")
    r.add_argument("--out", required=True)
    r.add_argument("--no-gan", action="store_true", help="write stage-1 reconstructions")
    r.set_defaults(func=cmd_reenact)

    q = sub.add_parser("retrieve", help="rank images by pose-code similarity")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--index-dir", required=True)
    q.add_argument("--query", required=True)
    q.add_argument("--top", type=int, default=5)
    q.set_defaults(func=cmd_retrieve)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--op", help="only run checks whose name contains this string")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval", help="metrics on held-out frames")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--holdout", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="eval_report.txt")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, CheckpointError, FileNotFoundError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, UsageError) else str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

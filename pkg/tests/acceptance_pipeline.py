"""Desk-scale training run shared by the acceptance criteria.

Run directly (``python tests/acceptance_pipeline.py``) to build the cache ahead
of ``pytest``; otherwise the first acceptance test that needs it builds it.
The cache lives in ``$DAEGAN_ACCEPTANCE_CACHE`` (default ``.acceptance_cache``
next to this repository's ``tests/``) and is keyed by the run configuration.
"""
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from daegan import evaluation as ev
from daegan.checkpoint import load_checkpoint
from daegan.synthdata import gen_dataset, load_index
from daegan.training import Model, TrainConfig, Trainer, train_stage1, train_stage2

CORPUS = dict(n_videos=20, frames_per_video=48, resolution=64, seed=0)
CONFIG = dict(resolution=64, K=8, epochs_stage1=30, epochs_stage2=2, stage2_max_steps=200,
              g_width=16, d_width=32, batch_size=1, drivers=1, holdout=8,
              seed=0)


def cache_dir():
    root = os.environ.get("DAEGAN_ACCEPTANCE_CACHE")
    root = Path(root) if root else Path(__file__).resolve().parent.parent / ".acceptance_cache"
    key = hashlib.sha1(json.dumps([CORPUS, CONFIG], sort_keys=True).encode()).hexdigest()[:10]
    return root / key


def _metrics(model, index, holdout):
    out = ev.disentanglement_metrics(model, index, holdout)
    out.update(ev.heldout_reenactment(model, index, holdout))
    train, _ = index.split(holdout)
    rng = np.random.default_rng([0, 99])
    from daegan.synthdata import FrameStore, epoch_batches
    batches = list(epoch_batches(train, model.config.K, 1, rng,
                                 FrameStore(train, model.config.np_dtype), model.config.drivers))
    out["train_L_REC"] = ev.reconstruction_l1(model, batches[::4])
    return out


def _model_from(ckpt, config):
    m = Model(config)
    m.load_state(ckpt.tensors)
    return m


def build(log=print):
    d = cache_dir()
    done = d / "results.json"
    if done.exists():
        return json.loads(done.read_text())
    d.mkdir(parents=True, exist_ok=True)
    corpus = d / "corpus"
    if not (corpus / "index.tsv").exists():
        gen_dataset(CORPUS["n_videos"], CORPUS["frames_per_video"], CORPUS["resolution"],
                    CORPUS["seed"], corpus)
    index = load_index(corpus)
    config = TrainConfig(**CONFIG)
    res = {"config": asdict(config)}

    t0 = time.perf_counter()
    res["untrained"] = _metrics(Model(config), index, config.holdout)
    log(f"untrained metrics {res['untrained']}  ({time.perf_counter() - t0:.0f}s)")

    s1_path = d / "stage1" / "latest.ckpt"
    (d / "stage1").mkdir(exist_ok=True)
    start = load_checkpoint(s1_path) if s1_path.exists() else None
    t0 = time.perf_counter()
    ck1 = train_stage1(config, index, start=start, log_path=d / "stage1" / "metrics.tsv",
                       ckpt_dir=d / "stage1")
    res["stage1_seconds"] = time.perf_counter() - t0
    res["stage1"] = _metrics(_model_from(ck1, config), index, config.holdout)
    log(f"stage-1 metrics {res['stage1']}  ({res['stage1_seconds']:.0f}s)")

    t0 = time.perf_counter()
    trainer = Trainer.from_checkpoint(ck1, config, index)
    losses = []
    trainer.on_substep = lambda tr, rec: losses.append(
        [v for k, v in rec.items() if k.startswith("L_")])
    (d / "stage2").mkdir(exist_ok=True)
    ck2 = train_stage2(config, index, ck1, log_path=d / "stage2" / "metrics.tsv",
                       ckpt_dir=d / "stage2", trainer=trainer)
    res["stage2_seconds"] = time.perf_counter() - t0
    res["stage2_cycles"] = sum(1 for r in trainer.step_log if r["net"] == "D")
    res["stage2_all_finite"] = bool(all(np.isfinite(v) for row in losses for v in row))
    m2 = _model_from(ck2, config)
    res["stage2"] = _metrics(m2, index, config.holdout)
    log(f"stage-2 metrics {res['stage2']}  ({res['stage2_seconds']:.0f}s)")
    done.write_text(json.dumps(res, indent=1, sort_keys=True))
    return res


def load_stage2_model():
    d = cache_dir()
    config = TrainConfig(**CONFIG)
    return _model_from(load_checkpoint(d / "stage2" / "latest.ckpt"), config), \
        load_index(d / "corpus"), config


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    sys.stdout.reconfigure(line_buffering=True)
    print(json.dumps(build(), indent=1, sort_keys=True))

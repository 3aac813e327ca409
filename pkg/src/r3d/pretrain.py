"""Segmentation pretraining for the point-cloud encoder.

Renders labeled synthetic scenes, patchifies them once (FPS start 0), and
trains encoder + linear head to predict each patch's majority class with
cross-entropy. The resulting checkpoint carries the full 'enc.' namespace so
policy training can warm-start from it via load_pretrained.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .dataio import Checkpoint, save_checkpoint
from .encoder import (
    EncoderConfig,
    add_segment_head,
    encode_tokens,
    init_encoder_params,
    patch_majority_labels,
    patchify_with_groups,
    segment_logits,
)
from .policy import default_patch_layout
from .rng import Rng
from .runtime import deterministic_mode
from .synthenv import N_CLASSES, gen_pretrain_scenes, reach_task
from .tensor import Tensor

PRETRAIN_METRICS_HEADER = "step,epoch,split,loss,accuracy,wall_ms"


@dataclass
class PretrainConfig:
    n_scenes: int = 200
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    n_p: int = 1024
    encoder_preset: str = "tiny"
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.n_scenes < 2:
            raise ValueError("need at least 2 scenes")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not (0.0 < self.holdout_fraction < 1.0):
            raise ValueError("holdout_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    checkpoint_path: Path
    metrics_path: Path
    steps: int
    final_accuracy: float


def _precompute(scenes, enc_cfg: EncoderConfig):
    """Patchify every scene once; returns stacked patches/centers/labels."""
    pats, cents, labs = [], [], []
    for cloud, point_labels in scenes:
        centers, patches, groups = patchify_with_groups(cloud, enc_cfg, rng=None)
        pats.append(patches)
        cents.append(centers)
        labs.append(patch_majority_labels(groups, point_labels, N_CLASSES))
    return np.stack(pats), np.stack(cents), np.stack(labs)


def _accuracy(store, enc_cfg, patches, centers, labels) -> float:
    with T.no_grad():
        tokens = encode_tokens(patches, centers, store, enc_cfg)
        logits = segment_logits(tokens, store, N_CLASSES)
    pred = logits.data.reshape(-1, N_CLASSES).argmax(axis=1)
    return float((pred == labels.reshape(-1)).mean())


def pretrain(cfg: PretrainConfig, out_dir) -> PretrainResult:
    """Train the segmentation objective; the last holdout_fraction of scenes
    is held out and scored as patch accuracy each epoch. Writes encoder.r3dc
    and metrics.csv (step,epoch,split,loss,accuracy,wall_ms) under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_c, k = default_patch_layout(cfg.n_p)
    enc_cfg = EncoderConfig(n_p=cfg.n_p, n_c=n_c, k=k, preset=cfg.encoder_preset)

    root = Rng(cfg.seed)
    r_scenes, r_init, r_steps = root.split(3)
    spec = reach_task(n_p=cfg.n_p)
    scenes = gen_pretrain_scenes(spec, cfg.n_scenes, r_scenes)
    patches, centers, labels = _precompute(scenes, enc_cfg)
    n_hold = max(1, int(round(cfg.holdout_fraction * cfg.n_scenes)))
    tr = slice(0, cfg.n_scenes - n_hold)
    ho = slice(cfg.n_scenes - n_hold, None)

    store = init_encoder_params(enc_cfg, r_init)
    add_segment_head(store, enc_cfg, N_CLASSES, r_init)
    opt = nn.AdamW(store, lr=cfg.lr)

    n_train = cfg.n_scenes - n_hold
    steps_per_epoch = max(1, n_train // cfg.batch_size)
    step = 0
    accuracy = 0.0
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(PRETRAIN_METRICS_HEADER + "\n")
        for epoch in range(1, cfg.epochs + 1):
            for _ in range(steps_per_epoch):
                t0 = time.perf_counter()
                idx = r_steps.split(1)[0].integers(0, n_train, size=cfg.batch_size)
                tokens = encode_tokens(patches[idx], centers[idx], store, enc_cfg)
                logits = segment_logits(tokens, store, N_CLASSES)
                loss = T.cross_entropy(logits.reshape(-1, N_CLASSES),
                                       labels[idx].reshape(-1))
                store.zero_grads()
                loss.backward()
                opt.step()
                step += 1
                wall = 0 if deterministic_mode() else int(round((time.perf_counter() - t0) * 1e3))
                fh.write(f"{step},{epoch},train,{loss.item():.8e},0.00000000e+00,{wall}\n")
            accuracy = _accuracy(store, enc_cfg, patches[ho], centers[ho], labels[ho])
            fh.write(f"{step},{epoch},val,0.00000000e+00,{accuracy:.8e},0\n")

    ckpt = Checkpoint(
        config={"encoder": enc_cfg.to_dict(), "pretrain": cfg.to_dict(),
                "n_classes": N_CLASSES},
        tensors={p.name: p.data.copy() for p in store},
        step_count=step,
    )
    ckpt_path = out / "encoder.r3dc"
    save_checkpoint(ckpt_path, ckpt)
    return PretrainResult(ckpt, ckpt_path, metrics_path, step, accuracy)

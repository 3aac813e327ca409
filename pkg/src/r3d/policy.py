"""Policy lifecycle: demonstrations in, trained diffusion policy out.

Frames are filtered for static joint actions, cut into receding-horizon
windows (t_o observations in, t_a actions out), normalized to [-1, 1] per
channel, and fed to the denoising objective. Training re-augments every
observation each step with fresh rng streams. Inference (act) encodes with
FPS start 0 and no augmentation, runs the full ancestral sampler, then
denormalizes, clamps joints to the dataset envelope +-10% and renormalizes
quaternions.

Everything is a pure function of (config.seed, dataset); in deterministic
mode (R3D_THREADS=1) re-runs reproduce checkpoints and metrics byte for byte.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffusion
from . import nn
from . import tensor as T
from .dataio import (
    ActionChunk,
    Checkpoint,
    Episode,
    MetricsWriter,
    Observation,
    load_demos,
    load_checkpoint,
    normalize_quat_w_positive,
    save_checkpoint,
)
from .decoder import (
    DecoderConfig,
    NoisyActions,
    TokenBundle,
    assemble_context,
    assemble_queries,
    build_causal_mask,
    dit_forward,
)
from .diffusion import DiffusionLossConfig, make_schedule
from .decoder import init_decoder_params
from .encoder import (
    EncoderConfig,
    encode_tokens,
    init_encoder_params,
    load_pretrained,
    patchify,
)
from .pointcloud import AugmentConfig, PointCloud, augment
from .rng import Rng
from .tensor import ParamStore, Tensor

STATIC_TOL = 1e-9
ENVELOPE_MARGIN = 0.1


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 256
    t_o: int = 2
    t_a: int = 16
    n_p: int = 1024
    n_q: int = 4
    encoder_preset: str = "tiny"
    decoder_depth: int = 4
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    schedule_kind: str = "squared_cosine"
    schedule_k: int = 100
    lambda_ee: float = 1.0
    lr: float = 1e-4
    lr_schedule: str = "constant"
    seed: int = 0
    execute_steps: int = 8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (1 <= self.execute_steps <= self.t_a):
            raise ValueError("need 1 <= execute_steps <= t_a")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.schedule_kind not in ("squared_cosine", "linear"):
            raise ValueError(f"unknown schedule_kind {self.schedule_kind!r}")
        if self.schedule_k < 1:
            raise ValueError("schedule_k must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("brightness_range", "contrast_range", "saturation_range"):
            d["augment"][key] = list(d["augment"][key])
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        aug = d.pop("augment", None)
        cfg = TrainConfig(**d)
        if aug is not None:
            aug = dict(aug)
            for key in ("brightness_range", "contrast_range", "saturation_range"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            cfg.augment = AugmentConfig(**aug)
        return cfg


def default_patch_layout(n_p: int) -> tuple[int, int]:
    """(n_c, k) for a given cloud resolution: 64/32 at desk resolution,
    256/64 for dense 8192-point clouds, shrunk for toy clouds."""
    if n_p >= 8192:
        return 256, 64
    return min(64, n_p), min(32, n_p)


@dataclass
class NormStats:
    """Per-channel min/max of joint actions and EE poses, mapping raw values
    to [-1, 1]; a degenerate channel (min == max) maps to 0 and back."""

    joint_lo: np.ndarray
    joint_hi: np.ndarray
    ee_lo: np.ndarray
    ee_hi: np.ndarray

    def __post_init__(self):
        for name in ("joint_lo", "joint_hi", "ee_lo", "ee_hi"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float32))

    @staticmethod
    def _center_half(lo, hi):
        center = (lo + hi) * 0.5
        half = (hi - lo) * 0.5
        half = np.where(half == 0.0, np.float32(1.0), half)
        return center, half

    def normalize_joint(self, x: np.ndarray) -> np.ndarray:
        c, h = self._center_half(self.joint_lo, self.joint_hi)
        return ((x - c) / h).astype(np.float32)

    def denormalize_joint(self, x: np.ndarray) -> np.ndarray:
        c, h = self._center_half(self.joint_lo, self.joint_hi)
        return (x * h + c).astype(np.float32)

    def normalize_ee(self, x: np.ndarray) -> np.ndarray:
        c, h = self._center_half(self.ee_lo, self.ee_hi)
        return ((x - c) / h).astype(np.float32)

    def denormalize_ee(self, x: np.ndarray) -> np.ndarray:
        c, h = self._center_half(self.ee_lo, self.ee_hi)
        return (x * h + c).astype(np.float32)

    def joint_envelope(self, margin: float = ENVELOPE_MARGIN) -> tuple[np.ndarray, np.ndarray]:
        span = self.joint_hi - self.joint_lo
        return self.joint_lo - margin * span, self.joint_hi + margin * span

    @staticmethod
    def from_episodes(episodes: list[Episode]) -> "NormStats":
        joints = np.concatenate([[a for _, a, _ in ep.frames] for ep in episodes])
        ees = np.concatenate([[normalize_quat_w_positive(e) for _, _, e in ep.frames]
                              for ep in episodes])
        return NormStats(joints.min(0), joints.max(0), ees.min(0), ees.max(0))

    def to_tensors(self) -> dict[str, np.ndarray]:
        return dict(joint_lo=self.joint_lo, joint_hi=self.joint_hi,
                    ee_lo=self.ee_lo, ee_hi=self.ee_hi)

    @staticmethod
    def from_tensors(t: dict[str, np.ndarray]) -> "NormStats":
        return NormStats(t["joint_lo"], t["joint_hi"], t["ee_lo"], t["ee_hi"])


# -- dataset shaping -------------------------------------------------------------


def filter_static_frames(episode: Episode) -> Episode:
    """Drop frames whose joint action repeats the previous retained frame's
    action within 1e-9 componentwise; the first frame always stays."""
    kept = [episode.frames[0]]
    for frame in episode.frames[1:]:
        if np.abs(np.asarray(frame[1]) - np.asarray(kept[-1][1])).max() > STATIC_TOL:
            kept.append(frame)
    return Episode(kept, task_id=episode.task_id, success=episode.success)


@dataclass
class Window:
    """One training sample: t_o observations ending at t, the action chunk
    starting at t (last action repeated past the episode end)."""

    clouds: list[PointCloud]
    proprios: np.ndarray  # [t_o, n_q]
    joint_chunk: np.ndarray  # [t_a, n_q]
    ee_chunk: np.ndarray  # [t_a, 7]


def make_windows(episode: Episode, t_o: int, t_a: int) -> list[Window]:
    """One window per frame; history pads by repeating the first frame,
    chunks pad by repeating the last action."""
    frames = episode.frames
    L = len(frames)
    windows = []
    for t in range(L):
        hist = [frames[max(t - (t_o - 1) + j, 0)] for j in range(t_o)]
        chunk = [frames[min(t + j, L - 1)] for j in range(t_a)]
        windows.append(Window(
            clouds=[f[0].cloud for f in hist],
            proprios=np.stack([f[0].proprio for f in hist]).astype(np.float32),
            joint_chunk=np.stack([f[1] for f in chunk]).astype(np.float32),
            ee_chunk=normalize_quat_w_positive(np.stack([f[2] for f in chunk])),
        ))
    return windows


# -- the model -------------------------------------------------------------------


class PolicyModel:
    """Encoder + decoder parameters plus normalization and schedule; the
    denoise() method is what the diffusion loss/sampler call."""

    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, params: ParamStore,
                 norm: NormStats, schedule, loss_cfg: DiffusionLossConfig,
                 train_cfg: TrainConfig | None = None):
        if enc_cfg.d != dec_cfg.d:
            raise ValueError("encoder and decoder widths must match")
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg
        self.params = params
        self.norm = norm
        self.schedule = schedule
        self.loss_cfg = loss_cfg
        self.train_cfg = train_cfg
        self._mask = build_causal_mask(dec_cfg.t_a, dec_cfg.enable_ee_branch)

    @staticmethod
    def build(cfg: TrainConfig, rng: Rng | None = None) -> "PolicyModel":
        n_c, k = default_patch_layout(cfg.n_p)
        enc_cfg = EncoderConfig(n_p=cfg.n_p, n_c=n_c, k=k, preset=cfg.encoder_preset)
        dec_cfg = DecoderConfig(d=enc_cfg.d, depth=cfg.decoder_depth, heads=enc_cfg.heads,
                                t_o=cfg.t_o, t_a=cfg.t_a, n_q=cfg.n_q)
        rng = rng if rng is not None else Rng(cfg.seed)
        params = init_encoder_params(enc_cfg, rng)
        init_decoder_params(dec_cfg, rng, store=params)
        norm = NormStats(np.full(cfg.n_q, -1.0), np.full(cfg.n_q, 1.0),
                         np.full(7, -1.0), np.full(7, 1.0))
        schedule = make_schedule(cfg.schedule_kind, cfg.schedule_k)
        return PolicyModel(enc_cfg, dec_cfg, params, norm, schedule,
                           DiffusionLossConfig(lambda_ee=cfg.lambda_ee), cfg)

    def has_ee_branch(self) -> bool:
        return self.dec_cfg.enable_ee_branch

    def denoise(self, obs, noisy: NoisyActions):
        """obs is either a precomputed context Tensor (sampling fast path) or
        a dict with patches [B, t_o, n_c, k, 6], centers, proprio arrays."""
        if isinstance(obs, Tensor):
            ctx = obs
        else:
            tokens = encode_tokens(obs["patches"], obs["centers"], self.params, self.enc_cfg)
            ctx = assemble_context(tokens, obs["proprio"], self.params, self.dec_cfg)
        queries = assemble_queries(noisy, self.params, self.dec_cfg)
        bundle = TokenBundle(ctx, queries, self._mask)
        return dit_forward(bundle, self.params, self.dec_cfg)

    def encode_context(self, observations: list[Observation], rng: Rng | None) -> Tensor:
        """Patchify + encode a history and assemble the cross-attention
        context; rng=None is the deterministic inference path."""
        if len(observations) != self.dec_cfg.t_o:
            raise ValueError(f"need a history of {self.dec_cfg.t_o} observations")
        cents, pats, prios = [], [], []
        for o in observations:
            if o.cloud.n_points != self.enc_cfg.n_p or len(o.proprio) != self.dec_cfg.n_q:
                raise ValueError("observation dims do not match model config")
            c, p = patchify(o.cloud, self.enc_cfg, rng)
            cents.append(c)
            pats.append(p)
            prios.append(o.proprio)
        tokens = encode_tokens(np.stack(pats), np.stack(cents), self.params, self.enc_cfg)
        return assemble_context(tokens, np.stack(prios), self.params, self.dec_cfg)

    def config_dict(self) -> dict:
        cfg = dict(encoder=self.enc_cfg.to_dict(), decoder=self.dec_cfg.to_dict(),
                   schedule_kind=self.schedule.kind, schedule_k=self.schedule.K,
                   lambda_ee=self.loss_cfg.lambda_ee)
        if self.train_cfg is not None:
            cfg["train"] = self.train_cfg.to_dict()
        return cfg

    def to_checkpoint(self, step_count: int = 0) -> Checkpoint:
        return Checkpoint(
            config=self.config_dict(),
            tensors={p.name: p.data.copy() for p in self.params},
            norm_stats=self.norm.to_tensors(),
            step_count=step_count,
        )

    @staticmethod
    def from_checkpoint(ckpt: Checkpoint) -> "PolicyModel":
        enc_cfg = EncoderConfig.from_dict(ckpt.config["encoder"])
        dec_cfg = DecoderConfig.from_dict(ckpt.config["decoder"])
        train_cfg = TrainConfig.from_dict(ckpt.config["train"]) if "train" in ckpt.config else None
        params = init_encoder_params(enc_cfg, Rng(0))
        init_decoder_params(dec_cfg, Rng(0), store=params)
        model = PolicyModel(enc_cfg, dec_cfg, params,
                            NormStats.from_tensors(ckpt.norm_stats),
                            make_schedule(ckpt.config["schedule_kind"], ckpt.config["schedule_k"]),
                            DiffusionLossConfig(lambda_ee=ckpt.config.get("lambda_ee", 1.0)),
                            train_cfg)
        model.load_state(ckpt)
        return model

    def load_state(self, ckpt: Checkpoint):
        """Copy parameter tensors from a checkpoint with identical configs."""
        if ckpt.config.get("encoder") != self.enc_cfg.to_dict() or \
                ckpt.config.get("decoder") != self.dec_cfg.to_dict():
            raise ValueError("checkpoint config does not match this model")
        own = set(self.params.names())
        theirs = set(ckpt.tensors)
        if own != theirs:
            missing = own - theirs
            extra = theirs - own
            raise ValueError(f"parameter names disagree (missing {sorted(missing)[:3]}, "
                             f"extra {sorted(extra)[:3]})")
        for p in self.params:
            src = ckpt.tensors[p.name]
            if src.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {p.name!r}")
            p.data = src.astype(p.data.dtype).copy()
            p.grad = None


# -- training ---------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    checkpoint_path: Path
    metrics_path: Path
    steps: int
    final_train_loss: float
    final_val_loss: float | None


def _build_obs_batch(model: PolicyModel, windows: list[Window], aug_cfg: AugmentConfig | None,
                     rngs: list[Rng] | None) -> dict:
    """Patchify (and optionally augment) every observation of every window.

    With rngs given, window i consumes rngs[i], split once per observation:
    augmentation draws first, then the FPS start. Without rngs this is the
    deterministic validation/inference path (no augment, FPS start 0).
    """
    pats, cents, prios = [], [], []
    for i, w in enumerate(windows):
        w_p, w_c, w_q = [], [], []
        obs_rngs = rngs[i].split(len(w.clouds)) if rngs is not None else [None] * len(w.clouds)
        for cloud, proprio, orng in zip(w.clouds, w.proprios, obs_rngs):
            if aug_cfg is not None and orng is not None:
                cloud, proprio = augment(cloud, proprio, aug_cfg, orng)
            c, p = patchify(cloud, model.enc_cfg, orng)
            w_p.append(p)
            w_c.append(c)
            w_q.append(proprio)
        pats.append(np.stack(w_p))
        cents.append(np.stack(w_c))
        prios.append(np.stack(w_q))
    return dict(patches=np.stack(pats), centers=np.stack(cents), proprio=np.stack(prios))


def _chunk_targets(norm: NormStats, windows: list[Window]) -> tuple[np.ndarray, np.ndarray]:
    joint = norm.normalize_joint(np.stack([w.joint_chunk for w in windows]))
    ee = norm.normalize_ee(np.stack([w.ee_chunk for w in windows]))
    return joint, ee


def train(config: TrainConfig, data_dir, out_dir,
          init_encoder: Checkpoint | None = None) -> TrainResult:
    """The training loop; writes metrics.csv plus periodic and final
    checkpoints under out_dir and returns the final state. init_encoder
    warm-starts the 'enc.' namespace from a pretraining checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    episodes, manifest = load_demos(data_dir)
    if manifest["n_q"] != config.n_q or manifest["n_p"] != config.n_p:
        raise ValueError(f"dataset dims (n_q={manifest['n_q']}, n_p={manifest['n_p']}) "
                         f"disagree with config")
    filtered = [filter_static_frames(ep) for ep in episodes]
    n_val = int(0.1 * len(filtered))
    train_eps = filtered[:len(filtered) - n_val]
    val_eps = filtered[len(filtered) - n_val:]
    train_windows = [w for ep in train_eps for w in make_windows(ep, config.t_o, config.t_a)]
    val_windows = [w for ep in val_eps for w in make_windows(ep, config.t_o, config.t_a)]

    root = Rng(config.seed)
    r_init, r_steps, r_val = root.split(3)
    model = PolicyModel.build(config, rng=r_init)
    if init_encoder is not None:
        load_pretrained(model.params, model.enc_cfg, init_encoder)
    model.norm = NormStats.from_episodes(train_eps)
    opt = nn.AdamW(model.params, lr=config.lr)

    steps_per_epoch = max(1, math.ceil(len(train_windows) / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    ckpt_every = max(1, config.epochs // 5)
    step = 0
    final_train = float("nan")
    final_val: float | None = None
    with MetricsWriter(out / "metrics.csv") as metrics:
        for epoch in range(1, config.epochs + 1):
            for _ in range(steps_per_epoch):
                t0 = time.perf_counter()
                if config.lr_schedule == "cosine":
                    opt.lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
                step_rng = r_steps.split(1)[0]
                idx = step_rng.integers(0, len(train_windows), size=config.batch_size)
                batch = [train_windows[int(i)] for i in idx]
                streams = step_rng.split(config.batch_size + 1)
                obs = _build_obs_batch(model, batch, config.augment, streams[:-1])
                joint, ee = _chunk_targets(model.norm, batch)
                loss, lj, le = diffusion.training_loss_parts(
                    model, (obs, joint, ee), model.schedule, model.loss_cfg, streams[-1])
                model.params.zero_grads()
                loss.backward()
                opt.step()
                step += 1
                final_train = loss.item()
                metrics.log(step, epoch, "train", final_train, lj, le,
                            (time.perf_counter() - t0) * 1e3)
            if val_windows:
                final_val = _validation_loss(model, val_windows, config, r_val.split(1)[0])
                metrics.log(step, epoch, "val", final_val, 0.0, 0.0, 0.0)
            if epoch % ckpt_every == 0 and epoch != config.epochs:
                save_checkpoint(out / "checkpoint_latest.r3dc", model.to_checkpoint(step))
    ckpt = model.to_checkpoint(step)
    ckpt_path = out / "checkpoint.r3dc"
    save_checkpoint(ckpt_path, ckpt)
    return TrainResult(ckpt, ckpt_path, out / "metrics.csv", step, final_train, final_val)


def _validation_loss(model: PolicyModel, windows: list[Window], config: TrainConfig,
                     rng: Rng) -> float:
    """Mean loss over all validation windows, no augmentation, FPS start 0."""
    total, count = 0.0, 0
    B = config.batch_size
    chunks = [windows[i:i + B] for i in range(0, len(windows), B)]
    streams = rng.split(len(chunks))
    with T.no_grad():
        for chunk, crng in zip(chunks, streams):
            obs = _build_obs_batch(model, chunk, None, None)
            joint, ee = _chunk_targets(model.norm, chunk)
            loss, _, _ = diffusion.training_loss_parts(
                model, (obs, joint, ee), model.schedule, model.loss_cfg, crng)
            total += loss.item() * len(chunk)
            count += len(chunk)
    return total / count


# -- inference --------------------------------------------------------------------


def as_model(policy) -> PolicyModel:
    if isinstance(policy, PolicyModel):
        return policy
    if isinstance(policy, Checkpoint):
        return PolicyModel.from_checkpoint(policy)
    if isinstance(policy, (str, Path)):
        return PolicyModel.from_checkpoint(load_checkpoint(policy))
    raise TypeError(f"cannot build a policy from {type(policy)!r}")


def act(policy, obs_history: list[Observation], rng: Rng) -> ActionChunk:
    """One planning call: encode the history deterministically, denoise an
    action chunk, denormalize, clamp joints to the dataset envelope +-10%,
    renormalize quaternions. The joint chunk is the executable output."""
    model = as_model(policy)
    ctx = model.encode_context(obs_history, rng=None)
    a_j, a_e = diffusion.sample(model, ctx, model.schedule, rng, model.dec_cfg)
    joint = model.norm.denormalize_joint(a_j)
    lo, hi = model.norm.joint_envelope()
    joint = np.clip(joint, lo, hi)
    ee = None
    if a_e is not None:
        ee = normalize_quat_w_positive(model.norm.denormalize_ee(a_e))
    if not np.all(np.isfinite(joint)):
        raise FloatingPointError("non-finite action chunk")
    return ActionChunk(joint, ee)


def evaluate(policy, task, n_episodes: int, rng: Rng, execute_steps: int = 8,
             t_o: int | None = None) -> tuple[float, list[dict]]:
    """Closed-loop rollouts: reset, then alternate act -> execute the first
    execute_steps actions until success or the step budget runs out.

    policy may be a PolicyModel / Checkpoint / path, or a raw callable
    (obs_history, rng) -> ActionChunk (pass t_o explicitly for callables).
    Returns (success_rate, per-episode records).
    """
    from .synthenv import SynthEnv

    if callable(policy) and not isinstance(policy, (PolicyModel, Checkpoint)):
        act_fn = policy
        hist_len = t_o if t_o is not None else 2
    else:
        model = as_model(policy)
        if model.dec_cfg.n_q != task.n_q:
            raise ValueError("task joint dims do not match checkpoint")
        act_fn = lambda h, r: act(model, h, r)
        hist_len = model.dec_cfg.t_o
    env = SynthEnv(task)
    records = []
    for i, ep_rng in enumerate(rng.split(n_episodes)):
        env_rng, act_rng = ep_rng.split(2)
        obs = env.reset(env_rng)
        history = deque([obs] * hist_len, maxlen=hist_len)
        steps, success = 0, False
        while steps < task.max_steps and not success:
            chunk = act_fn(list(history), act_rng)
            for a in chunk.joint[:execute_steps]:
                obs, success, info = env.step(a)
                history.append(obs)
                steps += 1
                if success or steps >= task.max_steps:
                    break
        records.append(dict(episode=i, steps=steps, success=bool(success),
                            final_dist=float(env.goal_distance())))
    rate = sum(r["success"] for r in records) / n_episodes
    return rate, records

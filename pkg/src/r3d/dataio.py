"""Data containers and on-disk formats: demonstrations, checkpoints, metrics.

Demonstration store: a directory with `manifest.json` plus one `.r3de` file
per episode. Episode binary layout (little-endian): magic "R3DE", u32
version=1, u32 frame count, u32 n_p, u32 n_q, then per frame n_p*6 f32 cloud
rows (xyz then rgb per point), n_q f32 proprio, n_q f32 joint action, 7 f32
ee pose.

Checkpoint layout: magic "R3DC", u32 version=1, u32 tensor count, u32 JSON
length + UTF-8 config JSON, then per tensor u32 name length + name, u32 rank,
u64 dims, f32 data. Normalization stats ride along as "norm.*" tensors and
optimizer state as "opt.*"; both are split back out on load, so model
parameter names stay collision-free.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pointcloud import PointCloud
from .runtime import deterministic_mode

EPISODE_MAGIC = b"R3DE"
CHECKPOINT_MAGIC = b"R3DC"
FORMAT_VERSION = 1
METRICS_HEADER = "step,epoch,split,loss,loss_joint,loss_ee,wall_ms"


class FormatError(Exception):
    """Raised for bad magic, version, truncation or layout violations."""


# -- containers ----------------------------------------------------------------


@dataclass
class Observation:
    """One policy input: a fixed-size cloud plus the joint position vector."""

    cloud: PointCloud
    proprio: np.ndarray

    def __post_init__(self):
        self.proprio = np.asarray(self.proprio, dtype=np.float32)
        if not np.all(np.isfinite(self.proprio)):
            raise ValueError("non-finite proprioception")


def normalize_quat_w_positive(pose: np.ndarray) -> np.ndarray:
    """Normalize the wxyz quaternion tail of [.., 7] poses to unit norm with
    w >= 0; a near-zero quaternion becomes identity."""
    pose = np.array(pose, dtype=np.float32, copy=True)
    quat = pose[..., 3:]
    norm = np.sqrt((quat * quat).sum(axis=-1, keepdims=True))
    tiny = norm[..., 0] < 1e-8
    safe = np.where(norm < 1e-8, 1.0, norm)
    quat /= safe
    quat[tiny] = np.array([1.0, 0.0, 0.0, 0.0], dtype=np.float32)
    flip = quat[..., 0] < 0.0
    quat[flip] *= -1.0
    pose[..., 3:] = quat
    return pose


@dataclass
class ActionChunk:
    """A predicted horizon: joint [t_a, n_q] to execute, ee [t_a, 7] to log."""

    joint: np.ndarray
    ee: np.ndarray | None = None

    def __post_init__(self):
        self.joint = np.asarray(self.joint, dtype=np.float32)
        if self.joint.ndim != 2:
            raise ValueError("joint chunk must be [t_a, n_q]")
        if self.ee is not None:
            self.ee = np.asarray(self.ee, dtype=np.float32)
            if self.ee.shape != (self.joint.shape[0], 7):
                raise ValueError("ee chunk must be [t_a, 7]")
            norms = np.linalg.norm(self.ee[:, 3:], axis=1)
            if np.abs(norms - 1.0).max() > 1e-4 or (self.ee[:, 3] < 0).any():
                raise ValueError("ee quaternions must be unit with w >= 0")


@dataclass
class Episode:
    """Ordered frames of (Observation, joint action [n_q], ee pose [7])."""

    frames: list[tuple[Observation, np.ndarray, np.ndarray]]
    task_id: str = ""
    success: bool = True

    def __post_init__(self):
        if not self.frames:
            raise ValueError("episode must have at least one frame")

    def __len__(self):
        return len(self.frames)

    @property
    def n_q(self) -> int:
        return len(self.frames[0][1])

    @property
    def n_p(self) -> int:
        return self.frames[0][0].cloud.n_points


@dataclass
class Checkpoint:
    """A saved model: config snapshot, parameter tensors, normalization stats,
    optional optimizer state, training step count."""

    config: dict
    tensors: dict[str, np.ndarray]
    norm_stats: dict[str, np.ndarray] = field(default_factory=dict)
    opt_state: dict[str, np.ndarray] | None = None
    step_count: int = 0
    version: int = FORMAT_VERSION


# -- episode store ---------------------------------------------------------------


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def write_episode(path, episode: Episode):
    """Serialize one episode; shapes are validated against the first frame."""
    n_p, n_q = episode.n_p, episode.n_q
    with open(path, "wb") as fh:
        fh.write(EPISODE_MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, len(episode.frames), n_p, n_q))
        for obs, joint, ee in episode.frames:
            if obs.cloud.n_points != n_p or len(joint) != n_q or len(ee) != 7:
                raise ValueError("inconsistent frame dims in episode")
            fh.write(obs.cloud.as_array().astype("<f4").tobytes())
            fh.write(np.asarray(obs.proprio, dtype="<f4").tobytes())
            fh.write(np.asarray(joint, dtype="<f4").tobytes())
            fh.write(np.asarray(ee, dtype="<f4").tobytes())


def read_episode(path, task_id: str = "", success: bool = True) -> Episode:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != EPISODE_MAGIC:
            raise FormatError(f"{path}: bad episode magic")
        version, n_frames, n_p, n_q = struct.unpack("<IIII", _read_exact(fh, 16))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        frames = []
        for _ in range(n_frames):
            cloud = np.frombuffer(_read_exact(fh, n_p * 6 * 4), dtype="<f4").reshape(n_p, 6)
            proprio = np.frombuffer(_read_exact(fh, n_q * 4), dtype="<f4").copy()
            joint = np.frombuffer(_read_exact(fh, n_q * 4), dtype="<f4").copy()
            ee = np.frombuffer(_read_exact(fh, 7 * 4), dtype="<f4").copy()
            obs = Observation(PointCloud(cloud[:, :3].copy(), cloud[:, 3:].copy()), proprio)
            frames.append((obs, joint, ee))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after last frame")
    return Episode(frames, task_id=task_id, success=success)


def save_demos(out_dir, episodes: list[Episode], name: str, task_id: str) -> Path:
    """Write a demonstration directory: manifest.json + one .r3de per episode."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, ep in enumerate(episodes):
        fname = f"episode_{i:04d}.r3de"
        write_episode(out / fname, ep)
        files.append(fname)
    manifest = dict(
        name=name,
        task_id=task_id,
        n_q=episodes[0].n_q,
        n_p=episodes[0].n_p,
        version=FORMAT_VERSION,
        episodes=files,
    )
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return mpath


def load_demos(data_dir) -> tuple[list[Episode], dict]:
    """Read a demonstration directory; returns (episodes, manifest)."""
    data = Path(data_dir)
    mpath = data / "manifest.json"
    if not mpath.is_file():
        raise FormatError(f"no manifest.json under {data}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    for key in ("task_id", "n_q", "n_p", "episodes", "version"):
        if key not in manifest:
            raise FormatError(f"manifest missing key {key!r}")
    if manifest["version"] != FORMAT_VERSION:
        raise FormatError(f"unsupported manifest version {manifest['version']}")
    episodes = []
    for fname in manifest["episodes"]:
        ep = read_episode(data / fname, task_id=manifest["task_id"])
        if ep.n_q != manifest["n_q"] or ep.n_p != manifest["n_p"]:
            raise FormatError(f"{fname}: dims disagree with manifest")
        episodes.append(ep)
    if not episodes:
        raise FormatError("dataset contains no episodes")
    return episodes, manifest


# -- checkpoint store -------------------------------------------------------------


def _flat_tensor_items(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    items = list(ckpt.tensors.items())
    items += [(f"norm.{k}", v) for k, v in ckpt.norm_stats.items()]
    if ckpt.opt_state:
        items += [(f"opt.{k}", v) for k, v in ckpt.opt_state.items()]
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor name in checkpoint")
    return items


def save_checkpoint(path, ckpt: Checkpoint):
    items = _flat_tensor_items(ckpt)
    config = dict(ckpt.config)
    config["step"] = int(ckpt.step_count)
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(items)))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, arr in items:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            arr = np.asarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic")
        version, n_tensors = struct.unpack("<II", _read_exact(fh, 8))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4))
        config = json.loads(_read_exact(fh, blob_len).decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        norm: dict[str, np.ndarray] = {}
        opt: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            if rank > 8:
                raise FormatError(f"{path}: implausible tensor rank {rank}")
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(dims).copy()
            bucket, key = (tensors, name)
            if name.startswith("norm."):
                bucket, key = norm, name[5:]
            elif name.startswith("opt."):
                bucket, key = opt, name[4:]
            if key in bucket:
                raise FormatError(f"{path}: duplicate tensor name {name!r}")
            bucket[key] = data
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    step = int(config.pop("step", 0))
    return Checkpoint(config=config, tensors=tensors, norm_stats=norm,
                      opt_state=opt or None, step_count=step, version=version)


# -- metrics log ------------------------------------------------------------------


class MetricsWriter:
    """CSV writer for training metrics; wall_ms is zeroed in deterministic
    mode so equal runs produce byte-equal files."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", encoding="utf-8", newline="")
        self._fh.write(METRICS_HEADER + "\n")

    def log(self, step: int, epoch: int, split: str, loss: float,
            loss_joint: float, loss_ee: float, wall_ms: float):
        wall = 0 if deterministic_mode() else int(round(wall_ms))
        self._fh.write(f"{step},{epoch},{split},{loss:.8e},{loss_joint:.8e},{loss_ee:.8e},{wall}\n")

    def close(self):
        self._fh.flush()
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

"""Point-cloud transformer encoder: FPS centers, kNN patches, PointNet patch
embedding, positional MLP, pre-LN self-attention stack.

The output is dense: exactly n_c geometric tokens per observation, one per
patch center, with no aggregated global token. Normalization is LayerNorm
everywhere (never batch statistics), so a sample's tokens do not depend on
what else shares its batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .pointcloud import PointCloud, farthest_point_sample, knn_group
from .rng import Rng
from .tensor import ParamStore, Tensor

PRESETS = {
    "tiny": dict(d=64, depth=4, heads=4),
    "small": dict(d=128, depth=6, heads=8),
    "base": dict(d=256, depth=8, heads=8),
}


@dataclass
class EncoderConfig:
    """Shapes of the encoder; `preset` fills d/depth/heads if given.

    depth 0 is accepted here (it degenerates to embeddings + final LN, which
    the tests exercise); configs loaded from files must use depth >= 1.
    """

    n_p: int = 1024
    n_c: int = 64
    k: int = 32
    d: int = 64
    depth: int = 4
    heads: int = 4
    preset: str | None = None

    def __post_init__(self):
        if self.preset is not None:
            if self.preset not in PRESETS:
                raise ValueError(f"unknown preset {self.preset!r}")
            for key, val in PRESETS[self.preset].items():
                setattr(self, key, val)
        if not (0 < self.n_c <= self.n_p):
            raise ValueError("need 0 < n_c <= n_p")
        if not (0 < self.k <= self.n_p):
            raise ValueError("need 0 < k <= n_p")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")

    def to_dict(self) -> dict:
        return dict(n_p=self.n_p, n_c=self.n_c, k=self.k, d=self.d,
                    depth=self.depth, heads=self.heads)

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        return EncoderConfig(**d)


@dataclass
class GeometricTokens:
    """Dense encoder output: tokens [n_c, d] + their centers [n_c, 3]."""

    tokens: np.ndarray
    centers: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        self.centers = np.asarray(self.centers)
        if self.tokens.ndim != 2 or self.centers.shape != (self.tokens.shape[0], 3):
            raise ValueError("tokens must be [n_c, d] with centers [n_c, 3]")


def init_encoder_params(cfg: EncoderConfig, rng: Rng, store: ParamStore | None = None,
                        dtype=np.float32) -> ParamStore:
    """Create all encoder parameters under the 'enc.' prefix."""
    store = store if store is not None else ParamStore()
    d = cfg.d
    nn.add_linear(store, "enc.patch.fc1", 6, d, rng, dtype)
    nn.add_layer_norm(store, "enc.patch.ln", d, dtype)
    nn.add_linear(store, "enc.patch.fc2", d, d, rng, dtype)
    nn.add_mlp(store, "enc.pos", 3, d, d, rng, dtype)
    for i in range(cfg.depth):
        blk = f"enc.block{i}"
        nn.add_layer_norm(store, f"{blk}.ln1", d, dtype)
        nn.add_attention(store, f"{blk}.attn", d, rng, dtype)
        nn.add_layer_norm(store, f"{blk}.ln2", d, dtype)
        nn.add_mlp(store, f"{blk}.mlp", d, 4 * d, d, rng, dtype)
    nn.add_layer_norm(store, "enc.final_ln", d, dtype)
    return store


def encoder_param_names(cfg: EncoderConfig) -> list[str]:
    return init_encoder_params(cfg, Rng(0)).names()


def patchify(cloud: PointCloud, cfg: EncoderConfig, rng: Rng | None) -> tuple[np.ndarray, np.ndarray]:
    """FPS centers + kNN patches.

    Returns (centers [n_c, 3], patches [n_c, k, 6]); patch xyz is re-centered
    on its center, colors pass through. rng picks the FPS start point during
    training; rng=None means the deterministic inference path (start 0).
    """
    centers, patches, _ = patchify_with_groups(cloud, cfg, rng)
    return centers, patches


def patchify_with_groups(cloud: PointCloud, cfg: EncoderConfig,
                         rng: Rng | None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """As patchify but also returns the kNN index groups [n_c, k], which
    segmentation pretraining needs for patch-level majority labels."""
    if cloud.n_points != cfg.n_p:
        raise ValueError(f"expected {cfg.n_p} points, got {cloud.n_points}")
    start = int(rng.integers(cfg.n_p)) if rng is not None else 0
    center_idx = farthest_point_sample(cloud, cfg.n_c, start)
    groups = knn_group(cloud, center_idx, cfg.k)
    centers = cloud.points[center_idx]
    local = cloud.points[groups] - centers[:, None, :]
    patches = np.concatenate([local, cloud.colors[groups]], axis=2)
    return centers, patches, groups


def embed_patches(patches, store: ParamStore) -> Tensor:
    """Per-point MLP (6 -> d, LN, gelu, -> d) then max-pool over each patch.

    patches is [.., n_c, k, 6] (numpy or Tensor); output [.., n_c, d].
    """
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    h = nn.linear_p(x, store, "enc.patch.fc1")
    h = nn.norm_p(h, store, "enc.patch.ln")
    h = T.gelu(h)
    h = nn.linear_p(h, store, "enc.patch.fc2")
    return T.tmax(h, axis=-2)


def positional_embed(centers, store: ParamStore) -> Tensor:
    """Learned MLP (3 -> d -> d) on raw center xyz; [.., n_c, 3] -> [.., n_c, d]."""
    x = centers if isinstance(centers, Tensor) else Tensor(centers)
    return nn.mlp(x, store, "enc.pos")


def encode_tokens(patches, centers, store: ParamStore, cfg: EncoderConfig) -> Tensor:
    """Graph-building encoder core on pre-patchified input; [.., n_c, d]."""
    x = T.add(embed_patches(patches, store), positional_embed(centers, store))
    for i in range(cfg.depth):
        blk = f"enc.block{i}"
        h = nn.norm_p(x, store, f"{blk}.ln1")
        x = T.add(x, nn.multi_head_attention(h, h, h, cfg.heads, store, f"{blk}.attn"))
        x = T.add(x, nn.mlp(nn.norm_p(x, store, f"{blk}.ln2"), store, f"{blk}.mlp"))
    return nn.norm_p(x, store, "enc.final_ln")


def encode(cloud: PointCloud, store: ParamStore, cfg: EncoderConfig, rng: Rng | None) -> GeometricTokens:
    """Full single-cloud encode; returns plain arrays (no autodiff graph)."""
    centers, patches = patchify(cloud, cfg, rng)
    with T.no_grad():
        tokens = encode_tokens(patches, centers, store, cfg)
    return GeometricTokens(tokens.data, centers)


def patch_majority_labels(groups: np.ndarray, point_labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Majority class of each patch's member points; ties to the lowest id."""
    out = np.empty(groups.shape[0], dtype=np.int64)
    for i, row in enumerate(groups):
        out[i] = np.bincount(point_labels[row], minlength=n_classes).argmax()
    return out


def segment_logits(tokens, store: ParamStore, n_classes: int):
    """Linear per-token segmentation head; GeometricTokens -> numpy [n_c, C],
    Tensor -> Tensor (training path)."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if store["seg.head.w"].shape[1] != n_classes:
        raise ValueError("head width does not match n_classes")
    if isinstance(tokens, GeometricTokens):
        with T.no_grad():
            return nn.linear_p(Tensor(tokens.tokens), store, "seg.head").data
    return nn.linear_p(tokens, store, "seg.head")


def add_segment_head(store: ParamStore, cfg: EncoderConfig, n_classes: int, rng: Rng,
                     dtype=np.float32):
    nn.add_linear(store, "seg.head", cfg.d, n_classes, rng, dtype)


def load_pretrained(policy_store: ParamStore, policy_cfg: EncoderConfig, checkpoint) -> ParamStore:
    """Copy encoder parameters (the 'enc.' namespace) from a pretraining
    checkpoint into a policy store; everything else stays untouched.

    The checkpoint must carry an identical encoder config; mismatch is an
    error, as is any missing or non-encoder-shaped name.
    """
    ck_cfg = checkpoint.config.get("encoder")
    if ck_cfg is None:
        raise ValueError("checkpoint carries no encoder config")
    if EncoderConfig.from_dict(ck_cfg).to_dict() != policy_cfg.to_dict():
        raise ValueError(f"encoder config mismatch: checkpoint {ck_cfg}, policy {policy_cfg.to_dict()}")
    for name in encoder_param_names(policy_cfg):
        if name not in checkpoint.tensors:
            raise ValueError(f"checkpoint missing encoder parameter {name!r}")
        src = checkpoint.tensors[name]
        dst = policy_store[name]
        if src.shape != dst.data.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        dst.data = src.astype(dst.data.dtype).copy()
    return policy_store

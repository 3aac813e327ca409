"""Diffusion-transformer action decoder.

Query tokens (one diffusion-step token, t_a joint-action tokens, t_a
end-effector tokens) run through depth blocks of masked self-attention,
cross-attention into the dense observation context (t_o*n_c geometric tokens
plus t_o proprioception tokens, never pooled), and an MLP, all pre-LN with
residuals. Linear heads read noise predictions off the action tokens; the
diffusion token emits no output.

The self-attention mask is one-directional: joint tokens (and the diffusion
token) never attend end-effector tokens, so the executed joint branch is an
exact function of observations + joint queries, while the auxiliary EE branch
may read everything.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .rng import Rng
from .tensor import ParamStore, Tensor


@dataclass
class DecoderConfig:
    d: int = 64
    depth: int = 4
    heads: int = 4
    t_o: int = 2
    t_a: int = 16
    n_q: int = 4
    enable_ee_branch: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("decoder depth must be >= 1")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if self.t_a < 1 or self.t_o < 1:
            raise ValueError("horizons must be >= 1")
        if self.n_q < 1:
            raise ValueError("n_q must be >= 1")

    def to_dict(self) -> dict:
        return dict(d=self.d, depth=self.depth, heads=self.heads, t_o=self.t_o,
                    t_a=self.t_a, n_q=self.n_q, enable_ee_branch=self.enable_ee_branch)

    @staticmethod
    def from_dict(d: dict) -> "DecoderConfig":
        return DecoderConfig(**d)


@dataclass
class NoisyActions:
    """A noised action chunk at diffusion iteration k.

    joint is [.., t_a, n_q]; ee is [.., t_a, 7] (xyz + wxyz quaternion) or
    None when the EE branch is off; k is a python int or an int array matching
    the leading batch dims.
    """

    joint: np.ndarray
    ee: np.ndarray | None
    k: int | np.ndarray


@dataclass
class TokenBundle:
    """Decoder input: context sequence, query sequence, query self-mask."""

    obs_tokens: Tensor      # [.., t_o*n_c + t_o, d]
    query_tokens: Tensor    # [.., 1 + t_a (+ t_a), d]
    self_mask: np.ndarray   # bool [n_query, n_query]


def init_decoder_params(cfg: DecoderConfig, rng: Rng, store: ParamStore | None = None,
                        dtype=np.float32) -> ParamStore:
    """Create all decoder parameters under the 'dec.' prefix."""
    store = store if store is not None else ParamStore()
    d = cfg.d
    nn.add_linear(store, "dec.geo_proj", d, d, rng, dtype)
    nn.add_mlp(store, "dec.prio", cfg.n_q, d, d, rng, dtype)
    nn.add_mlp(store, "dec.act", cfg.n_q, d, d, rng, dtype)
    nn.add_mlp(store, "dec.diff", d, d, d, rng, dtype)
    if cfg.enable_ee_branch:
        nn.add_mlp(store, "dec.ee", 7, d, d, rng, dtype)
    t_max = max(cfg.t_o, cfg.t_a)
    store.add("dec.temb_obs", nn.trunc_normal(rng, (t_max, d), dtype=dtype))
    store.add("dec.temb_act", nn.trunc_normal(rng, (t_max, d), dtype=dtype))
    for i in range(cfg.depth):
        blk = f"dec.block{i}"
        nn.add_layer_norm(store, f"{blk}.ln1", d, dtype)
        nn.add_attention(store, f"{blk}.self", d, rng, dtype)
        nn.add_layer_norm(store, f"{blk}.ln2", d, dtype)
        nn.add_attention(store, f"{blk}.cross", d, rng, dtype)
        nn.add_layer_norm(store, f"{blk}.ln3", d, dtype)
        nn.add_mlp(store, f"{blk}.mlp", d, 4 * d, d, rng, dtype)
    nn.add_layer_norm(store, "dec.final_ln", d, dtype)
    nn.add_linear(store, "dec.head_joint", d, cfg.n_q, rng, dtype)
    if cfg.enable_ee_branch:
        nn.add_linear(store, "dec.head_ee", d, 7, rng, dtype)
    return store


def embed_proprio(q, store: ParamStore) -> Tensor:
    """MLP token(s) from raw joint positions; [.., n_q] -> [.., d]."""
    x = q if isinstance(q, Tensor) else Tensor(np.asarray(q))
    if x.ndim == 1:
        return nn.mlp(x.reshape(1, -1), store, "dec.prio").reshape(-1)
    return nn.mlp(x, store, "dec.prio")


def build_causal_mask(t_a: int, ee_enabled: bool) -> np.ndarray:
    """Query self-attention mask (True = may attend).

    Rows/cols are ordered [diffusion, joint 0..t_a-1, ee 0..t_a-1]. The
    diffusion and joint rows see only {diffusion, joint}; EE rows see all.
    Without the EE branch the mask is all-true over 1+t_a tokens.
    """
    if t_a < 1:
        raise ValueError("t_a must be >= 1")
    n_head = 1 + t_a
    if not ee_enabled:
        return np.ones((n_head, n_head), dtype=bool)
    n = 1 + 2 * t_a
    mask = np.ones((n, n), dtype=bool)
    mask[:n_head, n_head:] = False
    return mask


def _stack_geo_history(geo_history) -> Tensor:
    """Accept a list of GeometricTokens, a numpy array or a Tensor; return a
    Tensor shaped [.., t_o, n_c, d_geo]."""
    if isinstance(geo_history, Tensor):
        return geo_history
    if isinstance(geo_history, np.ndarray):
        return Tensor(geo_history)
    return Tensor(np.stack([g.tokens for g in geo_history]))


def assemble_context(geo_history, proprio_history, store: ParamStore,
                     cfg: DecoderConfig) -> Tensor:
    """Build the cross-attention context: geometric tokens (projected, + obs
    temporal embedding per source frame) flattened over the history, then one
    proprio token per frame (MLP, + the same obs temporal embedding).

    Output [.., t_o*n_c + t_o, d]. The context is independent of the
    diffusion iteration, so samplers build it once and reuse it.
    """
    geo = _stack_geo_history(geo_history)                    # [.., t_o, n_c, dg]
    if geo.shape[-3] != cfg.t_o:
        raise ValueError(f"expected t_o={cfg.t_o} geometric frames, got {geo.shape[-3]}")
    prio = proprio_history if isinstance(proprio_history, Tensor) else Tensor(np.asarray(proprio_history))
    if prio.shape[-2] != cfg.t_o:
        raise ValueError("proprio history length mismatch")
    d = cfg.d
    obs_steps = np.arange(cfg.t_o)
    geo_tok = nn.linear_p(geo, store, "dec.geo_proj")
    geo_tok = T.add(geo_tok, T.take(store["dec.temb_obs"], obs_steps).reshape(cfg.t_o, 1, d))
    *lead, _, n_c, _ = geo_tok.shape
    geo_flat = geo_tok.reshape(*lead, cfg.t_o * n_c, d)
    prio_tok = T.add(nn.mlp(prio, store, "dec.prio"), T.take(store["dec.temb_obs"], obs_steps))
    return T.concat([geo_flat, prio_tok], axis=-2)


def assemble_queries(noisy: NoisyActions, store: ParamStore, cfg: DecoderConfig) -> Tensor:
    """Build the query sequence: the diffusion-step token (sinusoid of k
    through an MLP, prepended), joint tokens and, when enabled, EE tokens
    (MLPs plus action temporal embeddings; joint and EE tokens at the same
    timestep share the embedding row). Output [.., 1 + t_a (+ t_a), d]."""
    joint = noisy.joint if isinstance(noisy.joint, Tensor) else Tensor(np.asarray(noisy.joint))
    if joint.shape[-2:] != (cfg.t_a, cfg.n_q):
        raise ValueError(f"joint actions must be [.., {cfg.t_a}, {cfg.n_q}]")
    lead = list(joint.shape[:-2])
    d = cfg.d
    karr = np.asarray(noisy.k, dtype=np.float64)
    if karr.ndim == 0 and lead:
        karr = np.broadcast_to(karr, tuple(lead))
    diff_in = Tensor(nn.sinusoidal_embedding(karr, d, dtype=joint.dtype))
    diff_tok = nn.mlp(diff_in.reshape(*lead, 1, d), store, "dec.diff")
    act_emb = T.take(store["dec.temb_act"], np.arange(cfg.t_a))
    joint_tok = T.add(nn.mlp(joint, store, "dec.act"), act_emb)
    parts = [diff_tok, joint_tok]
    if cfg.enable_ee_branch:
        if noisy.ee is None:
            raise ValueError("EE branch enabled but no EE actions given")
        ee = noisy.ee if isinstance(noisy.ee, Tensor) else Tensor(np.asarray(noisy.ee))
        parts.append(T.add(nn.mlp(ee, store, "dec.ee"), act_emb))
    return T.concat(parts, axis=-2)


def assemble_tokens(geo_history, proprio_history, noisy: NoisyActions,
                    store: ParamStore, cfg: DecoderConfig) -> TokenBundle:
    """Project every input family to width d, tag it with temporal/diffusion
    embeddings and bundle context + queries + causal mask. Works on a single
    sample or with leading batch dims."""
    return TokenBundle(
        assemble_context(geo_history, proprio_history, store, cfg),
        assemble_queries(noisy, store, cfg),
        build_causal_mask(cfg.t_a, cfg.enable_ee_branch),
    )


def dit_forward(bundle: TokenBundle, store: ParamStore, cfg: DecoderConfig,
                attn_sink: list | None = None) -> tuple[Tensor, Tensor | None]:
    """Run the block stack and read noise predictions off the action tokens.

    Returns (joint_noise_pred [.., t_a, n_q], ee_noise_pred [.., t_a, 7] or
    None). If attn_sink is a list it receives each block's cross-attention
    probabilities (numpy, detached), for conditioning diagnostics.
    """
    x = bundle.query_tokens
    ctx = bundle.obs_tokens
    n_query = 1 + cfg.t_a + (cfg.t_a if cfg.enable_ee_branch else 0)
    if x.shape[-2] != n_query or bundle.self_mask.shape != (n_query, n_query):
        raise ValueError("bundle query layout does not match config")
    for i in range(cfg.depth):
        blk = f"dec.block{i}"
        h = nn.norm_p(x, store, f"{blk}.ln1")
        x = T.add(x, nn.multi_head_attention(h, h, h, cfg.heads, store, f"{blk}.self",
                                             mask=bundle.self_mask))
        h = nn.norm_p(x, store, f"{blk}.ln2")
        x = T.add(x, nn.multi_head_attention(h, ctx, ctx, cfg.heads, store, f"{blk}.cross",
                                             attn_sink=attn_sink))
        x = T.add(x, nn.mlp(nn.norm_p(x, store, f"{blk}.ln3"), store, f"{blk}.mlp"))
    x = nn.norm_p(x, store, "dec.final_ln")
    sl = [slice(None)] * (x.ndim - 2)
    joint_tokens = x[tuple(sl + [slice(1, 1 + cfg.t_a)])]
    joint_pred = decode_actions(joint_tokens, store)
    ee_pred = None
    if cfg.enable_ee_branch:
        ee_tokens = x[tuple(sl + [slice(1 + cfg.t_a, 1 + 2 * cfg.t_a)])]
        ee_pred = nn.linear_p(ee_tokens, store, "dec.head_ee")
    return joint_pred, ee_pred


def decode_actions(final_joint_tokens: Tensor, store: ParamStore) -> Tensor:
    """The joint head: per-token linear map d -> n_q (same head dit_forward uses)."""
    return nn.linear_p(final_joint_tokens, store, "dec.head_joint")

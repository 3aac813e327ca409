"""Neural blocks: linear/MLP/attention, init, AdamW, finite-difference checks.

Everything is functional: layers take explicit Parameter tensors pulled from a
ParamStore, so the same code serves the encoder, the decoder and the tiny
models used by gradient checking.
"""

from __future__ import annotations

import math

import numpy as np

from .rng import Rng
from .tensor import (
    ParamStore,
    Parameter,
    Tensor,
    add,
    gelu,
    layer_norm,
    matmul,
    mul,
    softmax,
)

# -- initialization ----------------------------------------------------------


def trunc_normal(rng: Rng, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) clipped to +-2 std; the default weight init."""
    x = rng.normal(0.0, std, size=shape)
    return np.clip(x, -2.0 * std, 2.0 * std).astype(dtype)


def add_linear(store: ParamStore, name: str, d_in: int, d_out: int, rng: Rng, dtype=np.float32):
    store.add(f"{name}.w", trunc_normal(rng, (d_in, d_out), dtype=dtype))
    store.add(f"{name}.b", np.zeros(d_out, dtype=dtype))


def add_layer_norm(store: ParamStore, name: str, dim: int, dtype=np.float32):
    store.add(f"{name}.g", np.ones(dim, dtype=dtype))
    store.add(f"{name}.b", np.zeros(dim, dtype=dtype))


def add_mlp(store: ParamStore, name: str, d_in: int, d_hidden: int, d_out: int, rng: Rng, dtype=np.float32):
    add_linear(store, f"{name}.fc1", d_in, d_hidden, rng, dtype)
    add_linear(store, f"{name}.fc2", d_hidden, d_out, rng, dtype)


def add_attention(store: ParamStore, name: str, dim: int, rng: Rng, dtype=np.float32):
    for part in ("wq", "wk", "wv", "wo"):
        add_linear(store, f"{name}.{part}", dim, dim, rng, dtype)


# -- layers ------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x [.., d_in] @ w [d_in, d_out] + b [d_out]."""
    return add(matmul(x, w), b)


def linear_p(x: Tensor, store: ParamStore, name: str) -> Tensor:
    return linear(x, store[f"{name}.w"], store[f"{name}.b"])


def mlp(x: Tensor, store: ParamStore, name: str) -> Tensor:
    """Two-layer gelu MLP: linear -> gelu -> linear."""
    return linear_p(gelu(linear_p(x, store, f"{name}.fc1")), store, f"{name}.fc2")


def norm_p(x: Tensor, store: ParamStore, name: str, eps: float = 1e-5) -> Tensor:
    return layer_norm(x, store[f"{name}.g"], store[f"{name}.b"], eps)


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    """[.., L, D] -> [.., H, L, D/H]."""
    *lead, L, D = t.shape
    t = t.reshape(*lead, L, n_heads, D // n_heads)
    perm = list(range(t.ndim))
    perm[-3], perm[-2] = perm[-2], perm[-3]
    return t.transpose(perm)


def _merge_heads(t: Tensor) -> Tensor:
    """[.., H, L, dh] -> [.., L, H*dh]."""
    perm = list(range(t.ndim))
    perm[-3], perm[-2] = perm[-2], perm[-3]
    t = t.transpose(perm)
    *lead, L, H, dh = t.shape
    return t.reshape(*lead, L, H * dh)


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_heads: int,
    store: ParamStore,
    name: str,
    mask: np.ndarray | None = None,
    attn_sink: list | None = None,
) -> Tensor:
    """Projected multi-head attention with output projection.

    q is [.., L_q, D], k and v are [.., L_k, D]; a boolean mask broadcastable
    to [L_q, L_k] marks which keys each query may attend (True = allowed) and
    is shared across heads. Scores are scaled by 1/sqrt(d_head). If attn_sink
    is a list, the post-softmax probabilities (numpy, detached) are appended.
    """
    D = q.shape[-1]
    if D % n_heads:
        raise ValueError("model dim not divisible by n_heads")
    qh = _split_heads(linear_p(q, store, f"{name}.wq"), n_heads)
    kh = _split_heads(linear_p(k, store, f"{name}.wk"), n_heads)
    vh = _split_heads(linear_p(v, store, f"{name}.wv"), n_heads)
    perm = list(range(kh.ndim))
    perm[-2], perm[-1] = perm[-1], perm[-2]
    scores = mul(matmul(qh, kh.transpose(perm)), 1.0 / math.sqrt(D // n_heads))
    probs = softmax(scores, mask=mask, axis=-1)
    if attn_sink is not None:
        attn_sink.append(probs.data.copy())
    out = _merge_heads(matmul(probs, vh))
    return linear_p(out, store, f"{name}.wo")


def sinusoidal_embedding(k, dim: int, max_period: float = 10000.0, dtype=np.float32) -> np.ndarray:
    """Sinusoid features of a (batch of) scalar step index.

    Output dim is even: first half sin(k / max_period^(2i/dim)), second half
    the matching cosines. Returns [dim] for scalar k, [B, dim] for a vector.
    """
    if dim % 2:
        raise ValueError("sinusoidal embedding dim must be even")
    karr = np.asarray(k, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-(math.log(max_period) / dim) * (2.0 * np.arange(half)))
    args = karr[..., None] * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    return emb.astype(dtype)


# -- optimizer ----------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay; state is kept per parameter name."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params: list[Parameter] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        """Apply one update from accumulated grads; params without grads skip."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- finite-difference gradient checking --------------------------------------


def grad_check(f, params, h: float = 1e-5, max_coords: int = 16, rng: Rng | None = None) -> float:
    """Compare analytic grads of scalar f() against central differences.

    f rebuilds its graph from the current parameter values on every call and
    must be deterministic. Checks up to max_coords coordinates per parameter
    (evenly spaced, or rng-chosen) and returns the worst relative error
    |analytic - fd| / max(1, |fd|). Parameters should be f64 for tight checks.
    """
    params = list(params)
    for p in params:
        p.grad = None
    f().backward()
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params}
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        m = min(n, max_coords)
        if rng is None:
            coords = np.unique(np.linspace(0, n - 1, m).astype(np.int64))
        else:
            coords = rng.choice(n, size=m, replace=False)
        aflat = analytic[id(p)].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f().data)
            flat[i] = orig - h
            f_minus = float(f().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(aflat[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, rel)
    return worst

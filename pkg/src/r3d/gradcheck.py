"""Finite-difference verification of every backward rule.

Each check builds a small f64 problem, runs central differences against the
analytic gradients and reports the worst relative error. Elementwise /
linear / normalization rules must hit 1e-6; attention and the full policy
model (encoder -> decoder -> denoising loss, end to end) get 1e-5. run_all
covers every differentiable tensor op exactly once, so a broken backward
rule cannot hide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffusion
from . import nn
from . import tensor as T
from .decoder import DecoderConfig, init_decoder_params
from .diffusion import DiffusionLossConfig, make_schedule
from .encoder import EncoderConfig, init_encoder_params
from .policy import NormStats, PolicyModel
from .rng import Rng
from .tensor import Parameter, Tensor

TIGHT = 1e-6
LOOSE = 1e-5


@dataclass
class GradCheckResult:
    name: str
    rel_err: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.rel_err < self.threshold


def _param(rng: Rng, shape, scale=1.0) -> Parameter:
    return Parameter("p", rng.normal(size=shape) * scale)


def _projector(rng: Rng, shape):
    """A fixed random weighting, drawn once at build time, reducing that
    shape to a scalar so every output coordinate influences the check."""
    w = Tensor(rng.normal(size=shape))
    return lambda x: T.tsum(T.mul(x, w))


def _unary(rng, op, out_shape=(3, 4), shape=(3, 4), scale=1.0):
    p = _param(rng, shape, scale)
    proj = _projector(rng.split(1)[0], out_shape)
    return (lambda: proj(op(p))), [p]


def _check_add(rng):
    a, b = _param(rng, (3, 4)), _param(rng, (4,))
    proj = _projector(rng.split(1)[0], (3, 4))
    return (lambda: proj(T.add(a, b))), [a, b]


def _check_mul(rng):
    a, b = _param(rng, (3, 4)), _param(rng, (3, 1))
    proj = _projector(rng.split(1)[0], (3, 4))
    return (lambda: proj(T.mul(a, b))), [a, b]


def _check_matmul(rng):
    a, b = _param(rng, (2, 3, 4)), _param(rng, (4, 5))
    proj = _projector(rng.split(1)[0], (2, 3, 5))
    return (lambda: proj(T.matmul(a, b))), [a, b]


def _check_take(rng):
    p = _param(rng, (6, 3))
    idx = np.array([0, 2, 2, 5])
    proj = _projector(rng.split(1)[0], (4, 3))
    return (lambda: proj(T.take(p, idx))), [p]


def _check_getitem(rng):
    p = _param(rng, (4, 5))
    proj = _projector(rng.split(1)[0], (2, 3))
    return (lambda: proj(p[1:3, ::2])), [p]


def _check_concat(rng):
    a, b = _param(rng, (2, 3)), _param(rng, (4, 3))
    proj = _projector(rng.split(1)[0], (6, 3))
    return (lambda: proj(T.concat([a, b], axis=0))), [a, b]


def _check_softmax(rng):
    p = _param(rng, (3, 5))
    mask = np.array([True, True, False, True, True])
    proj = _projector(rng.split(1)[0], (3, 5))
    return (lambda: proj(T.softmax(p, mask=mask))), [p]


def _check_cross_entropy(rng):
    p = _param(rng, (6, 4))
    labels = np.array([0, 3, 1, 1, 2, 0])
    return (lambda: T.cross_entropy(p, labels)), [p]


def _check_mse(rng):
    p = _param(rng, (4, 7))
    target = Tensor(rng.normal(size=(4, 7)))
    return (lambda: T.mse(p, target)), [p]


def _check_layer_norm(rng):
    x = _param(rng, (3, 8))
    g = Parameter("g", rng.normal(size=8) * 0.5 + 1.0)
    b = Parameter("b", rng.normal(size=8) * 0.1)
    proj = _projector(rng.split(1)[0], (3, 8))
    return (lambda: proj(T.layer_norm(x, g, b))), [x, g, b]


def _check_linear(rng):
    store = T.ParamStore()
    nn.add_linear(store, "lin", 6, 4, rng, dtype=np.float64)
    x = _param(rng, (5, 6))
    proj = _projector(rng.split(1)[0], (5, 4))
    return (lambda: proj(nn.linear_p(x, store, "lin"))), [x] + list(store)


def _check_mlp(rng):
    store = T.ParamStore()
    nn.add_mlp(store, "mlp", 5, 8, 5, rng, dtype=np.float64)
    x = _param(rng, (4, 5))
    proj = _projector(rng.split(1)[0], (4, 5))
    return (lambda: proj(nn.mlp(x, store, "mlp"))), [x] + list(store)


def _check_attention(rng):
    store = T.ParamStore()
    nn.add_attention(store, "attn", 8, rng, dtype=np.float64)
    x = _param(rng, (5, 8), scale=0.5)
    proj = _projector(rng.split(1)[0], (5, 8))
    return (lambda: proj(nn.multi_head_attention(x, x, x, 2, store, "attn"))), \
        [x] + list(store)


def _check_full_model(rng):
    """Encoder -> context -> DiT -> denoising loss, tiny preset, all f64."""
    enc_cfg = EncoderConfig(n_p=32, n_c=8, k=4, preset="tiny")
    dec_cfg = DecoderConfig(d=enc_cfg.d, depth=4, heads=enc_cfg.heads, t_o=2, t_a=4, n_q=4)
    r_init, r_data = rng.split(2)
    store = init_encoder_params(enc_cfg, r_init, dtype=np.float64)
    init_decoder_params(dec_cfg, r_init, store=store, dtype=np.float64)
    norm = NormStats(np.full(4, -1.0), np.full(4, 1.0), np.full(7, -1.0), np.full(7, 1.0))
    model = PolicyModel(enc_cfg, dec_cfg, store, norm,
                        make_schedule("squared_cosine", 10), DiffusionLossConfig())
    B = 2
    obs = dict(
        patches=r_data.normal(size=(B, 2, enc_cfg.n_c, enc_cfg.k, 6)) * 0.1,
        centers=r_data.normal(size=(B, 2, enc_cfg.n_c, 3)) * 0.1,
        proprio=r_data.normal(size=(B, 2, 4)) * 0.1,
    )
    joint = r_data.normal(size=(B, 4, 4)) * 0.5
    ee = r_data.normal(size=(B, 4, 7)) * 0.5
    f = lambda: diffusion.training_loss(model, (obs, joint, ee), model.schedule,
                                        model.loss_cfg, Rng(123))
    return f, list(store)


CHECKS = [
    ("add", _check_add, TIGHT),
    ("mul", _check_mul, TIGHT),
    ("square", lambda r: _unary(r, T.square), TIGHT),
    ("matmul", _check_matmul, TIGHT),
    ("reshape", lambda r: _unary(r, lambda x: T.reshape(x, (4, 3)), out_shape=(4, 3)), TIGHT),
    ("transpose", lambda r: _unary(r, lambda x: T.transpose(x, (1, 0)), out_shape=(4, 3)), TIGHT),
    ("getitem", _check_getitem, TIGHT),
    ("take", _check_take, TIGHT),
    ("concat", _check_concat, TIGHT),
    ("sum", lambda r: _unary(r, lambda x: T.tsum(x, axis=0), out_shape=(4,)), TIGHT),
    ("mean", lambda r: _unary(r, lambda x: T.tmean(x, axis=1), out_shape=(3,)), TIGHT),
    ("max", lambda r: _unary(r, lambda x: T.tmax(x, axis=0), out_shape=(4,)), TIGHT),
    ("gelu", lambda r: _unary(r, T.gelu), TIGHT),
    ("layer_norm", _check_layer_norm, TIGHT),
    ("softmax", _check_softmax, TIGHT),
    ("cross_entropy", _check_cross_entropy, TIGHT),
    ("mse", _check_mse, TIGHT),
    ("linear", _check_linear, TIGHT),
    ("mlp", _check_mlp, TIGHT),
    ("attention", _check_attention, LOOSE),
    ("full_model", _check_full_model, LOOSE),
]


def run_all(seed: int = 0, max_coords: int = 16,
            full_model_coords: int = 2) -> list[GradCheckResult]:
    """Run every check; the full model samples fewer coordinates per
    parameter (it has a few hundred parameter tensors) and uses a smaller h:
    its max-pool makes the loss piecewise smooth, and h must stay inside one
    smooth piece or the difference quotient straddles an argmax flip."""
    results = []
    for i, (name, builder, threshold) in enumerate(CHECKS):
        rng = Rng((seed, i))
        f, params = builder(rng)
        coords = full_model_coords if name == "full_model" else max_coords
        h = 1e-6 if name == "full_model" else 1e-5
        err = nn.grad_check(f, params, h=h, max_coords=coords, rng=Rng((seed, i, 1)))
        results.append(GradCheckResult(name, err, threshold))
    return results


def report(results: list[GradCheckResult]) -> str:
    lines = []
    for r in results:
        verdict = "pass" if r.passed else "FAIL"
        lines.append(f"{r.name:14s} max rel err {r.rel_err:.3e}  (threshold {r.threshold:.0e})  {verdict}")
    return "\n".join(lines)

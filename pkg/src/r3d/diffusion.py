"""DDPM machinery for action chunks: schedule, noising, loss, sampling.

The model argument everywhere is anything with a
`denoise(obs, NoisyActions) -> (joint_pred, ee_pred)` method returning
Tensors; the policy module provides the real one, tests provide stubs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import NoisyActions
from .rng import Rng
from .tensor import Tensor

COSINE_S = 0.008
BETA_CLIP = 0.999
LINEAR_BETA_LO = 1e-4
LINEAR_BETA_HI = 0.02


@dataclass
class NoiseSchedule:
    """Iterations 1..K with per-iteration betas/alphas and running alpha_bars."""

    kind: str
    K: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        if self.K < 1 or len(self.betas) != self.K:
            raise ValueError("schedule must hold K >= 1 betas")
        if not ((self.betas > 0.0) & (self.betas <= BETA_CLIP)).all():
            raise ValueError("betas must lie in (0, 0.999]")
        if not np.all(np.diff(self.alpha_bars) < 0.0) and self.K > 1:
            raise ValueError("alpha_bars must be strictly decreasing")

    def beta(self, k: int) -> float:
        return float(self.betas[self._idx(k)])

    def alpha(self, k: int) -> float:
        return float(self.alphas[self._idx(k)])

    def alpha_bar(self, k: int) -> float:
        return float(self.alpha_bars[self._idx(k)])

    def _idx(self, k) -> int:
        if not np.all((1 <= np.asarray(k)) & (np.asarray(k) <= self.K)):
            raise ValueError(f"iteration k={k} outside 1..{self.K}")
        return np.asarray(k) - 1


@dataclass
class DiffusionLossConfig:
    lambda_ee: float = 1.0
    prediction_target: str = "epsilon"

    def __post_init__(self):
        if self.lambda_ee < 0:
            raise ValueError("lambda_ee must be >= 0")
        if self.prediction_target != "epsilon":
            raise ValueError("only epsilon prediction is supported")


def make_schedule(kind: str, K: int) -> NoiseSchedule:
    """Build the noise schedule.

    squared_cosine: alpha_bar follows cos^2(((k/K)+s)/(1+s) * pi/2), s=0.008,
    realized through betas = 1 - f(k)/f(k-1) clipped to <= 0.999 so that
    alpha_bars stays an exact cumulative product of alphas. linear: betas
    evenly spaced over [1e-4, 0.02] (a single point at K=1 sits at the low end).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if kind == "squared_cosine":
        def f(u):
            return math.cos((u + COSINE_S) / (1.0 + COSINE_S) * math.pi / 2.0) ** 2

        betas = np.array([min(1.0 - f(k / K) / f((k - 1) / K), BETA_CLIP) for k in range(1, K + 1)])
    elif kind == "linear":
        betas = np.linspace(LINEAR_BETA_LO, LINEAR_BETA_HI, K)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    return NoiseSchedule(kind, K, betas, alphas, np.cumprod(alphas))


def add_noise(a0: np.ndarray, eps: np.ndarray, k, schedule: NoiseSchedule) -> np.ndarray:
    """Forward noising a_k = sqrt(ab_k) a0 + sqrt(1 - ab_k) eps.

    k is an int or an int array indexing leading batch dims; 1 <= k <= K.
    """
    a0 = np.asarray(a0)
    eps = np.asarray(eps)
    if a0.shape != eps.shape:
        raise ValueError("a0 and eps must share a shape")
    ab = schedule.alpha_bars[schedule._idx(k)]
    ab = np.asarray(ab)
    while ab.ndim < a0.ndim:
        ab = ab[..., None]
    return (np.sqrt(ab).astype(a0.dtype) * a0 + np.sqrt(1.0 - ab).astype(a0.dtype) * eps)


def training_loss(model, batch, schedule: NoiseSchedule, loss_cfg: DiffusionLossConfig,
                  rng: Rng) -> Tensor:
    """Denoising loss over one batch; scalar Tensor wired into the model graph."""
    loss, _, _ = training_loss_parts(model, batch, schedule, loss_cfg, rng)
    return loss


def training_loss_parts(model, batch, schedule: NoiseSchedule, loss_cfg: DiffusionLossConfig,
                        rng: Rng) -> tuple[Tensor, float, float]:
    """As training_loss but also reports (joint MSE, weighted EE MSE) floats.

    Per sample i (split rng stream i, in index order): draw k_i uniform in
    1..K, eps for the joint chunk, then eps for the EE chunk if present.
    """
    obs, joint, ee = batch
    joint = np.asarray(joint)
    if joint.dtype != np.float64:  # keep f64 batches f64 for FD gradchecks
        joint = joint.astype(np.float32)
    B = joint.shape[0]
    use_ee = ee is not None and loss_cfg.lambda_ee >= 0 and model.has_ee_branch()
    if ee is not None:
        ee = np.asarray(ee).astype(joint.dtype, copy=False)
        if ee.shape[:2] != joint.shape[:2]:
            raise ValueError("joint/EE batch shapes disagree")
    ks = np.empty(B, dtype=np.int64)
    eps_j = np.empty_like(joint)
    eps_e = np.empty_like(ee) if use_ee else None
    for i, r in enumerate(rng.split(B)):
        ks[i] = int(r.integers(1, schedule.K + 1))
        eps_j[i] = r.normal(size=joint.shape[1:]).astype(joint.dtype)
        if use_ee:
            eps_e[i] = r.normal(size=ee.shape[1:]).astype(joint.dtype)
    noisy = NoisyActions(
        joint=add_noise(joint, eps_j, ks, schedule),
        ee=add_noise(ee, eps_e, ks, schedule) if use_ee else None,
        k=ks,
    )
    pred_j, pred_e = model.denoise(obs, noisy)
    loss_j = T.mse(pred_j, Tensor(eps_j))
    loss = loss_j
    loss_e_val = 0.0
    if use_ee and pred_e is not None:
        loss_e = T.mul(T.mse(pred_e, Tensor(eps_e)), float(loss_cfg.lambda_ee))
        loss = T.add(loss, loss_e)
        loss_e_val = loss_e.item()
    return loss, loss_j.item(), loss_e_val


def sample(model, obs_history, schedule: NoiseSchedule, rng: Rng, cfg) -> tuple[np.ndarray, np.ndarray | None]:
    """Ancestral DDPM sampling of one action chunk (normalized space).

    cfg carries t_a / n_q / enable_ee_branch (a DecoderConfig works). Both
    branches start at N(0, I); each step applies the posterior mean
    mu = (a - beta_k / sqrt(1 - ab_k) * eps_hat) / sqrt(alpha_k)
    and adds sqrt(beta_k) z noise except at the final step k=1.
    """
    a_j = rng.normal(size=(cfg.t_a, cfg.n_q)).astype(np.float32)
    use_ee = getattr(cfg, "enable_ee_branch", False)
    a_e = rng.normal(size=(cfg.t_a, 7)).astype(np.float32) if use_ee else None
    with T.no_grad():
        for k in range(schedule.K, 0, -1):
            pred_j, pred_e = model.denoise(obs_history, NoisyActions(a_j, a_e, k))
            coef = float(schedule.beta(k) / math.sqrt(1.0 - schedule.alpha_bar(k)))
            inv_sqrt_alpha = float(1.0 / math.sqrt(schedule.alpha(k)))
            a_j = (a_j - coef * pred_j.data) * inv_sqrt_alpha
            if use_ee:
                a_e = (a_e - coef * pred_e.data) * inv_sqrt_alpha
            if k > 1:
                sigma = float(math.sqrt(schedule.beta(k)))
                a_j = a_j + sigma * rng.normal(size=a_j.shape).astype(np.float32)
                if use_ee:
                    a_e = a_e + sigma * rng.normal(size=a_e.shape).astype(np.float32)
    return a_j, a_e

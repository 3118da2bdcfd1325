"""Flow-matching losses and the two-stage training curriculum.

Convention: ``sigma`` is the noise level, ``z = sigma * eps + (1 - sigma) * x``
and the network regresses the velocity ``v = eps - x``. Sampling integrates
from sigma = 1 (pure noise) down to sigma = 0.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .conditioners import ConditionSet, audio_features, encode_text, mask_to_tokens
from .dit import DiTConfig, forward, has_audio_blocks, init_params, insert_audio_blocks
from .numerics import OptimizerState, Tensor, adamw_step, as_tensor, forward_backward
from .numerics.rng import Rng, gaussian, integers, uniform
from .world import Sample, encode_latent, make_face_mask


@dataclass
class NoisePoint:
    sigma: np.ndarray  # (B,)
    eps: np.ndarray
    z: np.ndarray
    target: np.ndarray


def interpolate(x, eps, sigma):
    """``sigma * eps + (1 - sigma) * x`` with per-sample ``sigma``."""
    s = np.asarray(sigma, dtype=np.float64).reshape((-1,) + (1,) * (np.ndim(x) - 1))
    return s * eps + (1.0 - s) * x


def sample_noise_point(x: np.ndarray, rng: Rng, sigma=None) -> NoisePoint:
    """Draw ``sigma ~ U[0, 1]`` per sample (unless given) and ``eps ~ N(0, I)``."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("clean latent must be finite")
    if sigma is None:
        sigma = uniform(rng, x.shape[0])
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x.shape[0],)).copy()
    eps = gaussian(rng, x.shape)
    return NoisePoint(sigma, eps, interpolate(x, eps, sigma), eps - x)


def _check_shapes(pred, target):
    if tuple(pred.shape) != tuple(np.shape(target)):
        raise ValueError(f"shape mismatch: {pred.shape} vs {np.shape(target)}")


def base_loss(pred, target) -> Tensor:
    """Mean squared error over every element."""
    pred = as_tensor(pred)
    _check_shapes(pred, target)
    err = pred - target
    return (err * err).mean()


def _mask_weights(mask: np.ndarray, shape: tuple[int, ...], sample_weights=None) -> np.ndarray:
    """Per-element weights so that ``sum(w * err^2)`` is the batch mean of masked means.

    ``shape`` is ``(B, T, C, H, W)`` (or unbatched ``(T, C, H, W)``); ``mask``
    is ``(H, W)`` or ``(B, H, W)``. ``sample_weights`` (0/1 per sample)
    restricts the batch mean to the selected samples.
    """
    if len(shape) == 4:
        shape = (1,) + tuple(shape)
    b, t, c, h, w = shape
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), (b, h, w))
    area = m.sum(axis=(1, 2))
    if np.any(area <= 0):
        raise ValueError("face mask is empty")
    if sample_weights is None:
        sw = np.ones(b)
    else:
        sw = np.asarray(sample_weights, dtype=np.float64).reshape(b)
        if np.any(sw < 0) or sw.sum() <= 0:
            raise ValueError("sample weights must be non-negative with a positive sum")
    weights = m * sw[:, None, None] / (t * c * area[:, None, None] * sw.sum())
    return weights[:, None, None, :, :]


def adaptive_loss(pred, target, mask, sample_weights=None) -> Tensor:
    """Squared error averaged over face-masked latent cells.

    Equivalent to the global MSE of the mask-restricted error map scaled by
    ``H*W / sum(mask)``; equals :func:`base_loss` for a full mask.
    """
    pred = as_tensor(pred)
    _check_shapes(pred, target)
    err = pred - target
    w = _mask_weights(mask, pred.shape, sample_weights)
    if pred.ndim == 4:
        w = w[0]
    return (err * err * w).sum()


def total_loss(pred, target, mask, lambda_adap: float) -> Tensor:
    if lambda_adap < 0:
        raise ValueError("lambda_adap must be non-negative")
    base = base_loss(pred, target)
    if lambda_adap == 0:
        return base
    return base + adaptive_loss(pred, target, mask) * lambda_adap


# data -----------------------------------------------------------------------

@dataclass
class EncodedSample:
    latent: np.ndarray        # (T, C, H, W)
    text: np.ndarray          # (L, d)
    portrait: np.ndarray      # (H_px, W_px)
    audio: np.ndarray         # (T, 4)
    face_mask: np.ndarray     # (H, W)
    mask_tokens: np.ndarray   # (N_video,)


def encode_sample(sample: Sample, cfg: DiTConfig) -> EncodedSample:
    latent = encode_latent(sample.video)
    mask = make_face_mask(sample.spec)
    return EncodedSample(
        latent=latent,
        text=encode_text(sample.prompt, cfg.d_model),
        portrait=sample.video[0, 0].copy(),
        audio=audio_features(sample.audio),
        face_mask=mask,
        mask_tokens=mask_to_tokens(mask, cfg.patch, latent.shape[0]),
    )


def collate(items: list[EncodedSample], full_mask: bool = False) -> tuple[np.ndarray, np.ndarray, ConditionSet]:
    """Stack samples into ``(x, face_masks, conds)``.

    ``full_mask`` replaces the face-mask tokens by ones (the no-mask ablation).
    """
    x = np.stack([s.latent for s in items])
    masks = np.stack([s.face_mask for s in items])
    tokens = np.stack([s.mask_tokens for s in items])
    if full_mask:
        tokens = np.ones_like(tokens)
    conds = ConditionSet(
        text=np.stack([s.text for s in items]),
        portrait=np.stack([s.portrait for s in items]),
        portrait_latent=x[:, 0].copy(),
        audio=np.stack([s.audio for s in items]),
        mask_tokens=tokens,
    )
    return x, masks, conds


# training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    stage: int = 1
    lambda_adap: float = 10.0
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 4
    steps: int = 2000
    seed: int = 0
    drop_uncond: float = 0.1
    drop_audio: float = 0.1
    use_face_mask: bool = True
    log_every: int = 10

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.lambda_adap < 0:
            raise ValueError("lambda_adap must be non-negative")


def _condition_dropout(conds: ConditionSet, rng: Rng, cfg: TrainConfig) -> ConditionSet:
    u = uniform(rng, conds.batch)
    keep_ctx = (u >= cfg.drop_uncond).astype(np.float64)
    if cfg.stage == 1:
        keep_audio = np.zeros(conds.batch)
    else:
        keep_audio = (u >= cfg.drop_uncond + cfg.drop_audio).astype(np.float64)
    conds.keep_context = keep_ctx
    conds.keep_audio = keep_audio
    return conds


def train_step(params: Mapping[str, np.ndarray], opt: OptimizerState, batch: list[EncodedSample],
               cfg: TrainConfig, model_cfg: DiTConfig, rng: Rng):
    """One AdamW update on the stage's loss; returns ``(params, opt, metrics)``."""
    audio = has_audio_blocks(params)
    if cfg.stage == 1 and audio:
        raise ValueError("stage 1 expects a model without audio blocks")
    if cfg.stage == 2 and not audio:
        raise ValueError("stage 2 expects a model with audio blocks")
    x, masks, conds = collate(batch, full_mask=not cfg.use_face_mask)
    if cfg.stage == 1:
        conds.audio = None
        conds.mask_tokens = None
    conds = _condition_dropout(conds, rng.child("dropout"), cfg)
    point = sample_noise_point(x, rng.child("noise"))
    lam = cfg.lambda_adap if cfg.stage == 2 else 0.0
    loss_mask = masks if cfg.use_face_mask else np.ones_like(masks)
    # the face emphasis only applies where audio survived dropout: samples
    # without it have no audio to align with, and weighting them would pull
    # the unconditional branch toward face intensities
    adap_weights = conds.keep_audio if cfg.stage == 2 else np.ones(conds.batch)
    terms = {}

    def objective(P):
        pred = forward(P, point.z, point.sigma, conds, model_cfg)
        base = base_loss(pred, point.target)
        if adap_weights.sum() == 0:
            adap = base * 0.0
        else:
            adap = adaptive_loss(pred, point.target, loss_mask, adap_weights)
        terms["base_loss"] = float(base.data)
        terms["adaptive_loss"] = float(adap.data)
        return base + adap * lam if lam else base

    value, grads = forward_backward(objective, params)
    new_params, opt = adamw_step(params, grads, opt)
    metrics = {"base_loss": terms["base_loss"], "adaptive_loss": terms["adaptive_loss"],
               "total_loss": value}
    return new_params, opt, metrics


def batch_indices(rng: Rng, n: int, batch_size: int) -> np.ndarray:
    return integers(rng, 0, n, batch_size)


METRIC_FIELDS = ["step", "stage", "base_loss", "adaptive_loss", "total_loss", "wall_ms"]


def run_stage(params: Mapping[str, np.ndarray], data: list[EncodedSample], cfg: TrainConfig,
              model_cfg: DiTConfig, on_metrics: Callable[[dict], None] | None = None,
              opt: OptimizerState | None = None):
    """Train for ``cfg.steps`` updates; returns ``(params, opt, rows)``.

    Batches and noise come from ``Rng(cfg.seed, "train/stage{k}")`` children
    keyed by step number, so a resumed run reproduces the same stream.
    """
    if opt is None:
        opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    root = Rng(cfg.seed, f"train/stage{cfg.stage}")
    rows = []
    params = dict(params)
    start = time.perf_counter()
    for step in range(cfg.steps):
        srng = root.child(step)
        idx = batch_indices(srng.child("batch"), len(data), cfg.batch_size)
        params, opt, m = train_step(params, opt, [data[i] for i in idx], cfg, model_cfg, srng)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            row = {"step": step, "stage": cfg.stage, **m,
                   "wall_ms": round((time.perf_counter() - start) * 1000.0, 1)}
            rows.append(row)
            if on_metrics is not None:
                on_metrics(row)
    return params, opt, rows


def stage_params(model_cfg: DiTConfig, seed: int, stage1: Mapping[str, np.ndarray] | None = None):
    """Initial parameters for a stage: fresh for stage 1, stage-1 + audio blocks for stage 2."""
    if stage1 is None:
        return init_params(model_cfg, Rng(seed, "init"))
    return insert_audio_blocks(stage1, model_cfg, Rng(seed, "init"))

"""Sliding-window denoising for sequences longer than the model's window.

At every noise level each window reads the same full-sequence latent
snapshot, window velocities are blended over their overlaps into one
full-sequence velocity, and a single Euler step updates the whole latent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .conditioners import ConditionSet, audio_features
from .dit import DiTConfig, predict
from .distill import GeneratorSchedule, NfeCounter
from .guidance import FOLD_BRANCHES, GuidanceConfig, combine, sample_scales, select_fold
from .numerics.rng import Rng, gaussian

TEACHER_STEPS = 50


def teacher_schedule(steps: int = TEACHER_STEPS) -> np.ndarray:
    """Uniform grid ``1 - k/steps`` for k = 0..steps-1, plus the terminal 0."""
    return np.append(1.0 - np.arange(steps) / steps, 0.0)


def distilled_schedule() -> np.ndarray:
    return GeneratorSchedule().sigmas


def sampler_schedule(sampler: str) -> np.ndarray:
    if sampler == "teacher":
        return teacher_schedule()
    if sampler == "distilled":
        return distilled_schedule()
    raise ValueError(f"unknown sampler {sampler!r}")


@dataclass(frozen=True)
class WindowPlan:
    total: int
    window: int
    starts: tuple[int, ...]

    @property
    def spans(self) -> list[tuple[int, int]]:
        return [(s, min(s + self.window, self.total)) for s in self.starts]

    @property
    def overlaps(self) -> list[int | None]:
        """Overlap of each window with its predecessor (``None`` for the first)."""
        spans = self.spans
        return [None] + [spans[i - 1][1] - spans[i][0] for i in range(1, len(spans))]


def plan_windows(total: int, window: int, overlap: int) -> WindowPlan:
    """Windows of length ``window`` with stride ``window - overlap``.

    A final window that would overrun is shifted left to end exactly at
    ``total``; sequences no longer than one window get a single (possibly
    truncated) window.
    """
    if total < 1:
        raise ValueError("total frames must be >= 1")
    if window < 3:
        raise ValueError("window must be >= 3 frames")
    if overlap < 2:
        raise ValueError("overlap must be >= 2 frames for the blending formula")
    if overlap >= window:
        raise ValueError("overlap must be smaller than the window")
    if total <= window:
        return WindowPlan(total, window, (0,))
    stride = window - overlap
    starts = [0]
    while starts[-1] + window < total:
        nxt = starts[-1] + stride
        if nxt + window > total:
            nxt = total - window
        starts.append(nxt)
    return WindowPlan(total, window, tuple(starts))


def blend_weights(width: int) -> tuple[np.ndarray, np.ndarray]:
    """``(w_orig, w_new)`` for overlap positions ``i = 0..width-1``.

    ``w_orig = ((width - 1) - i) / (width - 2)`` clamped to [0, 1]; a width
    of 2 is a hard handoff.
    """
    if width < 2:
        raise ValueError("overlap width must be >= 2")
    i = np.arange(width, dtype=np.float64)
    if width == 2:
        orig = np.array([1.0, 0.0])
    else:
        orig = np.clip(((width - 1) - i) / (width - 2), 0.0, 1.0)
    return orig, 1.0 - orig


def pad_audio(track: np.ndarray, total: int) -> np.ndarray:
    track = np.asarray(track, dtype=np.float64)
    if track.size == 0:
        raise ValueError("audio track is empty")
    if track.size > total:
        raise ValueError("audio track is longer than the sequence")
    return np.concatenate([track, np.full(total - track.size, track[-1])])


def align_audio(track: np.ndarray, plan: WindowPlan) -> list[np.ndarray]:
    """Per-window views into the repeat-padded track.

    Overlapping frames of neighbouring windows are views of the same buffer.
    """
    padded = pad_audio(track, plan.total)
    return [padded[s:e] for s, e in plan.spans]


def aligned_features(track: np.ndarray, total: int) -> np.ndarray:
    """Envelope features over the padded track, computed once for the whole sequence."""
    return audio_features(pad_audio(track, total))


def window_velocity(params: Mapping, z: np.ndarray, sigma: float, conds: ConditionSet, cfg: DiTConfig,
                    sampler: str, guidance: GuidanceConfig | None, rng: Rng, counter: NfeCounter,
                    role: str = "sampler") -> np.ndarray:
    """Velocity for one window at one noise level (guided for the teacher)."""
    b = z.shape[0]
    sig = np.full(b, sigma)
    if sampler == "distilled":
        counter.add(role)
        return predict(params, z, sig, conds, cfg)
    if guidance is None:
        raise ValueError("the teacher sampler needs a guidance config")
    fold = select_fold(sigma, guidance.threshold)
    w_audio, w_text = sample_scales(guidance, rng)
    outputs = {}
    for kind in FOLD_BRANCHES[fold]:
        counter.add(role)
        outputs[kind] = predict(params, z, sig, conds.branch(kind), cfg)
    return combine(fold, outputs, w_audio, w_text, guidance.variant)


def initial_noise(rng: Rng, shape) -> np.ndarray:
    return gaussian(rng.child("init-noise"), shape)


def denoise_full(params: Mapping, total: int, conds: ConditionSet, sampler: str, plan: WindowPlan,
                 rng: Rng, cfg: DiTConfig, guidance: GuidanceConfig | None = None,
                 counter: NfeCounter | None = None, blend: bool = True) -> np.ndarray:
    """Sample a ``(B, total, C, H, W)`` latent with sliding-window Euler steps.

    ``conds.audio`` must already cover all ``total`` frames (see
    :func:`aligned_features`). ``blend=False`` is the hard-handoff ablation:
    each window overwrites its overlap with its own prediction.
    """
    if plan.total != total:
        raise ValueError("plan does not match the sequence length")
    if conds.audio is not None and conds.audio.shape[1] != total:
        raise ValueError("audio features do not cover the sequence")
    counter = counter if counter is not None else NfeCounter()
    schedule = sampler_schedule(sampler)
    shape = (conds.batch, total, cfg.latent_channels, cfg.latent_h, cfg.latent_w)
    z = initial_noise(rng, shape)
    spans = plan.spans
    for k in range(len(schedule) - 1):
        sigma, nxt = float(schedule[k]), float(schedule[k + 1])
        v = np.empty_like(z)
        prev_end = 0
        for w, (s, e) in enumerate(spans):
            win = conds.window(s, e, cfg.tokens_per_frame)
            vw = window_velocity(params, z[:, s:e], sigma, win, cfg, sampler, guidance,
                                 rng.child(f"cfg/{k}/{w}"), counter)
            if w == 0 or not blend:
                v[:, s:e] = vw
            else:
                width = prev_end - s
                orig, new = blend_weights(width)
                for i in range(width):
                    v[:, s + i] = orig[i] * v[:, s + i] + new[i] * vw[:, i]
                v[:, prev_end:e] = vw[:, width:]
            prev_end = e
        z = z + (nxt - sigma) * v
    return z


def sample_window(params: Mapping, conds: ConditionSet, frames: int, sampler: str, rng: Rng,
                  cfg: DiTConfig, guidance: GuidanceConfig | None = None,
                  counter: NfeCounter | None = None) -> np.ndarray:
    """Plain single-window sampler, the reference the sliding version must reproduce."""
    counter = counter if counter is not None else NfeCounter()
    schedule = sampler_schedule(sampler)
    z = initial_noise(rng, (conds.batch, frames, cfg.latent_channels, cfg.latent_h, cfg.latent_w))
    for k in range(len(schedule) - 1):
        sigma, nxt = float(schedule[k]), float(schedule[k + 1])
        v = window_velocity(params, z, sigma, conds, cfg, sampler, guidance,
                            rng.child(f"cfg/{k}/0"), counter)
        z = z + (nxt - sigma) * v
    return z

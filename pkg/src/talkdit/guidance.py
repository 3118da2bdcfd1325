"""Classifier-free guidance combinators with timestep-dependent fold selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics.rng import Rng, gaussian

VARIANTS = ("normalized", "as-printed")


@dataclass(frozen=True)
class GuidanceConfig:
    audio_scale: float = 1.0
    text_scale: float = 0.25
    std_fraction: float = 0.1
    threshold: float = 0.75
    variant: str = "normalized"

    def __post_init__(self):
        if self.audio_scale < 0 or self.text_scale < 0:
            raise ValueError("guidance means must be non-negative")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.std_fraction < 0:
            raise ValueError("std_fraction must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown guidance variant {self.variant!r}")


def _same_shape(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"branch shapes differ: {sorted(shapes)}")


def two_fold(full, uncond, w_audio: float):
    _same_shape(full, uncond)
    return (1.0 + w_audio) * full - w_audio * uncond


def three_fold(full, no_audio, uncond, w_audio: float, w_text: float, variant: str = "normalized"):
    """Audio guidance against the no-audio branch stacked on text guidance.

    ``as-printed`` keeps both ``(1 + w)`` terms, so its coefficients sum to 2;
    ``normalized`` merges the no-audio terms so they sum to 1.
    """
    _same_shape(full, no_audio, uncond)
    if variant == "normalized":
        return (1.0 + w_audio) * full + (w_text - w_audio) * no_audio - w_text * uncond
    if variant == "as-printed":
        return ((1.0 + w_audio) * full - w_audio * no_audio
                + (1.0 + w_text) * no_audio - w_text * uncond)
    raise ValueError(f"unknown guidance variant {variant!r}")


def select_fold(sigma: float, threshold: float = 0.75) -> str:
    """``two-fold`` in the high-noise band ``[threshold, 1]``, else ``three-fold``."""
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"noise level {sigma} outside [0, 1]")
    return "two-fold" if sigma >= threshold else "three-fold"


FOLD_BRANCHES = {"two-fold": ("full", "uncond"), "three-fold": ("full", "no_audio", "uncond")}


def sample_scales(cfg: GuidanceConfig, rng: Rng) -> tuple[float, float]:
    """Draw (audio, text) scales from N(mean, (frac * mean)^2), clamped at zero."""
    z = gaussian(rng, 2)
    wa = cfg.audio_scale + cfg.std_fraction * cfg.audio_scale * z[0]
    wt = cfg.text_scale + cfg.std_fraction * cfg.text_scale * z[1]
    return max(0.0, float(wa)), max(0.0, float(wt))


def combine(fold: str, outputs: dict, w_audio: float, w_text: float, variant: str = "normalized"):
    if fold == "two-fold":
        return two_fold(outputs["full"], outputs["uncond"], w_audio)
    return three_fold(outputs["full"], outputs["no_audio"], outputs["uncond"], w_audio, w_text, variant)

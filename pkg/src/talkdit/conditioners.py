"""Toy encoders that build the conditioning bundle for the denoiser.

Text tokens come from a frozen hash-seeded table, portrait tokens from a
learned linear patch embedder, audio latents from a learned two-layer MLP over
a three-frame envelope window, and the face mask is max-pooled to token
resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .numerics import Tensor, gelu
from .numerics.rng import Rng, gaussian

TEXT_TABLE_SEED = 0x7E47


def encode_text(prompt: str, d_model: int) -> np.ndarray:
    """Whitespace tokens looked up in a frozen Gaussian table -> ``(L, d_model)``."""
    tokens = prompt.split()
    if not tokens:
        raise ValueError("prompt must contain at least one token")
    return np.stack([gaussian(Rng(TEXT_TABLE_SEED, f"text-token/{tok}"), d_model) for tok in tokens])


def _patch_rows(images: np.ndarray, patch: int) -> np.ndarray:
    """``(B, H, W) -> (B, (H/p)*(W/p), p*p)``, patches and pixels both row-major."""
    b, h, w = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} is not divisible by patch {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch)


def init_portrait_params(rng: Rng, patch: int, d_model: int) -> dict[str, np.ndarray]:
    return {
        "portrait.w": gaussian(rng.child("portrait.w"), (patch * patch, d_model)) / patch,
        "portrait.b": np.zeros(d_model),
    }


def encode_portrait(first_frame, params: Mapping, patch: int) -> Tensor:
    """Linear patch embedding of the portrait; accepts ``(H, W)`` or ``(B, H, W)``."""
    images = np.asarray(first_frame, dtype=np.float64)
    single = images.ndim == 2
    if single:
        images = images[None]
    rows = _patch_rows(images, patch)
    tokens = Tensor(rows) @ params["portrait.w"] + params["portrait.b"]
    return tokens[0] if single else tokens


def audio_features(track: np.ndarray) -> np.ndarray:
    """Per-frame ``(a_t, a_{t-1}, a_{t+1}, |a_t|)`` with edge clamping -> ``(T, 4)``."""
    a = np.asarray(track, dtype=np.float64)
    if a.ndim != 1 or a.size < 1:
        raise ValueError("audio track must be a non-empty 1-D array")
    prev = np.concatenate([a[:1], a[:-1]])
    nxt = np.concatenate([a[1:], a[-1:]])
    return np.stack([a, prev, nxt, np.abs(a)], axis=1)


def init_audio_params(rng: Rng, n_tokens: int, d_audio: int, hidden: int) -> dict[str, np.ndarray]:
    return {
        "audio_enc.w1": gaussian(rng.child("audio_enc.w1"), (4, hidden)) / 2.0,
        "audio_enc.b1": np.zeros(hidden),
        "audio_enc.w2": gaussian(rng.child("audio_enc.w2"), (hidden, n_tokens * d_audio)) / np.sqrt(hidden),
        "audio_enc.b2": np.zeros(n_tokens * d_audio),
    }


def encode_audio_features(features, params: Mapping, n_tokens: int) -> Tensor:
    """MLP over ``(..., T, 4)`` features -> ``(..., T, n_tokens, d_audio)``."""
    feats = np.asarray(features, dtype=np.float64)
    hid = gelu(Tensor(feats) @ params["audio_enc.w1"] + params["audio_enc.b1"])
    out = hid @ params["audio_enc.w2"] + params["audio_enc.b2"]
    d_audio = out.shape[-1] // n_tokens
    return out.reshape(feats.shape[:-1] + (n_tokens, d_audio))


def encode_audio(track: np.ndarray, params: Mapping, n_tokens: int, frames: int | None = None) -> Tensor:
    if frames is not None and len(track) != frames:
        raise ValueError(f"audio length {len(track)} != frame count {frames}")
    return encode_audio_features(audio_features(track), params, n_tokens)


def mask_to_tokens(mask: np.ndarray, patch: int, frames: int) -> np.ndarray:
    """Max-pool a latent mask to patch tokens, repeated for every frame."""
    mask = np.asarray(mask)
    h, w = mask.shape
    if h % patch or w % patch:
        raise ValueError(f"mask {h}x{w} is not divisible by patch {patch}")
    pooled = mask.reshape(h // patch, patch, w // patch, patch).max(axis=(1, 3))
    bits = (pooled > 0).astype(np.float64).reshape(-1)
    return np.tile(bits, frames)


@dataclass
class ConditionSet:
    """Batched conditioning bundle.

    ``keep_context`` zeroes text, portrait tokens and the portrait channel
    (the unconditional branch); ``keep_audio`` gates every audio
    cross-attention residual; ``portrait_slot`` says whether the window
    contains the global first frame.
    """

    text: np.ndarray                      # (B, L_text, d)
    portrait: np.ndarray                  # (B, H_px, W_px)
    portrait_latent: np.ndarray           # (B, C, H, W)
    audio: np.ndarray | None = None       # (B, T, 4) envelope features
    mask_tokens: np.ndarray | None = None  # (B, N_video)
    keep_context: np.ndarray | None = None
    keep_audio: np.ndarray | None = None
    portrait_slot: np.ndarray | None = None

    def __post_init__(self):
        b = self.text.shape[0]
        if self.keep_context is None:
            self.keep_context = np.ones(b)
        if self.keep_audio is None:
            self.keep_audio = np.ones(b) if self.audio is not None else np.zeros(b)
        if self.portrait_slot is None:
            self.portrait_slot = np.ones(b)

    @property
    def batch(self) -> int:
        return self.text.shape[0]

    def branch(self, kind: str) -> "ConditionSet":
        """Condition pattern for a guidance branch: full, no_audio or uncond."""
        b = self.batch
        if kind == "full":
            return self
        if kind == "no_audio":
            return replace(self, keep_audio=np.zeros(b))
        if kind == "uncond":
            return replace(self, keep_audio=np.zeros(b), keep_context=np.zeros(b))
        raise ValueError(f"unknown branch {kind!r}")

    def window(self, start: int, stop: int, patch_tokens_per_frame: int,
               audio: np.ndarray | None = None) -> "ConditionSet":
        """Restrict per-frame conditions to frames ``[start, stop)``."""
        mask = None
        if self.mask_tokens is not None:
            n = patch_tokens_per_frame
            mask = self.mask_tokens[:, start * n:stop * n]
        if audio is None and self.audio is not None:
            audio = self.audio[:, start:stop]
        slot = self.portrait_slot if start == 0 else np.zeros(self.batch)
        return replace(self, audio=audio, mask_tokens=mask, portrait_slot=slot)


def stack_conditions(items: list[ConditionSet]) -> ConditionSet:
    def cat(name):
        vals = [getattr(c, name) for c in items]
        if any(v is None for v in vals):
            return None
        return np.concatenate(vals, axis=0)

    return ConditionSet(
        text=cat("text"), portrait=cat("portrait"), portrait_latent=cat("portrait_latent"),
        audio=cat("audio"), mask_tokens=cat("mask_tokens"), keep_context=cat("keep_context"),
        keep_audio=cat("keep_audio"), portrait_slot=cat("portrait_slot"),
    )


__all__ = [
    "ConditionSet", "audio_features", "encode_audio", "encode_audio_features", "encode_portrait",
    "encode_text", "init_audio_params", "init_portrait_params", "mask_to_tokens", "stack_conditions",
]

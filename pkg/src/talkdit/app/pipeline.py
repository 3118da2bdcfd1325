"""Glue between the run configuration and the training / sampling code."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..conditioners import ConditionSet, encode_text, mask_to_tokens
from ..dit import DiTConfig
from ..distill import NfeCounter
from ..flowtrain import encode_sample
from ..numerics.rng import Rng
from ..windower import aligned_features, denoise_full, plan_windows
from ..world import Sample, audio_envelope, decode_latent, encode_latent, make_dataset, make_face_mask, to_pixels
from .config import RunConfig
from .metrics import EvalReport, identity_error, smoothness, sync_proxy


def datasets(config: RunConfig) -> tuple[list[Sample], list[Sample]]:
    w = config["world"]
    shape = (w["height"], w["width"], w["frames"])
    train = make_dataset(config.seed, w["train_count"], *shape, split="train")
    test = make_dataset(config.seed, w["test_count"], *shape, split="test")
    return train, test


def encoded_train(config: RunConfig):
    train, _ = datasets(config)
    cfg = config.model_config()
    return [encode_sample(s, cfg) for s in train]


def driving_track(sample: Sample, frames: int, rng: Rng) -> np.ndarray:
    """The scene's own envelope when lengths agree, otherwise a fresh one of ``frames`` samples."""
    if frames == sample.frames:
        return sample.audio
    return audio_envelope(rng, frames)


def scene_conditions(samples: list[Sample], tracks: list[np.ndarray], cfg: DiTConfig) -> ConditionSet:
    """Full-sequence conditions for a batch of scenes driven by ``tracks``."""
    frames = len(tracks[0])
    if any(len(t) != frames for t in tracks):
        raise ValueError("all driving tracks must have the same length")
    portraits = np.stack([s.video[0, 0] for s in samples])
    return ConditionSet(
        text=np.stack([encode_text(s.prompt, cfg.d_model) for s in samples]),
        portrait=portraits,
        portrait_latent=np.stack([encode_latent(s.video[:1])[0] for s in samples]),
        audio=np.stack([aligned_features(t, frames) for t in tracks]),
        mask_tokens=np.stack([mask_to_tokens(make_face_mask(s.spec), cfg.patch, frames) for s in samples]),
    )


@dataclass
class SampleResult:
    latent: np.ndarray      # (B, T, C, H, W)
    pixels: np.ndarray      # (B, T, 1, H_px, W_px), clipped to [0, 1]
    nfe: int
    windows: int


def generate(params, config: RunConfig, samples: list[Sample], tracks: list[np.ndarray], mode: str,
             rng: Rng, blend: bool | None = None) -> SampleResult:
    cfg = config.model_config()
    s = config["sampler"]
    frames = len(tracks[0])
    conds = scene_conditions(samples, tracks, cfg)
    plan = plan_windows(frames, s["window"], s["overlap"])
    counter = NfeCounter()
    blend = s["blend"] if blend is None else blend
    z = denoise_full(params, frames, conds, mode, plan, rng, cfg,
                     config.guidance_config(), counter, blend=blend)
    pixels = np.stack([to_pixels(decode_latent(zi)) for zi in z])
    return SampleResult(z, pixels, counter["sampler"], len(plan.starts))


def evaluate(params, config: RunConfig, mode: str, test: list[Sample] | None = None) -> EvalReport:
    """Sample every held-out scene in one batch and score it."""
    if test is None:
        _, test = datasets(config)
    frames = config["eval"]["frames"]
    root = Rng(config.seed, "eval")
    tracks = [driving_track(smp, frames, root.child(f"audio/{i}")) for i, smp in enumerate(test)]
    result = generate(params, config, test, tracks, mode, root.child("sample"))
    s = config["sampler"]
    plan = plan_windows(frames, s["window"], s["overlap"])
    report = EvalReport()
    for i, smp in enumerate(test):
        video = result.pixels[i]
        report.add(i, sync_proxy(video, smp.spec, tracks[i]),
                   identity_error(video, smp.video[0, 0], smp.spec), smoothness(video, plan))
    return report

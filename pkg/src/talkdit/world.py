"""Synthetic talking scenes and the exact pixel <-> latent transform.

A scene is a grayscale canvas with an identity-seeded background texture, a
bright secondary object drifting one latent pixel per frame, and a face whose
mouth brightness follows the audio envelope: ``mouth_mean[t] = 0.5 + 0.4 * a[t]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics.rng import Rng, integers, uniform

MOTIONS = ("none", "left", "right", "up", "down")
_DIRECTIONS = {"none": (0, 0), "left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}

FACE_LEVEL = 0.75
OBJECT_LEVEL = 1.0
MOUTH_BASE, MOUTH_GAIN = 0.5, 0.4
LATENT_STRIDE = 2  # pixels per latent cell along each axis


@dataclass(frozen=True)
class Rect:
    top: int
    left: int
    height: int
    width: int

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    def contains(self, other: "Rect") -> bool:
        return (self.top <= other.top and self.left <= other.left
                and other.bottom <= self.bottom and other.right <= self.right)

    def intersects(self, other: "Rect") -> bool:
        return (self.top < other.bottom and other.top < self.bottom
                and self.left < other.right and other.left < self.right)

    def shifted(self, dy: int, dx: int) -> "Rect":
        return Rect(self.top + dy, self.left + dx, self.height, self.width)

    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.bottom), slice(self.left, self.right)


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    face: Rect
    mouth: Rect
    motion: str
    obj: Rect
    identity: int

    def __post_init__(self):
        canvas = Rect(0, 0, self.height, self.width)
        if self.height < 1 or self.width < 1:
            raise ValueError("canvas must be non-empty")
        if min(self.face.height, self.face.width, self.mouth.height, self.mouth.width) < 1:
            raise ValueError("face and mouth must be non-empty")
        if not canvas.contains(self.face):
            raise ValueError("face must lie inside the canvas")
        if not self.face.contains(self.mouth):
            raise ValueError("mouth must lie inside the face")
        if self.motion not in MOTIONS:
            raise ValueError(f"unknown motion class {self.motion!r}")
        if not canvas.contains(self.obj):
            raise ValueError("object must start inside the canvas")

    def object_at(self, t: int) -> Rect:
        dy, dx = _DIRECTIONS[self.motion]
        return self.obj.shifted(dy * LATENT_STRIDE * t, dx * LATENT_STRIDE * t)

    def trajectory_fits(self, frames: int) -> bool:
        canvas = Rect(0, 0, self.height, self.width)
        return all(canvas.contains(self.object_at(t)) for t in (0, frames - 1))

    @property
    def prompt(self) -> str:
        return f"portrait id{self.identity} object {self.motion}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for key in ("face", "mouth", "obj"):
            d[key] = Rect(**d[key])
        return cls(**d)


def background(spec: SceneSpec) -> np.ndarray:
    """Fixed texture determined by the identity seed alone."""
    rng = Rng(spec.identity, "world/background")
    level = uniform(rng, None, 0.2, 0.4)
    amps = uniform(rng, 2, 0.04, 0.08)
    freqs = uniform(rng, (2, 2), 0.5, 2.0)
    phases = uniform(rng, (2, 2), 0.0, 2 * math.pi)
    y = np.arange(spec.height)[:, None] / spec.height
    x = np.arange(spec.width)[None, :] / spec.width
    tex = np.full((spec.height, spec.width), level)
    for k in range(2):
        tex = tex + amps[k] * np.cos(2 * math.pi * freqs[k, 0] * y + phases[k, 0]) \
            * np.cos(2 * math.pi * freqs[k, 1] * x + phases[k, 1])
    return tex


def audio_envelope(rng: Rng, frames: int) -> np.ndarray:
    """Sum of three random sinusoids rescaled so that max |a_t| == 1."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    freqs = uniform(rng, 3, 0.04, 0.25)
    phases = uniform(rng, 3, 0.0, 2 * math.pi)
    amps = uniform(rng, 3, 0.5, 1.0)
    t = np.arange(frames)[:, None]
    a = (amps * np.sin(2 * math.pi * freqs * t + phases)).sum(axis=1)
    peak = np.abs(a).max()
    if peak > 0:
        a = a / peak
    return np.clip(a, -1.0, 1.0)


def render(spec: SceneSpec, audio: np.ndarray) -> np.ndarray:
    """Draw the scene for the given envelope; returns ``(T, 1, H, W)`` in [0, 1]."""
    frames = len(audio)
    if not spec.trajectory_fits(frames):
        raise ValueError(f"object trajectory leaves the canvas within {frames} frames")
    bg = background(spec)
    video = np.empty((frames, 1, spec.height, spec.width))
    fy, fx = spec.face.slices()
    my, mx = spec.mouth.slices()
    for t in range(frames):
        img = bg.copy()
        oy, ox = spec.object_at(t).slices()
        img[oy, ox] = OBJECT_LEVEL
        img[fy, fx] = FACE_LEVEL
        img[my, mx] = MOUTH_BASE + MOUTH_GAIN * audio[t]
        video[t, 0] = img
    return video


def generate_scene(spec: SceneSpec, rng: Rng, frames: int) -> tuple[np.ndarray, np.ndarray, str]:
    if frames < 2:
        raise ValueError("a scene needs at least 2 frames")
    if not spec.trajectory_fits(frames):
        raise ValueError(f"object trajectory leaves the canvas within {frames} frames")
    audio = audio_envelope(rng.child("audio"), frames)
    return render(spec, audio), audio, spec.prompt


def mouth_series(video: np.ndarray, spec: SceneSpec) -> np.ndarray:
    my, mx = spec.mouth.slices()
    return video[:, 0, my, mx].mean(axis=(1, 2))


# latent space ---------------------------------------------------------------

def encode_latent(video: np.ndarray) -> np.ndarray:
    """2x2 space-to-depth: ``(T, 1, H, W) -> (T, 4, H/2, W/2)``.

    Channel ``2*a + b`` holds sub-pixel ``(a, b)`` of each 2x2 patch.
    """
    video = np.asarray(video, dtype=np.float64)
    t, c, h, w = video.shape
    if c != 1:
        raise ValueError("pixel videos are single-channel")
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even, got {h}x{w}")
    z = video.reshape(t, h // 2, 2, w // 2, 2).transpose(0, 2, 4, 1, 3)
    return np.ascontiguousarray(z.reshape(t, 4, h // 2, w // 2))


def decode_latent(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    t, c, h, w = z.shape
    if c != 4:
        raise ValueError("latents carry 4 channels")
    v = z.reshape(t, 2, 2, h, w).transpose(0, 3, 1, 4, 2)
    return np.ascontiguousarray(v.reshape(t, 1, 2 * h, 2 * w))


def make_face_mask(spec: SceneSpec) -> np.ndarray:
    """Latent-resolution mask: a cell is 1 if its 2x2 pixel patch touches the face.

    The face is static, so the union over frames is the face rectangle itself.
    """
    h, w = spec.height // LATENT_STRIDE, spec.width // LATENT_STRIDE
    mask = np.zeros((h, w))
    r0, r1 = spec.face.top // 2, (spec.face.bottom - 1) // 2
    c0, c1 = spec.face.left // 2, (spec.face.right - 1) // 2
    mask[r0:r1 + 1, c0:c1 + 1] = 1.0
    return mask


# PGM frames -----------------------------------------------------------------

def write_ppm(frame: np.ndarray) -> bytes:
    """Binary P5 grayscale image, maxval 255, round half up."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ValueError("write_ppm expects a single 2-D frame")
    if not np.all(np.isfinite(frame)) or frame.min() < 0.0 or frame.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    h, w = frame.shape
    body = np.floor(frame * 255.0 + 0.5).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + body.tobytes()


def read_ppm(data: bytes) -> np.ndarray:
    parts = data.split(maxsplit=4)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError("not a binary PGM (P5) image")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    # exactly one whitespace byte separates maxval from the raster
    header_len = len(data) - h * w
    raster = np.frombuffer(data[header_len:], dtype=np.uint8)
    if raster.size != h * w:
        raise ValueError("PGM raster length mismatch")
    return raster.reshape(h, w).astype(np.float64) / maxval


def to_pixels(video: np.ndarray) -> np.ndarray:
    """Clamp a decoded model output into the displayable range."""
    return np.clip(video, 0.0, 1.0)


# datasets -------------------------------------------------------------------

FACE_SIZE = 6
OBJECT_SIZE = 2


def random_spec(rng: Rng, height: int, width: int, frames: int) -> SceneSpec:
    """Draw a valid scene whose object path stays on canvas and clear of the face."""
    for _ in range(1000):
        ftop = 2 * int(integers(rng, 0, (height - FACE_SIZE) // 2 + 1))
        fleft = 2 * int(integers(rng, 0, (width - FACE_SIZE) // 2 + 1))
        face = Rect(ftop, fleft, FACE_SIZE, FACE_SIZE)
        mouth = Rect(ftop + 4, fleft + 2, 2, 2)
        motion = MOTIONS[int(integers(rng, 0, len(MOTIONS)))]
        otop = 2 * int(integers(rng, 0, (height - OBJECT_SIZE) // 2 + 1))
        oleft = 2 * int(integers(rng, 0, (width - OBJECT_SIZE) // 2 + 1))
        identity = int(integers(rng, 0, 1 << 31))
        spec = SceneSpec(height, width, face, mouth, motion,
                         Rect(otop, oleft, OBJECT_SIZE, OBJECT_SIZE), identity)
        if not spec.trajectory_fits(frames):
            continue
        if any(spec.object_at(t).intersects(face) for t in range(frames)):
            continue
        return spec
    raise RuntimeError("could not place a valid scene; canvas too small for the frame count")


@dataclass
class Sample:
    spec: SceneSpec
    seed: int
    frames: int
    video: np.ndarray = field(repr=False)
    audio: np.ndarray = field(repr=False)

    @property
    def prompt(self) -> str:
        return self.spec.prompt

    def manifest_row(self) -> dict:
        return {"scene": self.spec.to_dict(), "seed": self.seed, "frames": self.frames,
                "prompt": self.prompt, "audio": [float(a) for a in self.audio]}


def make_sample(seed: int, index: int, split: str, height: int, width: int, frames: int) -> Sample:
    rng = Rng(seed, f"world/{split}/{index}")
    spec = random_spec(rng.child("spec"), height, width, frames)
    video, audio, _ = generate_scene(spec, rng, frames)
    return Sample(spec, seed, frames, video, audio)


def make_dataset(seed: int, count: int, height: int = 16, width: int = 16,
                 frames: int = 8, split: str = "train") -> list[Sample]:
    return [make_sample(seed, i, split, height, width, frames) for i in range(count)]


def write_dataset(samples: list[Sample], out: Path) -> Path:
    """Manifest JSON plus one PGM per frame under ``frames/<index>/``."""
    out = Path(out)
    rows = []
    for i, s in enumerate(samples):
        d = out / "frames" / f"{i:04d}"
        d.mkdir(parents=True, exist_ok=True)
        for t in range(s.frames):
            (d / f"{t:03d}.pgm").write_bytes(write_ppm(s.video[t, 0]))
        rows.append(s.manifest_row())
    path = out / "manifest.json"
    path.write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path: Path) -> list[Sample]:
    rows = json.loads(Path(path).read_text())
    samples = []
    for row in rows:
        spec = SceneSpec.from_dict(row["scene"])
        audio = np.asarray(row["audio"], dtype=np.float64)
        samples.append(Sample(spec, row["seed"], row["frames"], render(spec, audio), audio))
    return samples

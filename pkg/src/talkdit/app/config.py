"""Run configuration: a JSON document with fixed sections and documented defaults."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import fields
from pathlib import Path

from ..dit import DiTConfig
from ..guidance import GuidanceConfig


class ConfigError(ValueError):
    pass


def _dataclass_defaults(cls, skip=()) -> dict:
    return {f.name: f.default for f in fields(cls) if f.name not in skip}


DEFAULTS: dict = {
    "seed": 0,
    # synthetic scenes
    "world": {
        "train_count": 256,
        "test_count": 16,
        "height": 16,
        "width": 16,
        "frames": 8,
    },
    # denoiser architecture (audio blocks are added by stage 2)
    "model": _dataclass_defaults(DiTConfig, skip=("audio_enabled",)),
    "train": {
        "stage1_steps": 2000,
        "stage2_steps": 1500,
        # stage 2 fine-tunes a trained model, so it takes smaller steps
        "stage1_lr": 1e-3,
        "stage2_lr": 1e-4,
        "weight_decay": 0.01,
        "batch_size": 4,
        "lambda_adap": 10.0,
        "use_face_mask": True,
        "drop_uncond": 0.1,
        "drop_audio": 0.1,
        "log_every": 10,
    },
    "guidance": _dataclass_defaults(GuidanceConfig),
    "distill": {
        "steps": 200,
        "horizon": 100,
        "rank": 4,
        "alpha": 8.0,
        "ratio": 1,
        "batch_size": 2,
        "lr": 1e-4,
        "fake_lr": 1e-3,
        "sigma_low": 0.02,
        "sigma_high": 0.98,
        "log_every": 10,
        "schedule": [1.0, 0.75, 0.5, 0.25],
    },
    # sliding-window sampling
    "sampler": {
        "window": 8,
        "overlap": 3,
        "frames": 20,
        "blend": True,
        "scene": 0,
    },
    "eval": {
        "frames": 8,
        "mode": "teacher",
    },
}

SECTIONS = tuple(k for k in DEFAULTS if isinstance(DEFAULTS[k], dict))


def _merge(base: dict, patch: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in patch.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
            continue
        default = base[key]
        if isinstance(default, bool) != isinstance(value, bool):
            raise ConfigError(f"config key {where!r} has the wrong type")
        if isinstance(default, (int, float)) and not isinstance(value, (int, float)):
            raise ConfigError(f"config key {where!r} must be a number")
        if isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
            if not value.is_integer():
                raise ConfigError(f"config key {where!r} must be an integer")
            value = int(value)
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        out[key] = value
    return out


class RunConfig:
    """Validated configuration; ``data`` is the full nested dict."""

    def __init__(self, data: dict | None = None):
        self.data = _merge(DEFAULTS, data or {})
        self._validate()

    def _validate(self):
        try:
            self.model_config()
            self.guidance_config()
            self.distill_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        s = self.data["sampler"]
        if s["window"] < 3 or not 2 <= s["overlap"] < s["window"]:
            raise ConfigError("sampler needs window >= 3 and 2 <= overlap < window")
        if self.data["eval"]["mode"] not in ("teacher", "distilled"):
            raise ConfigError("eval.mode must be teacher or distilled")
        w = self.data["world"]
        if w["height"] != 2 * self.data["model"]["latent_h"] or w["width"] != 2 * self.data["model"]["latent_w"]:
            raise ConfigError("world canvas must be twice the latent size")

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def with_seed(self, seed: int) -> "RunConfig":
        d = copy.deepcopy(self.data)
        d["seed"] = seed
        return RunConfig(d)

    def model_config(self) -> DiTConfig:
        return DiTConfig(**self.data["model"])

    def guidance_config(self) -> GuidanceConfig:
        return GuidanceConfig(**self.data["guidance"])

    def distill_config(self):
        from ..distill import DistillConfig, GeneratorSchedule

        d = dict(self.data["distill"])
        schedule = GeneratorSchedule(tuple(d.pop("schedule")))
        return DistillConfig(**d, seed=self.seed, guidance=self.guidance_config(), schedule=schedule)

    def train_config(self, stage: int, ablation: bool = False):
        from ..flowtrain import TrainConfig

        t = self.data["train"]
        return TrainConfig(
            stage=stage, steps=t[f"stage{stage}_steps"], lr=t[f"stage{stage}_lr"],
            weight_decay=t["weight_decay"], batch_size=t["batch_size"], lambda_adap=t["lambda_adap"],
            use_face_mask=t["use_face_mask"],
            drop_uncond=t["drop_uncond"], drop_audio=t["drop_audio"], log_every=t["log_every"],
            seed=self.seed,
        )

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.data == other.data


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig(raw)

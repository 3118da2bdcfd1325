"""Few-step generator distillation by distribution matching.

The generator (initialised from the teacher) is trained on a blend of the
plain flow-matching loss on real data and a score-distillation surrogate
whose gradient is ``(x_fake - x_real) * dG/dphi``. ``x_real`` comes from the
frozen teacher under guidance; ``x_fake`` from the teacher plus a LoRA
adapter that keeps tracking the generator's own output distribution.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .conditioners import ConditionSet
from .dit import DiTConfig, forward
from .flowtrain import EncodedSample, base_loss, batch_indices, collate, interpolate, sample_noise_point
from .guidance import FOLD_BRANCHES, GuidanceConfig, combine, sample_scales, select_fold
from .numerics import NumericalError, OptimizerState, Tensor, adamw_step, as_tensor, forward_backward
from .numerics.rng import Rng, gaussian, uniform

LORA_SUFFIXES = (".wq", ".wk", ".wv", ".wo", ".w1", ".w2")
LORA_BLOCKS = ("dual.", "single.", "audio.")

# (z, sigma, conds) -> velocity, as a Tensor or array
VelocityFn = Callable[[object, np.ndarray, ConditionSet], object]


class NfeCounter:
    """Denoiser forward passes, tallied by role."""

    ROLES = ("generator", "real", "fake", "sampler")

    def __init__(self):
        self._counts = {r: 0 for r in self.ROLES}

    def add(self, role: str, n: int = 1) -> None:
        if role not in self._counts:
            raise ValueError(f"unknown role {role!r}")
        if n < 0:
            raise ValueError("the counter only moves forward")
        self._counts[role] += n

    def __getitem__(self, role: str) -> int:
        return self._counts[role]

    @property
    def total(self) -> int:
        return sum(self._counts.values())

    def as_dict(self) -> dict[str, int]:
        return dict(self._counts)


@dataclass(frozen=True)
class GeneratorSchedule:
    levels: tuple[float, ...] = (1.0, 0.75, 0.5, 0.25)

    def __post_init__(self):
        lv = tuple(float(s) for s in self.levels)
        if not lv or lv[0] != 1.0:
            raise ValueError("generator schedule must start at 1.0")
        if any(b >= a for a, b in zip(lv, lv[1:])) or lv[-1] <= 0.0:
            raise ValueError("generator schedule must be strictly decreasing and above 0")
        object.__setattr__(self, "levels", lv)

    @property
    def sigmas(self) -> np.ndarray:
        return np.array(self.levels + (0.0,))

    @property
    def nfe(self) -> int:
        return len(self.levels)


# LoRA -----------------------------------------------------------------------

@dataclass
class LoraAdapter:
    """Low-rank deltas ``(alpha / r) * B @ A`` on the targeted weight matrices.

    Weights in this code base act as ``x @ W`` with ``W`` of shape
    ``(in, out)``, so the delta is added as its transpose ``A.T @ B.T``.
    """

    targets: tuple[str, ...]
    rank: int = 4
    alpha: float = 8.0
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def lora_targets(params: Mapping[str, np.ndarray]) -> tuple[str, ...]:
    return tuple(sorted(n for n in params if n.startswith(LORA_BLOCKS) and n.endswith(LORA_SUFFIXES)))


def init_lora(params: Mapping[str, np.ndarray], rng: Rng, rank: int = 4, alpha: float = 8.0,
              targets=None) -> LoraAdapter:
    if rank < 1:
        raise ValueError("LoRA rank must be >= 1")
    targets = tuple(targets) if targets is not None else lora_targets(params)
    tensors = {}
    for name in targets:
        if name not in params:
            raise KeyError(f"LoRA target {name!r} not in base parameters")
        fan_in, fan_out = params[name].shape
        tensors[f"lora.{name}.A"] = gaussian(rng.child(name), (rank, fan_in)) / np.sqrt(fan_in)
        tensors[f"lora.{name}.B"] = np.zeros((fan_out, rank))
    return LoraAdapter(targets, rank, alpha, tensors)


def merge_lora(base: Mapping[str, np.ndarray], adapter: LoraAdapter, tensors=None) -> dict:
    """Base parameters with every target replaced by ``W + delta``.

    ``tensors`` overrides ``adapter.tensors`` (pass Tensors to differentiate
    through the adapter). Untargeted entries are the base arrays themselves.
    """
    tensors = adapter.tensors if tensors is None else tensors
    merged = dict(base)
    for name in adapter.targets:
        if name not in base:
            raise KeyError(f"LoRA target {name!r} not in base parameters")
        a = as_tensor(tensors[f"lora.{name}.A"])
        b = as_tensor(tensors[f"lora.{name}.B"])
        if a.shape[1] != base[name].shape[0] or b.shape[0] != base[name].shape[1]:
            raise ValueError(f"LoRA factors do not match {name!r}")
        merged[name] = (a.transpose(1, 0) @ b.transpose(1, 0)) * adapter.scale + base[name]
    return merged


def lora_forward(base: Mapping[str, np.ndarray], adapter: LoraAdapter, z_t, sigma, conds: ConditionSet,
                 cfg: DiTConfig, tensors=None) -> Tensor:
    return forward(merge_lora(base, adapter, tensors), z_t, sigma, conds, cfg)


def model_fn(params: Mapping, cfg: DiTConfig) -> VelocityFn:
    def velocity(z, sigma, conds):
        return forward(params, z, sigma, conds, cfg)
    return velocity


def params_hash(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8", order="C")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# estimators -------------------------------------------------------------------

def few_step_generate(velocity: VelocityFn, eps, conds: ConditionSet,
                      schedule: GeneratorSchedule | None = None,
                      counter: NfeCounter | None = None) -> Tensor:
    """Euler-integrate from pure noise ``eps`` at sigma = 1 down to sigma = 0.

    Stays on the tape, so the result can be differentiated w.r.t. the
    generator parameters closed over by ``velocity``.
    """
    schedule = schedule or GeneratorSchedule()
    sig = schedule.sigmas
    z = as_tensor(eps)
    b = z.shape[0]
    for k in range(len(sig) - 1):
        if counter is not None:
            counter.add("generator")
        u = as_tensor(velocity(z, np.full(b, sig[k]), conds))
        z = z + u * float(sig[k + 1] - sig[k])
    return z


def _velocity_array(velocity: VelocityFn, z, sigma, conds) -> np.ndarray:
    out = velocity(z, sigma, conds)
    return out.data if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)


def real_estimate(velocity: VelocityFn, z: np.ndarray, sigma: float, conds: ConditionSet,
                  guidance: GuidanceConfig, rng: Rng, counter: NfeCounter | None = None) -> np.ndarray:
    """Guided teacher estimate of the clean latent, ``z - sigma * v_guided``.

    Each branch is its own forward pass over the same batch, so with zero
    guidance scales the result is bitwise ``z - sigma * v_full``.
    """
    if not 0.0 < sigma <= 1.0:
        raise ValueError("sigma must lie in (0, 1]")
    z = np.asarray(z, dtype=np.float64)
    sig = np.full(z.shape[0], sigma)
    fold = select_fold(sigma, guidance.threshold)
    w_audio, w_text = sample_scales(guidance, rng)
    outputs = {}
    for kind in FOLD_BRANCHES[fold]:
        if counter is not None:
            counter.add("real")
        outputs[kind] = _velocity_array(velocity, z, sig, conds.branch(kind))
    v = combine(fold, outputs, w_audio, w_text, guidance.variant)
    return z - sigma * v


def fake_estimate(velocity: VelocityFn, z: np.ndarray, sigma: float, conds: ConditionSet,
                  counter: NfeCounter | None = None) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if counter is not None:
        counter.add("fake")
    return z - sigma * _velocity_array(velocity, z, np.full(z.shape[0], sigma), conds)


def sds_surrogate(x_hat, x_real, x_fake) -> Tensor:
    """``mean(stop_grad(x_fake - x_real) * x_hat)``."""
    x_hat = as_tensor(x_hat)
    x_real = np.asarray(x_real.data if isinstance(x_real, Tensor) else x_real, dtype=np.float64)
    x_fake = np.asarray(x_fake.data if isinstance(x_fake, Tensor) else x_fake, dtype=np.float64)
    if x_hat.shape != x_real.shape or x_hat.shape != x_fake.shape:
        raise ValueError(f"shape mismatch: {x_hat.shape}, {x_real.shape}, {x_fake.shape}")
    return (x_hat * (x_fake - x_real)).mean()


def fake_loss(velocity: VelocityFn, x_hat, eps, sigma, conds: ConditionSet,
              counter: NfeCounter | None = None) -> Tensor:
    """Flow-matching loss of the fake estimator on generated samples."""
    if isinstance(x_hat, Tensor):
        x_hat = x_hat.data
    x_hat = np.asarray(x_hat, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x_hat.shape[0],))
    z = interpolate(x_hat, eps, sigma)
    if counter is not None:
        counter.add("fake")
    return base_loss(velocity(z, sigma, conds), eps - x_hat)


def curriculum_weight(step: int, horizon: int) -> float:
    """Weight on the real-data loss: 1 at step 0, linearly down to 0 at ``horizon``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return max(0.0, 1.0 - step / horizon)


# training -----------------------------------------------------------------------

@dataclass
class DistillConfig:
    horizon: int = 100
    rank: int = 4
    alpha: float = 8.0
    ratio: int = 1
    steps: int = 200
    batch_size: int = 2
    lr: float = 1e-4
    fake_lr: float = 1e-3
    sigma_low: float = 0.02
    sigma_high: float = 0.98
    seed: int = 0
    log_every: int = 10
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    schedule: GeneratorSchedule = field(default_factory=GeneratorSchedule)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.ratio < 1:
            raise ValueError("fake update ratio must be >= 1")
        if not 0.0 < self.sigma_low < self.sigma_high <= 1.0:
            raise ValueError("need 0 < sigma_low < sigma_high <= 1")


@dataclass
class DistillState:
    generator: dict[str, np.ndarray]
    adapter: LoraAdapter
    gen_opt: OptimizerState
    fake_opt: OptimizerState
    step: int = 0


def init_distill(teacher: Mapping[str, np.ndarray], cfg: DistillConfig) -> DistillState:
    adapter = init_lora(teacher, Rng(cfg.seed, "distill/lora"), cfg.rank, cfg.alpha)
    return DistillState(
        generator={k: np.array(v, copy=True) for k, v in teacher.items()},
        adapter=adapter,
        gen_opt=OptimizerState(lr=cfg.lr),
        fake_opt=OptimizerState(lr=cfg.fake_lr),
    )


def _full_conditions(batch: list[EncodedSample]) -> tuple[np.ndarray, ConditionSet]:
    x, _, conds = collate(batch)
    return x, conds


def distill_step(state: DistillState, teacher: Mapping[str, np.ndarray], batch: list[EncodedSample],
                 cfg: DistillConfig, model_cfg: DiTConfig, rng: Rng, counter: NfeCounter | None = None):
    """One generator update followed by ``cfg.ratio`` fake-estimator updates.

    Returns ``(state, metrics)``; the teacher is hashed before and after and
    any change raises.
    """
    counter = counter if counter is not None else NfeCounter()
    before = counter.as_dict()
    teacher_digest = params_hash(teacher)
    alpha = curriculum_weight(state.step, cfg.horizon)
    x_real_data, conds = _full_conditions(batch)
    b = x_real_data.shape[0]
    eps = gaussian(rng.child("gen-noise"), x_real_data.shape)
    sigma = float(uniform(rng.child("sigma"), low=cfg.sigma_low, high=cfg.sigma_high))
    fm_point = sample_noise_point(x_real_data, rng.child("base-noise"))
    diff_eps = gaussian(rng.child("diff-noise"), x_real_data.shape)
    teacher_v = model_fn(teacher, model_cfg)
    adapter = state.adapter

    def fake_v(z, s, c):
        return lora_forward(teacher, adapter, z, s, c, model_cfg)

    terms = {}

    def objective(P):
        x_hat = few_step_generate(model_fn(P, model_cfg), eps, conds, cfg.schedule, counter)
        z = interpolate(x_hat.data, diff_eps, np.full(b, sigma))
        x_real = real_estimate(teacher_v, z, sigma, conds, cfg.guidance, rng.child("cfg"), counter)
        x_fake = fake_estimate(fake_v, z, sigma, conds, counter)
        sds = sds_surrogate(x_hat, x_real, x_fake)
        counter.add("generator")
        base = base_loss(forward(P, fm_point.z, fm_point.sigma, conds, model_cfg), fm_point.target)
        terms["base_loss"], terms["sds_loss"] = float(base.data), float(sds.data)
        terms["x_hat"] = x_hat.data
        return base * alpha + sds * (1.0 - alpha)

    _, grads = forward_backward(objective, state.generator)
    generator, gen_opt = adamw_step(state.generator, grads, state.gen_opt)

    x_hat = terms["x_hat"]
    tensors, fake_opt = adapter.tensors, state.fake_opt
    fake_values = []
    for j in range(cfg.ratio):
        frng = rng.child(f"fake/{j}")
        f_eps = gaussian(frng.child("noise"), x_hat.shape)
        f_sigma = uniform(frng.child("sigma"), b)

        def fake_objective(L):
            return fake_loss(lambda z, s, c: lora_forward(teacher, adapter, z, s, c, model_cfg, L),
                             x_hat, f_eps, f_sigma, conds, counter)

        value, lgrads = forward_backward(fake_objective, tensors)
        tensors, fake_opt = adamw_step(tensors, lgrads, fake_opt)
        fake_values.append(value)

    if params_hash(teacher) != teacher_digest:
        raise RuntimeError("teacher parameters changed during a distillation step")
    new_adapter = LoraAdapter(adapter.targets, adapter.rank, adapter.alpha, tensors)
    after = counter.as_dict()
    metrics = {
        "alpha": alpha,
        "base_loss": terms["base_loss"],
        "sds_loss": terms["sds_loss"],
        "fake_loss": float(np.mean(fake_values)),
        "nfe_generator": after["generator"] - before["generator"],
        "nfe_real": after["real"] - before["real"],
        "nfe_fake": after["fake"] - before["fake"],
    }
    if not all(np.isfinite(v) for v in metrics.values()):
        raise NumericalError("non-finite distillation metrics")
    return DistillState(generator, new_adapter, gen_opt, fake_opt, state.step + 1), metrics


DISTILL_FIELDS = ["step", "alpha", "base_loss", "sds_loss", "fake_loss",
                  "nfe_generator", "nfe_real", "nfe_fake", "wall_ms"]


def run_distill(teacher: Mapping[str, np.ndarray], data: list[EncodedSample], cfg: DistillConfig,
                model_cfg: DiTConfig, state: DistillState | None = None,
                on_metrics: Callable[[dict], None] | None = None):
    """Run ``cfg.steps`` distillation steps; returns ``(state, rows)``."""
    state = state or init_distill(teacher, cfg)
    root = Rng(cfg.seed, "distill")
    rows = []
    start = time.perf_counter()
    for _ in range(cfg.steps):
        step = state.step
        srng = root.child(step)
        batch = [data[i] for i in batch_indices(srng.child("batch"), len(data), cfg.batch_size)]
        state, m = distill_step(state, teacher, batch, cfg, model_cfg, srng)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            row = {"step": step, **m, "wall_ms": round((time.perf_counter() - start) * 1000.0, 1)}
            rows.append(row)
            if on_metrics is not None:
                on_metrics(row)
    return state, rows

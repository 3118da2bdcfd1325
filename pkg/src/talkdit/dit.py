"""Dual-stream -> single-stream diffusion transformer.

Video tokens come from 2D patches of every latent frame; context tokens are
the text embeddings followed by the portrait tokens. Both families attend
jointly in every block (full 3D attention). Dual blocks keep separate weights
per stream, single blocks share one set. Optional audio cross-attention
blocks sit after every dual block and after every second single block; each
one adds a face-masked residual computed frame by frame.

Parameters live in a flat ``{name: array}`` dict so that checkpoints, LoRA
targets and optimizer state can address them by name.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .conditioners import ConditionSet, encode_audio_features, encode_portrait, init_audio_params, \
    init_portrait_params
from .numerics import NumericalError, Tensor, as_tensor, concat, gelu, layer_norm, softmax
from .numerics.rng import Rng, gaussian


@dataclass(frozen=True)
class DiTConfig:
    d_model: int = 64
    heads: int = 4
    patch: int = 2
    dual_depth: int = 2
    single_depth: int = 4
    mlp_ratio: int = 2
    t_dim: int = 16
    latent_channels: int = 4
    latent_h: int = 8
    latent_w: int = 8
    portrait_patch: int = 4
    n_audio_tokens: int = 4
    audio_hidden: int = 32
    audio_enabled: bool = False
    rope_base: float = 100.0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if (self.d_model // self.heads) % 2:
            raise ValueError("head width must be even for rotary encoding")
        if self.dual_depth < 1 or self.single_depth < 1:
            raise ValueError("block depths must be >= 1")
        if self.latent_h % self.patch or self.latent_w % self.patch:
            raise ValueError("latent dims must be divisible by the patch size")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def tokens_per_frame(self) -> int:
        return (self.latent_h // self.patch) * (self.latent_w // self.patch)

    def audio_slots(self) -> list[str]:
        """Block boundaries that carry an audio cross-attention block."""
        slots = [f"dual.{i}" for i in range(self.dual_depth)]
        slots += [f"single.{i}" for i in range(1, self.single_depth, 2)]
        return slots

    def to_dict(self) -> dict:
        return asdict(self)


# tokens ---------------------------------------------------------------------

def _patchify(x, p: int) -> Tensor:
    """``(B, T, C, H, W) -> (B, T*(H/p)*(W/p), C*p*p)``; frame-major, row-major patches."""
    x = as_tensor(x)
    b, t, c, h, w = x.shape
    y = x.reshape(b, t, c, h // p, p, w // p, p).transpose(0, 1, 3, 5, 2, 4, 6)
    return y.reshape(b, t * (h // p) * (w // p), c * p * p)


def _unpatchify(tokens, t: int, c: int, h: int, w: int, p: int) -> Tensor:
    tokens = as_tensor(tokens)
    b = tokens.shape[0]
    y = tokens.reshape(b, t, h // p, w // p, c, p, p).transpose(0, 1, 4, 2, 5, 3, 6)
    return y.reshape(b, t, c, h, w)


def patchify(z: np.ndarray, p: int) -> np.ndarray:
    """Latent video ``(T, C, H, W)`` (or batched) to patch tokens."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 4
    if z.shape[-1] % p or z.shape[-2] % p:
        raise ValueError(f"latent {z.shape[-2]}x{z.shape[-1]} is not divisible by patch {p}")
    out = _patchify(z[None] if single else z, p).data
    return out[0] if single else out


def unpatchify(tokens: np.ndarray, frames: int, channels: int, h: int, w: int, p: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    single = tokens.ndim == 2
    out = _unpatchify(tokens[None] if single else tokens, frames, channels, h, w, p).data
    return out[0] if single else out


def i2v_condition(z_t: np.ndarray, portrait_latent: np.ndarray, slot: float = 1.0) -> np.ndarray:
    """Concatenate ``[z_t ; padded portrait ; temporal mask]`` along channels.

    ``z_t`` is ``(T, C, H, W)``; the portrait occupies frame 0 of the padded
    group and the temporal mask is one on frame 0 only.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    portrait_latent = np.asarray(portrait_latent, dtype=np.float64)
    if portrait_latent.shape != z_t.shape[1:]:
        raise ValueError(f"portrait latent {portrait_latent.shape} does not match frame {z_t.shape[1:]}")
    return np.concatenate([z_t, _cond_channels(portrait_latent[None], np.array([slot]),
                                               np.array([1.0]), z_t.shape[0])[0]], axis=1)


def _cond_channels(portrait_latent: np.ndarray, slot: np.ndarray, keep: np.ndarray, frames: int) -> np.ndarray:
    b, c, h, w = portrait_latent.shape
    out = np.zeros((b, frames, c + 1, h, w))
    out[:, 0, :c] = portrait_latent * (slot * keep)[:, None, None, None]
    out[:, 0, c] = slot[:, None, None]
    return out


# positions ------------------------------------------------------------------

def _rotate_matrix(dim: int) -> np.ndarray:
    """``x @ P`` maps each pair ``(x0, x1)`` to ``(-x1, x0)``."""
    P = np.zeros((dim, dim))
    for i in range(0, dim, 2):
        P[i + 1, i] = -1.0
        P[i, i + 1] = 1.0
    return P


def _axis_pairs(head_dim: int) -> tuple[int, int, int]:
    pairs = head_dim // 2
    spatial = pairs // 4
    return pairs - 2 * spatial, spatial, spatial


def rotary_tables(cfg: DiTConfig, frames: int, n_context: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables ``(N_context + N_video, head_dim)``.

    Context token ``i`` sits at ``(i, 0, 0)``; video token at ``(frame, row, col)``.
    """
    gh, gw = cfg.latent_h // cfg.patch, cfg.latent_w // cfg.patch
    pos = [(i, 0, 0) for i in range(n_context)]
    pos += [(t, r, c) for t in range(frames) for r in range(gh) for c in range(gw)]
    pos = np.asarray(pos, dtype=np.float64)
    angles = []
    for axis, n in enumerate(_axis_pairs(cfg.head_dim)):
        if n == 0:
            continue
        freqs = cfg.rope_base ** (-np.arange(n) / n)
        angles.append(pos[:, axis:axis + 1] * freqs[None, :])
    ang = np.repeat(np.concatenate(angles, axis=1), 2, axis=1)
    return np.cos(ang), np.sin(ang)


def timestep_embedding(sigma: np.ndarray, dim: int = 16, max_period: float = 10000.0) -> np.ndarray:
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = 1000.0 * sigma[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


# parameters -----------------------------------------------------------------

def _dense(rng: Rng, name: str, fan_in: int, fan_out: int) -> np.ndarray:
    return gaussian(rng.child(name), (fan_in, fan_out)) / math.sqrt(fan_in)


def _stream_params(rng: Rng, prefix: str, cfg: DiTConfig) -> dict[str, np.ndarray]:
    d, hid = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    out = {}
    for name in ("wq", "wk", "wv", "wo"):
        out[f"{prefix}.{name}"] = _dense(rng, f"{prefix}.{name}", d, d)
    out[f"{prefix}.w1"] = _dense(rng, f"{prefix}.w1", d, hid)
    out[f"{prefix}.b1"] = np.zeros(hid)
    out[f"{prefix}.w2"] = _dense(rng, f"{prefix}.w2", hid, d)
    out[f"{prefix}.b2"] = np.zeros(d)
    out[f"{prefix}.mod_w"] = np.zeros((cfg.t_dim, 6 * d))
    out[f"{prefix}.mod_b"] = np.zeros(6 * d)
    return out


def init_params(cfg: DiTConfig, rng: Rng) -> dict[str, np.ndarray]:
    """Fresh stage-1 weights (plus audio blocks if ``cfg.audio_enabled``)."""
    d, p, c = cfg.d_model, cfg.patch, cfg.latent_channels
    params: dict[str, np.ndarray] = {
        "t_embed.w1": _dense(rng, "t_embed.w1", cfg.t_dim, cfg.t_dim),
        "t_embed.b1": np.zeros(cfg.t_dim),
        "t_embed.w2": _dense(rng, "t_embed.w2", cfg.t_dim, cfg.t_dim),
        "t_embed.b2": np.zeros(cfg.t_dim),
        "patch_in.w": _dense(rng, "patch_in.w", c * p * p, d),
        "patch_in.b": np.zeros(d),
        # portrait channels + temporal mask start switched off
        "patch_in.w_cond": np.zeros(((c + 1) * p * p, d)),
        "ctx_in.w": _dense(rng, "ctx_in.w", d, d),
        "ctx_in.b": np.zeros(d),
        "final.mod_w": np.zeros((cfg.t_dim, 2 * d)),
        "final.mod_b": np.zeros(2 * d),
        "final.w": np.zeros((d, c * p * p)),
        "final.b": np.zeros(c * p * p),
    }
    params.update(init_portrait_params(rng, cfg.portrait_patch, d))
    for i in range(cfg.dual_depth):
        params.update(_stream_params(rng, f"dual.{i}.video", cfg))
        params.update(_stream_params(rng, f"dual.{i}.text", cfg))
    for i in range(cfg.single_depth):
        params.update(_stream_params(rng, f"single.{i}", cfg))
    if cfg.audio_enabled:
        params.update(_audio_params(cfg, rng))
    return params


def _audio_params(cfg: DiTConfig, rng: Rng) -> dict[str, np.ndarray]:
    d = cfg.d_model
    out = init_audio_params(rng.child("audio_enc"), cfg.n_audio_tokens, d, cfg.audio_hidden)
    for slot in cfg.audio_slots():
        pre = f"audio.{slot}"
        for name in ("wq", "wk", "wv"):
            out[f"{pre}.{name}"] = _dense(rng, f"{pre}.{name}", d, d)
        out[f"{pre}.wo"] = np.zeros((d, d))
    return out


def has_audio_blocks(params: Mapping) -> bool:
    return any(k.startswith("audio.") for k in params)


def insert_audio_blocks(params: Mapping[str, np.ndarray], cfg: DiTConfig, rng: Rng) -> dict[str, np.ndarray]:
    """Stage-2 weights: stage-1 weights copied, audio blocks added with zero output projections."""
    if has_audio_blocks(params):
        raise ValueError("audio blocks are already present")
    out = {k: np.array(v, copy=True) for k, v in params.items()}
    out.update(_audio_params(cfg, rng.child("audio_blocks")))
    return out


def count_params(params: Mapping) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))


# blocks ---------------------------------------------------------------------

def _heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge(x: Tensor) -> Tensor:
    b, h, n, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * hd)


def _rope(x: Tensor, cos: np.ndarray, sin: np.ndarray, rot: np.ndarray) -> Tensor:
    return x * cos + (x @ rot) * sin


def _attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    weights = softmax((q @ k.transpose(0, 1, 3, 2)) * scale, axis=-1)
    return weights @ v


def _modulation(P: Mapping, prefix: str, c: Tensor, n: int, d: int) -> list[Tensor]:
    mods = c @ P[f"{prefix}.mod_w"] + P[f"{prefix}.mod_b"]
    b = mods.shape[0]
    mods = mods.reshape(b, 1, n * d)
    return [mods[:, :, i * d:(i + 1) * d] for i in range(n)]


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return layer_norm(x) * (scale + 1.0) + shift


def _mlp(P: Mapping, prefix: str, x: Tensor) -> Tensor:
    return gelu(x @ P[f"{prefix}.w1"] + P[f"{prefix}.b1"]) @ P[f"{prefix}.w2"] + P[f"{prefix}.b2"]


def full_attention_3d(P: Mapping, prefixes: tuple[str, str], context: Tensor, video: Tensor,
                      c: Tensor, cfg: DiTConfig, rope: tuple) -> tuple[Tensor, Tensor]:
    """One transformer block with joint attention over context + video tokens.

    ``prefixes`` names the (context, video) weight sets; a dual block passes
    two different prefixes, a single block passes the same prefix twice.
    """
    d, heads = cfg.d_model, cfg.heads
    if context.shape[-1] != d or video.shape[-1] != d:
        raise ValueError("token width does not match d_model")
    n_ctx = context.shape[1]
    streams = (context, video)
    mods = [_modulation(P, pre, c, 6, d) for pre in prefixes]
    qs, ks, vs = [], [], []
    for x, pre, m in zip(streams, prefixes, mods):
        xm = _modulate(x, m[0], m[1])
        qs.append(_heads(xm @ P[f"{pre}.wq"], heads))
        ks.append(_heads(xm @ P[f"{pre}.wk"], heads))
        vs.append(_heads(xm @ P[f"{pre}.wv"], heads))
    cos, sin, rot = rope
    q = _rope(concat(qs, axis=2), cos, sin, rot)
    k = _rope(concat(ks, axis=2), cos, sin, rot)
    attn = _merge(_attend(q, k, concat(vs, axis=2)))
    parts = (attn[:, :n_ctx], attn[:, n_ctx:])
    out = []
    for x, a, pre, m in zip(streams, parts, prefixes, mods):
        x = x + m[2] * (a @ P[f"{pre}.wo"])
        x = x + m[5] * _mlp(P, pre, _modulate(x, m[3], m[4]))
        out.append(x)
    return out[0], out[1]


def audio_cross_attention(P: Mapping, prefix: str, video: Tensor, audio_latents: Tensor,
                          token_mask: np.ndarray, cfg: DiTConfig) -> Tensor:
    """Masked residual ``h + Attn(h, A, A) * mask``, each frame attending to its own audio tokens.

    ``video`` is ``(B, T*N_f, d)``, ``audio_latents`` ``(B, T, n_a, d)``,
    ``token_mask`` ``(B, T*N_f)``. The mask gates only the output.
    """
    b, n, d = video.shape
    t = audio_latents.shape[1]
    if n % t:
        raise ValueError(f"audio frames ({t}) do not match video frames")
    nf, heads, hd = n // t, cfg.heads, cfg.head_dim
    n_a = audio_latents.shape[2]
    q = (layer_norm(video) @ P[f"{prefix}.wq"]).reshape(b, t, nf, heads, hd).transpose(0, 1, 3, 2, 4)
    k = (audio_latents @ P[f"{prefix}.wk"]).reshape(b, t, n_a, heads, hd).transpose(0, 1, 3, 2, 4)
    v = (audio_latents @ P[f"{prefix}.wv"]).reshape(b, t, n_a, heads, hd).transpose(0, 1, 3, 2, 4)
    w = softmax((q @ k.transpose(0, 1, 2, 4, 3)) * (1.0 / math.sqrt(hd)), axis=-1)
    o = (w @ v).transpose(0, 1, 3, 2, 4).reshape(b, n, d) @ P[f"{prefix}.wo"]
    return video + o * np.asarray(token_mask, dtype=np.float64)[:, :, None]


# forward --------------------------------------------------------------------

def forward(params: Mapping, z_t, sigma, conds: ConditionSet, cfg: DiTConfig,
            taps: list | None = None, use_i2v: bool = True, probe=None) -> Tensor:
    """Velocity prediction for a batch of noisy latents ``(B, T, C, H, W)``.

    ``taps``, when given, receives the video hidden states right after every
    audio cross-attention block. ``use_i2v=False`` runs the bare text-to-video
    path without the portrait/temporal-mask channels. ``probe(prefix, video,
    audio_latents, mask)`` is called with the inputs of every audio block.
    """
    P = params
    z_t = as_tensor(z_t)
    b, frames, ch, h, w = z_t.shape
    p, d = cfg.patch, cfg.d_model
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (b,))
    if np.any(sigma < 0) or np.any(sigma > 1):
        raise ValueError("noise level must lie in [0, 1]")
    if conds.text is None or conds.portrait is None:
        raise ValueError("text and portrait conditions are required")
    audio_on = has_audio_blocks(P) and conds.audio is not None and bool(np.any(conds.keep_audio))
    if audio_on and conds.mask_tokens is None:
        raise ValueError("audio conditioning needs face-mask tokens")

    temb = Tensor(timestep_embedding(sigma, cfg.t_dim))
    c = gelu(gelu(temb @ P["t_embed.w1"] + P["t_embed.b1"]) @ P["t_embed.w2"] + P["t_embed.b2"])

    video = _patchify(z_t, p) @ P["patch_in.w"] + P["patch_in.b"]
    if use_i2v:
        cond = _cond_channels(conds.portrait_latent, conds.portrait_slot, conds.keep_context, frames)
        video = video + _patchify(cond, p) @ P["patch_in.w_cond"]

    keep = np.asarray(conds.keep_context, dtype=np.float64)[:, None, None]
    portrait_tokens = encode_portrait(conds.portrait, P, cfg.portrait_patch)
    context = concat([Tensor(conds.text), portrait_tokens], axis=1) * keep
    context = context @ P["ctx_in.w"] + P["ctx_in.b"]

    cos, sin = rotary_tables(cfg, frames, context.shape[1])
    rope = (cos, sin, _rotate_matrix(cfg.head_dim))

    audio_latents = mask = None
    if audio_on:
        audio_latents = encode_audio_features(conds.audio, P, cfg.n_audio_tokens)
        mask = conds.mask_tokens * np.asarray(conds.keep_audio, dtype=np.float64)[:, None]

    def audio_after(slot: str, video: Tensor) -> Tensor:
        if audio_on and f"audio.{slot}.wo" in P:
            if probe is not None:
                probe(f"audio.{slot}", video.data.copy(), audio_latents.data.copy(), mask)
            video = audio_cross_attention(P, f"audio.{slot}", video, audio_latents, mask, cfg)
            if taps is not None:
                taps.append(video.data.copy())
        return video

    for i in range(cfg.dual_depth):
        context, video = full_attention_3d(P, (f"dual.{i}.text", f"dual.{i}.video"),
                                           context, video, c, cfg, rope)
        video = audio_after(f"dual.{i}", video)
    for i in range(cfg.single_depth):
        context, video = full_attention_3d(P, (f"single.{i}", f"single.{i}"),
                                           context, video, c, cfg, rope)
        video = audio_after(f"single.{i}", video)

    shift, scale = _modulation(P, "final", c, 2, d)
    out = _modulate(video, shift, scale) @ P["final.w"] + P["final.b"]
    out = _unpatchify(out, frames, ch, h, w, p)
    if not out.is_finite():
        raise NumericalError("non-finite activations in denoiser output")
    return out


def predict(params: Mapping, z_t, sigma, conds: ConditionSet, cfg: DiTConfig) -> np.ndarray:
    """Forward pass on plain arrays; no tape is recorded."""
    return forward(params, z_t, sigma, conds, cfg).data

"""One test per acceptance criterion; each prints a single PASS/FAIL line.

Criterion 10 trains the default desk model end to end and takes a while on a
CPU (see the README for typical timings).
"""

import json
import time
from pathlib import Path

import numpy as np

from _support import conditions, encoded, end_to_end, latents, model, randomize, small_config, tiny_config, verdict
from talkdit.app.cli import main
from talkdit.dit import (
    DiTConfig, audio_cross_attention, count_params, forward, insert_audio_blocks,
)
from talkdit.distill import (
    DistillConfig, NfeCounter, distill_step, fake_estimate, few_step_generate, init_distill, init_lora,
    lora_forward, model_fn, params_hash, real_estimate, sds_surrogate,
)
from talkdit.flowtrain import adaptive_loss, base_loss, stage_params, total_loss
from talkdit.guidance import GuidanceConfig, three_fold, two_fold
from talkdit.numerics import Tensor, directional_derivative, finite_diff_sample, forward_backward
from talkdit.numerics.rng import Rng, gaussian, uniform
from talkdit.windower import blend_weights, denoise_full, plan_windows, sample_window, teacher_schedule

FIXTURES = Path(__file__).parent / "fixtures"


# 1 ------------------------------------------------------------------------------------------

def _gradcheck(f, params, rng, per_tensor):
    """Relative errors of the tape gradient against sampled and directional central differences."""
    _, g = forward_backward(f, params)
    scalar = lambda P: float(f(P).data)  # noqa: E731
    coords = {k: rng.choice(v.size, size=min(per_tensor, v.size), replace=False) for k, v in params.items()}
    fd = finite_diff_sample(scalar, params, coords)
    a = np.concatenate([g[k].reshape(-1)[coords[k]] for k in sorted(coords)])
    b = np.concatenate([fd[k] for k in sorted(coords)])
    sampled = np.linalg.norm(a - b) / np.linalg.norm(b)
    d = {k: rng.normal(size=v.shape) for k, v in params.items()}
    dd = directional_derivative(scalar, params, d)
    analytic = sum(float(np.sum(g[k] * d[k])) for k in params)
    return max(sampled, abs(dd - analytic) / abs(dd))


def test_c01_gradient_fidelity():
    cfg = tiny_config()
    start = time.perf_counter()
    worst = {"stage1": 0.0, "stage2": 0.0, "composed": 0.0}
    for seed in range(5):
        rng = np.random.default_rng(seed)
        z = latents(cfg, 2, 2, seed, "z")
        target = latents(cfg, 2, 2, seed, "target")
        sig = np.array([0.3, 0.8])
        face = np.zeros((2, cfg.latent_h, cfg.latent_w))
        face[:, 1:3, 1:3] = 1

        p1 = randomize(model(cfg, seed, audio=False), seed)
        c1 = conditions(cfg, 2, 2, seed)
        c1.audio, c1.mask_tokens = None, None
        c1.keep_context = np.array([1.0, 0.0])
        assert count_params(p1) <= 5000
        worst["stage1"] = max(worst["stage1"], _gradcheck(
            lambda P: base_loss(forward(P, z, sig, c1, cfg), target), p1, rng, 3))

        p2 = randomize(model(cfg, seed), seed)
        c2 = conditions(cfg, 2, 2, seed)
        assert count_params(p2) <= 5000
        worst["stage2"] = max(worst["stage2"], _gradcheck(
            lambda P: total_loss(forward(P, z, sig, c2, cfg), target, face, 10.0), p2, rng, 3))

        gen = randomize(model(cfg, seed), seed, scale=0.2)
        eps = latents(cfg, 1, 2, seed, "eps")
        c3 = conditions(cfg, 1, 2, seed)
        x0 = few_step_generate(model_fn(gen, cfg), eps, c3).data
        zs = 0.6 * latents(cfg, 1, 2, seed, "noise") + 0.4 * x0
        x_real = real_estimate(model_fn(gen, cfg), zs, 0.6, c3, GuidanceConfig(), Rng(seed, "cfg"))
        ad = init_lora(gen, Rng(seed, "lora"))
        ad.tensors = {k: v + 0.05 * gaussian(Rng(seed, k), v.shape) for k, v in ad.tensors.items()}
        x_fake = fake_estimate(lambda a, s, c: lora_forward(gen, ad, a, s, c, cfg), zs, 0.6, c3)
        worst["composed"] = max(worst["composed"], _gradcheck(
            lambda P: sds_surrogate(few_step_generate(model_fn(P, cfg), eps, c3), x_real, x_fake),
            gen, rng, 2))
    elapsed = time.perf_counter() - start
    ok = worst["stage1"] < 1e-5 and worst["stage2"] < 1e-5 and worst["composed"] < 1e-4 and elapsed < 300
    verdict(1, ok, f"max rel err stage1={worst['stage1']:.2e} stage2={worst['stage2']:.2e} "
                   f"composed={worst['composed']:.2e}, {elapsed:.0f}s")


# 2 ------------------------------------------------------------------------------------------

def test_c02_zero_init_no_ops():
    start = time.perf_counter()
    cfg = small_config()
    z, c = latents(cfg, 2, 3, 1), conditions(cfg, 2, 3, 1)
    sig = np.array([0.2, 0.9])
    stage1_conds = conditions(cfg, 2, 3, 1)
    stage1_conds.audio, stage1_conds.mask_tokens = None, None

    p = randomize(model(cfg, audio=False), 1)
    p["patch_in.w_cond"] = np.zeros_like(p["patch_in.w_cond"])
    i2v = forward(p, z, sig, c, cfg).data.tobytes() == forward(p, z, sig, c, cfg, use_i2v=False).data.tobytes()

    p2 = randomize(model(cfg), 2)
    for k in p2:
        if k.startswith("audio.") and k.endswith(".wo"):
            p2[k] = np.zeros_like(p2[k])
    base = {k: v for k, v in p2.items() if not k.startswith(("audio.", "audio_enc."))}
    out_proj = forward(p2, z, sig, c, cfg).data.tobytes() == forward(base, z, sig, stage1_conds, cfg).data.tobytes()

    p1 = randomize(model(cfg, audio=False), 3)
    fresh = insert_audio_blocks(p1, cfg, Rng(3, "insert"))
    insert = forward(fresh, z, sig, c, cfg).data.tobytes() == forward(p1, z, sig, stage1_conds, cfg).data.tobytes()

    elapsed = time.perf_counter() - start
    verdict(2, i2v and out_proj and insert and elapsed < 60,
            f"i2v={i2v} audio_out={out_proj} insertion={insert}, {elapsed:.1f}s")


# 3 ------------------------------------------------------------------------------------------

def test_c03_mask_locality():
    cfg = small_config()
    checked, failures = 0, []
    for seed in range(10):
        p = randomize(model(cfg, seed), seed)
        z, c = latents(cfg, 2, 3, seed), conditions(cfg, 2, 3, seed)
        probes, taps = [], []
        forward(p, z, uniform(Rng(seed, "sigma"), 2), c, cfg, taps=taps,
                probe=lambda *args: probes.append(args))
        assert len(probes) == len(taps) == 4
        for (prefix, video, audio, mask), after in zip(probes, taps):
            real = audio_cross_attention(p, prefix, Tensor(video), Tensor(audio), mask, cfg).data
            silent = audio_cross_attention(p, prefix, Tensor(video), Tensor(np.zeros_like(audio)), mask, cfg).data
            off = mask == 0
            assert off.any() and (~off).any()
            if real.tobytes() != after.tobytes() or real[off].tobytes() != silent[off].tobytes():
                failures.append((seed, prefix))
            if real[off].tobytes() != video[off].tobytes():
                failures.append((seed, prefix, "residual"))
            checked += 1
    verdict(3, not failures, f"{checked} audio blocks over 10 inputs, mismatches={failures}")


# 4 ------------------------------------------------------------------------------------------

def test_c04_adaptive_loss_algebra():
    rng = np.random.default_rng(0)
    pred, tgt = rng.normal(size=(2, 3, 4, 4, 4)), rng.normal(size=(2, 3, 4, 4, 4))
    full_gap = abs(float(adaptive_loss(pred, tgt, np.ones((4, 4))).data) - float(base_loss(pred, tgt).data))
    e = 0.37
    worst = 0.0
    for frac in (1.0, 0.5, 0.25):
        mask = np.zeros((4, 4))
        mask.reshape(-1)[: int(16 * frac)] = 1
        err = np.sqrt(e) * np.broadcast_to(mask, tgt.shape)
        worst = max(worst, abs(float(base_loss(tgt + err, tgt).data) - frac * e),
                    abs(float(adaptive_loss(tgt + err, tgt, mask).data) - e))
    verdict(4, full_gap <= 1e-12 and worst <= 1e-12,
            f"full-mask gap={full_gap:.1e}, f-example max gap={worst:.1e}")


# 5 ------------------------------------------------------------------------------------------

def test_c05_guidance_algebra():
    rng = np.random.default_rng(1)
    full, na, unc = rng.normal(size=(3, 2, 4, 4))
    two = np.abs(two_fold(full, unc, 0.0) - full).max()
    three = np.abs(three_fold(full, na, unc, 0.0, 0.0) - full).max()
    ones = np.ones(1)
    sums = [float(two_fold(ones, ones, w)[0]) for w in (0.0, 1.5, 7.0)]
    sums += [float(three_fold(ones, ones, ones, wa, wt)[0]) for wa, wt in ((0, 0), (1.5, 1.0), (4.0, 0.2))]
    printed = [float(three_fold(ones, ones, ones, wa, wt, "as-printed")[0]) for wa, wt in ((0, 0), (1.5, 1.0))]
    zero_printed = np.abs(three_fold(full, na, unc, 0.0, 0.0, "as-printed") - (full + na)).max()
    ok = (two <= 1e-12 and three <= 1e-12 and all(abs(s - 1) <= 1e-12 for s in sums)
          and all(abs(s - 2) <= 1e-12 for s in printed) and zero_printed <= 1e-12)
    verdict(5, ok, f"zero-scale gaps {two:.0e}/{three:.0e}, normalized sums 1, as-printed sums {printed}")


# 6 ------------------------------------------------------------------------------------------

def test_c06_blending_formula():
    orig, new = blend_weights(4)
    table = [(float(orig[i]), float(new[i])) for i in (1, 2, 3)]
    complementary = all(np.all(sum(blend_weights(w)) == 1.0) for w in range(2, 17))
    ok = table == [(1.0, 0.0), (0.5, 0.5), (0.0, 1.0)] and complementary
    verdict(6, ok, f"width-4 table {table}, complementary for widths 2..16: {complementary}")


# 7 ------------------------------------------------------------------------------------------

def test_c07_window_equivalence():
    cfg = small_config()
    results = []
    for seed in range(3):
        p = randomize(model(cfg, seed), seed, scale=0.2)
        for frames in (8, 6):
            c = conditions(cfg, 1, frames, seed)
            for sampler in ("teacher", "distilled"):
                a = denoise_full(p, frames, c, sampler, plan_windows(frames, 8, 3), Rng(seed, "s"), cfg,
                                 GuidanceConfig())
                b = sample_window(p, c, frames, sampler, Rng(seed, "s"), cfg, GuidanceConfig())
                results.append(a.tobytes() == b.tobytes())
    verdict(7, all(results), f"{sum(results)}/{len(results)} bitwise matches (3 seeds, T in {{8, 6}}, both modes)")


# 8 ------------------------------------------------------------------------------------------

def test_c08_distillation_fixed_point():
    mcfg = tiny_config()
    teacher = randomize(model(mcfg), 8, scale=0.2)
    zero = GuidanceConfig(audio_scale=0.0, text_scale=0.0)
    ad = init_lora(teacher, Rng(0, "lora"))
    eps, c = latents(mcfg, 2, 2, 1), conditions(mcfg, 2, 2, 1)
    worst = 0.0
    for sigma in (0.9, 0.5, 0.1):
        def sds(P):
            x_hat = few_step_generate(model_fn(P, mcfg), eps, c)
            z = sigma * latents(mcfg, 2, 2, 2) + (1 - sigma) * x_hat.data
            x_real = real_estimate(model_fn(teacher, mcfg), z, sigma, c, zero, Rng(0, "g"))
            x_fake = fake_estimate(lambda a, s, cc: lora_forward(teacher, ad, a, s, cc, mcfg), z, sigma, c)
            return sds_surrogate(x_hat, x_real, x_fake)
        _, g = forward_backward(sds, dict(teacher))
        worst = max(worst, max(float(np.abs(v).max()) for v in g.values()))

    data = encoded(mcfg, 4, 2)
    cfg = DistillConfig(guidance=GuidanceConfig(), batch_size=2, horizon=50)
    digest = params_hash(teacher)
    state = init_distill(teacher, cfg)
    unchanged = True
    for step in range(100):
        state, _ = distill_step(state, teacher, data[step % 3: step % 3 + 2], cfg, mcfg, Rng(0, "d").child(step))
        unchanged &= params_hash(teacher) == digest
    verdict(8, worst <= np.finfo(float).eps and unchanged,
            f"max |grad SDS| at init={worst:.1e}, teacher hash unchanged over 100 steps: {unchanged}")


# 9 ------------------------------------------------------------------------------------------

def test_c09_nfe_accounting():
    counted = 0
    for s in teacher_schedule()[:-1]:
        counted += 2 if s >= 0.75 else 3
    cfg = DiTConfig()
    p = stage_params(cfg, 0, stage_params(cfg, 0))
    c = conditions(cfg, 1, 8)
    times, nfe = {}, {}
    for mode in ("distilled", "teacher"):
        counter = NfeCounter()
        best = np.inf
        for _ in range(3 if mode == "distilled" else 1):
            counter = NfeCounter()
            start = time.perf_counter()
            sample_window(p, c, 8, mode, Rng(0, "nfe"), cfg, GuidanceConfig(), counter)
            best = min(best, time.perf_counter() - start)
        times[mode], nfe[mode] = best, counter["sampler"]
    ratio, speedup = nfe["teacher"] / nfe["distilled"], times["teacher"] / times["distilled"]
    ok = nfe["distilled"] == 4 and nfe["teacher"] == 137 == counted and ratio >= 20 and speedup >= 15
    verdict(9, ok, f"nfe teacher={nfe['teacher']} distilled={nfe['distilled']} ({ratio:.2f}x), "
                   f"wall {times['teacher']:.2f}s vs {times['distilled']:.3f}s ({speedup:.1f}x)")


# 10 -----------------------------------------------------------------------------------------

def test_c10_end_to_end_training():
    calib = json.loads((FIXTURES / "calibration.json").read_text())
    m = end_to_end()
    sync, ident, abl_sync, drop = m["sync_proxy"], m["identity_error"], m["ablation_sync_proxy"], m["stage1_loss_drop"]
    th = calib["thresholds"]
    ok = (sync >= th["sync_proxy_min"] and ident <= th["identity_error_max"] and abl_sync < sync
          and drop >= th["stage1_loss_drop_min"] and m["seconds"] < 3600)
    verdict(10, ok, f"sync={sync:.3f} (calibrated {calib['measured']['sync_proxy']:.3f}), "
                    f"identity={ident:.4f}, ablation sync={abl_sync:.3f}, stage-1 loss drop={drop:.0%}, "
                    f"{m['seconds'] / 60:.1f} min")


# 11 -----------------------------------------------------------------------------------------

def _run_pipeline(run: Path):
    cfgfile = str(FIXTURES / "tiny_run.json")
    steps = [["gen-data", "--config", cfgfile], ["train", "--stage", "1"], ["train", "--stage", "2"],
             ["distill"], ["sample", "--mode", "distilled"], ["sample", "--mode", "teacher", "--frames", "10"],
             ["eval", "--mode", "distilled"]]
    return [main([*s, "--out", str(run), "--seed", "5"]) for s in steps]


def test_c11_reproducibility(tmp_path):
    codes = [_run_pipeline(tmp_path / r) for r in ("a", "b")]
    a, b = tmp_path / "a", tmp_path / "b"
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "timing.json")
    other = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file() and p.name != "timing.json")
    differing = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    kinds = {f.suffix for f in files}
    ok = codes[0] == codes[1] == [0] * 7 and files == other and not differing and {".bin", ".pgm", ".csv"} <= kinds
    verdict(11, ok, f"{len(files)} files compared, differing={differing}")

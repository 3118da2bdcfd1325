import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _support import conditions, latents, model, randomize, tiny_config, small_config
from talkdit.dit import (
    DiTConfig, _attend, audio_cross_attention, count_params, forward, i2v_condition, init_params,
    insert_audio_blocks, patchify, predict, unpatchify,
)
from talkdit.numerics import Tensor, directional_derivative, finite_diff_sample, forward_backward
from talkdit.numerics.rng import Rng, gaussian


@settings(max_examples=25, deadline=None)
@given(t=st.integers(1, 3), hp=st.integers(1, 3), wp=st.integers(1, 3), p=st.sampled_from([1, 2]),
       seed=st.integers(0, 99))
def test_patchify_round_trip(t, hp, wp, p, seed):
    z = np.random.default_rng(seed).normal(size=(t, 4, hp * p, wp * p))
    tok = patchify(z, p)
    assert tok.shape == (t * hp * wp, 4 * p * p)
    assert unpatchify(tok, t, 4, hp * p, wp * p, p).tobytes() == z.tobytes()


def test_patch_token_count_and_constant_latent():
    assert patchify(np.zeros((2, 4, 4, 4)), 2).shape[0] == 8
    tok = patchify(np.full((2, 4, 4, 4), 0.7), 2)
    assert np.all(tok == tok[0])


def test_patchify_indivisible():
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 4, 3, 4)), 2)


def test_i2v_condition_layout():
    z = np.random.default_rng(0).normal(size=(3, 4, 4, 4))
    portrait = np.random.default_rng(1).random((4, 4, 4))
    out = i2v_condition(z, portrait)
    assert out.shape == (3, 9, 4, 4)
    np.testing.assert_array_equal(out[:, :4], z)
    np.testing.assert_array_equal(out[0, 4:8], portrait)
    assert np.all(out[1:, 4:8] == 0)
    assert out[:, 8].sum() == 16 and np.all(out[0, 8] == 1)
    with pytest.raises(ValueError):
        i2v_condition(z, np.zeros((4, 2, 2)))


def test_attention_singleton_and_symmetric_pair():
    v = Tensor(np.random.default_rng(0).normal(size=(1, 1, 1, 4)))
    q = Tensor(np.ones((1, 1, 1, 4)))
    np.testing.assert_array_equal(_attend(q, q, v).data, v.data)
    k = Tensor(np.ones((1, 1, 2, 4)))
    vals = Tensor(np.array([[[[1.0, 0, 0, 0], [0, 1.0, 0, 0]]]]))
    np.testing.assert_array_equal(_attend(q, k, vals).data[0, 0, 0], [0.5, 0.5, 0, 0])


def test_attention_invariant_to_key_value_permutation():
    rng = np.random.default_rng(2)
    q, k, v = (Tensor(rng.normal(size=(1, 2, 3, 4))) for _ in range(3))
    perm = [2, 0, 1]
    a = _attend(q, k, v).data
    b = _attend(q, Tensor(k.data[:, :, perm]), Tensor(v.data[:, :, perm])).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


@pytest.mark.parametrize("cfg", [tiny_config(), small_config(), DiTConfig()])
def test_output_shape_matches_input(cfg):
    p = model(cfg)
    z = latents(cfg, 2, 3)
    out = forward(p, z, np.array([0.2, 0.9]), conditions(cfg, 2, 3), cfg)
    assert out.shape == z.shape


def test_default_config_budget():
    cfg = DiTConfig()
    p1 = init_params(cfg, Rng(0, "init"))
    p2 = insert_audio_blocks(p1, cfg, Rng(0, "a"))
    # recorded in the decisions ledger: the default exceeds the nominal 200k
    assert count_params(p1) == 327_280
    assert count_params(p2) == 401_424


def test_sigma_range_checked():
    cfg = tiny_config()
    with pytest.raises(ValueError):
        forward(model(cfg), latents(cfg, 1, 2), np.array([1.5]), conditions(cfg, 1, 2), cfg)


def test_audio_needs_mask_tokens():
    cfg = tiny_config()
    c = conditions(cfg, 1, 2)
    c.mask_tokens = None
    with pytest.raises(ValueError):
        forward(model(cfg), latents(cfg, 1, 2), np.array([0.5]), c, cfg)


# zero-initialisation no-ops --------------------------------------------------

def test_zero_cond_columns_match_plain_t2v():
    cfg = small_config()
    p = randomize(model(cfg, audio=False), 1)
    p["patch_in.w_cond"] = np.zeros_like(p["patch_in.w_cond"])
    z, c = latents(cfg, 2, 3), conditions(cfg, 2, 3)
    a = forward(p, z, np.array([0.3, 0.6]), c, cfg).data
    b = forward(p, z, np.array([0.3, 0.6]), c, cfg, use_i2v=False).data
    assert a.tobytes() == b.tobytes()


def test_zero_audio_out_projection_matches_stage1():
    cfg = small_config()
    p2 = randomize(model(cfg), 2)
    for k in p2:
        if k.startswith("audio.") and k.endswith(".wo"):
            p2[k] = np.zeros_like(p2[k])
    p1 = {k: v for k, v in p2.items() if not k.startswith(("audio.", "audio_enc."))}
    z, c = latents(cfg, 2, 3), conditions(cfg, 2, 3)
    a = forward(p2, z, np.array([0.3, 0.6]), c, cfg).data
    c1 = conditions(cfg, 2, 3)
    c1.audio, c1.mask_tokens = None, None
    b = forward(p1, z, np.array([0.3, 0.6]), c1, cfg).data
    assert a.tobytes() == b.tobytes()


def test_insertion_keeps_outputs_and_weights():
    cfg = small_config()
    p1 = randomize(model(cfg, audio=False), 3)
    p2 = insert_audio_blocks(p1, cfg, Rng(7, "ins"))
    for k, v in p1.items():
        assert p2[k].tobytes() == v.tobytes()
    n_blocks = len({k.rsplit(".", 1)[0] for k in p2 if k.startswith("audio.")})
    assert n_blocks == 4
    z, c = latents(cfg, 1, 4), conditions(cfg, 1, 4)
    c1 = conditions(cfg, 1, 4)
    c1.audio, c1.mask_tokens = None, None
    assert forward(p2, z, np.array([0.5]), c, cfg).data.tobytes() == \
        forward(p1, z, np.array([0.5]), c1, cfg).data.tobytes()
    again = insert_audio_blocks(p1, cfg, Rng(7, "ins"))
    assert all(again[k].tobytes() == p2[k].tobytes() for k in p2)
    with pytest.raises(ValueError):
        insert_audio_blocks(p2, cfg, Rng(7, "ins"))


# audio cross-attention -----------------------------------------------------------

def _audio_block_inputs(cfg, seed=0):
    p = randomize(model(cfg), seed)
    rng = Rng(seed, "block")
    t, nf, na = 3, cfg.tokens_per_frame, cfg.n_audio_tokens
    video = Tensor(gaussian(rng.child("v"), (1, t * nf, cfg.d_model)))
    audio = Tensor(gaussian(rng.child("a"), (1, t, na, cfg.d_model)))
    return p, video, audio


def test_zero_mask_and_zero_wo_are_exact_no_ops():
    cfg = small_config()
    p, video, audio = _audio_block_inputs(cfg)
    out = audio_cross_attention(p, "audio.dual.0", video, audio, np.zeros((1, video.shape[1])), cfg)
    assert out.data.tobytes() == video.data.tobytes()
    p["audio.dual.0.wo"] = np.zeros_like(p["audio.dual.0.wo"])
    out = audio_cross_attention(p, "audio.dual.0", video, audio, np.ones((1, video.shape[1])), cfg)
    assert out.data.tobytes() == video.data.tobytes()


def test_frame_audio_only_reaches_its_own_frame():
    cfg = small_config()
    p, video, audio = _audio_block_inputs(cfg, 1)
    mask = np.ones((1, video.shape[1]))
    bumped = audio.data.copy()
    bumped[0, 1] += 1.0
    a = audio_cross_attention(p, "audio.dual.0", video, audio, mask, cfg).data
    b = audio_cross_attention(p, "audio.dual.0", video, Tensor(bumped), mask, cfg).data
    nf = cfg.tokens_per_frame
    changed = np.abs(a - b).max(axis=2)[0] > 0
    assert changed[nf:2 * nf].all() and not changed[:nf].any() and not changed[2 * nf:].any()


def test_frame_count_mismatch():
    cfg = small_config()
    p, video, audio = _audio_block_inputs(cfg)
    with pytest.raises(ValueError):
        audio_cross_attention(p, "audio.dual.0", Tensor(video.data[:, :-1]), audio,
                              np.ones((1, video.shape[1] - 1)), cfg)


@pytest.mark.parametrize("seed", range(3))
def test_hidden_states_outside_mask_ignore_audio(seed):
    cfg = small_config()
    p = randomize(model(cfg), seed)
    z, c = latents(cfg, 2, 3, seed), conditions(cfg, 2, 3, seed)
    silent = conditions(cfg, 2, 3, seed)
    silent.audio = np.zeros_like(silent.audio)
    taps_a, taps_b = [], []
    forward(p, z, np.array([0.4, 0.8]), c, cfg, taps=taps_a)
    forward(p, z, np.array([0.4, 0.8]), silent, cfg, taps=taps_b)
    assert len(taps_a) == 4
    off = c.mask_tokens == 0
    # only the first tap is comparable: later blocks see different inputs
    assert taps_a[0][off].tobytes() == taps_b[0][off].tobytes()
    assert not np.array_equal(taps_a[0], taps_b[0])


def test_forward_deterministic_and_finite_for_bounded_inputs():
    cfg = small_config()
    p = model(cfg)
    z = np.clip(10 * latents(cfg, 2, 3), -10, 10)
    c = conditions(cfg, 2, 3)
    a, b = predict(p, z, np.array([0.0, 1.0]), c, cfg), predict(p, z, np.array([0.0, 1.0]), c, cfg)
    assert a.tobytes() == b.tobytes() and np.all(np.isfinite(a))


def test_mean_output_gradient_matches_finite_differences():
    cfg = tiny_config()
    p = randomize(model(cfg), 4)
    z, c = latents(cfg, 1, 2), conditions(cfg, 1, 2)
    sig = np.array([0.35])

    def f(P):
        return forward(P, z, sig, c, cfg).mean()

    _, g = forward_backward(f, p)
    rng = np.random.default_rng(0)
    coords = {k: rng.choice(v.size, size=min(3, v.size), replace=False) for k, v in p.items()}
    fd = finite_diff_sample(lambda P: float(f(P).data), p, coords)
    a = np.concatenate([g[k].reshape(-1)[coords[k]] for k in sorted(coords)])
    b = np.concatenate([fd[k] for k in sorted(coords)])
    assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-5
    d = {k: rng.normal(size=v.shape) for k, v in p.items()}
    dd = directional_derivative(lambda P: float(f(P).data), p, d)
    assert abs(dd - sum(np.sum(g[k] * d[k]) for k in p)) <= 1e-5 * abs(dd)

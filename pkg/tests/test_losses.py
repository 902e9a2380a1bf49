import math

import numpy as np
import pytest
from toys import mlp_reference, oracle_backbone, toy_bundle

from pixelpost.diffkit import check_gradients, ops, value_and_grad
from pixelpost.losses import (
    LossConfig,
    LossError,
    NoiseDraw,
    PairBatch,
    SFTBatch,
    dpo_latent,
    dpo_pixel,
    draw_pairs,
    draw_sft,
    preference_loss,
    reward_combined,
    sft_combined,
    sft_latent,
    sft_pixel,
    simpo_latent,
    simpo_pixel,
    x0_decode,
)
from pixelpost.models import clone_frozen
from pixelpost.schedule import linear_schedule

LN2 = math.log(2.0)
LATENT = (2, 2, 2)


def _sft(rng, n=3, t=None, dtype=np.float64):
    z0 = rng.standard_normal((n,) + LATENT).astype(dtype)
    t = rng.integers(1, 1001, size=n) if t is None else np.full(n, t)
    return SFTBatch(z0, rng.integers(0, 3, size=n)), NoiseDraw(t=t, eps=rng.standard_normal(z0.shape).astype(dtype))


def _pairs(rng, n=3, t=None, dtype=np.float64):
    zw = rng.standard_normal((n,) + LATENT).astype(dtype)
    zl = rng.standard_normal((n,) + LATENT).astype(dtype)
    t = rng.integers(1, 1001, size=n) if t is None else np.full(n, t)
    draw = NoiseDraw(t=t, eps_w=rng.standard_normal(zw.shape).astype(dtype),
                     eps_l=rng.standard_normal(zw.shape).astype(dtype))
    return PairBatch(zw, zl, rng.integers(0, 3, size=n)), draw


# ---------------------------------------------------------------- SFT


def test_latent_oracle_is_zero():
    rng = np.random.default_rng(0)
    batch, draw = _sft(rng)
    b = toy_bundle(oracle_backbone(batch.z0))
    assert float(sft_latent(b, batch, draw)) == pytest.approx(0.0, abs=1e-12)
    assert float(sft_pixel(b, batch, draw)) == pytest.approx(0.0, abs=1e-12)


def test_latent_zero_predictor_gives_noise_power():
    rng = np.random.default_rng(1)
    batch, draw = _sft(rng, n=4000)
    b = toy_bundle("const")
    assert float(sft_latent(b, batch, draw)) == pytest.approx(1.0, abs=0.02)


def test_latent_matches_direct_formula():
    rng = np.random.default_rng(2)
    batch, draw = _sft(rng, n=1)
    b = toy_bundle("mlp2")
    ab = b.schedule.alpha_bars[draw.t - 1].reshape(-1, 1, 1, 1)
    zt = np.sqrt(ab) * batch.z0 + np.sqrt(1 - ab) * draw.eps
    direct = np.mean((draw.eps - mlp_reference(b.denoiser, zt, draw.t, batch.labels)) ** 2)
    assert float(sft_latent(b, batch, draw)) == pytest.approx(direct, abs=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_identity_decoder_pixel_loss(seed):
    rng = np.random.default_rng(100 + seed)
    t = int(rng.integers(1, 1001))
    batch, draw = _sft(rng, t=t)
    b = toy_bundle("mlp2", "identity")
    ab = b.schedule.alpha_bar(t)
    lat = float(sft_latent(b, batch, draw))
    assert float(sft_pixel(b, batch, draw)) == pytest.approx((1 - ab) * lat, rel=1e-5)


def test_linear_decoder_pixel_loss():
    rng = np.random.default_rng(3)
    batch, draw = _sft(rng, n=2, t=300)
    b = toy_bundle("mlp2", "linear")
    A = b.autoencoder["dec/A"].astype(np.float64)
    ab = b.schedule.alpha_bar(300)
    zt = np.sqrt(ab) * batch.z0 + np.sqrt(1 - ab) * draw.eps
    diff = (draw.eps - mlp_reference(b.denoiser, zt, draw.t, batch.labels)).reshape(2, -1)
    direct = (1 - ab) * np.mean((diff @ A) ** 2)
    assert float(sft_pixel(b, batch, draw)) == pytest.approx(direct, rel=1e-6)


def test_combined_zero_lambda_is_latent():
    rng = np.random.default_rng(4)
    batch, draw = _sft(rng, dtype=np.float32)
    b = toy_bundle("mlp2")
    a = sft_latent(b, batch, draw)
    c = sft_combined(b, batch, draw, LossConfig(lam=0.0))
    assert a.tobytes() == c.tobytes()


def test_combined_default_weight():
    # zero predictor with |eps| = sqrt(0.5) gives a latent term of 0.5; a linear
    # decoder copying latent entries scaled by 1/sqrt(1 - abar) makes the pixel
    # term 0.5 as well, so lambda = 8 gives 0.5 + 8 * 0.5 = 4.5
    rng = np.random.default_rng(5)
    b = toy_bundle("const", "linear")
    t = 400
    ab = b.schedule.alpha_bar(t)
    n_lat, n_img = b.autoencoder["dec/A"].shape
    A = np.zeros((n_lat, n_img))
    A[np.arange(n_img) % n_lat, np.arange(n_img)] = 1 / np.sqrt(1 - ab)
    b.autoencoder["dec/A"] = A
    z0 = rng.standard_normal((2,) + LATENT)
    eps = np.sqrt(0.5) * np.sign(rng.standard_normal(z0.shape))
    batch, draw = SFTBatch(z0, np.array([0, 1])), NoiseDraw(t=np.full(2, t), eps=eps)
    diag = {}
    loss = float(sft_combined(b, batch, draw, LossConfig(lam=8.0), diag=diag))
    assert diag["latent"] == pytest.approx(0.5, rel=1e-12)
    assert diag["pixel"] == pytest.approx(0.5, rel=1e-9)
    assert loss == pytest.approx(4.5, rel=1e-9)


def test_combined_gradient_is_sum():
    rng = np.random.default_rng(6)
    batch, draw = _sft(rng)
    b = toy_bundle("mlp2")
    p = {k: v.astype(np.float64) for k, v in b.denoiser.items()}
    lam = 8.0
    _, gc = value_and_grad(lambda q: sft_combined(b, batch, draw, LossConfig(lam=lam), params=q), p)
    _, gl = value_and_grad(lambda q: sft_latent(b, batch, draw, params=q), p)
    _, gp = value_and_grad(lambda q: sft_pixel(b, batch, draw, params=q), p)
    for k in p:
        np.testing.assert_allclose(gc[k], gl[k] + lam * gp[k], rtol=1e-5, atol=1e-12)


# ---------------------------------------------------------------- preference


def test_preference_closed_form():
    val = float(preference_loss(np.array([-1.0]), np.array([0.0]), 1.0))
    assert val == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert val == pytest.approx(0.313262, abs=1e-6)


def test_preference_monotone_in_winner_residual():
    prev = np.inf
    for rw in np.linspace(3, -3, 25):
        v = float(preference_loss(np.array([rw]), np.array([0.5]), 2.0))
        assert v < prev
        prev = v


@pytest.mark.parametrize("fn", ["dpo_latent", "dpo_pixel"])
def test_dpo_fresh_clone_is_ln2(fn):
    rng = np.random.default_rng(7)
    pairs, draw = _pairs(rng, n=5)
    b = toy_bundle("mlp2")
    ref = clone_frozen(b)
    f = {"dpo_latent": dpo_latent, "dpo_pixel": dpo_pixel}[fn]
    assert float(f(b, ref, pairs, draw, LossConfig(beta=5.0))) == pytest.approx(LN2, abs=1e-6)


def test_dpo_small_beta_is_ln2():
    rng = np.random.default_rng(8)
    pairs, draw = _pairs(rng)
    b, ref = toy_bundle("mlp2", seed=1), clone_frozen(toy_bundle("mlp2", seed=2))
    assert float(dpo_latent(b, ref, pairs, draw, LossConfig(beta=1e-9))) == pytest.approx(LN2, abs=1e-6)


def test_dpo_hand_set_margin():
    # policy predicts 0, reference predicts 0.5; eps_w = 0, eps_l = 1:
    # D_w = 0 - 0.25, D_l = 1 - 0.25, so D_w - D_l = -1
    b = toy_bundle("const")
    ref = toy_bundle("const")
    ref.denoiser["c"] = np.array([0.5])
    ref = clone_frozen(ref)
    rng = np.random.default_rng(9)
    pairs = PairBatch(rng.standard_normal((1,) + LATENT), rng.standard_normal((1,) + LATENT), np.array([0]))
    draw = NoiseDraw(t=np.array([10]), eps_w=np.zeros((1,) + LATENT), eps_l=np.ones((1,) + LATENT))
    val = float(dpo_latent(b, ref, pairs, draw, LossConfig(beta=1.0)))
    assert val == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-6)


def test_dpo_requires_reference():
    rng = np.random.default_rng(10)
    pairs, draw = _pairs(rng)
    b = toy_bundle("mlp2")
    with pytest.raises(LossError):
        dpo_latent(b, None, pairs, draw, LossConfig())
    with pytest.raises(LossError):
        dpo_pixel(b, None, pairs, draw, LossConfig())


def test_simpo_identical_pair_is_ln2():
    rng = np.random.default_rng(11)
    pairs, draw = _pairs(rng)
    same = PairBatch(pairs.z_w, pairs.z_w, pairs.labels)
    d = NoiseDraw(t=draw.t, eps_w=draw.eps_w, eps_l=draw.eps_w)
    b = toy_bundle("mlp2")
    assert float(simpo_latent(b, same, d, LossConfig(beta=3.0))) == pytest.approx(LN2, abs=1e-12)
    assert float(simpo_pixel(b, same, d, LossConfig(beta=3.0))) == pytest.approx(LN2, abs=1e-12)


def test_dpo_equals_simpo_under_balanced_reference():
    # a constant-zero reference has residual mean(eps^2); eps_l = -eps_w makes
    # the winner and loser reference residuals equal, so they cancel
    rng = np.random.default_rng(12)
    pairs, draw = _pairs(rng)
    draw = NoiseDraw(t=draw.t, eps_w=draw.eps_w, eps_l=-draw.eps_w)
    b = toy_bundle("mlp2")
    ref = clone_frozen(toy_bundle("const"))
    cfg = LossConfig(beta=2.0)
    assert float(dpo_latent(b, ref, pairs, draw, cfg)) == pytest.approx(
        float(simpo_latent(b, pairs, draw, cfg)), abs=1e-6)


def test_simpo_pixel_perfect_model_is_ln2():
    rng = np.random.default_rng(13)
    z0 = rng.standard_normal((2,) + LATENT)
    pairs = PairBatch(z0, z0, np.array([0, 1]))
    draw = NoiseDraw(t=np.array([5, 900]), eps_w=rng.standard_normal(z0.shape), eps_l=rng.standard_normal(z0.shape))
    b = toy_bundle(oracle_backbone(z0))
    assert float(simpo_pixel(b, pairs, draw, LossConfig(beta=10.0))) == pytest.approx(LN2, abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_identity_decoder_preference_scaling(seed):
    rng = np.random.default_rng(200 + seed)
    t = int(rng.integers(1, 1001))
    pairs, draw = _pairs(rng, t=t)
    b = toy_bundle("mlp2", "identity")
    ref = clone_frozen(toy_bundle("mlp2", "identity", seed=seed + 1))
    beta = 7.0
    s = 1 - b.schedule.alpha_bar(t)
    assert float(simpo_pixel(b, pairs, draw, LossConfig(beta=beta))) == pytest.approx(
        float(simpo_latent(b, pairs, draw, LossConfig(beta=beta * s))), rel=1e-5)
    assert float(dpo_pixel(b, ref, pairs, draw, LossConfig(beta=beta))) == pytest.approx(
        float(dpo_latent(b, ref, pairs, draw, LossConfig(beta=beta * s))), rel=1e-5)


def _straight_pixel_residual(b, z0, label, t, eps, eps_hat):
    A = b.autoencoder["dec/A"].astype(np.float64)
    ab = b.schedule.alpha_bars[t - 1]
    zt = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps
    zp = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps_hat
    return np.mean((zt.reshape(-1) @ A - zp.reshape(-1) @ A) ** 2)


def _straight_eps(p, z0, label, t, eps, ab):
    zt = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps
    return mlp_reference(p, zt[None], np.array([t]), np.array([label]))[0]


def test_simpo_and_dpo_pixel_match_straight_line():
    rng = np.random.default_rng(14)
    pairs, draw = _pairs(rng, n=1)
    b = toy_bundle("mlp2", "linear")
    ref = clone_frozen(toy_bundle("mlp2", "linear", seed=5))
    ref.autoencoder.update(b.autoencoder)  # same frozen decoder
    beta = 4.0
    t, lab = int(draw.t[0]), int(pairs.labels[0])
    ab = b.schedule.alpha_bars[t - 1]
    res = {}
    for who, model in (("th", b), ("ref", ref)):
        for side, z0, eps in (("w", pairs.z_w[0], draw.eps_w[0]), ("l", pairs.z_l[0], draw.eps_l[0])):
            e = _straight_eps(model.denoiser, z0, lab, t, eps, ab)
            res[who, side] = _straight_pixel_residual(b, z0, lab, t, eps, e)
    simpo = np.log1p(np.exp(beta * (res["th", "w"] - res["th", "l"])))
    dpo = np.log1p(np.exp(beta * ((res["th", "w"] - res["ref", "w"]) - (res["th", "l"] - res["ref", "l"]))))
    assert float(simpo_pixel(b, pairs, draw, LossConfig(beta=beta))) == pytest.approx(simpo, abs=1e-6)
    assert float(dpo_pixel(b, ref, pairs, draw, LossConfig(beta=beta))) == pytest.approx(dpo, abs=1e-6)


def test_reward_combined_zero_mu_is_simpo():
    rng = np.random.default_rng(15)
    pairs, draw = _pairs(rng, dtype=np.float32)
    b = toy_bundle("mlp2")
    cfg = LossConfig(mu=0.0, beta=3.0)
    a = simpo_latent(b, pairs, draw, cfg)
    c = reward_combined(b, None, pairs, draw, cfg, "simpo+simpoPix")
    assert a.tobytes() == c.tobytes()


def test_reward_combined_modes():
    rng = np.random.default_rng(16)
    pairs, draw = _pairs(rng)
    b = toy_bundle("mlp2")
    ref = clone_frozen(toy_bundle("mlp2", seed=3))
    cfg = LossConfig(mu=8.0, beta=3.0)
    expect = {
        "dpo+dpoPix": float(dpo_latent(b, ref, pairs, draw, cfg)) + 8 * float(dpo_pixel(b, ref, pairs, draw, cfg)),
        "dpo+simpoPix": float(dpo_latent(b, ref, pairs, draw, cfg)) + 8 * float(simpo_pixel(b, pairs, draw, cfg)),
        "dpoOnly": float(dpo_latent(b, ref, pairs, draw, cfg)),
    }
    for mode, val in expect.items():
        assert float(reward_combined(b, ref, pairs, draw, cfg, mode)) == pytest.approx(val, rel=1e-12)
    val = float(simpo_latent(b, pairs, draw, cfg)) + 8 * float(simpo_pixel(b, pairs, draw, cfg))
    assert float(reward_combined(b, None, pairs, draw, cfg, "simpo+simpoPix")) == pytest.approx(val, rel=1e-12)


def test_reward_combined_errors():
    rng = np.random.default_rng(17)
    pairs, draw = _pairs(rng)
    b = toy_bundle("mlp2")
    with pytest.raises(LossError):
        reward_combined(b, None, pairs, draw, LossConfig(), "dpo+simpoPix")
    with pytest.raises(LossError):
        reward_combined(b, clone_frozen(b), pairs, draw, LossConfig(), "simpo+simpoPix")
    with pytest.raises(LossError):
        reward_combined(b, None, pairs, draw, LossConfig(), "kto")


def test_reward_combined_gradient_is_sum():
    rng = np.random.default_rng(18)
    pairs, draw = _pairs(rng)
    b = toy_bundle("mlp2")
    p = {k: v.astype(np.float64) for k, v in b.denoiser.items()}
    cfg = LossConfig(mu=8.0, beta=3.0)
    _, gc = value_and_grad(lambda q: reward_combined(b, None, pairs, draw, cfg, "simpo+simpoPix", params=q), p)
    _, gl = value_and_grad(lambda q: simpo_latent(b, pairs, draw, cfg, params=q), p)
    _, gp = value_and_grad(lambda q: simpo_pixel(b, pairs, draw, cfg, params=q), p)
    for k in p:
        np.testing.assert_allclose(gc[k], gl[k] + 8.0 * gp[k], rtol=1e-5, atol=1e-12)


def test_loss_config_validation():
    with pytest.raises(LossError):
        LossConfig(lam=-1)
    with pytest.raises(LossError):
        LossConfig(beta=0)


def test_bounds_and_determinism():
    rng = np.random.default_rng(19)
    b = toy_bundle("mlp2")
    ref = clone_frozen(toy_bundle("mlp2", seed=4))
    cfg = LossConfig(beta=50.0)
    for _ in range(10):
        batch, draw = _sft(rng)
        pairs, pdraw = _pairs(rng)
        for v in (sft_latent(b, batch, draw), sft_pixel(b, batch, draw), sft_combined(b, batch, draw, cfg)):
            assert float(v) >= 0
        for v in (dpo_latent(b, ref, pairs, pdraw, cfg), dpo_pixel(b, ref, pairs, pdraw, cfg),
                  simpo_latent(b, pairs, pdraw, cfg), simpo_pixel(b, pairs, pdraw, cfg)):
            assert float(v) > 0
        assert sft_combined(b, batch, draw, cfg).tobytes() == sft_combined(b, batch, draw, cfg).tobytes()


def test_draws():
    rng = np.random.default_rng(20)
    s = linear_schedule()
    d = draw_pairs(rng, s, (4,) + LATENT)
    assert d.t.shape == (4,) and d.eps_w.dtype == np.float32
    assert not np.array_equal(d.eps_w, d.eps_l)
    shared = draw_pairs(rng, s, (4,) + LATENT, share_noise=True)
    assert shared.eps_w is shared.eps_l
    big = draw_sft(rng, s, (20000, 2))
    assert abs(big.eps.mean()) < 0.02 and abs(big.eps.var() - 1) < 0.02
    assert big.t.min() >= 1 and big.t.max() <= 1000


# ---------------------------------------------------------------- x0 decode


def test_x0_decode_oracle_recovers_clean_decode():
    rng = np.random.default_rng(21)
    b = toy_bundle("mlp2")
    z0 = rng.standard_normal((2,) + LATENT)
    eps = rng.standard_normal(z0.shape)
    for t in (1, 300, 900):
        ab = b.schedule.alpha_bar(t)
        zt = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps
        np.testing.assert_allclose(x0_decode(b, zt, t, eps_hat=eps), b.decode(z0), atol=1e-9)


def test_x0_decode_small_t_is_plain_decode():
    rng = np.random.default_rng(22)
    b = toy_bundle("mlp2")
    zt = rng.standard_normal((2,) + LATENT)
    np.testing.assert_allclose(x0_decode(b, zt, 1, labels=0), b.decode(zt), atol=5e-3)


def test_x0_decode_guard():
    b = toy_bundle("mlp2")
    b.schedule = linear_schedule(1000, 0.05, 0.5)
    with pytest.raises(LossError):
        x0_decode(b, np.zeros((1,) + LATENT), 1000, eps_hat=np.zeros((1,) + LATENT))


# ---------------------------------------------------------------- gradient oracle


def _loss_cases():
    rng = np.random.default_rng(23)
    batch, draw = _sft(rng, n=2)
    pairs, pdraw = _pairs(rng, n=2)
    b = toy_bundle("mlp2")
    ref = clone_frozen(toy_bundle("mlp2", seed=7))
    cfg = LossConfig(lam=8.0, mu=8.0, beta=2.0)
    zt = rng.standard_normal((2,) + LATENT)
    return b, {
        "sft_latent": lambda p: sft_latent(b, batch, draw, params=p),
        "sft_pixel": lambda p: sft_pixel(b, batch, draw, params=p),
        "sft_combined": lambda p: sft_combined(b, batch, draw, cfg, params=p),
        "dpo_latent": lambda p: dpo_latent(b, ref, pairs, pdraw, cfg, params=p),
        "simpo_latent": lambda p: simpo_latent(b, pairs, pdraw, cfg, params=p),
        "simpo_pixel": lambda p: simpo_pixel(b, pairs, pdraw, cfg, params=p),
        "dpo_pixel": lambda p: dpo_pixel(b, ref, pairs, pdraw, cfg, params=p),
        "reward_combined": lambda p: reward_combined(b, ref, pairs, pdraw, cfg, "dpo+dpoPix", params=p),
        "x0_decode": lambda p: ops.mean(x0_decode(b, zt, np.array([200, 600]), labels=np.array([0, 2]),
                                                  params=p)),
    }


LOSS_NAMES = ["sft_latent", "sft_pixel", "sft_combined", "dpo_latent", "simpo_latent", "simpo_pixel",
              "dpo_pixel", "reward_combined", "x0_decode"]


@pytest.mark.parametrize("name", LOSS_NAMES)
def test_loss_gradients(name):
    b, cases = _loss_cases()
    res = check_gradients(cases[name], [], b.denoiser)
    assert res.ok, res.errors

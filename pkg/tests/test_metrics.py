import numpy as np
import pytest

from pixelpost import metrics
from pixelpost.data import CorpusSpec, FAMILIES, generate_corpus
from pixelpost.metrics import (
    accuracy_report,
    classify,
    conditioning_accuracy,
    decode_error_curve,
    flaw_scores,
    read_report,
    sample_report,
    spearman,
    template_bank,
    write_report,
    x0_variance_curve,
)
from pixelpost.sampler import SamplerConfig

from toys import toy_bundle


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CorpusSpec(n_train=64, n_sft=32, n_eval=64, n_pairs=16, seed=3))


def test_bank_rows_are_unit_and_detrended():
    bank = template_bank(32)
    assert np.allclose(np.linalg.norm(bank.templates, axis=1), 1.0)
    assert np.abs(bank.templates @ bank.basis.T).max() < 1e-9
    assert set(np.unique(bank.family_of)) == set(range(len(FAMILIES)))


@pytest.mark.parametrize("split", ["train", "sft", "eval"])
def test_classifier_is_exact_on_pristine_samples(corpus, split):
    assert np.array_equal(classify(corpus.images(split)), corpus.labels(split))


def test_classifier_on_noise_is_near_chance():
    rng = np.random.default_rng(0)
    pred = classify(rng.uniform(size=(800, 3, 32, 32)))
    labels = np.arange(800) % 4
    assert abs(np.mean(pred == labels) - 0.25) < 0.1


def test_classifier_ignores_colour_and_offset(corpus):
    x = corpus.images("eval")
    assert np.array_equal(classify(0.3 + 0.5 * x[:, ::-1]), corpus.labels("eval"))


def test_flaw_zero_on_pristine_and_positive_on_losers(corpus):
    assert flaw_scores(corpus.images("eval")).max() < 1e-10
    w, l, _ = corpus.pair_arrays()
    assert np.all(flaw_scores(l) > flaw_scores(w))


def test_flaw_grows_with_degradation(corpus):
    x = corpus.images("eval")[:16]
    rng = np.random.default_rng(0)
    noisy = [np.clip(x + s * rng.standard_normal(x.shape), 0, 1) for s in (0.02, 0.05, 0.1)]
    f = [flaw_scores(v).mean() for v in noisy]
    assert f[0] < f[1] < f[2]


def test_flaw_of_gaussian_noise_matches_variance():
    rng = np.random.default_rng(1)
    x = 0.5 + 0.1 * rng.standard_normal((4, 3, 32, 32))
    # the best of ~1500 templates explains only a little of white noise
    assert flaw_scores(x).mean() == pytest.approx(0.01, rel=0.1)


def test_accuracy_report_flags_below_chance_plus_ten():
    labels = np.arange(40) % 4
    low = accuracy_report(np.zeros(40, int), labels, 4)
    assert low.accuracy == 0.25 and low.flagged
    good = accuracy_report(labels, labels, 4)
    assert good.accuracy == 1.0 and not good.flagged
    assert good.per_class == (1.0, 1.0, 1.0, 1.0)


def test_conditioning_accuracy_of_untrained_model_is_reported_not_raised():
    b = toy_bundle("mlp2", decoder="conv", latent=(4, 4, 4), num_classes=4)
    rep = conditioning_accuracy(b, SamplerConfig(num_steps=2), n_per_class=3, seed=0)
    assert 0.0 <= rep.accuracy <= 1.0
    assert len(rep.per_class) == 4
    assert rep.flagged == (rep.accuracy < 0.35)


def _oracle(zt, t, labels, eps):
    return eps


@pytest.mark.parametrize("decoder", ["identity", "linear", "conv"])
def test_oracle_noise_gives_zero_x0_error(decoder):
    b = toy_bundle("mlp2", decoder=decoder)
    z0 = np.random.default_rng(0).standard_normal((6,) + b.ae_config.latent_shape).astype(np.float32)
    rows = x0_variance_curve(b, z0, [100, 500, 900], n_draws=3, eps_fn=_oracle)
    assert [r.t for r in rows] == [100, 500, 900]
    # float32 inversion through 1/sqrt(abar) at t = 900 leaves rounding noise only
    assert all(r.mean < 1e-8 for r in rows)
    rows = decode_error_curve(b, z0, [100, 900], n_draws=3, eps_fn=_oracle)
    assert all(r.mean == 0.0 for r in rows)


def test_single_t_grid_gives_single_row():
    b = toy_bundle("mlp2", decoder="identity")
    z0 = np.zeros((2,) + b.ae_config.latent_shape, np.float32)
    rows = x0_variance_curve(b, z0, [300], n_draws=100, batch=2)
    assert len(rows) == 1 and rows[0].n == 200 and rows[0].path == "x0"


def test_identity_decoder_x0_error_scales_with_noise_ratio():
    # for a constant-output denoiser x0 error = (1 - abar)/abar * E||eps - c||^2
    b = toy_bundle("const", decoder="identity")
    z0 = np.zeros((4,) + b.ae_config.latent_shape, np.float32)
    rows = x0_variance_curve(b, z0, [100, 300, 500, 700, 900], n_draws=20)
    assert spearman([r.t for r in rows], [r.mean for r in rows]) == pytest.approx(1.0)
    ab = b.schedule.alpha_bar(np.array([100, 900]))
    ratio = rows[-1].mean / rows[0].mean
    assert ratio == pytest.approx((1 - ab[1]) / ab[1] / ((1 - ab[0]) / ab[0]), rel=0.3)


def test_sample_report_on_corpus(corpus):
    rep = sample_report(corpus.images("eval"), corpus.labels("eval"), 4)
    assert rep["accuracy"] == 1.0 and rep["flaw_mse"] < 1e-10
    assert 0.0 <= rep["hf_energy_ratio"] <= 1.0


def test_report_csv_round_trip(tmp_path):
    p = tmp_path / "r" / "report.csv"
    write_report(p, "runA", 10, {"hf_energy_ratio": 0.25, "flaw_mse": 1e-3})
    write_report(p, "runB", 20, {"hf_energy_ratio": 0.5}, append=True)
    rows = read_report(p)
    assert [(r["run_id"], r["step"], r["metric"]) for r in rows] == [
        ("runA", "10", "flaw_mse"), ("runA", "10", "hf_energy_ratio"), ("runB", "20", "hf_energy_ratio")]
    assert float(rows[1]["value"]) == 0.25


def test_spearman_monotone():
    assert spearman([1, 2, 3, 4], [0.1, 0.5, 0.7, 9.0]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_module_reexports_spectrum():
    assert metrics.hf_energy_ratio(np.ones((3, 8, 8))) == 0.0

import numpy as np
import pytest

from tlcm.diffusion import NULL_LABEL, build_schedule, ddim_multi, forward_diffuse
from tlcm.nets import make_denoiser
from tlcm.rng import rng
from tlcm.teacher import (MixtureDataset, TeacherConfig, TrainingDiverged, analytic_gaussian_eps,
                          fit_noise_model, gaussian_oracle, noise_loss_and_grad, sample_dataset,
                          teacher_batch, train_teacher)

SCH = build_schedule()


def test_dataset_geometry_and_validation():
    ds = MixtureDataset()
    assert ds.means.shape == (4, 2, 2)
    np.testing.assert_allclose(np.linalg.norm(ds.means, axis=-1), 4.0)
    with pytest.raises(ValueError):
        MixtureDataset(K=4, radius=1.0, sigma_c=0.3)


def test_zero_sigma_draws_are_component_means():
    ds = MixtureDataset(sigma_c=0.0)
    x, lab = sample_dataset(ds, 200, seed=1)
    d = np.linalg.norm(x[:, None] - ds.means[lab], axis=-1).min(axis=1)
    assert np.all(d == 0)


def test_class_frequencies_uniform_within_3_sigma():
    n = 20_000
    _, lab = sample_dataset(MixtureDataset(), n, seed=3)
    counts = np.bincount(lab, minlength=4)
    sd = np.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - n / 4) < 3 * sd)


def test_sampling_deterministic_and_label_override():
    ds = MixtureDataset()
    a = sample_dataset(ds, 50, seed=4)
    b = sample_dataset(ds, 50, seed=4)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    x, lab = sample_dataset(ds, 10, seed=4, labels=2)
    assert np.all(lab == 2)
    with pytest.raises(ValueError):
        sample_dataset(ds, 0)


def test_analytic_eps_boundaries():
    z = rng(0, "t").standard_normal((5, 2))
    mu = np.array([1.0, -1.0])
    assert np.all(analytic_gaussian_eps(mu, 1.0, z, 0.0, SCH) == 0)
    ab = SCH.alpha_bar[400]
    np.testing.assert_allclose(analytic_gaussian_eps(mu, 1.0, z, 400.0, SCH),
                               (z - np.sqrt(ab) * mu) * np.sqrt(1 - ab), atol=1e-14)


def test_analytic_eps_minimizes_noise_loss_among_scalings():
    mu, sigma, t, n = np.array([0.5, 2.0]), 0.6, 250.0, 200_000
    g = rng(1, "oracle")
    x0 = mu + sigma * g.standard_normal((n, 2))
    eps = g.standard_normal((n, 2))
    zt = forward_diffuse(SCH, x0, t, eps)
    pred = analytic_gaussian_eps(mu, sigma, zt, t, SCH)
    base = np.mean((pred - eps) ** 2)
    for k in (0.9, 0.97, 1.03, 1.1):
        assert np.mean((k * pred - eps) ** 2) >= base


def test_oracle_ddim_standard_normal_moments():
    n = 10_000
    z = rng(2, "t").standard_normal((n, 2))
    x = ddim_multi(SCH, gaussian_oracle(np.zeros(2), 1.0, SCH), z, SCH.T, 0, 64,
                   np.full(n, NULL_LABEL), 1.0)
    assert np.all(np.abs(x.mean(axis=0)) < 0.05)
    assert np.all((x.var(axis=0) > 0.9) & (x.var(axis=0) < 1.1))


def test_noise_loss_gradient():
    from tlcm.nets import finite_diff_check
    ds = MixtureDataset()
    m = make_denoiser(SCH, 2, (16, 16), 4, 4, seed=0)
    x0, t, eps, lab = teacher_batch(ds, SCH, TeacherConfig(batch=16), 0, 0)
    rep = finite_diff_check(lambda p: noise_loss_and_grad(m.with_params(p), x0, t, eps, lab, SCH),
                            m.params, probes=30)
    assert rep.max_rel_err < 1e-4


def test_teacher_batch_dropout_extremes():
    ds = MixtureDataset()
    _, t, _, lab = teacher_batch(ds, SCH, TeacherConfig(batch=64, dropout=1.0), 0, 0)
    assert np.all(lab == NULL_LABEL)
    assert t.min() >= 1 and t.max() <= SCH.T
    _, _, _, lab = teacher_batch(ds, SCH, TeacherConfig(batch=64, dropout=0.0), 0, 0)
    assert np.all(lab >= 0)
    with pytest.raises(ValueError):
        TeacherConfig(dropout=1.5)


def test_full_dropout_makes_labels_irrelevant():
    ds = MixtureDataset()
    cfg = TeacherConfig(iters=30, batch=32, dropout=1.0)
    m = train_teacher(ds, SCH, cfg, hidden=(16,))
    # label columns get no gradient signal, so they stay at their initial values
    init = make_denoiser(SCH, 2, (16,), 16, 4, seed=0)
    W, W0 = m.params[:22 * 16].reshape(22, 16), init.params[:22 * 16].reshape(22, 16)
    np.testing.assert_array_equal(W[18:], W0[18:])


@pytest.mark.slow
def test_single_gaussian_teacher_matches_oracle():
    mu, sigma = np.array([1.0, -0.5]), 0.5
    model = make_denoiser(SCH, 2, (64, 64), 16, 1, seed=0)

    def batch(step):
        g = rng(0, "gauss-teacher", step)
        x0 = mu + sigma * g.standard_normal((256, 2))
        t = g.integers(1, SCH.T + 1, 256).astype(float)
        return x0, t, g.standard_normal((256, 2)), np.full(256, NULL_LABEL)

    trace = []
    fit_noise_model(model, batch, SCH, 3000, 1e-3, trace, lr_schedule="cosine")
    assert np.mean([r["loss"] for r in trace[-100:]]) < trace[0]["loss"]
    g = rng(1, "gauss-eval")
    t = g.integers(1, SCH.T + 1, 4096).astype(float)
    zt = forward_diffuse(SCH, mu + sigma * g.standard_normal((4096, 2)), t,
                         g.standard_normal((4096, 2)))
    err = np.mean((model(zt, t, np.full(4096, NULL_LABEL)) -
                   analytic_gaussian_eps(mu, sigma, zt, t, SCH)) ** 2)
    assert err < 0.05


def test_divergence_abort():
    m = make_denoiser(SCH, 2, (8,), 4, 1, seed=0)

    def batch(step):
        g = rng(0, "div", step)
        scale = 1.0 if step == 0 else 1e3
        return (scale * g.standard_normal((8, 2)), np.full(8, 500.0), scale * g.standard_normal((8, 2)),
                np.zeros(8, int))

    with pytest.raises(TrainingDiverged):
        fit_noise_model(m, batch, SCH, 300, 1e-6, divergence_window=20)

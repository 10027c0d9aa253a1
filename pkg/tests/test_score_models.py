import numpy as np
import pytest

from udiffse.score_models import (
    DsmConfig,
    GaussianPrior,
    GaussianScoreModel,
    TrainingDiverged,
    dsm_loss,
    gaussian_dsm_loss_and_grad,
    gaussian_score,
    load_prior,
    save_prior,
    train_dsm,
)
from udiffse.sde import DiffusionSchedule
from udiffse.spectral import standard_complex_normal

SCHED = DiffusionSchedule()


def cnormal(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.fixture
def prior():
    rng = np.random.default_rng(0)
    return GaussianPrior(cnormal(rng, (4, 6)), rng.uniform(0.2, 2.0, (4, 6)))


@pytest.fixture
def cond_prior():
    rng = np.random.default_rng(1)
    return GaussianPrior(cnormal(rng, (3, 4)), rng.uniform(0.2, 2.0, (3, 4)), 0.3 * cnormal(rng, (3, 4, 5)))


def test_score_vanishes_at_mode(prior):
    t = 0.4
    s_t = SCHED.delta(t) * prior.mu
    np.testing.assert_allclose(gaussian_score(prior, s_t, t, SCHED), 0, atol=1e-15)


def test_score_matches_finite_differences(prior):
    rng = np.random.default_rng(2)
    t = 0.6
    s_t = cnormal(rng, prior.shape)
    d = SCHED.delta(t)
    var = d**2 * prior.c + SCHED.sigma_sq(t)

    def logpdf(z):
        # circular Gaussian: each real coordinate has variance var / 2
        return -np.abs(z - d * prior.mu) ** 2 / var - np.log(np.pi * var)

    h = 1e-6
    d_re = (logpdf(s_t + h) - logpdf(s_t - h)) / (2 * h)
    d_im = (logpdf(s_t + 1j * h) - logpdf(s_t - 1j * h)) / (2 * h)
    fd = 0.5 * (d_re + 1j * d_im)
    np.testing.assert_allclose(gaussian_score(prior, s_t, t, SCHED), fd, atol=1e-5)


def test_score_degenerate_prior_limit(prior):
    t = 0.5
    tiny = GaussianPrior(prior.mu, np.full(prior.shape, 1e-14))
    s_t = np.ones(prior.shape, dtype=complex)
    expected = -(s_t - SCHED.delta(t) * prior.mu) / SCHED.sigma_sq(t)
    np.testing.assert_allclose(gaussian_score(tiny, s_t, t, SCHED), expected, rtol=1e-10)


def test_conditional_with_zero_map_matches_unconditional(prior):
    cond = GaussianPrior(prior.mu, prior.c, np.zeros(prior.shape + (7,), dtype=complex))
    s_t = np.full(prior.shape, 0.3 - 0.2j)
    v = np.random.default_rng(3).standard_normal((11, 7))
    np.testing.assert_array_equal(
        gaussian_score(cond, s_t, 0.3, SCHED, v), gaussian_score(prior, s_t, 0.3, SCHED)
    )


def test_conditional_needs_embedding(cond_prior):
    with pytest.raises(ValueError):
        gaussian_score(cond_prior, np.zeros(cond_prior.shape), 0.5, SCHED)


def test_score_is_deterministic(cond_prior):
    model = GaussianScoreModel(cond_prior, SCHED)
    v = np.ones((4, 5))
    s = np.ones(cond_prior.shape) * (1 + 1j)
    assert model.evaluate(s, 0.2, v).tobytes() == model.evaluate(s, 0.2, v).tobytes()


def test_shape_mismatch(prior):
    with pytest.raises(ValueError):
        gaussian_score(prior, np.zeros((2, 2)), 0.5, SCHED)


class _Oracle:
    """Returns -zeta / sigma(t): the exact minimizer of the DSM objective."""

    conditional = False

    def __init__(self, zeta, times):
        self.zeta, self.times = zeta, list(times)
        self.k = 0

    def evaluate(self, s_t, t, v=None):
        out = -self.zeta[self.k] / np.sqrt(SCHED.sigma_sq(t))
        self.k += 1
        return out


def test_dsm_loss_is_zero_for_oracle_score():
    rng = np.random.default_rng(4)
    batch = cnormal(rng, (8, 4, 4))
    zeta = standard_complex_normal(batch.shape, rng)
    t = rng.uniform(0.03, 1.0, 8)
    loss = dsm_loss(_Oracle(zeta, t), batch, SCHED, rng, t=t, zeta=zeta)
    assert loss < 1e-12


class _Zero:
    conditional = False

    def evaluate(self, s_t, t, v=None):
        return np.zeros_like(s_t)


def test_dsm_loss_of_zero_model_is_bin_count():
    rng = np.random.default_rng(5)
    batch = cnormal(rng, (1000, 4, 5))
    loss = dsm_loss(_Zero(), batch, SCHED, rng)
    assert loss == pytest.approx(20.0, rel=0.05)


def test_dsm_loss_rejects_empty_batch():
    with pytest.raises(ValueError):
        dsm_loss(_Zero(), np.zeros((0, 2, 2)), SCHED, np.random.default_rng(0))


@pytest.mark.parametrize("conditional", [False, True])
def test_gradient_matches_finite_differences(prior, cond_prior, conditional):
    p = cond_prior if conditional else prior
    rng = np.random.default_rng(6)
    n = 5
    batch = cnormal(rng, (n,) + p.shape)
    t = rng.uniform(0.03, 1.0, n)
    zeta = standard_complex_normal(batch.shape, rng)
    visual = [rng.standard_normal((3, 5)) for _ in range(n)] if conditional else None

    def loss_of(q):
        return dsm_loss(GaussianScoreModel(q, SCHED), batch, SCHED, rng, visual=visual, t=t, zeta=zeta)

    _, grad = gaussian_dsm_loss_and_grad(p, batch, SCHED, t, zeta, visual)
    h = 1e-6

    def check(analytic, perturb):
        fd = (loss_of(perturb(h)) - loss_of(perturb(-h))) / (2 * h)
        assert analytic == pytest.approx(fd, rel=1e-4, abs=1e-8)

    idx = (1, 2)
    check(grad.mu[idx].real, lambda e: _with(p, mu=_bump(p.mu, idx, e)))
    check(grad.mu[idx].imag, lambda e: _with(p, mu=_bump(p.mu, idx, 1j * e)))
    check(grad.c[idx], lambda e: _with(p, c=_bump(p.c, idx, e)))
    if conditional:
        aidx = (2, 3, 4)
        check(grad.A[aidx].real, lambda e: _with(p, A=_bump(p.A, aidx, e)))
        check(grad.A[aidx].imag, lambda e: _with(p, A=_bump(p.A, aidx, 1j * e)))


def _bump(a, idx, e):
    out = a.copy()
    out[idx] += e
    return out


def _with(p, **kw):
    return GaussianPrior(kw.get("mu", p.mu), kw.get("c", p.c), kw.get("A", p.A))


def test_zero_steps_leaves_parameters_unchanged(prior):
    data = cnormal(np.random.default_rng(7), (10,) + prior.shape)
    trained, history = train_dsm(prior, data, SCHED, DsmConfig(steps=0))
    np.testing.assert_array_equal(trained.mu, prior.mu)
    np.testing.assert_allclose(trained.c, prior.c, rtol=1e-15)
    assert history == []


def _gaussian_dataset(seed=0, n=512, shape=(8, 8)):
    rng = np.random.default_rng(seed)
    truth = GaussianPrior(cnormal(rng, shape) + (1 + 1j), rng.uniform(0.5, 1.5, shape))
    return np.stack([truth.sample(rng) for _ in range(n)])


def test_training_recovers_sample_statistics():
    data = _gaussian_dataset()
    init = GaussianPrior(np.zeros(data.shape[1:], complex), np.ones(data.shape[1:]))
    cfg = DsmConfig(steps=4000, batch_size=32, learning_rate=3e-3, optimizer="adam")
    trained, history = train_dsm(init, data, SCHED, cfg)
    mean = data.mean(axis=0)
    var = np.mean(np.abs(data - mean) ** 2, axis=0)
    assert np.linalg.norm(trained.mu - mean) / np.linalg.norm(mean) < 0.05
    # the Gaussian DSM optimum for c is the per-bin sample variance
    assert np.median(np.abs(trained.c / var - 1)) < 0.1

    smooth = np.convolve(history, np.ones(100) / 100, mode="valid")
    assert smooth[-1] <= smooth[0]
    assert smooth[len(smooth) // 2 :].max() <= smooth[0]


def test_conditional_training_learns_visual_map():
    rng = np.random.default_rng(8)
    shape, p = (3, 4), 2
    A_true = cnormal(rng, shape + (p,))
    visual = [rng.standard_normal((5, p)) + rng.standard_normal(p) for _ in range(256)]
    data = np.stack([A_true @ v.mean(axis=0) + 0.3 * standard_complex_normal(shape, rng) for v in visual])
    init = GaussianPrior(np.zeros(shape, complex), np.ones(shape), np.zeros(shape + (p,), complex))
    cfg = DsmConfig(steps=4000, batch_size=32, learning_rate=3e-3, optimizer="adam")
    trained, _ = train_dsm(init, data, SCHED, cfg, visual=visual)
    assert np.linalg.norm(trained.A - A_true) / np.linalg.norm(A_true) < 0.1


def test_divergence_is_reported():
    data = _gaussian_dataset(n=16, shape=(2, 2))
    init = GaussianPrior(np.zeros((2, 2), complex), np.ones((2, 2)))
    with pytest.raises(TrainingDiverged) as info:
        train_dsm(init, data, SCHED, DsmConfig(steps=50, learning_rate=1e6))
    assert 0 <= info.value.step < 50


@pytest.mark.parametrize("conditional", [False, True])
def test_prior_file_round_trip(tmp_path, prior, cond_prior, conditional):
    p = cond_prior if conditional else prior
    path = tmp_path / "p.bin"
    save_prior(path, p)
    assert path.read_bytes()[:8] == b"UDPRIOR1"
    back = load_prior(path)
    np.testing.assert_array_equal(back.mu, p.mu)
    np.testing.assert_array_equal(back.c, p.c)
    if conditional:
        np.testing.assert_array_equal(back.A, p.A)
    else:
        assert back.A is None


def test_prior_file_layout_is_column_major(tmp_path):
    mu = np.array([[1.0, 2.0], [3.0, 4.0]]) + 0j
    path = tmp_path / "p.bin"
    save_prior(path, GaussianPrior(mu, np.ones((2, 2))))
    raw = np.frombuffer(path.read_bytes(), dtype="<f8", offset=20)
    np.testing.assert_array_equal(raw[:4], [1.0, 3.0, 2.0, 4.0])


def test_prior_file_errors(tmp_path, prior):
    path = tmp_path / "p.bin"
    save_prior(path, prior)
    raw = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError, match="magic"):
        load_prior(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_prior(tmp_path / "short.bin")

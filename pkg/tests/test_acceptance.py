"""End-to-end acceptance checks, one verdict line per criterion.

Each test prints ``PASS`` or ``FAIL`` followed by what was measured; the
lines are repeated in an ``acceptance`` section of the pytest summary.
"""
import time

import numpy as np

from udiffse.av_fusion import FusionBlock, attention_weights, cross_attention_fuse
from udiffse.cli import main as cli_main
from udiffse.corpus import SceneSpec, gen_synthetic_scene, read_manifest, speech_like_prior
from udiffse.metrics import si_sdr
from udiffse.noise_nmf import NmfModel, is_divergence, mu_update_step
from udiffse.sampler import (
    SamplerConfig,
    expected_score_evaluations,
    pc_prior_sample,
    posterior_gradient,
    run_udiffse,
    run_udiffse_plus,
)
from udiffse.score_models import DsmConfig, GaussianPrior, GaussianScoreModel, dsm_loss, gaussian_score, train_dsm
from udiffse.sde import DiffusionSchedule, simulate_forward, tweedie_estimate
from udiffse.spectral import Spectrogram, istft, standard_complex_normal, stft

SCHED = DiffusionSchedule()


def cnormal(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def rk4_variance(sched, grid, steps_per_unit=2000):
    """Integrate d(var)/dt = -2 gamma var + g(t)^2 from var(0) = 0, reading off ``grid``."""
    rhs = lambda t, y: -2 * sched.gamma * y + sched.g(t) ** 2
    h = 1.0 / steps_per_unit
    y, t, out = 0.0, 0.0, []
    for target in grid:
        n = int(round((target - t) / h))
        for _ in range(n):
            k1 = rhs(t, y)
            k2 = rhs(t + h / 2, y + h / 2 * k1)
            k3 = rhs(t + h / 2, y + h / 2 * k2)
            k4 = rhs(t + h, y + h * k3)
            y += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        out.append(y)
    return np.array(out)


def test_schedule_variance_matches_numerical_integration(verdict):
    start = time.perf_counter()
    grid = np.linspace(0.1, 1.0, 10)
    err = np.abs(SCHED.sigma_sq(grid) - rk4_variance(SCHED, grid)).max()
    elapsed = time.perf_counter() - start
    verdict("schedule variance vs RK4", err <= 1e-6 and elapsed < 1.0, f"max err {err:.2e}, {elapsed:.2f} s")


def test_forward_simulation_matches_kernel(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    s0 = np.array([1.0 + 0.5j, -0.8 + 0.2j, 0.3 - 1.2j])
    worst = 0.0
    for t in (0.3, 0.7, 1.0):
        paths = simulate_forward(s0, t, SCHED, rng, n_substeps=1000, n_trials=10_000)
        mean_err = np.abs(paths.mean(axis=0) - SCHED.delta(t) * s0) / np.abs(SCHED.delta(t) * s0)
        var = np.mean(np.abs(paths - paths.mean(axis=0)) ** 2, axis=0)
        var_err = np.abs(var / SCHED.sigma_sq(t) - 1)
        worst = max(worst, mean_err.max(), var_err.max())
    elapsed = time.perf_counter() - start
    verdict("forward Euler-Maruyama vs perturbation kernel", worst <= 0.03 and elapsed < 30, f"worst rel err {worst:.4f}, {elapsed:.1f} s")


def test_tweedie_gaussian_identity(verdict):
    rng = np.random.default_rng(1)
    prior = GaussianPrior(cnormal(rng, (8, 6)), rng.uniform(0.1, 2.0, (8, 6)))
    worst = 0.0
    for t in np.linspace(0.05, 1.0, 10):
        d, var = SCHED.delta(t), SCHED.sigma_sq(t)
        s_t = cnormal(rng, prior.shape)
        est = tweedie_estimate(s_t, t, SCHED, gaussian_score(prior, s_t, t, SCHED))
        closed = (var * prior.mu + d * prior.c * s_t) / (d**2 * prior.c + var)
        worst = max(worst, np.abs(est - closed).max())
    verdict("Tweedie estimate equals Gaussian conditional mean", worst <= 1e-10, f"max err {worst:.2e}")


class _ZetaOracle:
    conditional = False

    def __init__(self, zeta):
        self.zeta, self.k = zeta, 0

    def evaluate(self, s_t, t, v=None):
        out = -self.zeta[self.k] / SCHED.sigma(t)
        self.k += 1
        return out


def test_dsm_recovers_gaussian_prior(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    shape = (8, 8)
    truth = GaussianPrior(cnormal(rng, shape) + (1 + 1j), rng.uniform(0.5, 1.5, shape))
    data = np.stack([truth.sample(rng) for _ in range(512)])
    init = GaussianPrior(np.zeros(shape, complex), np.ones(shape))
    cfg = DsmConfig(steps=4000, batch_size=32, learning_rate=3e-3, optimizer="adam")
    trained, _ = train_dsm(init, data, SCHED, cfg)
    mean = data.mean(axis=0)
    rel = np.linalg.norm(trained.mu - mean) / np.linalg.norm(mean)

    batch = data[:64]
    zeta = standard_complex_normal(batch.shape, rng)
    t = rng.uniform(0.03, 1.0, len(batch))
    oracle_loss = dsm_loss(_ZetaOracle(zeta), batch, SCHED, rng, t=t, zeta=zeta)
    elapsed = time.perf_counter() - start
    ok = rel <= 0.05 and oracle_loss < 1e-12 and elapsed < 120
    verdict("DSM training recovers the sample mean", ok, f"mu rel err {rel:.4f}, oracle loss {oracle_loss:.1e}, {elapsed:.1f} s")


def test_nmf_updates_are_monotone(verdict):
    worst = -np.inf
    for seed in range(100):
        rng = np.random.default_rng(seed)
        V = rng.exponential(size=(8, 8)) * rng.uniform(0.1, 10.0)
        model = NmfModel.initialize(np.sqrt(V), 2, rng)
        prev = is_divergence(V, model.noise_variance())
        for _ in range(100):
            model = mu_update_step(model, V)
            cur = is_divergence(V, model.noise_variance())
            worst = max(worst, cur - prev)
            prev = cur
    fixed = 0.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        model = NmfModel(rng.uniform(0.5, 2, (8, 2)), rng.uniform(0.5, 2, (2, 8)))
        upd = mu_update_step(model, model.noise_variance())
        fixed = max(fixed, np.abs(upd.W - model.W).max(), np.abs(upd.H - model.H).max())
    ok = worst <= 1e-9 and fixed <= 1e-12
    verdict("IS-NMF multiplicative updates", ok, f"largest increase {worst:.1e}, fixed-point drift {fixed:.1e}")


def test_posterior_gradient_matches_finite_differences(verdict):
    worst = 0.0
    h = 1e-6
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x, s = cnormal(rng, (5, 4)), cnormal(rng, (5, 4))
        v = rng.uniform(0.1, 2.0, (5, 4))
        tau = rng.uniform(0.05, 1.0)
        d = SCHED.delta(tau)
        var = SCHED.sigma_sq(tau) / d**2 + v

        def logpdf(z):
            return -np.abs(x - z / d) ** 2 / var - np.log(np.pi * var)

        d_re = (logpdf(s + h) - logpdf(s - h)) / (2 * h)
        d_im = (logpdf(s + 1j * h) - logpdf(s - 1j * h)) / (2 * h)
        fd = 0.5 * (d_re + 1j * d_im)
        worst = max(worst, np.abs(posterior_gradient(s, x, tau, SCHED, v) - fd).max())
    verdict("posterior gradient vs finite differences", worst <= 1e-5, f"max err {worst:.1e}")


def test_disabled_posterior_is_prior_sampling(verdict):
    rng = np.random.default_rng(2)
    shape = (12, 10)
    model = GaussianScoreModel(GaussianPrior(cnormal(rng, shape), rng.uniform(0.2, 1, shape)), SCHED)
    x = cnormal(rng, shape)
    nmf = NmfModel.initialize(x, 2, rng)
    same = True
    for seed in range(5):
        for cfg in (SamplerConfig(seed=seed, likelihood_weight=0.0), SamplerConfig(seed=seed, posterior_cadence="never")):
            res = run_udiffse_plus(x, model, nmf, SCHED, cfg)
            same &= res.s_hat.tobytes() == pc_prior_sample(x, model, SCHED, cfg).tobytes()
    verdict("disabled posterior box reduces to PC prior sampling", same, "10 seeded runs, bitwise")


def test_gaussian_posterior_oracle(verdict):
    rng = np.random.default_rng(3)
    shape = (16, 16)
    prior = GaussianPrior(cnormal(rng, shape), rng.uniform(0.5, 2.0, shape))
    a, b = rng.uniform(0.5, 1.5, (shape[0], 1)), rng.uniform(0.5, 1.5, (1, shape[1]))
    nmf = NmfModel(a, b)
    v = nmf.noise_variance()
    x = prior.sample(rng) + np.sqrt(v / 2) * cnormal(rng, shape)
    post = prior.mu + prior.c / (prior.c + v) * (x - prior.mu)

    model = GaussianScoreModel(prior, SCHED)
    runs = [run_udiffse_plus(x, model, nmf, SCHED, SamplerConfig(seed=k, update_noise=False)).s_hat for k in range(64)]
    avg = np.mean(runs, axis=0)
    d_post, d_mu, d_x = (np.linalg.norm(avg - ref) for ref in (post, prior.mu, x))
    ok = d_post < d_mu and d_post < d_x
    verdict("run average is closest to the analytic posterior mean", ok, f"L2 to posterior {d_post:.2f}, to mu {d_mu:.2f}, to x {d_x:.2f}")


def test_end_to_end_enhancement(verdict):
    start = time.perf_counter()
    prior = speech_like_prior(rng=0)
    model = GaussianScoreModel(prior, SCHED)
    gains = []
    for seed in range(20):
        scene = gen_synthetic_scene(SceneSpec(snr_db=0.0, source_kind="gaussian-prior-draw", noise_kind="white", seed=seed), prior)
        X = stft(scene.noisy)
        res = run_udiffse_plus(X, model, NmfModel.initialize(X.data, 4, seed), SCHED, SamplerConfig(seed=seed))
        est = istft(Spectrogram(res.s_hat, X.config, X.length))
        gains.append(si_sdr(est, scene.clean) - si_sdr(scene.noisy, scene.clean))
    median = float(np.median(gains))
    elapsed = time.perf_counter() - start
    ok = median >= 3.0 and elapsed < 300
    verdict("matched-prior enhancement at 0 dB", ok, f"median SI-SDR gain {median:.2f} dB over 20 scenes, {elapsed:.0f} s")


def test_speed_structure(verdict):
    prior = speech_like_prior(rng=0)
    model = GaussianScoreModel(prior, SCHED)
    scene = gen_synthetic_scene(SceneSpec(source_kind="gaussian-prior-draw", seed=0), prior)
    X = stft(scene.noisy)
    nmf = NmfModel.initialize(X.data, 4, 0)
    cfg = SamplerConfig(em_iterations=5)
    plus_times, em_times = [], []
    for _ in range(3):
        plus = run_udiffse_plus(X, model, nmf, SCHED, cfg)
        em = run_udiffse(X, model, nmf, SCHED, cfg)
        plus_times.append(plus.stats.wall_time)
        em_times.append(em.stats.wall_time)
    count_ratio = em.stats.score_evaluations / plus.stats.score_evaluations
    formula_ok = (
        plus.stats.score_evaluations == expected_score_evaluations("udiffse+", 30)
        and em.stats.score_evaluations == expected_score_evaluations("udiffse", 30, 5)
    )
    wall_ratio = np.median(em_times) / np.median(plus_times)
    ok = formula_ok and count_ratio == 4.0 and wall_ratio >= 3.5
    verdict("EM baseline vs single pass cost", ok, f"score-eval ratio {count_ratio}, wall-clock ratio {wall_ratio:.2f}")


def test_fusion_block(verdict):
    rng = np.random.default_rng(4)
    row_err, residual_exact, shapes_ok = 0.0, True, True
    for _ in range(50):
        C, F, T, Tv, p = (int(n) for n in rng.integers(1, 24, size=5))
        block = FusionBlock.random(C, F, embed_dim=p, rng=rng)
        e_a, v = rng.standard_normal((C, F, T)), rng.standard_normal((Tv, p))
        row_err = max(row_err, np.abs(attention_weights(block, e_a, v).sum(axis=-1) - 1).max())
        shapes_ok &= cross_attention_fuse(block, e_a, v).shape == (C, F, T)
        block.W_v[:] = 0.0
        residual_exact &= np.array_equal(cross_attention_fuse(block, e_a, v), e_a)
    ok = row_err <= 1e-9 and residual_exact and shapes_ok
    verdict("cross-attention fusion block", ok, f"row-sum err {row_err:.1e}, zero-value residual exact {residual_exact}, shapes {shapes_ok}")


def test_cli_runs_replay_from_report(tmp_path, verdict):
    stft_flags = ["--window-length", "126", "--hop", "32"]
    data = tmp_path / "data"
    assert cli_main(["synth", "--out", str(data), "--count", "1", "--source", "gaussian-prior-draw", "--duration", "0.5"] + stft_flags) == 0
    entry = read_manifest(data / "manifest.txt")[0]
    identical = []
    for algo in ("udiffse+", "udiffse"):
        out, report = tmp_path / f"{algo}.wav", tmp_path / f"{algo}.report"
        argv = ["enhance", "--algo", algo, "--input", entry["noisy"], "--prior", str(data / "source_prior.bin"),
                "--reference", entry["clean"], "--output", str(out), "--report", str(report), "--seed", "7"]
        assert cli_main(argv + stft_flags) == 0
        replay = tmp_path / f"{algo}.replay.wav"
        assert cli_main(["enhance", "--config", str(report), "--output", str(replay)]) == 0
        identical.append(out.read_bytes() == replay.read_bytes())
    verdict("CLI runs replay byte-identically from their reports", all(identical), f"{sum(identical)}/2 runs identical")

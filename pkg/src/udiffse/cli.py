"""Command-line entry point: ``synth``, ``train-prior``, ``enhance``, ``eval``, ``bench``.

Run configurations are flat ``key = value`` text.  Values from ``--config``
are overridden by explicit flags.  An ``enhance`` report starts with the full
configuration, so ``udiffse enhance --config run.report`` replays the run.
"""
from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import corpus
from .av_fusion import load_visual_embedding
from .metrics import rtf, si_sdr
from .noise_nmf import DEFAULT_EPS, DEFAULT_RANK, NmfModel
from .sampler import SamplerConfig, SamplerDivergence, enhance
from .score_models import (
    DsmConfig,
    GaussianPrior,
    GaussianScoreModel,
    TrainingDiverged,
    load_prior,
    save_prior,
    train_dsm,
)
from .sde import DiffusionSchedule
from .spectral import Spectrogram, StftConfig, istft, read_wav, stft, write_wav

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_MISMATCH = 4
EXIT_DIVERGED = 5

ALGOS = ("udiffse", "udiffse+")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    algo: str = "udiffse+"
    seed: int = 0
    gamma: float = 1.5
    sigma_min: float = 0.05
    sigma_max: float = 0.5
    n_steps: int = 30
    likelihood_weight: float = 3.0
    corrector_snr: float = 0.5
    em_iterations: int = 5
    posterior_cadence: str = "even"
    m_step_iterations: int = 50
    init_variance: float = 1.0
    rank: int = DEFAULT_RANK
    eps_nmf: float = DEFAULT_EPS
    window_length: int = 510
    hop: int = 128
    input: str = ""
    output: str = ""
    prior: str = ""
    visual: str = ""
    reference: str = ""

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.gamma, self.sigma_min, self.sigma_max, self.n_steps)

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(
            n_steps=self.n_steps,
            corrector_snr=self.corrector_snr,
            likelihood_weight=self.likelihood_weight,
            em_iterations=self.em_iterations,
            posterior_cadence=self.posterior_cadence,
            seed=self.seed,
            init_variance=self.init_variance,
            m_step_iterations=self.m_step_iterations,
        )

    def stft_config(self) -> StftConfig:
        return StftConfig(self.window_length, self.hop)

    def validate(self) -> None:
        if self.algo not in ALGOS:
            raise ValueError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        self.schedule()
        self.sampler()
        self.stft_config()
        if self.rank < 1 or not self.eps_nmf > 0:
            raise ValueError("rank must be >= 1 and eps_nmf > 0")
        for key in ("input", "output", "prior"):
            if not getattr(self, key):
                raise ValueError(f"missing required setting {key!r}")
        for key in ("input", "prior", "visual", "reference"):
            value = getattr(self, key)
            if value and not Path(value).is_file():
                raise FileNotFoundError(f"{key} file not found: {value}")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_CASTS = {"int": int, "float": float, "str": str}


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines up to the first ``[section]`` header."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            break
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key not in _FIELD_TYPES:
            raise ValueError(f"line {lineno}: unknown setting {key!r}")
        try:
            values[key] = _CASTS[_FIELD_TYPES[key]](value)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    return values


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


def build_run_config(args) -> RunConfig:
    values = {}
    if args.config:
        try:
            values.update(parse_config_text(Path(args.config).read_text()))
        except OSError as exc:
            raise CliError(EXIT_CONFIG, f"cannot read config: {exc}") from exc
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, f"{args.config}: {exc}") from exc
    for name in _FIELD_TYPES:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    cfg = RunConfig(**values)
    for key in ("input", "output", "prior", "visual", "reference"):
        if getattr(cfg, key):
            setattr(cfg, key, str(Path(getattr(cfg, key)).resolve()))
    try:
        cfg.validate()
    except FileNotFoundError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    return cfg


def _format_matrix(name, M) -> str:
    rows = "\n".join(" ".join(f"{x:.9e}" for x in row) for row in M)
    return f"[{name} {M.shape[0]}x{M.shape[1]}]\n{rows}\n"


def run_enhance(cfg: RunConfig, report_path=None, dump_nmf=False) -> dict:
    try:
        noisy = read_wav(cfg.input)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read input: {exc}") from exc
    try:
        prior = load_prior(cfg.prior)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read prior: {exc}") from exc
    if prior.conditional and not cfg.visual:
        raise CliError(EXIT_CONFIG, "prior is conditional: a visual embedding (--visual) is required")
    visual = None
    if prior.conditional:
        try:
            visual = load_visual_embedding(cfg.visual)
        except (OSError, ValueError) as exc:
            raise CliError(EXIT_INPUT, f"cannot read visual embedding: {exc}") from exc
        if visual.dim != prior.embedding_dim:
            raise CliError(
                EXIT_MISMATCH,
                f"embedding dim {visual.dim} does not match prior dim {prior.embedding_dim}",
            )

    X = stft(noisy, cfg.stft_config())
    if X.shape != prior.shape:
        raise CliError(EXIT_MISMATCH, f"input STFT shape {X.shape} does not match prior shape {prior.shape}")

    sched = cfg.schedule()
    model = GaussianScoreModel(prior, sched)
    nmf_init = NmfModel.initialize(X.data, cfg.rank, np.random.default_rng(cfg.seed), cfg.eps_nmf)
    try:
        result = enhance(cfg.algo, X, model, nmf_init, sched, cfg.sampler(), visual, noisy.duration)
    except SamplerDivergence as exc:
        raise CliError(EXIT_DIVERGED, str(exc)) from exc

    enhanced = istft(Spectrogram(result.s_hat, X.config, X.length), sample_rate=noisy.sample_rate)
    write_wav(cfg.output, enhanced)

    stats = result.stats
    metrics = {
        "score_evaluations": stats.score_evaluations,
        "nmf_updates": stats.nmf_updates,
        "wall_time": stats.wall_time,
        "audio_duration": stats.audio_duration,
        "rtf": rtf(stats),
    }
    if cfg.reference:
        reference = read_wav(cfg.reference)
        metrics["si_sdr_input"] = si_sdr(noisy, reference)
        metrics["si_sdr_output"] = si_sdr(enhanced, reference)
    if report_path:
        text = "# udiffse enhance report\n" + format_config(cfg) + "[metrics]\n"
        text += "".join(f"{k} = {v}\n" for k, v in metrics.items())
        if dump_nmf:
            text += _format_matrix("W", result.nmf.W) + _format_matrix("H", result.nmf.H)
        Path(report_path).write_text(text)
    return metrics


def cmd_enhance(args) -> int:
    cfg = build_run_config(args)
    metrics = run_enhance(cfg, args.report, args.dump_nmf)
    for k, v in metrics.items():
        print(f"{k} = {v}")
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    prior = None
    if args.source == "gaussian-prior-draw":
        if args.prior:
            prior = load_prior(args.prior)
        else:
            cfg = StftConfig(args.window_length, args.hop)
            n_frames = cfg.n_frames(int(round(args.duration * 16000)))
            prior = corpus.speech_like_prior(cfg.n_bins, n_frames, args.seed)
            out.mkdir(parents=True, exist_ok=True)
            save_prior(out / "source_prior.bin", prior)
    entries = []
    for k in range(args.count):
        seed = args.seed + k
        spec = corpus.SceneSpec(args.duration, args.snr, args.source, args.noise, seed)
        scene = corpus.gen_synthetic_scene(spec, prior, StftConfig(args.window_length, args.hop))
        name = f"scene{k:03d}"
        paths = corpus.write_scene(scene, out, name, args.pcm16)
        entries.append({**{k2: p.name for k2, p in paths.items()}, "seed": seed, "snr_db": args.snr})
    corpus.write_manifest(out / "manifest.txt", entries)
    print(f"wrote {len(entries)} scenes to {out}")
    return EXIT_OK


def cmd_train_prior(args) -> int:
    entries = corpus.read_manifest(args.manifest)
    cfg = StftConfig(args.window_length, args.hop)
    try:
        data = np.stack([stft(read_wav(e["clean"]), cfg).data for e in entries])
        visual = [load_visual_embedding(e["visual"]) for e in entries] if args.conditional else None
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_INPUT, f"cannot load training data: {exc}") from exc
    A = None
    if visual is not None:
        dims = {v.dim for v in visual}
        if len(dims) != 1:
            raise CliError(EXIT_MISMATCH, f"inconsistent embedding dims {sorted(dims)}")
        A = np.zeros(data.shape[1:] + (dims.pop(),), dtype=complex)
    init = GaussianPrior(np.zeros(data.shape[1:], dtype=complex), np.maximum(np.var(data, axis=0), 1e-8), A)
    sched = DiffusionSchedule(args.gamma, args.sigma_min, args.sigma_max)
    dsm = DsmConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        optimizer=args.optimizer,
        seed=args.seed,
    )
    prior, history = train_dsm(init, data, sched, dsm, visual)
    save_prior(args.output, prior)
    if history:
        print(f"trained {len(history)} steps, final loss {history[-1]:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        est = read_wav(args.estimate)
        ref = read_wav(args.reference)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc
    print(f"si_sdr_db = {si_sdr(est, ref)}")
    return EXIT_OK


def _bench_scene(job):
    entry, prior_path, base, cells = job
    prior = load_prior(prior_path)
    noisy = read_wav(entry["noisy"])
    clean = read_wav(entry["clean"])
    visual = load_visual_embedding(entry["visual"]) if prior.conditional else None
    X = stft(noisy, base.stft_config())
    rows = []
    for algo, n_steps, em in cells:
        cfg = RunConfig(**{**asdict(base), "algo": algo, "n_steps": n_steps, "em_iterations": em})
        sched = cfg.schedule()
        nmf = NmfModel.initialize(X.data, cfg.rank, np.random.default_rng(cfg.seed), cfg.eps_nmf)
        res = enhance(algo, X, GaussianScoreModel(prior, sched), nmf, sched, cfg.sampler(), visual, noisy.duration)
        est = istft(Spectrogram(res.s_hat, X.config, X.length))
        rows.append((algo, n_steps, em, rtf(res.stats), si_sdr(noisy, clean), si_sdr(est, clean)))
    return rows


def cmd_bench(args) -> int:
    entries = corpus.read_manifest(args.manifest)
    base = RunConfig(seed=args.seed, window_length=args.window_length, hop=args.hop)
    steps = [int(s) for s in args.steps.split(",")]
    ems = [int(e) for e in args.em.split(",")]
    cells = [("udiffse+", n, 1) for n in steps] + [("udiffse", n, e) for n in steps for e in ems]
    jobs = [(e, args.prior, base, cells) for e in entries]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            per_scene = list(pool.map(_bench_scene, jobs))
    else:
        per_scene = [_bench_scene(j) for j in jobs]
    lines = [f"{'algo':<10} {'N':>4} {'EM':>3} {'RTF':>8} {'SI-SDR in':>10} {'SI-SDR out':>11}"]
    for idx, (algo, n, em) in enumerate(cells):
        vals = np.array([rows[idx][3:] for rows in per_scene])
        r, sin, sout = vals.mean(axis=0)
        lines.append(f"{algo:<10} {n:>4} {em:>3} {r:>8.3f} {sin:>10.2f} {sout:>11.2f}")
    table = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(table)
    print(table, end="")
    return EXIT_OK


def _add_run_flags(p):
    p.add_argument("--config", help="flat key = value run configuration (or a previous report)")
    p.add_argument("--algo", choices=ALGOS)
    p.add_argument("--input")
    p.add_argument("--output")
    p.add_argument("--prior")
    p.add_argument("--visual")
    p.add_argument("--reference")
    p.add_argument("--seed", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--sigma-min", dest="sigma_min", type=float)
    p.add_argument("--sigma-max", dest="sigma_max", type=float)
    p.add_argument("--n-steps", dest="n_steps", type=int)
    p.add_argument("--likelihood-weight", dest="likelihood_weight", type=float)
    p.add_argument("--corrector-snr", dest="corrector_snr", type=float)
    p.add_argument("--em-iterations", dest="em_iterations", type=int)
    p.add_argument("--posterior-cadence", dest="posterior_cadence", choices=("even", "every", "never"))
    p.add_argument("--m-step-iterations", dest="m_step_iterations", type=int)
    p.add_argument("--init-variance", dest="init_variance", type=float)
    p.add_argument("--rank", type=int)
    p.add_argument("--eps-nmf", dest="eps_nmf", type=float)
    p.add_argument("--window-length", dest="window_length", type=int)
    p.add_argument("--hop", type=int)


def _add_stft_flags(p):
    p.add_argument("--window-length", dest="window_length", type=int, default=510)
    p.add_argument("--hop", type=int, default=128)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="udiffse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enhance", help="enhance a noisy WAV file")
    _add_run_flags(p)
    p.add_argument("--report", help="write a run report here")
    p.add_argument("--dump-nmf", action="store_true", help="append final W and H to the report")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--snr", type=float, default=0.0)
    p.add_argument("--source", choices=corpus.SOURCE_KINDS, default="harmonic")
    p.add_argument("--noise", choices=corpus.NOISE_KINDS, default="white")
    p.add_argument("--duration", type=float, default=corpus.DEFAULT_DURATION)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prior", help="prior file for gaussian-prior-draw sources")
    p.add_argument("--pcm16", action="store_true")
    _add_stft_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-prior", help="fit a Gaussian prior by denoising score matching")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--conditional", action="store_true")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--optimizer", choices=("sgd", "momentum", "adam"), default="sgd")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gamma", type=float, default=1.5)
    p.add_argument("--sigma-min", dest="sigma_min", type=float, default=0.05)
    p.add_argument("--sigma-max", dest="sigma_max", type=float, default=0.5)
    _add_stft_flags(p)
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("eval", help="SI-SDR of an estimate against a reference")
    p.add_argument("--estimate", required=True)
    p.add_argument("--reference", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="RTF / SI-SDR table over both algorithms")
    p.add_argument("--manifest", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--steps", default="30")
    p.add_argument("--em", default="5")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="scenes processed in parallel")
    p.add_argument("--output")
    _add_stft_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

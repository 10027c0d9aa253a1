"""Unsupervised diffusion-based speech enhancement with an NMF noise model."""
from .av_fusion import FusionBlock, VisualEmbedding, cross_attention_fuse, load_visual_embedding, write_visual_embedding
from .corpus import SceneSpec, gen_synthetic_scene, speech_like_prior
from .metrics import rtf, si_sdr
from .noise_nmf import NmfModel, is_divergence, mu_update_step
from .sampler import (
    RunStats,
    SamplerConfig,
    SamplerDivergence,
    corrector_step,
    pc_prior_sample,
    posterior_gradient,
    predictor_step,
    run_udiffse,
    run_udiffse_plus,
)
from .score_models import (
    DsmConfig,
    GaussianPrior,
    GaussianScoreModel,
    dsm_loss,
    gaussian_score,
    load_prior,
    save_prior,
    train_dsm,
)
from .sde import DiffusionSchedule, perturb, schedule_coefficients, tweedie_estimate
from .spectral import (
    Spectrogram,
    StftConfig,
    Waveform,
    istft,
    mix_at_snr,
    read_wav,
    sample_complex_gaussian,
    stft,
    write_wav,
)

__version__ = "0.1.0"

"""Task-agnostic pool-based active learning engine.

Trains a latent-variable representation adversarially against a
labeled/unlabeled discriminator, selects annotation batches by lowest
discriminator confidence, benchmarks against classic acquisition
baselines under simulated oracles, and serves query batches to human
annotators over HTTP.
"""

from .acquisition import (
    AcquisitionRequest,
    AcquisitionResult,
    acquire,
    coreset_select,
    ensemble_varr_select,
    max_entropy_select,
    mc_dropout_select,
    random_select,
    vaal_select,
    wasserstein_select,
)
from .errors import ConfigurationError, ContractViolation, NumericFailure
from .harness import CurvePoint, ExperimentConfig, run_ablation, run_experiment, time_sampling
from .models import LatentCode, ModelTriple, build_models, encode
from .losses import (
    LossBreakdown,
    discriminator_loss,
    kl_unit_gaussian,
    task_forward,
    task_loss,
    total_vae_loss,
    vae_adversarial_loss,
    vae_transductive_loss,
)
from .pool import (
    BiasConfig,
    Dataset,
    OracleConfig,
    PoolState,
    annotate,
    init_pools,
    load_dataset,
    make_gaussian_mixture,
    oracle_label,
    save_dataset,
)
from .trainer import AdamState, EpochReport, TrainConfig, optimizer_step, train

__version__ = "0.1.0"

"""Energy-score policy learning workbench.

A desk-scale library and CLI for single-forward-pass multimodal action
generation: a minimal float64 autodiff core, transformer backbone with a
noise-conditioned chunk head, energy-score training objective with exact
oracle statistics, deterministic toy imitation environments, and a
training/evaluation harness.
"""

from .autodiff import (
    ContractError,
    DimensionError,
    GradientTape,
    ParameterError,
    Rng,
    Tensor,
    TensorError,
    backward,
    norm_alpha,
    sample,
)
from .data import (
    DatasetFormatError,
    DemoDataset,
    NormStats,
    dataset_load,
    dataset_save,
    denormalize,
    generate_dataset,
    make_training_windows,
    normalize,
)
from .envs import EnvSpec, Episode, classify_mode, env_reset, env_step, make_env_spec, scripted_expert
from .evaluation import (
    ExpertPolicy,
    LatencyReport,
    ModelPolicy,
    RandomPolicy,
    RolloutResult,
    ablation_run,
    evaluate_success,
    latency_bench,
    mode_coverage,
    rollout,
    sample_spread,
)
from .model import EnergyPolicyModel, PolicyConfig, count_params
from .scoring import (
    DiscreteDistribution,
    EnergyConfig,
    chunk_energy_loss,
    closed_form_discrete_score,
    energy_distance,
    energy_loss_pair,
    energy_score_empirical,
)
from .training import (
    Checkpoint,
    CheckpointFormatError,
    TrainConfig,
    TrainingDivergence,
    adamw_step,
    checkpoint_load,
    checkpoint_save,
    make_checkpoint,
    restore_model,
    train,
)

__version__ = "0.1.0"

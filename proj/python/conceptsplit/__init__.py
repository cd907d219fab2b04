"""Token-wise value adaptation and attention-disentangling inference on a toy
latent diffusion model."""

from conceptsplit._core import (  # noqa: F401
    ConceptAdapter,
    ConfigError,
    ContractError,
    Model,
    ModelConfig,
    NumericFailure,
    apply_afg,
    attention_entropy,
    eta_schedule,
    gaussian_blur,
    gen_scene,
    harmonic_mean,
    kl_loss,
    load_adapter_db,
    mask_iou,
    pairwise_kl,
    percentile_mask,
    run_cli,
    save_adapter_db,
    set_numeric_mode,
    smooth_and_normalize,
    vocabulary,
)

__all__ = [
    "ConceptAdapter", "ConfigError", "ContractError", "Model", "ModelConfig",
    "NumericFailure", "apply_afg", "attention_entropy", "eta_schedule",
    "gaussian_blur", "gen_scene", "harmonic_mean", "kl_loss", "load_adapter_db",
    "mask_iou", "pairwise_kl", "percentile_mask", "run_cli", "save_adapter_db",
    "set_numeric_mode", "smooth_and_normalize", "vocabulary",
]

"""Latent-space perceptual loss machinery."""

from .augment import (
    CATEGORIES,
    IDENTITY_SPEC,
    AugmentationOp,
    AugmentationSpec,
    apply_augmentation,
    sample_augmentation,
)
from .backbone import (
    BackboneConfig,
    BackboneTrainConfig,
    FeatureBackbone,
    accuracy,
    make_backbone,
    train_backbone,
)
from .diagnostics import bench_loss, format_records, latent_rms, reconstruct_single
from .distance import (
    CalibratedDistance,
    CalibrationConfig,
    DistortionConfig,
    TwoAFCTriplet,
    calibrate,
    e_latent_lpips,
    latent_lpips,
    load_distance,
    make_synthetic_2afc,
    save_distance,
    two_afc_agreement,
)

"""Semantic RGB-D synthesis: a label-conditional GAN producing paired color
and depth images, with a segmentation-style discriminator, evaluation metrics,
and a class-wise dataset mixer.
"""
from .data import (DatasetIndex, DepthMap, IngestionError, LabelMap, NOISE_CHANNELS, RgbdDataset,
                   VOID_LABEL, encode_label, load_dataset, normalize_depth, one_hot_labels,
                   sample_noise)
from .discriminator import HEADS, LAYOUTS, DiscriminatorOutput, SegmentationDiscriminator
from .generator import GeneratedPair, GeneratorConfig, RgbdGenerator, SpadeNorm, SpadeResBlock
from .losses import (LossParts, LossWeights, NonFiniteLossError, adaptive_perceptual_loss,
                     class_weights, d_adversarial_loss, dataset_class_weights, depth_l1_loss,
                     g_adversarial_loss, labelmix, labelmix_consistency_loss, labelmix_mask,
                     total_losses)
from .metrics import (DepthMetrics, FeatureStats, channel_mean_extractor, confusion_matrix,
                      depth_metrics, fid, frechet_distance, miou)
from .mixer import MODALITIES, MixSpec, MixedSample, choose_classes, mix_dataset, mix_sample
from .trainer import (CheckpointError, CheckpointShapeError, CheckpointVersionError, StepStats,
                      TrainConfig, Trainer, ema_update, load_arrays, save_arrays)

__version__ = "0.1.0"

__all__ = [
    "DatasetIndex", "DepthMap", "IngestionError", "LabelMap", "NOISE_CHANNELS", "RgbdDataset",
    "VOID_LABEL", "encode_label", "load_dataset", "normalize_depth", "one_hot_labels",
    "sample_noise",
    "HEADS", "LAYOUTS", "DiscriminatorOutput", "SegmentationDiscriminator",
    "GeneratedPair", "GeneratorConfig", "RgbdGenerator", "SpadeNorm", "SpadeResBlock",
    "LossParts", "LossWeights", "NonFiniteLossError", "adaptive_perceptual_loss",
    "class_weights", "d_adversarial_loss", "dataset_class_weights", "depth_l1_loss",
    "g_adversarial_loss", "labelmix", "labelmix_consistency_loss", "labelmix_mask",
    "total_losses",
    "DepthMetrics", "FeatureStats", "channel_mean_extractor", "confusion_matrix",
    "depth_metrics", "fid", "frechet_distance", "miou",
    "MODALITIES", "MixSpec", "MixedSample", "choose_classes", "mix_dataset", "mix_sample",
    "CheckpointError", "CheckpointShapeError", "CheckpointVersionError", "StepStats",
    "TrainConfig", "Trainer", "ema_update", "load_arrays", "save_arrays",
    "__version__",
]

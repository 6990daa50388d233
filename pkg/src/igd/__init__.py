"""Interpolated Gaussian descriptor (IGD) one-class anomaly detection."""
from .estimator import IGD, DeepSVDD, check_images
from .gac import GaussianDescriptor, estimate_descriptor, gac_loss, normality_prob
from .msssim import MsssimConfig, msssim_map, msssim_score, recon_loss
from .models import BackboneConfig
from .trainer import TrainConfig, run_em, train_dsvdd_baseline

__all__ = [
    "IGD",
    "DeepSVDD",
    "check_images",
    "GaussianDescriptor",
    "estimate_descriptor",
    "gac_loss",
    "normality_prob",
    "MsssimConfig",
    "msssim_map",
    "msssim_score",
    "recon_loss",
    "BackboneConfig",
    "TrainConfig",
    "run_em",
    "train_dsvdd_baseline",
]

__version__ = "0.1.0"

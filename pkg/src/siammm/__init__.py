"""Self-supervised clustering with a merging von Mises-Fisher mixture."""

from .data import Dataset, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .encoder import SiameseNet, load_checkpoint, save_checkpoint
from .errors import (DataFormatError, DegenerateResultantError, NumericalError, SiamMMError,
                     StaleTapeError)
from .evaluate import LinearProbe, ami, linear_probe, majority_label_accuracy
from .mixture import (MergeConfig, MixtureState, VonMisesFisherMixture, init_centroids,
                      kappa_pca, load_snapshot, merge_pass, save_snapshot)
from .trainer import EpochReport, SiamMM, TrainConfig, fit
from .vmf import VmfParams, estimate_kappa, estimate_mean, log_norm_const, sample_vmf

__version__ = "0.1.0"

__all__ = [
    "DataFormatError", "Dataset", "DegenerateResultantError", "EpochReport", "LinearProbe",
    "MergeConfig", "MixtureState", "NumericalError", "SiamMM", "SiamMMError", "SiameseNet",
    "StaleTapeError", "SyntheticSpec", "TrainConfig", "VmfParams", "VonMisesFisherMixture",
    "ami", "estimate_kappa", "estimate_mean", "fit", "generate_synthetic", "init_centroids",
    "kappa_pca", "linear_probe", "load_checkpoint", "load_dataset", "load_snapshot",
    "log_norm_const", "majority_label_accuracy", "merge_pass", "sample_vmf", "save_checkpoint",
    "save_dataset", "save_snapshot",
]

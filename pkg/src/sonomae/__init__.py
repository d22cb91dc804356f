"""Ultrasound image classification toolkit: masked-autoencoder pretraining of a
small vision transformer, supervised fine-tuning, a stratified cross-validation
evaluation protocol, HSV overlay removal, a synthetic phantom generator, and
Score-CAM saliency maps. Everything runs on a minimal numpy autodiff core.
"""

from . import data, metrics, ndgrad, optim, scorecam, vitmae

__all__ = ["data", "metrics", "ndgrad", "optim", "scorecam", "vitmae"]

__version__ = "0.1.0"

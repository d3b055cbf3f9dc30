"""Minimal NumPy neural-network engine."""

from topogan.nn.checkpoint import load_bundle, save_bundle
from topogan.nn.gradcheck import gradient_check
from topogan.nn.losses import mse_loss, smoothed_target_losses, wasserstein_losses
from topogan.nn.network import LayerSpec, Model, NetworkSpec, SpecBuilder, param_count, shape_plan
from topogan.nn.optim import Adam, RMSProp, clip_weights

__all__ = [
    "Adam", "LayerSpec", "Model", "NetworkSpec", "RMSProp", "SpecBuilder", "clip_weights",
    "gradient_check", "load_bundle", "mse_loss", "param_count", "save_bundle", "shape_plan",
    "smoothed_target_losses", "wasserstein_losses",
]

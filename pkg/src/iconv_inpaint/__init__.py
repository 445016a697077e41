"""Certainty-aware convolutions for image inpainting, with a numpy autodiff core."""

from .layers import IConvLayer, SkipFusion, certainty_weighted_avg_pool, feature_estimate, iconv_forward
from .losses import PenaltyConfig, gradient_penalty, masked_gradient_norm, wgan_losses
from .models import (
    NetworkConfig,
    build_discriminator,
    build_generator,
    composite_output,
    count_parameters,
    discriminator_forward,
    generator_forward,
)
from .tensor import Tensor, backward, grad, no_grad

__version__ = "0.1.0"

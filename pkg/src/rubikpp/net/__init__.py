"""From-scratch 3D networks: layers, generator/discriminator, Adam, checkpoints."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .layers import (
    ConvSpec,
    conv3d_backward,
    conv3d_forward,
    deconv3d_backward,
    deconv3d_forward,
)
from .models import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    discriminator_forward,
    generator_forward,
    replace_head,
)
from .optim import AdamState, adam_step
from .train import gan_train_step, generator_objective, discriminator_objective, segmentation_step

__all__ = [
    "AdamState",
    "Checkpoint",
    "ConvSpec",
    "Discriminator",
    "DiscriminatorConfig",
    "Generator",
    "GeneratorConfig",
    "adam_step",
    "conv3d_backward",
    "conv3d_forward",
    "deconv3d_backward",
    "deconv3d_forward",
    "discriminator_forward",
    "discriminator_objective",
    "gan_train_step",
    "generator_forward",
    "generator_objective",
    "load_checkpoint",
    "replace_head",
    "save_checkpoint",
    "segmentation_step",
]

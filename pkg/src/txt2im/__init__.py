"""Text-to-image synthesis with text-conditional GANs at desk scale."""

from .dataset import CaptionedDataset, CaptionedExample, load_dataset, make_synthetic_dataset
from .gan_core import Discriminator, GANConfig, Generator, discriminate, generate, init_params
from .style import StyleEncoder, style_loss, style_transfer, train_style_encoder
from .text_encoder import EncoderConfig, JointEmbedding, joint_embedding_loss, train_joint_embedding
from .trainer import (
    Regime,
    TrainingConfig,
    discriminator_objective,
    generator_objective,
    load_generator,
    train,
    train_step,
)

__version__ = "0.1.0"

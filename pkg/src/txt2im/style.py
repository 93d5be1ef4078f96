"""Style encoder S that inverts the generator, and style transfer with it."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .gan_core import GANConfig, Generator
from .text_encoder import JointEmbedding, state_fingerprint

logger = logging.getLogger(__name__)

STYLE_MAGIC = "TXT2IM-STY-v1"


@dataclass
class StyleConfig:
    lr: float = 0.0002
    beta1: float = 0.5
    batch_size: int = 64
    epochs: int = 20
    steps_per_epoch: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("batch_size, epochs and steps_per_epoch must be positive")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "StyleConfig":
        return cls(**d)


class StyleEncoder(nn.Module):
    """Discriminator-shaped conv trunk followed by an affine map to R^Z."""

    def __init__(self, config: GANConfig):
        super().__init__()
        self.config = config
        layers = []
        c_in = 3
        for i, c_out in enumerate(config.discriminator_channels()):
            layers.append(nn.Conv2d(c_in, c_out, 4, 2, 1, bias=i == 0))
            if i > 0:
                layers.append(nn.BatchNorm2d(c_out))
            layers.append(nn.LeakyReLU(config.leak))
            c_in = c_out
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Linear(c_in * 16, config.z_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        res = self.config.resolution
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, res, res):
            raise ValueError(f"images must be (B, 3, {res}, {res}), got {tuple(x.shape)}")
        return self.head(self.trunk(x).flatten(1))


def style_loss(z: torch.Tensor, recovered: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the squared Euclidean distance ||z - S(x)||^2."""
    if z.shape != recovered.shape:
        raise ValueError(f"shape mismatch: z {tuple(z.shape)} vs recovered {tuple(recovered.shape)}")
    if z.dim() == 1:
        z, recovered = z[None], recovered[None]
    return ((z - recovered) ** 2).sum(dim=1).mean()


def _caption_embeddings(captions, encoder: JointEmbedding | None) -> torch.Tensor:
    if isinstance(captions, torch.Tensor):
        return captions
    if encoder is None:
        raise ValueError("an encoder is needed to embed caption strings")
    return encoder.embed_text_cached(list(captions))


def train_style_encoder(
    G: Generator,
    captions: Sequence[str] | torch.Tensor,
    config: StyleConfig,
    encoder: JointEmbedding | None = None,
    log: Callable[[dict], None] | None = None,
) -> tuple[StyleEncoder, list[dict]]:
    """Regress z from G(z, phi(t)) with G frozen.

    ``captions`` is the caption pool (strings, or a precomputed (N, T)
    embedding matrix). Returns the encoder and one record per epoch with the
    mean style loss.
    """
    t_pool = _caption_embeddings(captions, encoder)
    if t_pool.shape[0] == 0:
        raise ValueError("caption pool is empty")
    gcfg = G.config
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        S = StyleEncoder(gcfg).to(next(G.parameters()).dtype)
    opt = torch.optim.Adam(S.parameters(), lr=config.lr, betas=(config.beta1, 0.999))
    noise = torch.Generator().manual_seed(config.seed + 1)
    rng = np.random.default_rng(config.seed + 2)

    was_training = G.training
    requires = [p.requires_grad for p in G.parameters()]
    G.eval()
    for p in G.parameters():
        p.requires_grad_(False)
    history = []
    try:
        S.train()
        for epoch in range(config.epochs):
            losses = []
            for _ in range(config.steps_per_epoch):
                idx = rng.integers(t_pool.shape[0], size=config.batch_size)
                t = t_pool[torch.as_tensor(idx)].to(S.head.weight.dtype)
                z = torch.randn(config.batch_size, gcfg.z_dim, generator=noise, dtype=t.dtype)
                with torch.no_grad():
                    x = G(z, t)
                loss = style_loss(z, S(x))
                if not math.isfinite(loss.item()):
                    raise FloatingPointError(f"non-finite style loss in epoch {epoch}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                losses.append(loss.item())
            record = {"epoch": epoch, "style_loss": float(np.mean(losses))}
            history.append(record)
            if log is not None:
                log(record)
            logger.info("style epoch %d  loss %.4f", epoch, record["style_loss"])
    finally:
        for p, r in zip(G.parameters(), requires):
            p.requires_grad_(r)
        G.train(was_training)
    S.eval()
    return S, history


@torch.no_grad()
def recover_style(images, S: StyleEncoder) -> torch.Tensor:
    """S(x) for HxWx3 arrays or (B, 3, R, R) tensors, in eval mode."""
    x = _as_batch(images, S.config.resolution)
    was_training = S.training
    S.eval()
    out = S(x.to(S.head.weight.dtype))
    S.train(was_training)
    return out


def _as_batch(images, resolution: int) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        x = images
    else:
        arr = np.asarray(images, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ValueError(f"expected HxWx3 image(s), got shape {arr.shape}")
        x = torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
    if x.dim() == 3:
        x = x[None]
    if tuple(x.shape[-2:]) != (resolution, resolution):
        raise ValueError(f"query resolution {tuple(x.shape[-2:])} does not match the model's {resolution}")
    return x


@torch.no_grad()
def style_transfer(query_image, caption: str, S: StyleEncoder, G: Generator, encoder: JointEmbedding) -> np.ndarray:
    """G(S(query), phi(caption)) as an HxWx3 float32 array in [-1, 1]."""
    s = recover_style(query_image, S)
    t = encoder.embed_text_cached([caption]).to(s.dtype).expand(s.shape[0], -1)
    was_training = G.training
    G.eval()
    out = G(s, t)
    G.train(was_training)
    images = out.permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)
    return images[0] if np.asarray(query_image).ndim == 3 and not isinstance(query_image, torch.Tensor) else images


def save_style(
    S: StyleEncoder,
    path: str | Path,
    generator_fingerprint: str,
    config: StyleConfig | None = None,
    gan_checkpoint: str | None = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "magic": STYLE_MAGIC,
            "gan_config": S.config.to_dict(),
            "generator_fingerprint": generator_fingerprint,
            "config": asdict(config) if config is not None else None,
            "gan_checkpoint": gan_checkpoint,
            "state": S.state_dict(),
        },
        path,
    )


def style_metadata(path: str | Path) -> dict:
    """Everything in a style checkpoint except the weights."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("magic") != STYLE_MAGIC:
        raise ValueError(f"{path} is not a {STYLE_MAGIC} checkpoint")
    return {k: v for k, v in blob.items() if k != "state"}


def load_style(path: str | Path, generator: Generator | str | None = None) -> StyleEncoder:
    """Load S; with ``generator`` (module or fingerprint) given, refuse a mismatched pairing."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("magic") != STYLE_MAGIC:
        raise ValueError(f"{path} is not a {STYLE_MAGIC} checkpoint")
    if generator is not None:
        expected = generator if isinstance(generator, str) else state_fingerprint(generator.state_dict())
        if expected != blob["generator_fingerprint"]:
            raise ValueError(
                f"style encoder {path} inverts generator {blob['generator_fingerprint']}, not {expected}"
            )
    S = StyleEncoder(GANConfig.from_dict(blob["gan_config"]))
    S.load_state_dict(blob["state"])
    S.eval()
    return S

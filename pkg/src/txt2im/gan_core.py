"""Text-conditional DC-GAN generator and matching-aware discriminator."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import torch
import torch.nn as nn


@dataclass
class GANConfig:
    z_dim: int = 100
    text_dim: int = 1024
    cond_dim: int = 128
    resolution: int = 64
    base_channels: int = 64
    leak: float = 0.2
    init_std: float = 0.02
    # unit-length text embeddings are multiplied by this before the condition
    # projection; otherwise the condition is swamped by the noise at init
    text_scale: float = 32.0

    def __post_init__(self):
        n = self.upsample_stages()
        if n is None:
            raise ValueError(f"resolution must be 4 * 2**k with k >= 1, got {self.resolution}")
        if not self.text_scale > 0:
            raise ValueError(f"text_scale must be positive, got {self.text_scale}")
        if self.cond_dim >= self.text_dim:
            raise ValueError(f"cond_dim ({self.cond_dim}) must be smaller than text_dim ({self.text_dim})")

    def upsample_stages(self) -> int | None:
        k = math.log2(self.resolution / 4) if self.resolution >= 4 else -1
        return int(k) if k >= 1 and k == int(k) else None

    def generator_channels(self) -> list[int]:
        """Coarse to fine, e.g. [512, 256, 128, 64] at 64x64 with base 64."""
        n = self.upsample_stages()
        return [self.base_channels * 2 ** (n - 1 - i) for i in range(n)]

    def discriminator_channels(self) -> list[int]:
        return self.generator_channels()[::-1]

    @classmethod
    def from_dict(cls, d: Mapping) -> "GANConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class ConditionProjection(nn.Module):
    """Affine map T -> C of the rescaled embedding, followed by leaky rectification."""

    def __init__(self, text_dim: int, cond_dim: int, leak: float, scale: float = 1.0):
        super().__init__()
        self.scale = scale
        self.fc = nn.Linear(text_dim, cond_dim)
        self.act = nn.LeakyReLU(leak)

    def forward(self, t_emb: torch.Tensor) -> torch.Tensor:
        return self.act(self.fc(t_emb * self.scale))


class Generator(nn.Module):
    def __init__(self, config: GANConfig):
        super().__init__()
        self.config = config
        chans = config.generator_channels()
        self.project_text = ConditionProjection(config.text_dim, config.cond_dim, config.leak, config.text_scale)
        self.fc = nn.Linear(config.z_dim + config.cond_dim, chans[0] * 16, bias=False)
        self.fc_bn = nn.BatchNorm1d(chans[0] * 16)
        ups = []
        for c_in, c_out in zip(chans, chans[1:] + [3]):
            ups.append(nn.ConvTranspose2d(c_in, c_out, 4, 2, 1, bias=c_out == 3))
            if c_out != 3:
                ups += [nn.BatchNorm2d(c_out), nn.ReLU()]
        self.ups = nn.Sequential(*ups, nn.Tanh())

    def forward(self, z: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if z.dim() != 2 or z.shape[1] != cfg.z_dim:
            raise ValueError(f"noise must be (B, {cfg.z_dim}), got {tuple(z.shape)}")
        if t_emb.dim() != 2 or t_emb.shape[1] != cfg.text_dim:
            raise ValueError(f"text embedding must be (B, {cfg.text_dim}), got {tuple(t_emb.shape)}")
        h = torch.cat([z, self.project_text(t_emb)], dim=1)
        h = torch.relu(self.fc_bn(self.fc(h)))
        h = h.view(h.shape[0], -1, 4, 4)
        return self.ups(h)


class Discriminator(nn.Module):
    """Scores (image, text) pairs in (0, 1).

    The text condition is concatenated depthwise at the 4x4 feature map; the
    shape of the concatenated tensor from the latest forward pass is kept in
    ``concat_shape`` for introspection.
    """

    def __init__(self, config: GANConfig):
        super().__init__()
        self.config = config
        chans = config.discriminator_channels()
        layers = []
        c_in = 3
        for i, c_out in enumerate(chans):
            layers.append(nn.Conv2d(c_in, c_out, 4, 2, 1, bias=i == 0))
            if i > 0:
                layers.append(nn.BatchNorm2d(c_out))
            layers.append(nn.LeakyReLU(config.leak))
            c_in = c_out
        self.trunk = nn.Sequential(*layers)
        self.project_text = ConditionProjection(config.text_dim, config.cond_dim, config.leak, config.text_scale)
        self.joint = nn.Sequential(
            nn.Conv2d(c_in + config.cond_dim, c_in, 1, bias=False),
            nn.BatchNorm2d(c_in),
            nn.LeakyReLU(config.leak),
        )
        self.score = nn.Conv2d(c_in, 1, 4)
        self.concat_shape: tuple[int, ...] | None = None

    def logits(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        res = cfg.resolution
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, res, res):
            raise ValueError(f"images must be (B, 3, {res}, {res}), got {tuple(x.shape)}")
        if t_emb.dim() != 2 or t_emb.shape[1] != cfg.text_dim:
            raise ValueError(f"text embedding must be (B, {cfg.text_dim}), got {tuple(t_emb.shape)}")
        h = self.trunk(x)
        cond = self.project_text(t_emb)[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
        h = torch.cat([h, cond], dim=1)
        self.concat_shape = tuple(h.shape)
        return self.score(self.joint(h)).view(-1)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x, t_emb))


def _init_weights(module: nn.Module, std: float) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def init_params(config: GANConfig, seed: int) -> tuple[Generator, Discriminator]:
    """Fresh generator and discriminator, N(0, init_std) weights, deterministic per seed."""
    gen = torch.Generator().manual_seed(seed)
    # nn.init draws from the global RNG; fork it so callers' streams are untouched.
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
        G = Generator(config)
        D = Discriminator(config)
        _init_weights(G, config.init_std)
        _init_weights(D, config.init_std)
    return G, D


@torch.no_grad()
def generate(z: torch.Tensor, t_emb: torch.Tensor, G: Generator) -> torch.Tensor:
    """Inference-mode generation: (B, Z), (B, T) -> (B, 3, R, R) in [-1, 1]."""
    was_training = G.training
    G.eval()
    out = G(z, t_emb)
    G.train(was_training)
    return out


@torch.no_grad()
def discriminate(x: torch.Tensor, t_emb: torch.Tensor, D: Discriminator) -> torch.Tensor:
    was_training = D.training
    D.eval()
    out = D(x, t_emb)
    D.train(was_training)
    return out

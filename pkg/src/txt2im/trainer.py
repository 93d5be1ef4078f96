"""GAN, GAN-CLS, GAN-INT and GAN-INT-CLS training."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .dataset import (
    CaptionedDataset,
    CaptionedExample,
    MinibatchItem,
    image_grid,
    images_to_tensor,
    sample_minibatch,
    save_png,
    tensor_to_images,
)
from .gan_core import Discriminator, GANConfig, Generator, generate, init_params
from .text_encoder import EncoderConfig, JointEmbedding, state_fingerprint

logger = logging.getLogger(__name__)

GAN_MAGIC = "TXT2IM-GAN-v1"


class Regime(str, Enum):
    GAN = "gan"
    GAN_CLS = "gan-cls"
    GAN_INT = "gan-int"
    GAN_INT_CLS = "gan-int-cls"

    @property
    def cls(self) -> bool:
        return self in (Regime.GAN_CLS, Regime.GAN_INT_CLS)

    @property
    def interp(self) -> bool:
        return self in (Regime.GAN_INT, Regime.GAN_INT_CLS)

    @classmethod
    def parse(cls, value: "str | Regime") -> "Regime":
        if isinstance(value, Regime):
            return value
        try:
            return cls(value.lower().replace("_", "-"))
        except ValueError:
            choices = ", ".join(r.value for r in cls)
            raise ValueError(f"unknown regime {value!r}; choose one of: {choices}") from None


@dataclass
class TrainingConfig:
    regime: str = "gan-int-cls"
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 64
    epochs: int = 600
    beta_interp: float = 0.5
    seed: int = 0
    encoder_mode: str = "pretrained"  # or "end_to_end"
    eps: float = 1e-7
    grad_clip: float = 100.0
    checkpoint_every: int = 5
    snapshot_every: int = 5
    num_probes: int = 4

    def __post_init__(self):
        Regime.parse(self.regime)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.beta_interp <= 1.0:
            raise ValueError("beta_interp must lie in [0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.encoder_mode not in ("pretrained", "end_to_end"):
            raise ValueError(f"encoder_mode must be 'pretrained' or 'end_to_end', got {self.encoder_mode!r}")

    @property
    def regime_enum(self) -> Regime:
        return Regime.parse(self.regime)


@dataclass
class StepReport:
    step: int
    epoch: int
    loss_D: float
    loss_G: float
    s_r: float
    s_w: float
    s_f: float
    s_int: float | None = None
    grad_norm_D: float = 0.0
    grad_norm_G: float = 0.0
    clipped: bool = False
    # per-item scores of both updates (s_f_gen: fakes through the updated D); not logged
    scores: dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("scores")
        return d


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, report: StepReport | None = None):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# objectives


def _clamp(s, eps: float) -> torch.Tensor:
    return torch.as_tensor(s).clamp(eps, 1.0 - eps)


def discriminator_objective(s_r, s_w, s_f, regime: "str | Regime" = Regime.GAN_CLS, eps: float = 1e-7) -> torch.Tensor:
    """Batch mean of the quantity the discriminator ascends.

    Matching-aware regimes: log s_r + (log(1 - s_w) + log(1 - s_f)) / 2.
    Otherwise: log s_r + log(1 - s_f), and ``s_w`` is ignored.
    """
    regime = Regime.parse(regime)
    s_r, s_f = _clamp(s_r, eps), _clamp(s_f, eps)
    if regime.cls:
        s_w = _clamp(s_w, eps)
        value = torch.log(s_r) + (torch.log1p(-s_w) + torch.log1p(-s_f)) / 2
    else:
        value = torch.log(s_r) + torch.log1p(-s_f)
    return value.mean()


def generator_objective(s_f, interp_scores=None, eps: float = 1e-7) -> torch.Tensor:
    """mean log s_f, plus mean log D on interpolated-text fakes when given."""
    value = torch.log(_clamp(s_f, eps)).mean()
    if interp_scores is not None:
        value = value + torch.log(_clamp(interp_scores, eps)).mean()
    return value


def interpolate_embeddings(t1: torch.Tensor, t2: torch.Tensor, beta: float) -> torch.Tensor:
    if t1.shape != t2.shape:
        raise ValueError(f"cannot interpolate embeddings of shapes {tuple(t1.shape)} and {tuple(t2.shape)}")
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if beta == 1.0:
        return t1.clone()
    if beta == 0.0:
        return t2.clone()
    return beta * t1 + (1.0 - beta) * t2


# ---------------------------------------------------------------------------
# state


class TrainState:
    """Everything a training run mutates: networks, optimisers, RNGs, counters."""

    def __init__(
        self,
        config: TrainingConfig,
        gan_config: GANConfig,
        encoder: JointEmbedding,
        G: Generator | None = None,
        D: Discriminator | None = None,
    ):
        if encoder.embed_dim != gan_config.text_dim:
            raise ValueError(f"encoder dimension {encoder.embed_dim} != GAN text_dim {gan_config.text_dim}")
        self.config = config
        self.gan_config = gan_config
        self.encoder = encoder
        if G is None or D is None:
            G, D = init_params(gan_config, config.seed)
        self.G, self.D = G, D
        self.G.train()
        self.D.train()
        self.end_to_end = config.encoder_mode == "end_to_end"
        betas = (config.beta1, config.beta2)
        self.opt_D = torch.optim.Adam(self.D.parameters(), lr=config.lr, betas=betas)
        g_params = list(self.G.parameters())
        if self.end_to_end:
            self.encoder.text.train()
            g_params += list(self.encoder.text.parameters())
        else:
            self.encoder.eval()
            for p in self.encoder.parameters():
                p.requires_grad_(False)
        self.opt_G = torch.optim.Adam(g_params, lr=config.lr, betas=betas)
        self.noise = torch.Generator().manual_seed(config.seed + 1)
        self.rng = np.random.default_rng(config.seed + 2)
        self.step = 0
        self.epoch = 0
        self.cache: dict[str, torch.Tensor] = {}

    @property
    def regime(self) -> Regime:
        return self.config.regime_enum

    def embed(self, captions: Sequence[str]) -> torch.Tensor:
        if self.end_to_end:
            return self.encoder.embed_text(list(captions))
        return self.encoder.embed_text_cached(captions, self.cache)

    def prime_cache(self, captions: Iterable[str]) -> None:
        if not self.end_to_end:
            self.encoder.embed_text_cached(sorted(set(captions)), self.cache)

    def sample_noise(self, n: int) -> torch.Tensor:
        return torch.randn(n, self.gan_config.z_dim, generator=self.noise)

    # -- serialisation -------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "magic": GAN_MAGIC,
            "config": asdict(self.config),
            "gan_config": self.gan_config.to_dict(),
            "encoder_config": asdict(self.encoder.config),
            "encoder": self.encoder.state_dict(),
            "G": self.G.state_dict(),
            "D": self.D.state_dict(),
            "opt_G": self.opt_G.state_dict(),
            "opt_D": self.opt_D.state_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "noise_state": self.noise.get_state(),
            "rng_state": self.rng.bit_generator.state,
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)

    @classmethod
    def load(cls, path: str | Path, config: TrainingConfig | None = None) -> "TrainState":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if not isinstance(blob, dict) or blob.get("magic") != GAN_MAGIC:
            raise ValueError(f"{path} is not a {GAN_MAGIC} checkpoint")
        saved = TrainingConfig(**blob["config"])
        if config is not None:
            if config.regime_enum != saved.regime_enum:
                raise ValueError(f"checkpoint regime {saved.regime} differs from requested {config.regime}")
        config = config or saved
        encoder = JointEmbedding(EncoderConfig.from_dict(blob["encoder_config"]))
        encoder.load_state_dict(blob["encoder"])
        gan_config = GANConfig.from_dict(blob["gan_config"])
        G, D = Generator(gan_config), Discriminator(gan_config)
        G.load_state_dict(blob["G"])
        D.load_state_dict(blob["D"])
        state = cls(config, gan_config, encoder, G, D)
        state.opt_G.load_state_dict(blob["opt_G"])
        state.opt_D.load_state_dict(blob["opt_D"])
        state.epoch = blob["epoch"]
        state.step = blob["step"]
        state.noise.set_state(blob["noise_state"])
        state.rng.bit_generator.state = blob["rng_state"]
        return state


def load_generator(path: str | Path) -> tuple[Generator, JointEmbedding, dict]:
    """Generator (eval mode), text encoder and raw checkpoint metadata from a GAN checkpoint."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("magic") != GAN_MAGIC:
        raise ValueError(f"{path} is not a {GAN_MAGIC} checkpoint")
    gan_config = GANConfig.from_dict(blob["gan_config"])
    G = Generator(gan_config)
    G.load_state_dict(blob["G"])
    G.eval()
    encoder = JointEmbedding(EncoderConfig.from_dict(blob["encoder_config"]))
    encoder.load_state_dict(blob["encoder"])
    encoder.eval()
    meta = {k: blob[k] for k in ("config", "gan_config", "epoch", "step")}
    meta["generator_fingerprint"] = state_fingerprint(blob["G"])
    return G, encoder, meta


# ---------------------------------------------------------------------------
# one step of Algorithm 1


def batch_inputs(state: TrainState, batch: Sequence[MinibatchItem]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(images, matching text embeddings, mismatching text embeddings)."""
    dtype = next(state.G.parameters()).dtype
    x = images_to_tensor([it.image_view for it in batch], dtype=dtype)
    h = state.embed([it.caption for it in batch]).to(dtype)
    h_wrong = state.embed([it.mismatched_caption for it in batch]).to(dtype)
    return x, h, h_wrong


def _clip(params, cap: float) -> tuple[float, bool]:
    params = [p for p in params if p.grad is not None]
    norm = float(torch.nn.utils.clip_grad_norm_(params, cap))
    return norm, norm > cap


def train_step(
    state: TrainState,
    batch: Sequence[MinibatchItem],
    z: torch.Tensor | None = None,
) -> StepReport:
    """One discriminator update followed by one generator update.

    ``z`` overrides the noise draw for the main fakes (the interpolation term
    still draws its own noise and pairing from the state's generator).
    """
    cfg = state.config
    regime = state.regime
    G, D = state.G, state.D
    x, h, h_wrong = batch_inputs(state, batch)
    n = x.shape[0]
    if z is None:
        z = state.sample_noise(n)
    fake = G(z, h)

    # discriminator: ascend L_D
    s_r = D(x, h.detach())
    s_w = D(x, h_wrong.detach())
    s_f = D(fake.detach(), h.detach())
    loss_D = discriminator_objective(s_r, s_w, s_f, regime, cfg.eps)
    state.opt_D.zero_grad(set_to_none=True)
    (-loss_D).backward()
    norm_D, clip_D = _clip(D.parameters(), cfg.grad_clip)

    report = StepReport(
        step=state.step,
        epoch=state.epoch,
        loss_D=loss_D.item(),
        loss_G=float("nan"),
        s_r=s_r.mean().item(),
        s_w=s_w.mean().item(),
        s_f=s_f.mean().item(),
        grad_norm_D=norm_D,
        scores={
            "s_r": s_r.detach().tolist(),
            "s_w": s_w.detach().tolist(),
            "s_f": s_f.detach().tolist(),
        },
    )
    if not math.isfinite(report.loss_D):
        raise TrainingAborted(f"non-finite discriminator objective at step {state.step}", report)
    state.opt_D.step()

    # generator: ascend L_G through the updated discriminator
    s_f_new = D(fake, h)
    s_int = None
    if regime.interp:
        perm = torch.randperm(n, generator=state.noise)
        h_int = interpolate_embeddings(h, h[perm], cfg.beta_interp)
        z_int = state.sample_noise(n)
        s_int = D(G(z_int, h_int), h_int)
    loss_G = generator_objective(s_f_new, s_int, cfg.eps)
    state.opt_G.zero_grad(set_to_none=True)
    (-loss_G).backward()
    g_params = [p for group in state.opt_G.param_groups for p in group["params"]]
    norm_G, clip_G = _clip(g_params, cfg.grad_clip)

    report.loss_G = loss_G.item()
    report.scores["s_f_gen"] = s_f_new.detach().tolist()
    if s_int is not None:
        report.scores["s_int"] = s_int.detach().tolist()
    report.grad_norm_G = norm_G
    report.clipped = clip_D or clip_G
    if s_int is not None:
        report.s_int = s_int.mean().item()
    if not math.isfinite(report.loss_G):
        raise TrainingAborted(f"non-finite generator objective at step {state.step}", report)
    state.opt_G.step()
    state.step += 1
    return report


# ---------------------------------------------------------------------------
# epoch loop


def probe_captions(examples: Sequence[CaptionedExample], limit: int = 8) -> list[str]:
    """First caption of the first example of each class, in class order."""
    seen = {}
    for ex in examples:
        seen.setdefault(ex.class_id, ex.captions[0])
    return [seen[c] for c in sorted(seen)][:limit]


def write_snapshot(state: TrainState, captions: Sequence[str], path: Path) -> None:
    gen = torch.Generator().manual_seed(state.config.seed + 3)
    z = torch.randn(state.config.num_probes, state.gan_config.z_dim, generator=gen)
    with torch.no_grad():
        emb = state.encoder.embed_text_cached(captions)
    rows = []
    for e in emb:
        imgs = generate(z, e[None].expand(z.shape[0], -1), state.G)
        rows.append(tensor_to_images(imgs))
    path.parent.mkdir(parents=True, exist_ok=True)
    save_png(image_grid(rows), path)


def train(
    dataset: CaptionedDataset,
    config: TrainingConfig,
    gan_config: GANConfig | None = None,
    encoder: JointEmbedding | None = None,
    run_dir: str | Path | None = None,
    callbacks: Sequence[Callable[[StepReport], None]] = (),
    state: TrainState | None = None,
) -> tuple[TrainState, list[StepReport]]:
    """Run epochs until ``config.epochs``; resumes from ``state`` when given.

    With ``run_dir`` set, writes ``history.jsonl`` (continued on resume) and writes
    ``checkpoints/epoch_<k>.pt`` (plus ``last.pt``) and probe grids under
    ``samples/``.
    """
    train_examples = dataset.train
    if len({ex.class_id for ex in train_examples}) < 2:
        raise ValueError("training needs at least 2 train classes")
    resumed = state is not None
    if state is None:
        if gan_config is None or encoder is None:
            raise ValueError("gan_config and encoder are required for a fresh run")
        state = TrainState(config, gan_config, encoder)
    state.prime_cache(c for ex in train_examples for c in ex.captions)
    state.G.train()
    state.D.train()

    run_dir = Path(run_dir) if run_dir is not None else None
    history_file = None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        history_path = run_dir / "history.jsonl"
        kept = []
        if resumed and history_path.exists():
            # drop lines written after the checkpoint we resume from
            kept = [ln for ln in history_path.read_text().splitlines() if json.loads(ln)["step"] < state.step]
        history_file = open(history_path, "w")
        history_file.writelines(ln + "\n" for ln in kept)
    probes = probe_captions(train_examples)
    steps_per_epoch = math.ceil(len(train_examples) / config.batch_size)
    history: list[StepReport] = []
    try:
        while state.epoch < config.epochs:
            for _ in range(steps_per_epoch):
                batch = sample_minibatch(train_examples, config.batch_size, state.rng)
                report = train_step(state, batch)
                history.append(report)
                if history_file is not None:
                    history_file.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
                for cb in callbacks:
                    cb(copy.copy(report))
            state.epoch += 1
            last = state.epoch == config.epochs
            if history_file is not None:
                history_file.flush()
            if run_dir is not None and (last or state.epoch % config.checkpoint_every == 0):
                state.save(run_dir / "checkpoints" / f"epoch_{state.epoch}.pt")
                state.save(run_dir / "checkpoints" / "last.pt")
            if run_dir is not None and (last or state.epoch % config.snapshot_every == 0):
                write_snapshot(state, probes, run_dir / "samples" / f"epoch_{state.epoch}.png")
            tail = history[-steps_per_epoch:]
            logger.info(
                "epoch %d  L_D %.3f  L_G %.3f  s_r %.2f  s_w %.2f  s_f %.2f",
                state.epoch,
                np.mean([r.loss_D for r in tail]),
                np.mean([r.loss_G for r in tail]),
                np.mean([r.s_r for r in tail]),
                np.mean([r.s_w for r in tail]),
                np.mean([r.s_f for r in tail]),
            )
    finally:
        if history_file is not None:
            history_file.close()
    state.G.eval()
    state.D.eval()
    return state, history

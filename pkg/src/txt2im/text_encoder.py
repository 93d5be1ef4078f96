"""Character-level convolutional-recurrent text encoder, a small convolutional
image encoder, and the symmetric structured joint embedding that trains them."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import CaptionedExample, images_to_tensor, sample_minibatch

logger = logging.getLogger(__name__)

ENCODER_MAGIC = "TXT2IM-ENC-v1"

PAD = 0
ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789 -,;.!?:'\"/\\|_@#$%^&*~`+=<>()[]{}"
_CODE = {ch: i + 1 for i, ch in enumerate(ALPHABET)}
SPACE = _CODE[" "]
ALPHABET_SIZE = len(ALPHABET) + 1  # + padding


@dataclass(frozen=True)
class CharSequence:
    codes: np.ndarray  # int64, length max_len
    length: int


def encode_chars(caption: str, max_len: int = 201) -> CharSequence:
    if not caption or not caption.strip():
        raise ValueError("cannot encode an empty caption")
    text = caption.lower()[:max_len]
    codes = np.full(max_len, PAD, dtype=np.int64)
    codes[: len(text)] = [_CODE.get(ch, SPACE) for ch in text]
    return CharSequence(codes, len(text))


def encode_batch(captions: Sequence[str], max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    seqs = [encode_chars(c, max_len) for c in captions]
    codes = torch.from_numpy(np.stack([s.codes for s in seqs]))
    lengths = torch.tensor([s.length for s in seqs], dtype=torch.long)
    return codes, lengths


@dataclass
class EncoderConfig:
    embed_dim: int = 1024  # T
    max_len: int = 201
    conv_channels: tuple[int, ...] = (256, 256)
    kernel_size: int = 3
    pool: int = 3
    rnn_hidden: int = 256
    resolution: int = 64
    image_channels: tuple[int, ...] = (32, 64, 128)
    margin: float = 0.2
    normalize: bool = True  # unit-length embeddings on both sides
    word_dropout: float = 0.0  # training-time only
    grayscale_prob: float = 0.0  # training-time only
    lr: float = 1e-3
    batch_size: int = 40
    epochs: int = 30
    steps_per_epoch: int = 0  # 0 -> ceil(N / batch_size)
    seed: int = 0

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        d = dict(d)
        for k in ("conv_channels", "image_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


class CharCNNRNN(nn.Module):
    """one-hot chars -> (conv, relu, maxpool) x n -> GRU -> last valid state -> T."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        layers = []
        in_ch = ALPHABET_SIZE
        for ch in config.conv_channels:
            layers += [
                nn.Conv1d(in_ch, ch, config.kernel_size, padding=config.kernel_size // 2),
                nn.ReLU(),
                nn.MaxPool1d(config.pool),
            ]
            in_ch = ch
        self.convs = nn.Sequential(*layers)
        self.rnn = nn.GRU(in_ch, config.rnn_hidden, batch_first=True)
        self.proj = nn.Linear(config.rnn_hidden, config.embed_dim)

    def forward(self, codes: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        if codes.dim() != 2 or codes.shape[1] != self.config.max_len:
            raise ValueError(f"expected codes of shape (B, {self.config.max_len}), got {tuple(codes.shape)}")
        dtype = self.proj.weight.dtype
        onehot = F.one_hot(codes, ALPHABET_SIZE).to(dtype)
        onehot[..., PAD] = 0
        h = self.convs(onehot.transpose(1, 2)).transpose(1, 2)  # B x L' x C
        steps, _ = self.rnn(h)
        shrink = self.config.pool ** len(self.config.conv_channels)
        last = ((lengths + shrink - 1) // shrink).clamp(1, steps.shape[1]) - 1
        final = steps[torch.arange(steps.shape[0]), last]
        out = self.proj(final)
        return F.normalize(out, dim=-1) if self.config.normalize else out


class ImageEncoder(nn.Module):
    """Stride-2 conv stack, flattened and projected to T."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        layers = []
        in_ch = 3
        for ch in config.image_channels:
            layers += [nn.Conv2d(in_ch, ch, 4, 2, 1), nn.LeakyReLU(0.2)]
            in_ch = ch
        self.convs = nn.Sequential(*layers)
        side = config.resolution // 2 ** len(config.image_channels)
        self.proj = nn.Linear(in_ch * side * side, config.embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        res = self.config.resolution
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, res, res):
            raise ValueError(f"expected images of shape (B, 3, {res}, {res}), got {tuple(images.shape)}")
        out = self.proj(self.convs(images).flatten(1))
        return F.normalize(out, dim=-1) if self.config.normalize else out


class JointEmbedding(nn.Module):
    """Text encoder and image encoder sharing one T-dimensional space."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.text = CharCNNRNN(config)
        self.image = ImageEncoder(config)

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def embed_text(self, captions: Sequence[str] | str) -> torch.Tensor:
        if isinstance(captions, str):
            captions = [captions]
        codes, lengths = encode_batch(captions, self.config.max_len)
        return self.text(codes, lengths)

    def embed_image(self, images) -> torch.Tensor:
        if not isinstance(images, torch.Tensor):
            images = images_to_tensor(images)
        if images.dim() == 3:
            images = images[None]
        return self.image(images.to(self.text.proj.weight.dtype))

    @torch.no_grad()
    def embed_text_cached(self, captions: Sequence[str], cache: dict | None = None, chunk: int = 256) -> torch.Tensor:
        """Frozen-encoder embeddings, memoised per caption string."""
        cache = {} if cache is None else cache
        missing = sorted({c for c in captions if c not in cache})
        was_training = self.training
        self.eval()
        for i in range(0, len(missing), chunk):
            part = missing[i : i + chunk]
            for cap, vec in zip(part, self.embed_text(part)):
                cache[cap] = vec
        self.train(was_training)
        return torch.stack([cache[c] for c in captions])

    def fingerprint(self) -> str:
        return state_fingerprint(self.state_dict())


def state_fingerprint(state: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# compatibility, loss and classifiers


def compatibility(images: torch.Tensor, texts: torch.Tensor) -> torch.Tensor:
    """scores[i, j] = <image_i, text_j>."""
    if images.dim() != 2 or texts.dim() != 2:
        raise ValueError("compatibility expects 2-D batches of embeddings")
    if images.shape[1] != texts.shape[1]:
        raise ValueError(f"embedding dimension mismatch: {images.shape[1]} vs {texts.shape[1]}")
    return images @ texts.T


def joint_embedding_loss(
    scores: torch.Tensor, margin: float = 0.2, labels: torch.Tensor | None = None
) -> torch.Tensor:
    """Symmetric pairwise hinge ranking loss over a square compatibility matrix.

    For every row i and column j != i, penalise ``margin - s[i, i] + s[i, j]``;
    same for columns with the roles swapped. Each direction is averaged over
    its B * (B - 1) competitor terms and the two averages are added, so a
    constant matrix costs exactly ``2 * margin``. When ``labels`` is given,
    competitors of the same class are dropped from both sum and count.
    """
    if scores.dim() != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"joint_embedding_loss needs a square matrix, got {tuple(scores.shape)}")
    n = scores.shape[0]
    diag = scores.diagonal()
    mask = ~torch.eye(n, dtype=torch.bool, device=scores.device)
    if labels is not None:
        mask = mask & (labels[:, None] != labels[None, :])
    mask = mask.to(scores.dtype)
    rows = F.relu(margin - diag[:, None] + scores) * mask
    cols = F.relu(margin - diag[None, :] + scores) * mask
    count = mask.sum().clamp(min=1.0)
    return (rows.sum() + cols.sum()) / count


def _class_argmax(mean_scores: torch.Tensor, class_ids: Sequence[int]) -> int:
    # torch.argmax returns the first maximum; classes are sorted ascending.
    return class_ids[int(torch.argmax(mean_scores))]


def class_mean_scores(query: torch.Tensor, class_embeddings: Mapping[int, torch.Tensor]) -> tuple[list[int], torch.Tensor]:
    """Mean compatibility of each query with every class' embeddings -> (classes, Q x K)."""
    if not class_embeddings:
        raise ValueError("empty class set")
    classes = sorted(class_embeddings)
    cols = []
    for c in classes:
        emb = class_embeddings[c]
        if emb.shape[0] == 0:
            raise ValueError(f"class {c} has no items")
        cols.append(compatibility(emb, query).mean(dim=0))
    return classes, torch.stack(cols, dim=1)


@torch.no_grad()
def classify_text(caption, class_images: Mapping[int, Sequence], model: JointEmbedding) -> int:
    """arg max over classes of the mean image-text compatibility; ties -> lowest class id."""
    t = model.embed_text(caption)
    class_emb = {c: model.embed_image(list(imgs) if not isinstance(imgs, torch.Tensor) else imgs) for c, imgs in class_images.items()}
    classes, scores = class_mean_scores(t, class_emb)
    return _class_argmax(scores[0], classes)


@torch.no_grad()
def classify_image(image, class_captions: Mapping[int, Sequence[str]], model: JointEmbedding) -> int:
    v = model.embed_image(image)
    class_emb = {c: model.embed_text(list(caps)) for c, caps in class_captions.items()}
    classes, scores = class_mean_scores(v, class_emb)
    return _class_argmax(scores[0], classes)


def zero_one_error(predictions: Sequence[int], labels: Sequence[int]) -> float:
    if len(predictions) != len(labels) or not labels:
        raise ValueError("predictions and labels must be equal-length and non-empty")
    return float(np.mean([p != y for p, y in zip(predictions, labels)]))


@torch.no_grad()
def zero_shot_accuracy(model: JointEmbedding, examples: Sequence[CaptionedExample]) -> dict[str, float]:
    """Accuracy of the text and image classifiers restricted to the classes in ``examples``."""
    was_training = model.training
    model.eval()
    classes = sorted({ex.class_id for ex in examples})
    img_emb = model.embed_image([ex.image for ex in examples])
    captions = [c for ex in examples for c in ex.captions]
    cap_cls = [ex.class_id for ex in examples for _ in ex.captions]
    txt_emb = model.embed_text_cached(captions)
    labels = np.array([ex.class_id for ex in examples])
    cap_labels = np.array(cap_cls)

    img_by_class = {c: img_emb[torch.from_numpy(labels == c)] for c in classes}
    txt_by_class = {c: txt_emb[torch.from_numpy(cap_labels == c)] for c in classes}
    _, t_scores = class_mean_scores(txt_emb, img_by_class)
    _, v_scores = class_mean_scores(img_emb, txt_by_class)
    t_pred = [classes[i] for i in t_scores.argmax(dim=1).tolist()]
    v_pred = [classes[i] for i in v_scores.argmax(dim=1).tolist()]
    model.train(was_training)
    return {
        "text_acc": 1.0 - zero_one_error(t_pred, cap_cls),
        "image_acc": 1.0 - zero_one_error(v_pred, labels.tolist()),
        "chance": 1.0 / len(classes),
    }


# ---------------------------------------------------------------------------
# training and checkpoints


def drop_words(caption: str, p: float, rng: np.random.Generator) -> str:
    """Drop each word with probability p; never returns an empty caption."""
    words = caption.split()
    kept = [w for w, keep in zip(words, rng.random(len(words)) >= p) if keep]
    return " ".join(kept) if kept else caption


def random_grayscale(images: torch.Tensor, p: float, rng: np.random.Generator) -> torch.Tensor:
    mask = torch.from_numpy(rng.random(images.shape[0]) < p)[:, None, None, None]
    return torch.where(mask, images.mean(dim=1, keepdim=True).expand_as(images), images)


def train_joint_embedding(
    train_examples: Sequence[CaptionedExample],
    config: EncoderConfig,
    test_examples: Sequence[CaptionedExample] = (),
    model: JointEmbedding | None = None,
    log=None,
) -> tuple[JointEmbedding, list[dict]]:
    """Minimise the joint-embedding loss with Adam; returns the model and per-epoch records."""
    if len({ex.class_id for ex in train_examples}) < 2:
        raise ValueError("train_joint_embedding needs at least 2 train classes")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = model or JointEmbedding(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    steps = config.steps_per_epoch or math.ceil(len(train_examples) / config.batch_size)
    history = []
    for epoch in range(config.epochs):
        model.train()
        total = 0.0
        for _ in range(steps):
            batch = sample_minibatch(train_examples, config.batch_size, rng)
            images = images_to_tensor([it.image_view for it in batch])
            captions = [it.caption for it in batch]
            if config.grayscale_prob > 0:
                images = random_grayscale(images, config.grayscale_prob, rng)
            if config.word_dropout > 0:
                captions = [drop_words(c, config.word_dropout, rng) for c in captions]
            labels = torch.tensor([it.class_id for it in batch])
            scores = compatibility(model.embed_image(images), model.embed_text(captions))
            loss = joint_embedding_loss(scores, config.margin, labels)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite joint embedding loss at epoch {epoch}: {loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        record = {"epoch": epoch, "loss": total / steps}
        if test_examples:
            record.update(zero_shot_accuracy(model, test_examples))
        history.append(record)
        if log is not None:
            log(record)
        logger.info("encoder epoch %d %s", epoch, record)
    model.eval()
    return model, history


def save_encoder(model: JointEmbedding, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "magic": ENCODER_MAGIC,
            "alphabet": ALPHABET,
            "max_len": model.config.max_len,
            "embed_dim": model.config.embed_dim,
            "config": asdict(model.config),
            "config_fingerprint": model.config.fingerprint(),
            "state": model.state_dict(),
        },
        path,
    )


def load_encoder(path: str | Path) -> JointEmbedding:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("magic") != ENCODER_MAGIC:
        raise ValueError(f"{path} is not a {ENCODER_MAGIC} checkpoint")
    if blob["alphabet"] != ALPHABET:
        raise ValueError(f"{path} was trained with a different alphabet")
    model = JointEmbedding(EncoderConfig.from_dict(blob["config"]))
    model.load_state_dict(blob["state"])
    model.eval()
    return model

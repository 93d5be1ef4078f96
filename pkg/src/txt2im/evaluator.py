"""Style/content disentangling, interpolation sweeps, and the caption-agreement
oracle for synthetic shapes."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from scipy import ndimage
from scipy.stats import rankdata

from .dataset import COLORS, SHAPES, CaptionedExample, extract_attributes, shape_mask, to_uint8
from .gan_core import Generator, generate

logger = logging.getLogger(__name__)

# caption-agreement oracle constants
FOREGROUND_MIN_DISTANCE = 60.0  # RGB distance from the border-median background
MIN_FOREGROUND_PIXELS = 4
SHAPE_SCALES = (0.95, 1.0, 1.05, 1.1)  # template fit search around the bounding box


# ---------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    distortions: list[float]  # after each assignment step
    iterations: int


def _assign(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, float]:
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    labels = d2.argmin(axis=1)  # first minimum -> lowest centroid index on ties
    return labels, float(d2[np.arange(len(points)), labels].sum())


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int) -> KMeansResult:
    labels, distortion = _assign(points, centroids)
    distortions = [distortion]
    it = 0
    for it in range(1, max_iter + 1):
        for j in range(len(centroids)):
            members = points[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        new_labels, distortion = _assign(points, centroids)
        distortions.append(distortion)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return KMeansResult(labels, centroids, distortions, it)


def kmeans(points, k: int, seed: int = 0, max_iter: int = 100, restarts: int = 10) -> KMeansResult:
    """Lloyd's algorithm seeded from k distinct data values chosen at random.

    The run with the lowest final distortion over ``restarts`` seeded starts
    is returned. With k at least the number of distinct points, every
    distinct point gets its own cluster.
    """
    points = np.asarray(points, dtype=np.float64)
    if k <= 0:
        raise ValueError("k must be positive")
    if len(points) < k:
        raise ValueError(f"need at least k={k} points, got {len(points)}")
    distinct = np.unique(points, axis=0)
    if k >= len(distinct):
        return _lloyd(points, distinct.copy(), max_iter)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        start = distinct[rng.choice(len(distinct), size=k, replace=False)].copy()
        res = _lloyd(points, start, max_iter)
        if best is None or res.distortions[-1] < best.distortions[-1]:
            best = res
    return best


# ---------------------------------------------------------------------------
# verification pairs


@dataclass(frozen=True)
class VerificationPair:
    item_a: int
    item_b: int
    same_style: bool

    def __post_init__(self):
        if self.item_a == self.item_b:
            raise ValueError("a verification pair needs two distinct items")


def style_features(examples: Sequence[CaptionedExample], mode: str) -> np.ndarray:
    """Background colour (0-1 RGB) or position/scale per example, from metadata."""
    if any(ex.meta is None for ex in examples):
        raise ValueError("style pairs need per-example metadata")
    if mode == "background":
        return np.array([np.asarray(ex.meta["bg_color"], dtype=float) / 255.0 for ex in examples])
    if mode in ("pose", "position"):
        return np.array([[*ex.meta["center"], ex.meta["scale"]] for ex in examples], dtype=float)
    raise ValueError(f"unknown style mode {mode!r}")


def default_k(n: int) -> int:
    return max(2, min(100, n // 10))


def build_style_pairs(
    examples: Sequence[CaptionedExample],
    mode: str = "background",
    k: int | None = None,
    folds: int = 5,
    pairs_per_fold: int = 200,
    seed: int = 0,
    max_resample: int = 20,
) -> tuple[list[list[VerificationPair]], np.ndarray]:
    """Cluster style features and sample balanced same/different-cluster pairs.

    Returns ``(folds, cluster_labels)``. Items are partitioned into ``folds``
    disjoint groups and each fold draws its pairs within its own group, so no
    pair appears in two folds. Half the pairs of a fold share a cluster.
    """
    feats = style_features(examples, mode)
    k = default_k(len(examples)) if k is None else k
    labels = kmeans(feats, k, seed=seed).labels
    rng = np.random.default_rng(seed)
    half = pairs_per_fold // 2

    for attempt in range(max_resample):
        order = rng.permutation(len(examples))
        groups = np.array_split(order, folds)
        out = []
        ok = True
        for group in groups:
            pos, neg = set(), set()
            by_cluster: dict[int, list[int]] = {}
            for i in group:
                by_cluster.setdefault(int(labels[i]), []).append(int(i))
            multi = [c for c, members in by_cluster.items() if len(members) >= 2]
            if not multi:
                ok = False
                break
            n_pos_avail = sum(len(m) * (len(m) - 1) // 2 for m in by_cluster.values())
            n_all = len(group) * (len(group) - 1) // 2
            target = min(half, n_pos_avail, n_all - n_pos_avail)
            tries = 0
            while len(pos) < target and tries < 50 * target:
                tries += 1
                members = by_cluster[multi[int(rng.integers(len(multi)))]]
                a, b = rng.choice(members, size=2, replace=False)
                pos.add((int(min(a, b)), int(max(a, b))))
            tries = 0
            while len(neg) < len(pos) and tries < 50 * target:
                tries += 1
                a, b = rng.choice(group, size=2, replace=False)
                if labels[a] != labels[b]:
                    neg.add((int(min(a, b)), int(max(a, b))))
            fold = [VerificationPair(a, b, True) for a, b in sorted(pos)]
            fold += [VerificationPair(a, b, False) for a, b in sorted(neg)]
            if not pos or not neg:
                ok = False
                break
            out.append(fold)
        if ok:
            return out, labels
        logger.warning("fold without positive or negative pairs; resampling (attempt %d)", attempt + 1)
    raise ValueError("could not build folds with both positive and negative pairs")


# ---------------------------------------------------------------------------
# scoring


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class RocResult:
    auc: float
    fold_aucs: list[float] = field(default_factory=list)
    curve: list[tuple[float, float]] = field(default_factory=list)


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """(FPR, TPR) points sweeping the threshold down through the distinct scores."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tps = np.cumsum(y)
    fps = np.cumsum(~y)
    last_of_run = np.r_[np.diff(s) != 0, True]
    P, N = y.sum(), (~y).sum()
    curve = [(0.0, 0.0)]
    curve += [(float(f / N), float(t / P)) for f, t in zip(fps[last_of_run], tps[last_of_run])]
    return curve


def auc_roc(scores, labels) -> RocResult:
    """Mann-Whitney AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)  # average ranks
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    auc = float(u / (n_pos * n_neg))
    return RocResult(auc=auc, fold_aucs=[auc], curve=roc_curve(scores, labels))


def average_folds(results: Sequence[RocResult]) -> RocResult:
    aucs = [r.auc for r in results]
    return RocResult(auc=float(np.mean(aucs)), fold_aucs=aucs, curve=results[0].curve if results else [])


def pair_auc(vectors: np.ndarray, folds: Sequence[Sequence[VerificationPair]]) -> RocResult:
    """Cosine-similarity verification AUC per fold, averaged."""
    results = []
    all_scores, all_labels = [], []
    for fold in folds:
        scores = [cosine_similarity(vectors[p.item_a], vectors[p.item_b]) for p in fold]
        labels = [p.same_style for p in fold]
        results.append(auc_roc(scores, labels))
        all_scores += scores
        all_labels += labels
    out = average_folds(results)
    out.curve = roc_curve(all_scores, all_labels)
    return out


@torch.no_grad()
def disentangling_eval(
    style_encoders: Mapping[str, Callable[[torch.Tensor], torch.Tensor]],
    examples: Sequence[CaptionedExample],
    folds: Sequence[Sequence[VerificationPair]],
    text_embed: Callable[[list[str]], torch.Tensor] | None = None,
) -> dict[str, RocResult]:
    """AUC of cosine similarity between predicted style vectors for each variant.

    ``style_encoders`` maps a name to a callable taking an N x 3 x H x W batch.
    With ``text_embed``, a ``"caption-baseline"`` row scores each image by the
    embedding of its first caption instead.
    """
    from .dataset import images_to_tensor

    images = images_to_tensor([ex.image for ex in examples])
    results = {}
    for name, encode in style_encoders.items():
        vecs = torch.cat([encode(images[i : i + 256]) for i in range(0, len(images), 256)])
        results[name] = pair_auc(vecs.double().numpy(), folds)
    if text_embed is not None:
        vecs = text_embed([ex.captions[0] for ex in examples])
        results["caption-baseline"] = pair_auc(vecs.double().numpy(), folds)
    return results


# ---------------------------------------------------------------------------
# interpolation sweeps


def _weights(steps: int) -> list[float]:
    if steps < 2:
        raise ValueError("a sweep needs at least 2 steps")
    # weight on the first endpoint, 1 -> 0; endpoints exact
    return [1.0 - i / (steps - 1) for i in range(steps)]


def _mix(a: torch.Tensor, b: torch.Tensor, w: float) -> torch.Tensor:
    if w == 1.0:
        return a.clone()
    if w == 0.0:
        return b.clone()
    return w * a + (1.0 - w) * b


@torch.no_grad()
def sentence_interpolation_sweep(
    emb_a: torch.Tensor, emb_b: torch.Tensor, steps: int, z: torch.Tensor, G: Generator
) -> torch.Tensor:
    """Frames from caption a to caption b with the noise held fixed -> (steps, 3, R, R).

    Frames are generated one at a time so each endpoint matches a direct
    single-image generation bitwise.
    """
    z = z.reshape(1, -1)
    return torch.cat([generate(z, _mix(emb_a.reshape(1, -1), emb_b.reshape(1, -1), w), G) for w in _weights(steps)])


@torch.no_grad()
def noise_interpolation_sweep(
    emb: torch.Tensor, z1: torch.Tensor, z2: torch.Tensor, steps: int, G: Generator
) -> torch.Tensor:
    emb = emb.reshape(1, -1)
    return torch.cat([generate(_mix(z1.reshape(1, -1), z2.reshape(1, -1), w), emb, G) for w in _weights(steps)])


# ---------------------------------------------------------------------------
# caption agreement oracle


def _canonical() -> tuple[list[str], np.ndarray]:
    names = list(COLORS)
    return names, np.array([COLORS[c] for c in names], dtype=float)


def foreground_mask(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(mask, background RGB). Background = median colour of the border pixels."""
    px = to_uint8(image).astype(float)
    border = np.concatenate([px[0], px[-1], px[:, 0], px[:, -1]])
    bg = np.median(border, axis=0)
    mask = np.linalg.norm(px - bg, axis=-1) > FOREGROUND_MIN_DISTANCE
    return mask, bg


def dominant_color(image: np.ndarray) -> str | None:
    """Majority vote of the nearest canonical colour over foreground pixels."""
    mask, _ = foreground_mask(image)
    if mask.sum() < MIN_FOREGROUND_PIXELS:
        return None
    names, table = _canonical()
    px = to_uint8(image).astype(float)[mask]
    nearest = np.linalg.norm(px[:, None, :] - table[None], axis=-1).argmin(axis=1)
    return names[int(np.bincount(nearest, minlength=len(names)).argmax())]


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask)
    if n <= 1:
        return mask
    sizes = np.bincount(labels.ravel())[1:]
    return labels == int(sizes.argmax()) + 1


def classify_shape(image: np.ndarray) -> str | None:
    """Best-IoU shape template fitted to the bounding box of the largest foreground blob."""
    mask, _ = foreground_mask(image)
    if mask.sum() < MIN_FOREGROUND_PIXELS:
        return None
    mask = _largest_component(mask)
    res = mask.shape[0]
    ys, xs = np.nonzero(mask)
    x0, x1 = xs.min() / res, (xs.max() + 1) / res
    y0, y1 = ys.min() / res, (ys.max() + 1) / res
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    scale = max(x1 - x0, y1 - y0) / 2
    half_px = 0.5 / res
    best, best_iou = None, -1.0
    for shape in SHAPES:
        for s_mult in SHAPE_SCALES:
            for dx in (-half_px, 0.0, half_px):
                for dy in (-half_px, 0.0, half_px):
                    tmpl = shape_mask(shape, (cx + dx, cy + dy), scale * s_mult, res, supersample=2) >= 0.5
                    iou = (tmpl & mask).sum() / max((tmpl | mask).sum(), 1)
                    if iou > best_iou:
                        best, best_iou = shape, iou
    return best


@dataclass
class Agreement:
    color: bool
    shape: bool

    @property
    def both(self) -> bool:
        return self.color and self.shape


def caption_agreement(image: np.ndarray, caption: str) -> Agreement:
    shape, color = extract_attributes(caption)
    if shape is None or color is None:
        raise ValueError(f"caption {caption!r} does not name a synthetic colour and shape")
    return Agreement(color=dominant_color(image) == color, shape=classify_shape(image) == shape)


def agreement_rates(images: Sequence[np.ndarray], captions: Sequence[str]) -> dict[str, float]:
    results = [caption_agreement(im, cap) for im, cap in zip(images, captions)]
    n = len(results)
    if n == 0:
        raise ValueError("no images to score")
    return {
        "color": sum(r.color for r in results) / n,
        "shape": sum(r.shape for r in results) / n,
        "both": sum(r.both for r in results) / n,
        "n": n,
    }


def red_dominance(image: np.ndarray) -> float:
    """Mean (R - B) over foreground pixels, in [0, 255] units; 0 when no foreground."""
    mask, _ = foreground_mask(image)
    if not mask.any():
        return 0.0
    px = to_uint8(image).astype(float)[mask]
    return float((px[:, 0] - px[:, 2]).mean())


def spearman_trend(values: Sequence[float]) -> tuple[float, float]:
    """Spearman correlation of values against their position, with p-value."""
    from scipy.stats import spearmanr

    res = spearmanr(np.arange(len(values)), values)
    return float(res.statistic), float(res.pvalue)


def mean_adjacent_distance(frames: torch.Tensor) -> tuple[float, float]:
    """(mean L1 distance of consecutive frames, L1 distance between the endpoints)."""
    diffs = [(frames[i + 1] - frames[i]).abs().mean().item() for i in range(len(frames) - 1)]
    return float(np.mean(diffs)), float((frames[-1] - frames[0]).abs().mean().item())


def evaluate_generator_agreement(
    G: Generator,
    text_embed: Callable[[list[str]], torch.Tensor],
    captions: Sequence[str],
    samples_per_caption: int = 4,
    seed: int = 0,
) -> dict[str, float]:
    """Caption-agreement rates of fresh-noise generations for each caption."""
    gen = torch.Generator().manual_seed(seed)
    caps = [c for c in captions for _ in range(samples_per_caption)]
    emb = text_embed(list(caps))
    z = torch.randn(len(caps), G.config.z_dim, generator=gen)
    imgs = generate(z, emb.to(z.dtype), G)
    images = [im for im in imgs.numpy().transpose(0, 2, 3, 1)]
    return agreement_rates(images, caps)

"""Captioned-image datasets: on-disk loader, synthetic shapes generator and
augmented minibatch sampling."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = {
    "red": (225, 40, 40),
    "green": (40, 190, 60),
    "blue": (45, 80, 230),
    "yellow": (235, 225, 45),
    "purple": (160, 60, 210),
    "orange": (245, 140, 25),
}
COLOR_NAMES = tuple(COLORS)
# Dark, muted backgrounds; all far from the saturated foreground palette.
BACKGROUNDS = (
    (20, 20, 20),
    (75, 25, 25),
    (25, 75, 25),
    (25, 25, 80),
    (70, 70, 25),
    (70, 25, 70),
    (25, 70, 70),
    (70, 70, 70),
)

CAPTION_TEMPLATES = (
    "a {color} {shape} on a dark background",
    "this is a {color} {shape}",
    "a {shape} that is {color}",
    "the picture shows a {color} {shape}",
    "a {color} colored {shape} in the frame",
    "there is a {shape} filled with {color}",
    "a small {color} {shape}",
    "the {shape} is painted {color}",
)
CAPTIONS_PER_IMAGE = 5

UPSCALE = 1.125


class DatasetError(ValueError):
    """Raised for malformed dataset directories or invalid generator arguments."""


@dataclass(frozen=True)
class CaptionedExample:
    image: np.ndarray  # H x W x 3 float32 in [-1, 1]
    captions: tuple[str, ...]
    class_id: int
    image_id: str = ""
    meta: dict | None = None

    def __post_init__(self):
        if not self.captions or any(not c.strip() for c in self.captions):
            raise DatasetError(f"example {self.image_id!r} has an empty caption list or blank caption")
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DatasetError(f"example {self.image_id!r} image must be HxWx3, got {self.image.shape}")
        if self.image.min() < -1.0 or self.image.max() > 1.0:
            raise DatasetError(f"example {self.image_id!r} pixels outside [-1, 1]")


@dataclass(frozen=True)
class SplitSpec:
    train_classes: frozenset[int]
    test_classes: frozenset[int]

    def __post_init__(self):
        overlap = self.train_classes & self.test_classes
        if overlap:
            raise DatasetError(f"classes {sorted(overlap)} appear in both train and test splits")

    def validate_covers(self, class_ids: Iterable[int]) -> None:
        missing = set(class_ids) - (self.train_classes | self.test_classes)
        if missing:
            raise DatasetError(f"classes {sorted(missing)} are in neither split")


@dataclass
class CaptionedDataset:
    examples: list[CaptionedExample]
    split: SplitSpec
    resolution: int

    def __iter__(self):
        # allows `examples, split = dataset`
        return iter((self.examples, self.split))

    def subset(self, classes: Iterable[int]) -> list[CaptionedExample]:
        classes = set(classes)
        return [ex for ex in self.examples if ex.class_id in classes]

    @property
    def train(self) -> list[CaptionedExample]:
        return self.subset(self.split.train_classes)

    @property
    def test(self) -> list[CaptionedExample]:
        return self.subset(self.split.test_classes)

    def write(self, root: str | Path) -> None:
        """Write the dataset in the on-disk layout understood by :func:`load_dataset`."""
        root = Path(root)
        for ex in self.examples:
            cls = str(ex.class_id)
            img_dir = root / "images" / cls
            cap_dir = root / "captions" / cls
            img_dir.mkdir(parents=True, exist_ok=True)
            cap_dir.mkdir(parents=True, exist_ok=True)
            save_png(ex.image, img_dir / f"{ex.image_id}.png")
            (cap_dir / f"{ex.image_id}.txt").write_text("\n".join(ex.captions) + "\n", encoding="utf-8")
            if ex.meta is not None:
                meta_dir = root / "meta" / cls
                meta_dir.mkdir(parents=True, exist_ok=True)
                (meta_dir / f"{ex.image_id}.json").write_text(json.dumps(ex.meta, sort_keys=True) + "\n")
        splits = root / "splits"
        splits.mkdir(parents=True, exist_ok=True)
        (splits / "train.txt").write_text("".join(f"{c}\n" for c in sorted(self.split.train_classes)))
        (splits / "test.txt").write_text("".join(f"{c}\n" for c in sorted(self.split.test_classes)))


@dataclass
class MinibatchItem:
    image_view: np.ndarray
    caption: str
    class_id: int
    mismatched_caption: str
    mismatched_class_id: int = field(default=-1)


# ---------------------------------------------------------------------------
# image helpers


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float32 [-1, 1]."""
    return (pixels.astype(np.float32) / 127.5 - 1.0).clip(-1.0, 1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round((np.asarray(image, dtype=np.float64) + 1.0) * 127.5).clip(0, 255).astype(np.uint8)


def save_png(image: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def image_grid(rows: Sequence[Sequence[np.ndarray]], pad: int = 0) -> np.ndarray:
    """Tile rows of equally sized HxWx3 images into one image."""
    h, w = rows[0][0].shape[:2]
    ncols = max(len(r) for r in rows)
    grid = np.full((len(rows) * (h + pad) - pad, ncols * (w + pad) - pad, 3), -1.0, dtype=np.float32)
    for i, row in enumerate(rows):
        for j, im in enumerate(row):
            grid[i * (h + pad) : i * (h + pad) + h, j * (w + pad) : j * (w + pad) + w] = im
    return grid


def load_png(path: str | Path, resolution: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if resolution is not None and im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.Resampling.BILINEAR)
        return to_unit_range(np.asarray(im))


# ---------------------------------------------------------------------------
# on-disk datasets


def _read_class_list(path: Path) -> frozenset[int]:
    if not path.exists():
        raise DatasetError(f"missing split file {path}")
    lines = [ln.strip() for ln in path.read_text().splitlines()]
    return frozenset(int(ln) for ln in lines if ln)


def load_dataset(root_path: str | Path, resolution: int) -> CaptionedDataset:
    """Load ``root/images/<class>/<id>.png`` with captions and split files.

    Images are resized to ``resolution`` and mapped to [-1, 1]. Synthetic
    ``meta`` files are attached to their examples when present.
    """
    if resolution not in (32, 64):
        raise DatasetError(f"resolution must be 32 or 64, got {resolution}")
    root = Path(root_path)
    image_root = root / "images"
    if not image_root.is_dir():
        raise DatasetError(f"{image_root} does not exist")

    examples = []
    for class_dir in sorted(image_root.iterdir(), key=lambda p: (len(p.name), p.name)):
        if not class_dir.is_dir():
            continue
        class_id = int(class_dir.name)
        for img_path in sorted(class_dir.glob("*.png")):
            cap_path = root / "captions" / class_dir.name / f"{img_path.stem}.txt"
            if not cap_path.exists():
                raise DatasetError(f"no caption file for image {img_path}")
            captions = tuple(ln.strip() for ln in cap_path.read_text(encoding="utf-8").splitlines() if ln.strip())
            if not captions:
                raise DatasetError(f"caption file for image {img_path} is empty")
            meta_path = root / "meta" / class_dir.name / f"{img_path.stem}.json"
            meta = json.loads(meta_path.read_text()) if meta_path.exists() else None
            examples.append(
                CaptionedExample(
                    image=load_png(img_path, resolution),
                    captions=captions,
                    class_id=class_id,
                    image_id=img_path.stem,
                    meta=meta,
                )
            )
    if not examples:
        raise DatasetError(f"no images found under {image_root}")

    split = SplitSpec(
        train_classes=_read_class_list(root / "splits" / "train.txt"),
        test_classes=_read_class_list(root / "splits" / "test.txt"),
    )
    split.validate_covers(ex.class_id for ex in examples)
    return CaptionedDataset(examples, split, resolution)


# ---------------------------------------------------------------------------
# synthetic shapes


def _class_order() -> tuple[tuple[str, str], ...]:
    # The first nine ids fill the circle/square/triangle x red/green/blue grid
    # in an order where every prefix of >= 6 classes connects all of its
    # attributes; the remaining pairs follow in (colour, shape) order.
    grid = (
        ("circle", "red"), ("square", "green"), ("triangle", "blue"),
        ("circle", "green"), ("square", "blue"), ("triangle", "red"),
        ("circle", "blue"), ("square", "red"), ("triangle", "green"),
    )  # fmt: skip
    rest = tuple((s, c) for c in COLOR_NAMES for s in SHAPES if (s, c) not in grid)
    return grid + rest


CLASS_ORDER = _class_order()


def class_attributes(class_id: int) -> tuple[str, str]:
    """(shape, color) for a synthetic class id. Ids 0..23 enumerate all pairs."""
    if not 0 <= class_id < len(CLASS_ORDER):
        raise DatasetError(f"synthetic class id {class_id} out of range")
    return CLASS_ORDER[class_id]


def _connected(pairs: Sequence[tuple[str, str]]) -> bool:
    """Whether the shape-colour bipartite graph spanned by ``pairs`` is connected."""
    nodes = {("s", s) for s, _ in pairs} | {("c", c) for _, c in pairs}
    adj: dict = {n: set() for n in nodes}
    for s, c in pairs:
        adj[("s", s)].add(("c", c))
        adj[("c", c)].add(("s", s))
    start = next(iter(nodes))
    seen, stack = {start}, [start]
    while stack:
        for nxt in adj[stack.pop()] - seen:
            seen.add(nxt)
            stack.append(nxt)
    return seen == nodes


def shape_mask(shape: str, center: Sequence[float], scale: float, resolution: int, supersample: int = 4) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of a shape filling the box center +- scale.

    ``center`` and ``scale`` are fractions of the image side.
    """
    n = resolution * supersample
    coords = (np.arange(n) + 0.5) / n
    xs, ys = np.meshgrid(coords, coords)
    u = (xs - center[0]) / scale
    v = (ys - center[1]) / scale
    inside_box = (np.abs(u) <= 1) & (np.abs(v) <= 1)
    if shape == "circle":
        hit = u**2 + v**2 <= 1
    elif shape == "square":
        hit = inside_box
    elif shape == "triangle":
        # apex at top, base at bottom of the box
        hit = inside_box & (np.abs(u) <= (v + 1) / 2)
    elif shape == "cross":
        hit = inside_box & ((np.abs(u) <= 1 / 3) | (np.abs(v) <= 1 / 3))
    else:
        raise DatasetError(f"unknown shape {shape!r}")
    return hit.reshape(resolution, supersample, resolution, supersample).mean(axis=(1, 3))


def render_shape(shape: str, color: str, bg_color: Sequence[int], center, scale, resolution: int) -> np.ndarray:
    alpha = shape_mask(shape, center, scale, resolution)[..., None]
    fg = np.asarray(COLORS[color], dtype=np.float64)
    bg = np.asarray(bg_color, dtype=np.float64)
    pixels = np.round(bg * (1 - alpha) + fg * alpha).astype(np.uint8)
    return to_unit_range(pixels)


def _pick_test_classes(class_ids: list[int], n_test: int, rng: np.random.Generator) -> list[int]:
    """Hold out classes that are new combinations of attributes seen in training.

    Every held-out colour and shape must occur among the train classes, the
    train classes must link all their attributes into one connected graph
    (otherwise colour and shape are confounded), and held-out colours are
    pairwise distinct where possible.
    """
    def ok(candidate: list[int], need_connected: bool) -> bool:
        train = [class_attributes(c) for c in class_ids if c not in candidate]
        test_attrs = [class_attributes(c) for c in candidate]
        train_shapes = {s for s, _ in train}
        train_colors = {col for _, col in train}
        n_colors = len(train_colors | {col for _, col in test_attrs})
        return (
            all(s in train_shapes and col in train_colors for s, col in test_attrs)
            and (not need_connected or _connected(train))
            and len({col for _, col in test_attrs}) == min(n_test, n_colors)
        )

    candidates = [sorted(rng.choice(class_ids, size=n_test, replace=False).tolist()) for _ in range(5000)]
    for need_connected in (True, False):
        for candidate in candidates:
            if ok(candidate, need_connected):
                if not need_connected:
                    logger.warning("train classes of %d-class split do not connect all attributes", len(class_ids))
                return candidate
    logger.warning("no compositional test split found for %d classes; using an unconstrained split", len(class_ids))
    return candidates[-1]


def make_synthetic_dataset(num_classes: int, per_class: int, resolution: int, seed: int) -> CaptionedDataset:
    """Generate the captioned-shapes dataset.

    Each class is a (shape, colour) pair. Every image puts the shape at a random
    position and size over a background drawn from a fixed dark palette; the
    captions describe only shape and colour, the style lives in ``meta``.
    """
    max_classes = len(SHAPES) * len(COLORS)
    if num_classes > max_classes:
        raise DatasetError(f"at most {max_classes} synthetic classes exist, asked for {num_classes}")
    if num_classes < 4:
        raise DatasetError("num_classes must be >= 4")
    if per_class < 1:
        raise DatasetError("per_class must be >= 1")
    if resolution < 8:
        raise DatasetError(f"resolution {resolution} too small")

    rng = np.random.default_rng(seed)
    class_ids = list(range(num_classes))
    n_test = max(2, math.ceil(3 * num_classes / 8))
    test = _pick_test_classes(class_ids, n_test, rng)
    split = SplitSpec(frozenset(c for c in class_ids if c not in test), frozenset(test))

    examples = []
    for class_id in class_ids:
        shape, color = class_attributes(class_id)
        for i in range(per_class):
            bg = BACKGROUNDS[int(rng.integers(len(BACKGROUNDS)))]
            center = [round(float(v), 4) for v in rng.uniform(0.35, 0.65, size=2)]
            scale = round(float(rng.uniform(0.2, 0.3)), 4)
            templates = rng.choice(len(CAPTION_TEMPLATES), size=CAPTIONS_PER_IMAGE, replace=False)
            captions = tuple(CAPTION_TEMPLATES[t].format(color=color, shape=shape) for t in templates)
            examples.append(
                CaptionedExample(
                    image=render_shape(shape, color, bg, center, scale, resolution),
                    captions=captions,
                    class_id=class_id,
                    image_id=f"{class_id:02d}_{i:04d}",
                    meta={"bg_color": list(bg), "center": center, "scale": scale},
                )
            )
    return CaptionedDataset(examples, split, resolution)


_WORD = re.compile(r"[a-z]+")


def extract_attributes(caption: str) -> tuple[str | None, str | None]:
    """Keyword extraction of (shape, colour) from a caption; None when absent."""
    words = _WORD.findall(caption.lower())
    shape = next((w for w in words if w in SHAPES), None)
    color = next((w for w in words if w in COLORS), None)
    return shape, color


# ---------------------------------------------------------------------------
# minibatches


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Upscale by 12.5%, crop back to size at a random offset, flip half the time."""
    res = image.shape[0]
    big = math.ceil(res * UPSCALE)
    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]
    up = F.interpolate(t, size=(big, big), mode="bilinear", align_corners=False)[0]
    dy, dx = (int(v) for v in rng.integers(0, big - res + 1, size=2))
    view = up[:, dy : dy + res, dx : dx + res].numpy().transpose(1, 2, 0)
    if rng.random() < 0.5:
        view = view[:, ::-1]
    return np.ascontiguousarray(view.clip(-1.0, 1.0), dtype=np.float32)


def sample_minibatch(
    examples: Sequence[CaptionedExample], batch_size: int, rng: np.random.Generator, augment_views: bool = True
) -> list[MinibatchItem]:
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    by_class: dict[int, list[int]] = {}
    for i, ex in enumerate(examples):
        by_class.setdefault(ex.class_id, []).append(i)
    if len(by_class) < 2:
        raise ValueError("need examples from at least 2 classes to draw mismatched captions")

    idx = rng.choice(len(examples), size=batch_size, replace=batch_size > len(examples))
    items = []
    for i in idx:
        ex = examples[int(i)]
        others = [c for c in by_class if c != ex.class_id]
        other_cls = others[int(rng.integers(len(others)))]
        other = examples[by_class[other_cls][int(rng.integers(len(by_class[other_cls])))]]
        items.append(
            MinibatchItem(
                image_view=augment(ex.image, rng) if augment_views else ex.image,
                caption=ex.captions[int(rng.integers(len(ex.captions)))],
                class_id=ex.class_id,
                mismatched_caption=other.captions[int(rng.integers(len(other.captions)))],
                mismatched_class_id=other_cls,
            )
        )
    return items


def images_to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    """List of HxWx3 arrays -> N x 3 x H x W tensor."""
    return torch.from_numpy(np.stack([np.asarray(im).transpose(2, 0, 1) for im in images])).to(dtype)


def tensor_to_images(batch: torch.Tensor) -> list[np.ndarray]:
    return [im for im in batch.detach().cpu().float().numpy().transpose(0, 2, 3, 1)]

"""Class folds, episodic sampling, dataset I/O and the synthetic shapes world."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

SHAPES = ("square", "circle", "triangle", "cross", "ring", "bar",
          "diamond", "frame", "ellipse", "vbar", "ell", "tee")


@dataclass(frozen=True)
class ClassSplit:
    fold_index: int
    base_classes: frozenset
    novel_classes: frozenset
    num_folds: int = 4

    @property
    def base_ids(self) -> list[int]:
        """Original base class ids in dense order (dense id = position + 1)."""
        return sorted(self.base_classes)

    @property
    def num_base(self) -> int:
        return len(self.base_classes)

    def base_lookup(self) -> np.ndarray:
        """Dense id -> original class id, with index 0 reserved for background."""
        return np.array([0] + self.base_ids, dtype=np.int64)


def split_folds(total_classes: int, fold_index: int, num_folds: int = 4) -> ClassSplit:
    if num_folds <= 0 or total_classes % num_folds != 0:
        raise ValueError(
            f"{total_classes} classes cannot be split evenly into {num_folds} folds")
    if not 0 <= fold_index < num_folds:
        raise ValueError(f"fold_index {fold_index} outside [0, {num_folds})")
    per_fold = total_classes // num_folds
    novel = range(fold_index * per_fold + 1, (fold_index + 1) * per_fold + 1)
    base = set(range(1, total_classes + 1)) - set(novel)
    return ClassSplit(fold_index, frozenset(base), frozenset(novel), num_folds)


def split_from_novel(total_classes: int, fold_index: int, novel: Sequence[int],
                     num_folds: int) -> ClassSplit:
    """Build a split from an explicit novel list (as stored in ``folds.json``)."""
    novel = frozenset(int(c) for c in novel)
    everything = set(range(1, total_classes + 1))
    if not novel <= everything:
        raise ValueError(f"novel ids {sorted(novel - everything)} out of range")
    return ClassSplit(fold_index, frozenset(everything - novel), novel, num_folds)


def remap_for_base_training(semantic_mask: np.ndarray, split: ClassSplit) -> np.ndarray:
    """Renumber base classes densely to 1..N_b; novel classes and background become 0.

    Values of 255 are kept as an ignore label.
    """
    table = np.zeros(256, dtype=np.int64)
    for dense, cid in enumerate(split.base_ids, start=1):
        table[cid] = dense
    table[255] = 255
    return table[np.asarray(semantic_mask, dtype=np.uint8)]


def mask_to_bbox(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("cannot box an empty mask")
    out = np.zeros(mask.shape, dtype=np.uint8)
    out[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = 1
    return out


# ---------------------------------------------------------------------------
# shapes world


@dataclass(frozen=True)
class SceneSpec:
    canvas_size: int = 64
    shape_classes: tuple = SHAPES
    shapes_per_image: tuple = (2, 4)
    noise_level: float = 0.04
    rng_seed: int = 0
    size_range: tuple = (14, 26)
    color_jitter: float = 0.12
    style_jitter: float = 0.25
    palette: int = 0            # number of distinct class hues; 0 gives every shape its own

    def __post_init__(self):
        if self.canvas_size < 32:
            raise ValueError("canvas must be at least 32x32")
        unknown = set(self.shape_classes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.palette < 0:
            raise ValueError("palette must be >= 0")


def _shape_mask(kind: str, size: int) -> np.ndarray:
    """Binary footprint of one shape on a size x size grid."""
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2
    if kind == "triangle":
        # apex at top centre, base along the bottom row
        half = (yy + 1) / size * (size / 2.0)
        return np.abs(xx - c) <= half
    if kind == "cross":
        w = max(size // 3, 1)
        lo = (size - w) // 2
        band = (slice(lo, lo + w))
        m = np.zeros((size, size), dtype=bool)
        m[band, :] = True
        m[:, band] = True
        return m
    if kind == "ring":
        r2 = (yy - c) ** 2 + (xx - c) ** 2
        return (r2 <= (size / 2.0) ** 2) & (r2 >= (size / 4.0) ** 2)
    if kind == "bar":
        h = max(size // 3, 1)
        lo = (size - h) // 2
        m = np.zeros((size, size), dtype=bool)
        m[lo:lo + h, :] = True
        return m
    if kind == "diamond":
        return np.abs(yy - c) + np.abs(xx - c) <= size / 2.0
    if kind == "frame":
        t = max(size // 5, 1)
        m = np.ones((size, size), dtype=bool)
        m[t:size - t, t:size - t] = False
        return m
    if kind == "ellipse":
        return ((yy - c) / (size / 4.0)) ** 2 + ((xx - c) / (size / 2.0)) ** 2 <= 1.0
    if kind == "vbar":
        return _shape_mask("bar", size).T.copy()
    if kind == "ell":
        t = max(size // 3, 1)
        m = np.zeros((size, size), dtype=bool)
        m[:, :t] = True
        m[size - t:, :] = True
        return m
    if kind == "tee":
        t = max(size // 3, 1)
        lo = (size - t) // 2
        m = np.zeros((size, size), dtype=bool)
        m[:t, :] = True
        m[:, lo:lo + t] = True
        return m
    raise ValueError(kind)


def _class_colors(n: int) -> np.ndarray:
    hues = np.arange(n) / n
    # simple HSV -> RGB with s=0.6, v=0.8
    k = (np.array([5.0, 3.0, 1.0])[None, :] + hues[:, None] * 6.0) % 6.0
    return 0.8 - 0.8 * 0.6 * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def generate_scene(spec: SceneSpec, rng: np.random.Generator | None = None):
    """Render one image and its semantic mask; returns (float32 HxWx3, uint8 HxW)."""
    if rng is None:
        rng = np.random.default_rng(spec.rng_seed)
    n = spec.canvas_size
    hues = spec.palette or len(SHAPES)
    colors = _class_colors(hues)
    style = rng.uniform(-spec.style_jitter, spec.style_jitter, size=3)
    gy, gx = np.mgrid[0:n, 0:n] / max(n - 1, 1)
    tilt = rng.uniform(-0.15, 0.15, size=2)
    bg = 0.45 + style[None, None, :] + (tilt[0] * gy + tilt[1] * gx)[..., None]
    image = np.broadcast_to(bg, (n, n, 3)).copy()
    mask = np.zeros((n, n), dtype=np.uint8)
    occupied = np.zeros((n, n), dtype=bool)

    lo, hi = spec.shapes_per_image
    count = int(rng.integers(lo, hi + 1))
    for _ in range(count):
        cls = int(rng.integers(len(spec.shape_classes)))
        kind = spec.shape_classes[cls]
        smin, smax = spec.size_range
        size = int(min(rng.integers(smin, smax + 1), n))
        footprint = _shape_mask(kind, size)
        for _attempt in range(20):
            r = int(rng.integers(0, n - size + 1))
            c = int(rng.integers(0, n - size + 1))
            if not occupied[r:r + size, c:c + size].any():
                break
        else:
            continue
        occupied[r:r + size, c:c + size] = True
        region = (slice(r, r + size), slice(c, c + size))
        color = colors[SHAPES.index(kind) % hues] + style * 0.5
        color = color + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
        patch = image[region]
        patch[footprint] = color
        mask[region][footprint] = cls + 1
    if spec.noise_level > 0:
        image = image + rng.normal(0.0, spec.noise_level, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    # quantise so stored PNGs reload bit-identically
    image = np.round(image * 255.0) / 255.0
    return image.astype(np.float32), mask


@dataclass
class SegDataset:
    """Images (N,H,W,3 uint8) with index masks (N,H,W uint8)."""
    images: np.ndarray
    masks: np.ndarray
    num_classes: int
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.images.shape[:3] != self.masks.shape:
            raise ValueError("image / mask shapes disagree")

    def __len__(self):
        return len(self.images)

    def image(self, i: int) -> np.ndarray:
        return self.images[i].astype(np.float32) / 255.0

    def images_with_class(self, cls: int, min_pixels: int = 1) -> np.ndarray:
        key = (cls, min_pixels)
        if key not in self._index:
            counts = (self.masks == cls).reshape(len(self), -1).sum(axis=1)
            self._index[key] = np.flatnonzero(counts >= min_pixels)
        return self._index[key]

    def subset(self, indices) -> "SegDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return SegDataset(self.images[idx], self.masks[idx], self.num_classes)

    def without_classes(self, classes) -> "SegDataset":
        """Drop every image in which any of ``classes`` is visible."""
        hit = np.isin(self.masks, np.asarray(sorted(classes), dtype=self.masks.dtype))
        return self.subset(np.flatnonzero(~hit.reshape(len(self), -1).any(axis=1)))


def build_shapes_dataset(num_images: int, spec: SceneSpec | None = None,
                         seed: int = 0) -> SegDataset:
    spec = spec or SceneSpec()
    children = np.random.SeedSequence(seed).spawn(num_images)
    images = np.empty((num_images, spec.canvas_size, spec.canvas_size, 3), dtype=np.uint8)
    masks = np.empty((num_images, spec.canvas_size, spec.canvas_size), dtype=np.uint8)
    for i, ss in enumerate(children):
        img, m = generate_scene(spec, np.random.default_rng(ss))
        images[i] = np.round(img * 255.0).astype(np.uint8)
        masks[i] = m
    return SegDataset(images, masks, len(spec.shape_classes))


def save_dataset(ds: SegDataset, root: str | Path, folds: dict[int, list[int]]) -> None:
    """Write ``images/*.png``, ``masks/*.png`` and ``folds.json`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(len(ds)):
        Image.fromarray(ds.images[i]).save(root / "images" / f"{i:06d}.png")
        Image.fromarray(ds.masks[i]).save(root / "masks" / f"{i:06d}.png")
    meta = {"num_classes": ds.num_classes, "num_folds": len(folds),
            "folds": {str(k): sorted(int(c) for c in v) for k, v in folds.items()}}
    (root / "folds.json").write_text(json.dumps(meta, indent=2))


def load_dataset(root: str | Path) -> tuple[SegDataset, dict[int, list[int]]]:
    root = Path(root)
    meta = json.loads((root / "folds.json").read_text())
    names = sorted(p.name for p in (root / "images").glob("*.png"))
    if not names:
        raise FileNotFoundError(f"no images under {root / 'images'}")
    images = np.stack([np.asarray(Image.open(root / "images" / n).convert("RGB"))
                       for n in names])
    masks = np.stack([np.asarray(Image.open(root / "masks" / n)) for n in names])
    folds = {int(k): list(v) for k, v in meta["folds"].items()}
    num_classes = int(meta.get("num_classes", max(max(v) for v in folds.values())))
    return SegDataset(images, masks.astype(np.uint8), num_classes), folds


def default_folds(num_classes: int, num_folds: int) -> dict[int, list[int]]:
    return {f: sorted(split_folds(num_classes, f, num_folds).novel_classes)
            for f in range(num_folds)}


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    support_images: np.ndarray   # K,H,W,3 float32
    support_masks: np.ndarray    # K,H,W uint8 {0,1}
    query_image: np.ndarray      # H,W,3 float32
    query_mask: np.ndarray       # H,W uint8 {0,1}
    class_id: int
    query_labels: np.ndarray | None = None  # original semantic mask of the query
    indices: tuple = ()

    @property
    def shot_count(self) -> int:
        return len(self.support_images)


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            max_shift: int = 6):
    """Random horizontal flip plus a pad-and-crop shift."""
    if rng.random() < 0.5:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if max_shift > 0:
        h, w = mask.shape
        dy, dx = rng.integers(0, 2 * max_shift + 1, size=2)
        image = np.pad(image, ((max_shift,) * 2, (max_shift,) * 2, (0, 0)), mode="edge")
        mask = np.pad(mask, ((max_shift,) * 2, (max_shift,) * 2), mode="constant")
        image = image[dy:dy + h, dx:dx + w]
        mask = mask[dy:dy + h, dx:dx + w]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def sample_episode(dataset: SegDataset, class_pool, K: int, rng: np.random.Generator,
                   min_pixels: int = 1, support_annotation: str = "mask",
                   augment_rng: np.random.Generator | None = None) -> Episode:
    """Draw one K-shot episode for a class from ``class_pool``.

    Classes without K+1 qualifying images are dropped and another class is drawn.
    ``support_annotation="bbox"`` replaces support masks by their tight boxes;
    the query mask is never touched.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    candidates = sorted(int(c) for c in class_pool)
    if not candidates:
        raise ValueError("empty class pool")
    while candidates:
        cls = candidates[int(rng.integers(len(candidates)))]
        pool = dataset.images_with_class(cls, min_pixels)
        if len(pool) < K + 1:
            candidates.remove(cls)
            continue
        picks = rng.choice(pool, size=K + 1, replace=False)
        q, supports = int(picks[0]), [int(i) for i in picks[1:]]
        s_imgs, s_masks = [], []
        for i in supports:
            img, m = dataset.image(i), (dataset.masks[i] == cls).astype(np.uint8)
            if augment_rng is not None:
                img, m = augment(img, m, augment_rng)
                if not m.any():
                    img, m = dataset.image(i), (dataset.masks[i] == cls).astype(np.uint8)
            if support_annotation == "bbox":
                m = mask_to_bbox(m)
            s_imgs.append(img)
            s_masks.append(m)
        q_img, q_lab = dataset.image(q), dataset.masks[q]
        if augment_rng is not None:
            q_img, q_lab = augment(q_img, q_lab, augment_rng)
        return Episode(np.stack(s_imgs), np.stack(s_masks), q_img,
                       (q_lab == cls).astype(np.uint8), cls,
                       query_labels=np.array(q_lab), indices=(q, *supports))
    raise ValueError(f"no class in the pool has {K + 1} images containing it")


def collate(episodes: Sequence[Episode]) -> dict[str, np.ndarray]:
    """Stack episodes into channel-first float arrays for the model."""
    return {
        "query": np.stack([e.query_image.transpose(2, 0, 1) for e in episodes]),
        "query_mask": np.stack([e.query_mask for e in episodes]).astype(np.int64),
        "support": np.stack([e.support_images.transpose(0, 3, 1, 2) for e in episodes]),
        "support_mask": np.stack([e.support_masks for e in episodes]).astype(np.float32),
    }

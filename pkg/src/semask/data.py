"""Dataset ingestion and the synthetic shapes corpus.

On-disk layout: ``root/images/<name>.png`` (8-bit RGB) paired with
``root/masks/<name>.png`` (8-bit single channel of class indices, 255 =
ignore). Loading is lazy; mask labels are validated on read.
"""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
from PIL import Image

from semask.rng import make_rng

IGNORE_LABEL = 255


class DatasetError(ValueError):
    pass


def class_palette(num_classes: int) -> np.ndarray:
    """Deterministic uint8 palette: golden-ratio hue stepping per class."""
    colors = np.zeros((num_classes, 3), np.uint8)
    for c in range(num_classes):
        h = (c * 0.6180339887498949) % 1.0
        r, g, b = colorsys.hsv_to_rgb(h, 0.65, 0.95)
        colors[c] = (int(r * 255), int(g * 255), int(b * 255))
    return colors


def colorize_mask(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Map class indices to palette colors; ignore pixels go black."""
    palette = class_palette(num_classes)
    out = np.zeros(mask.shape + (3,), np.uint8)
    valid = mask != IGNORE_LABEL
    out[valid] = palette[mask[valid]]
    return out


class ArrayDataset:
    """In-memory (image, mask) pairs; images float32 in [0, 1]."""

    def __init__(self, images: list[np.ndarray], masks: list[np.ndarray],
                 num_classes: int):
        if len(images) != len(masks):
            raise DatasetError("image/mask count mismatch")
        self.images = images
        self.masks = masks
        self.num_classes = num_classes

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.images[i], self.masks[i]


class PngDataset:
    """Lazily decoded pairs from the on-disk layout."""

    def __init__(self, root, num_classes: int):
        self.root = Path(root)
        self.num_classes = num_classes
        img_dir = self.root / "images"
        mask_dir = self.root / "masks"
        if not img_dir.is_dir():
            raise DatasetError(f"no samples: {img_dir} is not a directory")
        names = sorted(p.name for p in img_dir.glob("*.png"))
        if not names:
            raise DatasetError(f"no samples found under {img_dir}")
        for name in names:
            if not (mask_dir / name).is_file():
                raise DatasetError(f"missing mask for image {name}")
        self.names = names

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        name = self.names[i]
        try:
            img = np.asarray(Image.open(self.root / "images" / name).convert("RGB"))
            msk = np.asarray(Image.open(self.root / "masks" / name))
        except Exception as exc:
            raise DatasetError(f"undecodable file for sample {name}: {exc}") from exc
        if msk.ndim != 2:
            raise DatasetError(f"mask {name} is not single-channel")
        bad = (msk >= self.num_classes) & (msk != IGNORE_LABEL)
        if bad.any():
            raise DatasetError(
                f"mask {name} contains label {int(msk[bad].max())} >= "
                f"num_classes {self.num_classes}"
            )
        if img.shape[:2] != msk.shape:
            raise DatasetError(f"image/mask extents differ for {name}")
        return img.astype(np.float32) / 255.0, msk.astype(np.int64)


def load_dataset(root, num_classes: int) -> PngDataset:
    return PngDataset(root, num_classes)


# ---------------------------------------------------------------------------
# synthetic corpus


def _shape_palette(num_classes: int) -> np.ndarray:
    """Well-separated float colors per class; class 0 is the dull background."""
    colors = np.zeros((num_classes, 3), np.float32)
    colors[0] = (0.35, 0.35, 0.32)
    for c in range(1, num_classes):
        h = ((c - 1) / max(num_classes - 1, 1) + 0.07) % 1.0
        colors[c] = colorsys.hsv_to_rgb(h, 0.8, 0.9)
    return colors


def synth_shapes(count: int, height: int, width: int, num_classes: int,
                 seed: int) -> ArrayDataset:
    """Colored rectangles/disks/stripe triples on a textured background.

    Mask value = shape class; colors correlate with class plus additive
    noise. Shape classes cycle so every class appears; shape extents are
    bounded so the background keeps the pixel majority.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    rng = make_rng(seed, "synth")
    palette = _shape_palette(num_classes)
    images, masks = [], []
    shape_counter = 0
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(count):
        img = palette[0] + rng.normal(0.0, 0.04, (height, width, 3)).astype(np.float32)
        msk = np.zeros((height, width), np.int64)
        # 1-2 shapes with bounded extents keep the background in the majority
        for _ in range(int(rng.integers(1, 3))):
            cls = 1 + shape_counter % (num_classes - 1)
            shape_counter += 1
            kind = ("rect", "disk", "stripes")[int(rng.integers(3))]
            sh = int(rng.integers(height // 4, 3 * height // 8 + 1))
            sw = int(rng.integers(width // 4, 3 * width // 8 + 1))
            cy = int(rng.integers(height - sh + 1))
            cx = int(rng.integers(width - sw + 1))
            if kind == "rect":
                region = np.zeros((height, width), bool)
                region[cy:cy + sh, cx:cx + sw] = True
            elif kind == "disk":
                r = min(sh, sw) // 2
                oy, ox = cy + sh // 2, cx + sw // 2
                region = (yy - oy) ** 2 + (xx - ox) ** 2 <= r * r
            else:
                region = np.zeros((height, width), bool)
                bar = max(2, sh // 4)
                for k in range(2):
                    top = cy + k * 2 * bar
                    region[top:top + bar, cx:cx + sw] = True
            color = palette[cls] + rng.normal(0.0, 0.05, 3).astype(np.float32)
            img[region] = color + rng.normal(0.0, 0.03, (int(region.sum()), 3)).astype(np.float32)
            msk[region] = cls
        images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
        masks.append(msk)
    return ArrayDataset(images, masks, num_classes)


def save_image_png(path, image: np.ndarray) -> None:
    """image: float [H, W, 3] in [0, 1] or uint8."""
    if image.dtype != np.uint8:
        image = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(image, mode="RGB").save(path)


def save_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)


def write_dataset(dataset, root) -> list[str]:
    """Materialize a dataset in the on-disk layout; returns sample names."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    digits = max(4, len(str(len(dataset))))
    names = []
    for i in range(len(dataset)):
        img, msk = dataset[i]
        name = f"{i:0{digits}d}.png"
        save_image_png(root / "images" / name, img)
        save_mask_png(root / "masks" / name, msk)
        names.append(name)
    return names

"""Synthetic multi-label scenes with patch-level ground truth.

Each scene is a noisy, smoothly shaded background carrying one to three
non-overlapping objects.  Objects are unions of whole grid cells
(rectangles, some with a corner cell cut away), so the ground-truth mask is
exact at patch resolution.  Every class has its own colour and its own
stripe texture (orientation and frequency), so classes are separable from
appearance alone while the background shares neither.
"""

import colorsys
import json
from dataclasses import dataclass

import numpy as np

from .archive import write_npz

DATASET_FORMAT = "mctformer-dataset/1"
MAX_OBJECTS = 3
_PLACEMENT_TRIES = 50
_SCENE_TRIES = 100

# appearance: pixel noise, class colour saturation, stripe contrast and the
# per-object brightness jitter range
NOISE_STD = 0.08
SATURATION = 0.75
TEXTURE_AMP = 0.25
BRIGHT_JITTER = 0.2
# object side lengths as fractions of the grid side
OBJ_LO = 0.25
OBJ_HI = 0.5


class PlacementError(RuntimeError):
    pass


@dataclass
class SyntheticSample:
    image: np.ndarray  # (3, P*N, P*N) float64
    labels: np.ndarray  # (C,) int8 in {0, 1}
    gt_mask: np.ndarray  # (N, N) int8; 0 = background, c + 1 = class c


def class_color(c, num_classes):
    hue = (c / num_classes + 0.02) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, SATURATION, 0.85))


def class_texture(c, side):
    """Stripe pattern in [-1, 1] of shape (side, side) specific to class c."""
    angle = np.pi * ((c * 0.618) % 1.0)
    freq = 2.0 * np.pi / (3.0 + (c % 3))
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    return np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy))


def _object_cells(rng, grid_side):
    lo = max(1, int(grid_side * OBJ_LO))
    hi = max(lo, int(grid_side * OBJ_HI))
    h = int(rng.integers(lo, hi + 1))
    w = int(rng.integers(lo, hi + 1))
    cells = np.ones((h, w), dtype=bool)
    if h > 1 and w > 1 and rng.random() < 0.4:
        cells[rng.integers(0, 2) * (h - 1), rng.integers(0, 2) * (w - 1)] = False
    return cells


def _place(rng, mask, cells, label):
    n = mask.shape[0]
    h, w = cells.shape
    for _ in range(_PLACEMENT_TRIES):
        i = int(rng.integers(0, n - h + 1))
        j = int(rng.integers(0, n - w + 1))
        window = mask[i:i + h, j:j + w]
        if not np.any(window[cells]):
            window[cells] = label
            return True
    return False


def _layout(rng, num_classes, grid_side):
    for _ in range(_SCENE_TRIES):
        mask = np.zeros((grid_side, grid_side), dtype=np.int8)
        count = int(rng.integers(1, MAX_OBJECTS + 1))
        classes = rng.integers(0, num_classes, size=count)
        if all(_place(rng, mask, _object_cells(rng, grid_side), c + 1) for c in classes):
            return mask
    raise PlacementError(f"could not place objects on a {grid_side}x{grid_side} grid after {_SCENE_TRIES} scenes")


def _render(rng, mask, num_classes, patch_size):
    n = mask.shape[0]
    side = n * patch_size
    yy, xx = np.mgrid[0:side, 0:side] / side
    # smooth low-contrast shading plus pixel noise for the background
    base = 0.45 + 0.1 * rng.random(3)
    gx, gy = rng.normal(0, 0.08, size=(2, 3))
    img = base[:, None, None] + gx[:, None, None] * (xx - 0.5) + gy[:, None, None] * (yy - 0.5)
    pix = np.kron(mask, np.ones((patch_size, patch_size), dtype=np.int8))
    for c in range(num_classes):
        region = pix == c + 1
        if not region.any():
            continue
        color = class_color(c, num_classes) * (1.0 - BRIGHT_JITTER / 2 + BRIGHT_JITTER * rng.random())
        tex = class_texture(c, side)
        shade = color[:, None, None] * (1.0 + TEXTURE_AMP * tex[None])
        img = np.where(region[None], shade, img)
    img = img + rng.normal(0.0, NOISE_STD, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_sample(rng, num_classes, grid_side, patch_size):
    mask = _layout(rng, num_classes, grid_side)
    image = _render(rng, mask, num_classes, patch_size)
    labels = np.zeros(num_classes, dtype=np.int8)
    labels[np.unique(mask[mask > 0]) - 1] = 1
    return SyntheticSample(image=image, labels=labels, gt_mask=mask)


def generate_dataset(seed, count, config):
    """``count`` samples, deterministic in ``seed`` (one child seed per sample)."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    children = np.random.SeedSequence(seed).spawn(count)
    return [
        generate_sample(np.random.default_rng(s), config.num_classes, config.grid_side, config.patch_size)
        for s in children
    ]


def save_dataset(path, samples, seed, config, extra=None):
    """Write a dataset archive (``.npz``).

    Arrays: ``images`` (count, 3, S, S) float64, ``labels`` (count, C) int8,
    ``masks`` (count, N, N) int8; metadata ``__meta__`` as JSON with the
    format tag, generation seed, num_classes, grid_side and patch_size.
    """
    meta = {
        "format": DATASET_FORMAT,
        "seed": int(seed),
        "count": len(samples),
        "num_classes": config.num_classes,
        "grid_side": config.grid_side,
        "patch_size": config.patch_size,
    }
    if extra:
        meta.update(extra)
    images = np.stack([s.image for s in samples]).astype(np.float64)
    labels = np.stack([s.labels for s in samples]).astype(np.int8)
    masks = np.stack([s.gt_mask for s in samples]).astype(np.int8)
    write_npz(path, {"images": images, "labels": labels, "masks": masks, "__meta__": np.array(json.dumps(meta, sort_keys=True))})


def load_dataset(path):
    """Return (samples, meta)."""
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise ValueError(f"{path}: not a dataset archive")
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: unsupported dataset format {meta.get('format')!r}")
        images, labels, masks = z["images"], z["labels"], z["masks"]
    samples = [SyntheticSample(image=images[i], labels=labels[i], gt_mask=masks[i]) for i in range(len(images))]
    return samples, meta

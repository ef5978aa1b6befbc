"""Self-verifying synthetic images and segmentation masks.

Each sample is a smoothed random field with one axis-aligned rectangle
(class 1) and one disc (class 2) composited at distinct intensity offsets,
so the ground-truth mask is recoverable from the image alone. Generation is
a pure function of (seed, count); train and held-out splits use disjoint
seeds and id ranges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .numerics import Tensor, bilinear_resize

IMAGE_SIZE = 64
NUM_CLASSES = 3  # background, rectangle, disc


@dataclass
class SegmentationDataset:
    images: np.ndarray  # [N, H, W] float32
    masks: np.ndarray   # [N, H, W] uint8 class ids
    ids: np.ndarray     # [N] int64 sample identifiers

    def __len__(self) -> int:
        return len(self.images)


def _smooth_field(rng: np.random.Generator, size: int) -> np.ndarray:
    # mostly low-frequency content; heavy high-frequency noise would make
    # resampled teacher targets unpredictable from local patches
    coarse = rng.normal(0.0, 1.0, size=(1, max(size // 16, 2), max(size // 16, 2), 1))
    mid = rng.normal(0.0, 0.6, size=(1, max(size // 8, 2), max(size // 8, 2), 1))
    base = bilinear_resize(Tensor(coarse.astype(np.float32)), size, size).data[0, :, :, 0]
    base = base + bilinear_resize(Tensor(mid.astype(np.float32)), size, size).data[0, :, :, 0]
    return base + rng.normal(0.0, 0.05, size=(size, size)).astype(np.float32)


def synth_segmentation_dataset(count: int, seed: int, size: int = IMAGE_SIZE,
                               id_offset: int = 0) -> SegmentationDataset:
    if count < 1:
        raise ContractError("dataset needs at least one sample")
    rng = np.random.default_rng(np.random.SeedSequence([seed, size]))
    images = np.empty((count, size, size), dtype=np.float32)
    masks = np.zeros((count, size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(count):
        img = _smooth_field(rng, size)
        mask = np.zeros((size, size), dtype=np.uint8)
        # rectangle, class 1
        rh = int(rng.integers(size // 4, size // 2))
        rw = int(rng.integers(size // 4, size // 2))
        top = int(rng.integers(2, size - rh - 2))
        left = int(rng.integers(2, size - rw - 2))
        img[top:top + rh, left:left + rw] += 2.0
        mask[top:top + rh, left:left + rw] = 1
        # disc, class 2 (wins in overlaps)
        radius = int(rng.integers(size // 7, size // 4))
        cy = int(rng.integers(radius + 2, size - radius - 2))
        cx = int(rng.integers(radius + 2, size - radius - 2))
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
        img[disc] -= 2.0
        mask[disc] = 2
        img = (img - img.mean()) / (img.std() + 1e-6)
        images[i] = img
        masks[i] = mask
    ids = np.arange(id_offset, id_offset + count, dtype=np.int64)
    return SegmentationDataset(images=images, masks=masks, ids=ids)


def train_eval_split(train_count: int, eval_count: int, seed: int,
                     size: int = IMAGE_SIZE) -> tuple[SegmentationDataset, SegmentationDataset]:
    """Disjoint train/held-out datasets derived from one experiment seed."""
    train = synth_segmentation_dataset(train_count, seed=seed * 2 + 1, size=size, id_offset=0)
    held = synth_segmentation_dataset(eval_count, seed=seed * 2 + 2, size=size,
                                      id_offset=1_000_000)
    return train, held

"""Binary-mask segmentation metrics: Dice overlap and HD95 surface distance.

Masks are 2-D boolean arrays. HD95 is the 95th percentile (linear
interpolation) of the union of both directed boundary-distance sets, computed
by exact pairwise brute force — fine at desk scale. The alternative
convention (max of the two directed 95th percentiles) is available behind
``mode="directed-max"``. Pixel spacing is fixed at 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, FormatError

HD95_UNION = "union"
HD95_DIRECTED_MAX = "directed-max"


def _as_mask(m) -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim != 2 or arr.size < 1:
        raise DimensionError(f"mask must be a non-empty 2-D array, got shape {arr.shape}")
    return arr.astype(bool)


def dice(a, b) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    a, b = _as_mask(a), _as_mask(b)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes {a.shape} and {b.shape} differ")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary(m) -> np.ndarray:
    """Foreground pixels with a 4-neighbor outside the mask; border counts as outside.

    Returns an [K, 2] array of (row, col) coordinates in scan order.
    """
    m = _as_mask(m)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
                padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def percentile(values, p: float) -> float:
    """Linear-interpolation percentile: rank = p/100 * (n-1) over sorted values."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ContractError("percentile of an empty list")
    if not 0.0 <= p <= 100.0:
        raise ContractError(f"percentile p must be in [0, 100], got {p}")
    arr = np.sort(arr)
    rank = p / 100.0 * (arr.size - 1)
    lo = int(np.floor(rank))
    hi = min(lo + 1, arr.size - 1)
    frac = rank - lo
    return float(arr[lo] * (1.0 - frac) + arr[hi] * frac)


def _directed_min_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    diff = src[:, None, :].astype(np.float64) - dst[None, :, :].astype(np.float64)
    return np.sqrt((diff * diff).sum(axis=-1)).min(axis=1)


def hd95(a, b, mode: str = HD95_UNION) -> float:
    """95th-percentile symmetric boundary distance between two non-empty masks."""
    a, b = _as_mask(a), _as_mask(b)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes {a.shape} and {b.shape} differ")
    if not a.any() or not b.any():
        raise ContractError("hd95 is undefined for empty masks")
    pa, pb = boundary(a), boundary(b)
    d_ab = _directed_min_distances(pa, pb)
    d_ba = _directed_min_distances(pb, pa)
    if mode == HD95_UNION:
        return percentile(np.concatenate([d_ab, d_ba]), 95.0)
    if mode == HD95_DIRECTED_MAX:
        return max(percentile(d_ab, 95.0), percentile(d_ba, 95.0))
    raise ContractError(f"unknown hd95 mode {mode!r}")


@dataclass
class MetricResult:
    """Per-class Dice/HD95 plus macro averages; HD95 is None when undefined."""

    per_class_dice: dict[int, float]
    per_class_hd95: dict[int, float | None]

    @property
    def macro_dice(self) -> float:
        vals = list(self.per_class_dice.values())
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def macro_hd95(self) -> float | None:
        vals = [v for v in self.per_class_hd95.values() if v is not None]
        return float(np.mean(vals)) if vals else None


def evaluate_labels(pred: np.ndarray, gt: np.ndarray, classes, mode: str = HD95_UNION) -> MetricResult:
    """Per-class metrics for integer label maps; classes lists foreground ids."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"label map shapes {pred.shape} and {gt.shape} differ")
    dices: dict[int, float] = {}
    dists: dict[int, float | None] = {}
    for c in classes:
        pm, gm = pred == c, gt == c
        dices[c] = dice(pm, gm)
        dists[c] = hd95(pm, gm, mode) if pm.any() and gm.any() else None
    return MetricResult(dices, dists)


# ---------------------------------------------------------------------------
# PGM (P5) mask interchange


def save_pgm(mask, path) -> None:
    m = _as_mask(mask)
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((m.astype(np.uint8) * 255).tobytes())


def load_pgm(path) -> np.ndarray:
    """Read a binary P5 mask; pixels >= 128 are foreground."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P5":
        raise FormatError(f"not a P5 PGM file: magic {blob[:2]!r}", offset=0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", offset=pos)
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise FormatError(f"bad PGM header fields {fields}", offset=2) from exc
    if maxval < 1 or maxval > 255:
        raise FormatError(f"unsupported PGM maxval {maxval}", offset=2)
    if len(blob) - pos < w * h:
        raise FormatError(f"truncated PGM payload: expected {w * h} bytes, got {len(blob) - pos}",
                          offset=len(blob))
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return (data.reshape(h, w) >= 128)

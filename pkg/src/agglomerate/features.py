"""Patch-token grids, synthetic teachers, grid resampling, embedding files.

A ``PatchGrid`` is the universal feature currency: a batch of spatial patch
tokens, shape [batch, gridH, gridW, channels], with no CLS slot. Teachers are
adapters producing a ``PatchGrid`` per input batch; the synthetic ones are
seeded random linear maps of input patches so that experiments need no
pretrained checkpoints.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, DimensionError, FormatError
from .numerics import Tensor, bilinear_resize

TEACHER_PATCH = 8

# Embedding container: magic | version u32 | dtype u8 | rank u8 | 4 x u64 | payload | crc32
_MAGIC = b"AGGF"
_VERSION = 1
_DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIBB4Q")
_MAX_ELEMENTS = 1 << 28


@dataclass
class PatchGrid:
    """Batch of spatial patch-token embeddings, [batch, gridH, gridW, channels]."""

    data: Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise DimensionError(f"PatchGrid expects 4 axes, got shape {self.data.shape}")
        if any(n < 1 for n in self.data.shape):
            raise DimensionError(f"PatchGrid extents must be positive, got {self.data.shape}")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def grid_h(self) -> int:
        return self.data.shape[1]

    @property
    def grid_w(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def token_array(self) -> np.ndarray:
        """Raw values as [batch, tokens, channels]."""
        b, h, w, c = self.data.shape
        return self.data.data.reshape(b, h * w, c)


class TeacherAdapter:
    """Named frozen feature producer for one teacher encoder."""

    def __init__(self, name: str, out_channels: int, out_grid: tuple[int, int],
                 produce: Callable[[np.ndarray], PatchGrid]):
        self.name = name
        self.out_channels = out_channels
        self.out_grid = out_grid
        self.produce = produce


@dataclass(frozen=True)
class SyntheticTeacherSpec:
    """Recipe for a seeded stand-in teacher.

    ``scale`` sets the global feature magnitude; giving each teacher in a
    bundle a different scale recreates the mis-scaled-teacher condition that
    standardization has to repair. ``subspace_rank`` caps the dimensionality
    of the feature subspace so teachers encode genuinely partial views.
    """

    seed: int
    out_channels: int = 64
    out_grid: tuple[int, int] = (16, 16)
    scale: float = 1.0
    subspace_rank: int = 16
    noise_std: float = 0.0

    def __post_init__(self):
        if self.subspace_rank > self.out_channels or self.subspace_rank < 1:
            raise ContractError("subspace_rank must be in [1, out_channels]")
        if self.scale <= 0:
            raise ContractError("scale must be positive")
        if self.noise_std < 0:
            raise ContractError("noise_std must be non-negative")


def _resize_images(images: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an image stack [B, H, W]; shares the tensor core."""
    t = Tensor(images[..., None].astype(np.float32, copy=False))
    return bilinear_resize(t, out_h, out_w).data[..., 0]


def _patchify(images: np.ndarray, grid_h: int, grid_w: int, patch: int) -> np.ndarray:
    """[B, gh*patch, gw*patch] -> [B, gh*gw, patch*patch] row-major patches."""
    b = images.shape[0]
    x = images.reshape(b, grid_h, patch, grid_w, patch)
    x = x.transpose(0, 1, 3, 2, 4)
    return x.reshape(b, grid_h * grid_w, patch * patch)


def synth_teacher(spec: SyntheticTeacherSpec, name: str | None = None) -> TeacherAdapter:
    """Build a deterministic synthetic teacher from its spec.

    The adapter resamples the input to its native resolution, flattens each
    patch, applies a fixed seeded linear map into a rank-limited seeded
    orthogonal subspace, multiplies by ``scale``, and adds seeded Gaussian
    noise whose stream is derived from (seed, input digest) so the same input
    always yields bit-identical features.
    """
    gh, gw = spec.out_grid
    pdim = TEACHER_PATCH * TEACHER_PATCH
    s_map, s_basis = np.random.SeedSequence(spec.seed).spawn(2)
    rng = np.random.Generator(np.random.PCG64(s_map))
    mix = rng.normal(0.0, 1.0 / math.sqrt(pdim), size=(pdim, spec.out_channels))
    rng_b = np.random.Generator(np.random.PCG64(s_basis))
    q, _ = np.linalg.qr(rng_b.normal(size=(spec.out_channels, spec.subspace_rank)))
    feature_map = (spec.scale * (mix @ (q @ q.T))).astype(np.float32)

    def produce(images: np.ndarray) -> PatchGrid:
        if images.ndim != 3:
            raise DimensionError(f"teacher input must be [batch, H, W], got {images.shape}")
        native = _resize_images(images, gh * TEACHER_PATCH, gw * TEACHER_PATCH)
        feats = _patchify(native, gh, gw, TEACHER_PATCH) @ feature_map
        if spec.noise_std > 0:
            digest = zlib.crc32(np.ascontiguousarray(images, dtype=np.float32).tobytes())
            nrng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence([spec.seed, digest])))
            feats = feats + nrng.normal(0.0, spec.noise_std, size=feats.shape).astype(np.float32)
        b = images.shape[0]
        return PatchGrid(Tensor(feats.reshape(b, gh, gw, spec.out_channels).astype(np.float32)))

    adapter = TeacherAdapter(name or f"synthetic-{spec.seed}", spec.out_channels, spec.out_grid, produce)
    adapter.spec = spec
    adapter.feature_map = feature_map
    return adapter


def analytic_token_variance(adapter: TeacherAdapter) -> float:
    """Expected per-channel feature variance for unit-normal input patches."""
    fm = adapter.feature_map
    return float((fm * fm).sum() / fm.shape[1])


def resample_grid(g: PatchGrid, target_h: int, target_w: int) -> PatchGrid:
    """Bilinear resampling over the token-grid axes; identity when extents match."""
    if target_h < 1 or target_w < 1:
        raise DimensionError("resample_grid target extents must be >= 1")
    if (g.grid_h, g.grid_w) == (target_h, target_w):
        return PatchGrid(g.data)
    return PatchGrid(bilinear_resize(g.data, target_h, target_w))


# ---------------------------------------------------------------------------
# embedding file format


def save_embeddings(g: PatchGrid, path) -> None:
    payload = np.ascontiguousarray(g.data.data, dtype="<f4").tobytes()
    header = _HEADER.pack(_MAGIC, _VERSION, _DTYPE_F32, 4, *g.data.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_embeddings(path) -> PatchGrid:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(blob)}", offset=len(blob))
    magic, version, dtype, rank, *extents = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}", offset=0)
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if dtype != _DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}", offset=8)
    if rank != 4:
        raise FormatError(f"unsupported rank {rank}, expected 4", offset=9)
    count = 1
    for n in extents:
        count *= n
    if count == 0 or count > _MAX_ELEMENTS:
        raise FormatError(f"dimension overflow: extents {tuple(extents)}", offset=10)
    expected = _HEADER.size + count * 4 + 4
    if len(blob) != expected:
        raise FormatError(f"truncated file: expected {expected} bytes, got {len(blob)}", offset=len(blob))
    payload = blob[_HEADER.size:_HEADER.size + count * 4]
    (crc,) = struct.unpack_from("<I", blob, _HEADER.size + count * 4)
    if crc != zlib.crc32(payload):
        raise FormatError("payload CRC mismatch", offset=_HEADER.size + count * 4)
    data = np.frombuffer(payload, dtype="<f4").reshape(extents).astype(np.float32)
    return PatchGrid(Tensor(data))

"""Lightweight ViT-style student encoder and per-teacher projection heads.

The encoder patchifies a single-channel image, linearly embeds the patches,
adds learned positions, and runs a stack of pre-norm transformer blocks
(multi-head self-attention + GELU MLP, both residual). There is no CLS token;
the output is a PatchGrid of patch tokens only. Each teacher gets its own
two-layer MLP projection head from the shared embedding into that teacher's
feature space.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, FormatError
from .features import PatchGrid
from .numerics import (Tensor, add, gelu, layer_norm, matmul, mul_scalar,
                       reshape, softmax, transpose)


@dataclass(frozen=True)
class StudentConfig:
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    grid: tuple[int, int] = (8, 8)
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ContractError("embed_dim must be divisible by heads")
        if min(self.patch_size, self.depth, self.grid[0], self.grid[1]) < 1:
            raise ContractError("patch_size, depth and grid extents must be >= 1")

    @property
    def tokens(self) -> int:
        return self.grid[0] * self.grid[1]


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype=np.float32) -> np.ndarray:
    """Normal samples redrawn until they land within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    for _ in range(8):
        bad = np.abs(out) > 2 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(out, -2 * std, 2 * std).astype(dtype)


def init_student(cfg: StudentConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """Seeded parameter dict; truncated-normal std 0.02, zero biases, unit norms."""
    d = cfg.embed_dim
    pdim = cfg.patch_size * cfg.patch_size

    def p(arr):
        return Tensor(arr.astype(dtype), requires_grad=True)

    def normal(shape):
        return p(trunc_normal(rng, shape, 0.02, dtype))

    def zeros(shape):
        return p(np.zeros(shape, dtype=dtype))

    def ones(shape):
        return p(np.ones(shape, dtype=dtype))

    params = {
        "embed.weight": normal((pdim, d)),
        "embed.bias": zeros((d,)),
        "pos": normal((cfg.tokens, d)),
    }
    for i in range(cfg.depth):
        b = f"block{i}"
        params[f"{b}.ln1.gain"] = ones((d,))
        params[f"{b}.ln1.bias"] = zeros((d,))
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{b}.attn.{name}"] = normal((d, d))
        for name in ("bq", "bk", "bv", "bo"):
            params[f"{b}.attn.{name}"] = zeros((d,))
        params[f"{b}.ln2.gain"] = ones((d,))
        params[f"{b}.ln2.bias"] = zeros((d,))
        hidden = d * cfg.mlp_ratio
        params[f"{b}.mlp.w1"] = normal((d, hidden))
        params[f"{b}.mlp.b1"] = zeros((hidden,))
        params[f"{b}.mlp.w2"] = normal((hidden, d))
        params[f"{b}.mlp.b2"] = zeros((d,))
    params["norm.gain"] = ones((d,))
    params["norm.bias"] = zeros((d,))
    return params


def patchify(images: np.ndarray, cfg: StudentConfig) -> np.ndarray:
    """[B, H, W] -> [B, tokens, patch*patch]; H and W must match cfg.grid exactly."""
    if images.ndim != 3:
        raise DimensionError(f"student input must be [batch, H, W], got {images.shape}")
    b, h, w = images.shape
    ps = cfg.patch_size
    if h % ps or w % ps:
        raise DimensionError(f"spatial size {h}x{w} not divisible by patch size {ps}")
    if (h // ps, w // ps) != cfg.grid:
        raise DimensionError(f"input implies grid {(h // ps, w // ps)}, config says {cfg.grid}")
    x = images.reshape(b, cfg.grid[0], ps, cfg.grid[1], ps)
    return x.transpose(0, 1, 3, 2, 4).reshape(b, cfg.tokens, ps * ps)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def _attention(x: Tensor, params: dict[str, Tensor], block: str, cfg: StudentConfig) -> Tensor:
    b, n, d = x.shape
    hd = d // cfg.heads
    q = _linear(x, params[f"{block}.attn.wq"], params[f"{block}.attn.bq"])
    k = _linear(x, params[f"{block}.attn.wk"], params[f"{block}.attn.bk"])
    v = _linear(x, params[f"{block}.attn.wv"], params[f"{block}.attn.bv"])
    # [B, N, D] -> [B, heads, N, hd]
    split = lambda t: transpose(reshape(t, (b, n, cfg.heads, hd)), (0, 2, 1, 3))
    qh, kh, vh = split(q), split(k), split(v)
    scores = mul_scalar(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    ctx = matmul(softmax(scores), vh)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    return _linear(merged, params[f"{block}.attn.wo"], params[f"{block}.attn.bo"])


def encode_tokens(patches, cfg: StudentConfig, params: dict[str, Tensor]) -> PatchGrid:
    """Run the encoder on pre-patchified input [B, tokens, patch*patch]."""
    x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=params["pos"].dtype))
    if x.ndim != 3 or x.shape[1] != cfg.tokens:
        raise DimensionError(f"expected [batch, {cfg.tokens}, patch_dim], got {x.shape}")
    x = _linear(x, params["embed.weight"], params["embed.bias"])
    x = add(x, params["pos"])
    for i in range(cfg.depth):
        blk = f"block{i}"
        h = layer_norm(x, params[f"{blk}.ln1.gain"], params[f"{blk}.ln1.bias"])
        x = add(x, _attention(h, params, blk, cfg))
        h = layer_norm(x, params[f"{blk}.ln2.gain"], params[f"{blk}.ln2.bias"])
        h = _linear(gelu(_linear(h, params[f"{blk}.mlp.w1"], params[f"{blk}.mlp.b1"])),
                    params[f"{blk}.mlp.w2"], params[f"{blk}.mlp.b2"])
        x = add(x, h)
    x = layer_norm(x, params["norm.gain"], params["norm.bias"])
    b = x.shape[0]
    return PatchGrid(reshape(x, (b, cfg.grid[0], cfg.grid[1], cfg.embed_dim)))


def encode(images: np.ndarray, cfg: StudentConfig, params: dict[str, Tensor]) -> PatchGrid:
    """Patchify a [B, H, W] image batch and encode it."""
    patches = patchify(np.asarray(images), cfg).astype(params["pos"].dtype)
    return encode_tokens(patches, cfg, params)


# ---------------------------------------------------------------------------
# projection heads


@dataclass
class ProjectionHead:
    """Per-teacher two-layer MLP from the shared embedding into teacher space."""

    teacher_name: str
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        prefix = prefix or f"head.{self.teacher_name}"
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


def init_projection_head(teacher_name: str, embed_dim: int, teacher_channels: int,
                         rng: np.random.Generator, hidden: int | None = None,
                         dtype=np.float32) -> ProjectionHead:
    hidden = hidden or max(embed_dim, teacher_channels)

    def fan_in_normal(fan_in, shape):
        return Tensor(trunc_normal(rng, shape, 1.0 / math.sqrt(fan_in), dtype), requires_grad=True)

    return ProjectionHead(
        teacher_name=teacher_name,
        w1=fan_in_normal(embed_dim, (embed_dim, hidden)),
        b1=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
        w2=fan_in_normal(hidden, (hidden, teacher_channels)),
        b2=Tensor(np.zeros(teacher_channels, dtype=dtype), requires_grad=True),
    )


def project(embedding: PatchGrid, head: ProjectionHead) -> PatchGrid:
    """Map every student token into the head's teacher feature space."""
    if embedding.channels != head.w1.shape[0]:
        raise DimensionError(
            f"embedding has {embedding.channels} channels, head expects {head.w1.shape[0]}")
    b, gh, gw, d = embedding.data.shape
    x = reshape(embedding.data, (b, gh * gw, d))
    x = _linear(gelu(_linear(x, head.w1, head.b1)), head.w2, head.b2)
    return PatchGrid(reshape(x, (b, gh, gw, head.w2.shape[1])))


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


def parameter_checksum(params: dict[str, Tensor]) -> int:
    """Order-independent CRC over parameter names and exact bytes."""
    crc = 0
    for name in sorted(params):
        crc = zlib.crc32(name.encode(), crc)
        crc = zlib.crc32(np.ascontiguousarray(params[name].data).tobytes(), crc)
    return crc


# ---------------------------------------------------------------------------
# checkpoint container: magic | version u32 | count u32 | table | payload | crc32
# table entry: name_len u16 | name utf-8 | rank u8 | rank x u64 extents | offset u64

_CKPT_MAGIC = b"AGGC"
_CKPT_VERSION = 1


def save_checkpoint(params: dict[str, Tensor], path) -> None:
    names = sorted(params)
    table = bytearray()
    payload = bytearray()
    for name in names:
        original = params[name].data
        arr = np.ascontiguousarray(original, dtype="<f4")
        encoded = name.encode("utf-8")
        table += struct.pack("<H", len(encoded)) + encoded
        table += struct.pack("<B", original.ndim)
        table += struct.pack(f"<{original.ndim}Q", *original.shape) if original.ndim else b""
        table += struct.pack("<Q", len(payload))
        payload += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(names)))
        fh.write(table)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(bytes(payload))))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise FormatError(f"truncated header: expected 12 bytes, got {len(blob)}", offset=len(blob))
    if blob[:4] != _CKPT_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {_CKPT_MAGIC!r}", offset=0)
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    pos = 12
    entries = []
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2:pos + 2 + name_len].decode("utf-8")
            pos += 2 + name_len
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}Q", blob, pos) if rank else ()
            pos += 8 * rank
            (offset,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
        except struct.error as exc:
            raise FormatError(f"truncated section table: {exc}", offset=pos) from exc
        entries.append((name, shape, offset))
    payload = blob[pos:-4]
    if len(blob) < pos + 4:
        raise FormatError(f"truncated file: expected at least {pos + 4} bytes, got {len(blob)}",
                          offset=len(blob))
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if crc != zlib.crc32(payload):
        raise FormatError("payload CRC mismatch", offset=len(blob) - 4)
    out = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n
        if end > len(payload):
            raise FormatError(f"section {name!r}: expected {end} payload bytes, got {len(payload)}",
                              offset=pos + offset)
        out[name] = np.frombuffer(payload[offset:end], dtype="<f4").reshape(shape).astype(np.float32)
    return out

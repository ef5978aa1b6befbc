"""Teacher-feature standardization: per-token L2 and Hadamard standardization.

Teachers trained on different data emit features at wildly different
magnitudes; the student should not be dominated by whichever teacher shouts
loudest. Two options are provided:

- ``l2``: rescale every token to unit Euclidean norm (stateless).
- ``phi-s``: subtract the per-channel mean, divide by one isotropic scale
  (sqrt of the mean per-channel variance) and rotate by a scaled Hadamard
  matrix, which spreads the total variance evenly across channels.

States are fitted once on a frozen pre-pass and are immutable afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ContractError, DimensionError, InsufficientDataError
from .features import PatchGrid
from .numerics import Tensor

KIND_L2 = "l2"
KIND_PHI_S = "phi-s"

_SCALE_FLOOR = 1e-6


def hadamard(n: int) -> np.ndarray:
    """Sylvester-construction Hadamard matrix, integer entries, H @ H.T = n*I."""
    if n < 1 or (n & (n - 1)) != 0:
        raise DimensionError(f"hadamard order must be a power of two, got {n}")
    h = np.array([[1]], dtype=np.int64)
    base = np.array([[1, 1], [1, -1]], dtype=np.int64)
    while h.shape[0] < n:
        h = np.kron(base, h)
    return h


def next_power_of_two(n: int) -> int:
    return 1 << max(n - 1, 0).bit_length()


@dataclass(frozen=True)
class StandardizerState:
    """Frozen parameters of one standardization; ``mean`` is None for L2."""

    kind: str
    mean: np.ndarray | None = None
    scale: float = 1.0
    hadamard_dim: int = 0
    pad: int = 0

    def out_channels(self, in_channels: int) -> int:
        return self.hadamard_dim if self.kind == KIND_PHI_S else in_channels


def l2_normalize(g: PatchGrid, eps: float = 1e-8) -> PatchGrid:
    """Scale every token to unit norm; zero tokens stay zero."""
    x = g.data.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return PatchGrid(Tensor((x / (norm + eps)).astype(x.dtype)))


def phi_s_fit(samples: Iterable[PatchGrid] | PatchGrid) -> StandardizerState:
    """Fit per-channel mean and the isotropic scale over a stream of grids."""
    if isinstance(samples, PatchGrid):
        samples = [samples]
    count = 0
    total = None
    total_sq = None
    channels = None
    for grid in samples:
        tokens = grid.data.data.reshape(-1, grid.channels).astype(np.float64)
        if channels is None:
            channels = grid.channels
            total = np.zeros(channels)
            total_sq = np.zeros(channels)
        elif grid.channels != channels:
            raise DimensionError("all fitting samples must share a channel count")
        count += tokens.shape[0]
        total += tokens.sum(axis=0)
        total_sq += (tokens * tokens).sum(axis=0)
    if count < 2:
        raise InsufficientDataError(f"standardizer fit needs >= 2 tokens, saw {count}")
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    scale = max(float(np.sqrt(var.mean())), _SCALE_FLOOR)
    dim = next_power_of_two(channels)
    return StandardizerState(kind=KIND_PHI_S, mean=mean.astype(np.float32),
                             scale=scale, hadamard_dim=dim, pad=dim - channels)


def phi_s_apply(g: PatchGrid, state: StandardizerState) -> PatchGrid:
    """Center, isotropically rescale, and Hadamard-rotate every token.

    Output channels equal ``state.hadamard_dim`` (zero-padded before the
    rotation when the teacher width is not a power of two).
    """
    if state.kind != KIND_PHI_S:
        raise ContractError(f"expected a phi-s state, got kind {state.kind!r}")
    if g.channels != state.mean.shape[0]:
        raise DimensionError(
            f"grid has {g.channels} channels but state was fitted on {state.mean.shape[0]}")
    x = g.data.data.astype(np.float32)
    x = (x - state.mean.astype(np.float32)) / np.float32(state.scale)
    if state.pad:
        pad_shape = x.shape[:-1] + (state.pad,)
        x = np.concatenate([x, np.zeros(pad_shape, dtype=x.dtype)], axis=-1)
    rot = (hadamard(state.hadamard_dim) / np.sqrt(state.hadamard_dim)).astype(np.float32)
    return PatchGrid(Tensor(x @ rot))


def apply_standardizer(g: PatchGrid, state: StandardizerState) -> PatchGrid:
    if state.kind == KIND_L2:
        return l2_normalize(g)
    return phi_s_apply(g, state)


def fit_standardizer(kind: str, samples: Iterable[PatchGrid] | PatchGrid) -> StandardizerState:
    if kind == KIND_L2:
        return StandardizerState(kind=KIND_L2)
    if kind == KIND_PHI_S:
        return phi_s_fit(samples)
    raise ContractError(f"unknown standardization kind {kind!r}")


def save_standardizer(state: StandardizerState, path) -> None:
    lines = [f"kind = {state.kind}"]
    if state.kind == KIND_PHI_S:
        lines.append(f"scale = {state.scale!r}")
        lines.append(f"hadamard_dim = {state.hadamard_dim}")
        lines.append(f"pad = {state.pad}")
        lines.append("mean = " + ",".join(repr(float(v)) for v in state.mean))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_standardizer(path) -> StandardizerState:
    fields = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    kind = fields.get("kind")
    if kind == KIND_L2:
        return StandardizerState(kind=KIND_L2)
    if kind != KIND_PHI_S:
        raise ContractError(f"unknown standardizer kind {kind!r} in {path}")
    mean = np.array([float(v) for v in fields["mean"].split(",")], dtype=np.float32)
    return StandardizerState(kind=KIND_PHI_S, mean=mean, scale=float(fields["scale"]),
                             hadamard_dim=int(fields["hadamard_dim"]), pad=int(fields["pad"]))

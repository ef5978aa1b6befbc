"""Per-teacher loss weighting: uniform, MLP over the loss vector, attention.

All strategies emit a weight simplex over teachers (positive, summing to 1).
The MLP strategy reads the detached per-teacher losses as data, so its
gradients flow only into its own parameters; the attention strategy compares
a learnable query from the pooled student tokens against per-teacher keys.
An optional entropy bonus on the weights counteracts collapse onto the
easiest teacher when weighting is trained jointly with the student.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .features import PatchGrid
from .numerics import (Tensor, add, gelu, log, matmul, mul, mul_scalar,
                       reduce_mean, reduce_sum, relu, reshape, softmax, stack,
                       sub, transpose)
from .student import trunc_normal


@dataclass
class LossVector:
    """Ordered per-teacher scalar losses, live on the training tape."""

    losses: list[Tensor]

    def __post_init__(self):
        if not self.losses:
            raise ContractError("LossVector needs at least one teacher loss")

    def __len__(self) -> int:
        return len(self.losses)

    @property
    def dtype(self):
        return self.losses[0].dtype

    def detached(self) -> np.ndarray:
        """Loss values as plain data, cut off from the tape."""
        return np.array([t.item() for t in self.losses], dtype=self.dtype)


def uniform_weights(count: int, dtype=np.float32) -> Tensor:
    if count < 1:
        raise ContractError("teacher count must be >= 1")
    return Tensor(np.full(count, 1.0 / count, dtype=dtype))


@dataclass
class MlpBalancerParams:
    """Two-layer MLP from the loss vector to one logit per teacher."""

    w1: Tensor  # [hidden, teachers]
    b1: Tensor  # [hidden]
    w2: Tensor  # [teachers, hidden]
    b2: Tensor  # [teachers]
    activation: str = "gelu"

    @property
    def teachers(self) -> int:
        return self.w1.shape[1]

    def params(self, prefix: str = "balancer") -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


def init_mlp_balancer(teachers: int, hidden: int = 16, activation: str = "gelu",
                      rng: np.random.Generator | None = None, dtype=np.float32) -> MlpBalancerParams:
    """Random first layer, zero output layer: weighting starts exactly uniform."""
    if teachers < 1 or hidden < 1:
        raise ContractError("teachers and hidden size must be >= 1")
    if activation not in ("gelu", "relu"):
        raise ContractError(f"unsupported balancer activation {activation!r}")
    rng = rng or np.random.default_rng(0)
    return MlpBalancerParams(
        w1=Tensor(trunc_normal(rng, (hidden, teachers), 1.0 / math.sqrt(teachers), dtype), requires_grad=True),
        b1=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
        w2=Tensor(np.zeros((teachers, hidden), dtype=dtype), requires_grad=True),
        b2=Tensor(np.zeros(teachers, dtype=dtype), requires_grad=True),
        activation=activation,
    )


def mlp_weights(losses: LossVector, p: MlpBalancerParams) -> Tensor:
    """softmax(W2 act(W1 L + b1) + b2) over the detached loss vector."""
    t = len(losses)
    if t != p.teachers:
        raise DimensionError(f"loss vector has {t} entries, balancer expects {p.teachers}")
    x = Tensor(losses.detached().reshape(1, t).astype(p.w1.dtype))
    act = gelu if p.activation == "gelu" else relu
    h = act(add(matmul(x, transpose(p.w1, (1, 0))), p.b1))
    logits = add(matmul(h, transpose(p.w2, (1, 0))), p.b2)
    return reshape(softmax(logits), (t,))


@dataclass
class AttnBalancerParams:
    """Learnable query map for the student and one key map per teacher."""

    q_map: Tensor  # [embed_dim, width]
    k_maps: list[Tensor] = field(default_factory=list)  # each [teacher_channels, width]

    @property
    def width(self) -> int:
        return self.q_map.shape[1]

    def params(self, prefix: str = "balancer") -> dict[str, Tensor]:
        out = {f"{prefix}.q_map": self.q_map}
        for i, k in enumerate(self.k_maps):
            out[f"{prefix}.k_map{i}"] = k
        return out


def init_attn_balancer(embed_dim: int, teacher_channels: list[int], width: int = 32,
                       rng: np.random.Generator | None = None, dtype=np.float32) -> AttnBalancerParams:
    """Random key maps, zero query map: weighting starts exactly uniform."""
    if width < 1 or not teacher_channels:
        raise ContractError("attention width and teacher count must be >= 1")
    rng = rng or np.random.default_rng(0)

    def lin(fan_in, shape):
        return Tensor(trunc_normal(rng, shape, 1.0 / math.sqrt(fan_in), dtype), requires_grad=True)

    return AttnBalancerParams(
        q_map=Tensor(np.zeros((embed_dim, width), dtype=dtype), requires_grad=True),
        k_maps=[lin(c, (c, width)) for c in teacher_channels],
    )


def _pooled(grid: PatchGrid) -> Tensor:
    """Mean over batch and token axes -> [1, channels]."""
    return reshape(reduce_mean(grid.data, axes=(0, 1, 2)), (1, grid.channels))


def attn_weights(embedding: PatchGrid, teacher_feats: list[PatchGrid],
                 p: AttnBalancerParams) -> Tensor:
    """Scaled dot-product weights between a pooled student query and teacher keys."""
    if len(teacher_feats) != len(p.k_maps):
        raise DimensionError(
            f"{len(teacher_feats)} teacher grids but {len(p.k_maps)} key maps")
    q = matmul(_pooled(embedding), p.q_map)
    inv_sqrt_d = 1.0 / math.sqrt(p.width)
    logits = []
    for grid, k_map in zip(teacher_feats, p.k_maps):
        k = matmul(_pooled(grid), k_map)
        logits.append(mul_scalar(reduce_sum(mul(q, k)), inv_sqrt_d))
    return softmax(stack(logits))


def combine(weights: Tensor, losses: LossVector, entropy_coeff: float = 0.0) -> Tensor:
    """Weighted sum of teacher losses minus an optional entropy bonus."""
    t = len(losses)
    if weights.shape != (t,):
        raise DimensionError(f"weights shape {weights.shape} does not match {t} losses")
    loss_vec = stack(losses.losses)
    total = reduce_sum(mul(weights, loss_vec))
    if entropy_coeff:
        # H(w) = -sum(w log w); subtracting coeff*H adds coeff*sum(w log w)
        neg_entropy = reduce_sum(mul(weights, log(weights)))
        total = add(total, mul_scalar(neg_entropy, entropy_coeff))
    return total

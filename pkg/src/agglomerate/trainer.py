"""Two-phase optimization: feature distillation, then decoder alignment.

Phase 1 trains the student encoder, the per-teacher projection heads, and the
balancer jointly against standardized teacher targets; no masks are seen.
Phase 2 freezes everything except a per-token linear decoder, trained with
soft-Dice + cross-entropy against synthetic masks and evaluated with hard
Dice/HD95 on a held-out split. AdamW uses decoupled weight decay and the
learning rate follows a cosine (or linear) decay restarted per phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .balancing import (AttnBalancerParams, LossVector, MlpBalancerParams,
                        attn_weights, combine, mlp_weights, uniform_weights)
from .errors import ContractError, NumericError
from .features import PatchGrid, TeacherAdapter
from .numerics import (Tape, Tensor, add, add_scalar, backward,
                       bilinear_resize, cosine_loss, div, log_softmax, matmul,
                       mse_loss, mul, mul_scalar, reduce_mean, reduce_sum,
                       reshape, softmax, zero_grads)
from .report import RunReport
from .segmetrics import evaluate_labels
from .standardize import StandardizerState
from .student import StudentConfig, encode, project, trunc_normal


@dataclass
class TrainConfig:
    epochs_phase1: int = 100
    epochs_phase2: int = 100
    batch_size: int = 8
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.1
    adam_eps: float = 1e-8
    loss_kind: str = "mse"           # default per-teacher loss: mse | cosine
    balancing: str = "attention"     # uniform | mlp | attention
    standardization: str = "phi-s"   # l2 | phi-s
    entropy_coeff: float = 0.01
    schedule: str = "cosine"         # cosine | linear
    grad_clip: float = 1.0
    seed: int = 0
    num_train: int = 256
    num_eval: int = 16
    num_classes: int = 3

    def __post_init__(self):
        if not (self.lr_start >= self.lr_end > 0):
            raise ContractError("require lr_start >= lr_end > 0")
        if min(self.epochs_phase1, self.epochs_phase2, self.batch_size) < 1:
            raise ContractError("epochs and batch size must be >= 1")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")


@dataclass
class TeacherBundle:
    """Named teacher adapters plus their fitted standardizer states."""

    adapters: list[TeacherAdapter]
    standardizers: dict[str, StandardizerState] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.adapters]


# ---------------------------------------------------------------------------
# optimizer


def init_adamw_state(params: dict[str, Tensor]) -> dict:
    return {
        "step": 0,
        "m": {k: np.zeros_like(v.data) for k, v in params.items()},
        "v": {k: np.zeros_like(v.data) for k, v in params.items()},
    }


def adamw_step(params: dict[str, Tensor], state: dict, lr: float, cfg: TrainConfig) -> None:
    """Decoupled weight decay followed by a bias-corrected Adam update."""
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name in sorted(params):
        p = params[name]
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}; step aborted")
        m = state["m"][name]
        v = state["v"][name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        if cfg.weight_decay:
            p.data -= lr * cfg.weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(factor)
    return norm


def lr_schedule(epoch: int, cfg: TrainConfig, total_epochs: int | None = None) -> float:
    """Per-phase decay from lr_start to lr_end; endpoints returned exactly."""
    total = cfg.epochs_phase1 if total_epochs is None else total_epochs
    if not 0 <= epoch < total:
        raise ContractError(f"epoch {epoch} outside [0, {total})")
    if epoch == 0:
        return cfg.lr_start
    if epoch == total - 1:
        return cfg.lr_end
    frac = epoch / (total - 1)
    if cfg.schedule == "linear":
        return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac
    return cfg.lr_end + (cfg.lr_start - cfg.lr_end) * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# distillation phase


@dataclass
class DistillationSystem:
    """Everything phase 1 trains: student, heads, and the balancer."""

    student_cfg: StudentConfig
    student_params: dict[str, Tensor]
    heads: list  # ProjectionHead, ordered like the teachers
    balancing: str = "uniform"
    mlp_balancer: MlpBalancerParams | None = None
    attn_balancer: AttnBalancerParams | None = None
    entropy_coeff: float = 0.0

    def trainable(self) -> dict[str, Tensor]:
        out = dict(self.student_params)
        for head in self.heads:
            out.update(head.params())
        if self.balancing == "mlp":
            out.update(self.mlp_balancer.params())
        elif self.balancing == "attention":
            out.update(self.attn_balancer.params())
        return out


def _teacher_loss(kind: str, projected: PatchGrid, target: PatchGrid) -> Tensor:
    if kind == "cosine":
        return cosine_loss(projected.data, target.data)
    return mse_loss(projected.data, target.data)


def _weight_simplex(system: DistillationSystem, embedding: PatchGrid,
                    target_grids: list[PatchGrid], losses: LossVector) -> tuple[Tensor, float]:
    if system.balancing == "mlp":
        return mlp_weights(losses, system.mlp_balancer), system.entropy_coeff
    if system.balancing == "attention":
        return attn_weights(embedding, target_grids, system.attn_balancer), system.entropy_coeff
    return uniform_weights(len(losses), dtype=losses.dtype), 0.0


def distill_phase(system: DistillationSystem, images: np.ndarray,
                  targets: dict[str, np.ndarray], loss_kinds: dict[str, str],
                  teacher_names: list[str], cfg: TrainConfig, report: RunReport,
                  log: Callable[[str], None] = lambda s: None) -> None:
    """Label-free phase 1: match projected student tokens to teacher targets."""
    n = len(images)
    params = system.trainable()
    state = init_adamw_state(params)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    step = 0
    for epoch in range(cfg.epochs_phase1):
        lr = lr_schedule(epoch, cfg, cfg.epochs_phase1)
        order = rng.permutation(n)
        sums = {name: 0.0 for name in teacher_names}
        wsums = {name: 0.0 for name in teacher_names}
        combined_sum = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with Tape() as tape:
                embedding = encode(images[idx], system.student_cfg, system.student_params)
                losses = []
                target_grids = []
                for name, head in zip(teacher_names, system.heads):
                    target = PatchGrid(Tensor(targets[name][idx]))
                    try:
                        loss = _teacher_loss(loss_kinds[name], project(embedding, head), target)
                    except NumericError as exc:
                        raise NumericError(f"teacher {name!r}: {exc}") from exc
                    if not np.isfinite(loss.data):
                        raise NumericError(f"teacher {name!r}: loss is not finite")
                    losses.append(loss)
                    target_grids.append(target)
                loss_vec = LossVector(losses)
                weights, coeff = _weight_simplex(system, embedding, target_grids, loss_vec)
                total = combine(weights, loss_vec, coeff)
                backward(total, tape)
            clip_global_norm(params, cfg.grad_clip)
            adamw_step(params, state, lr, cfg)
            zero_grads(params.values())
            wvals = {name: float(w) for name, w in zip(teacher_names, weights.data)}
            report.add_weight_step(step, wvals)
            for name, loss in zip(teacher_names, losses):
                sums[name] += loss.item()
            for name in teacher_names:
                wsums[name] += wvals[name]
            combined_sum += total.item()
            batches += 1
            step += 1
        report.add_phase1_epoch(
            epoch + 1, lr, combined_sum / batches,
            {k: v / batches for k, v in sums.items()},
            {k: v / batches for k, v in wsums.items()})
        log(f"[phase1] epoch {epoch + 1}/{cfg.epochs_phase1} lr={lr:.3e} "
            f"loss={combined_sum / batches:.6f}")


# ---------------------------------------------------------------------------
# decoder alignment phase


@dataclass
class ToyDecoder:
    """Per-token linear classifier; logits are bilinearly upsampled to pixels.

    ``gain`` is a fixed scalar folded into the linear map; it lets confident
    logits emerge from small weights, which the low distillation learning
    rate could not otherwise grow in time.
    """

    weight: Tensor  # [embed_dim, num_classes]
    bias: Tensor    # [num_classes]
    gain: float = 8.0

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def params(self) -> dict[str, Tensor]:
        return {"decoder.weight": self.weight, "decoder.bias": self.bias}


def init_decoder(embed_dim: int, num_classes: int, rng: np.random.Generator,
                 dtype=np.float32) -> ToyDecoder:
    if num_classes < 2:
        raise ContractError("decoder needs at least two classes")
    w = trunc_normal(rng, (embed_dim, num_classes), 1.0 / math.sqrt(embed_dim), dtype)
    return ToyDecoder(weight=Tensor(w, requires_grad=True),
                      bias=Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True))


def decoder_logits(tokens: Tensor, decoder: ToyDecoder, out_h: int, out_w: int) -> Tensor:
    """[B, gh, gw, D] token grid -> upsampled [B, out_h, out_w, classes] logits."""
    logits = mul_scalar(add(matmul(tokens, decoder.weight), decoder.bias), decoder.gain)
    return bilinear_resize(logits, out_h, out_w)


def segmentation_loss(logits: Tensor, onehot: Tensor, smooth: float = 1.0) -> Tensor:
    """Soft-Dice + cross-entropy against one-hot pixel labels."""
    pixels = logits.shape[0] * logits.shape[1] * logits.shape[2]
    ce = mul_scalar(reduce_sum(mul(log_softmax(logits), onehot)), -1.0 / pixels)
    probs = softmax(logits)
    inter = reduce_sum(mul(probs, onehot), axes=(0, 1, 2))
    pred_card = reduce_sum(probs, axes=(0, 1, 2))
    true_card = Tensor(onehot.data.sum(axis=(0, 1, 2)))
    dice_vec = div(add_scalar(mul_scalar(inter, 2.0), smooth),
                   add_scalar(add(pred_card, true_card), smooth))
    soft_dice = add_scalar(mul_scalar(reduce_mean(dice_vec), -1.0), 1.0)
    return add(ce, soft_dice)


def _encode_all(images: np.ndarray, cfg: StudentConfig, params: dict[str, Tensor],
                batch_size: int) -> np.ndarray:
    chunks = [encode(images[i:i + batch_size], cfg, params).data.data
              for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks, axis=0)


def predict_labels(embeddings: np.ndarray, decoder: ToyDecoder, out_h: int, out_w: int) -> np.ndarray:
    logits = decoder_logits(Tensor(embeddings), decoder, out_h, out_w)
    return logits.data.argmax(axis=-1).astype(np.uint8)


def align_phase(student_cfg: StudentConfig, student_params: dict[str, Tensor],
                decoder: ToyDecoder, train_images: np.ndarray, train_masks: np.ndarray,
                eval_images: np.ndarray, eval_masks: np.ndarray, cfg: TrainConfig,
                report: RunReport, hd95_mode: str = "union",
                log: Callable[[str], None] = lambda s: None) -> None:
    """Phase 2: train the decoder on frozen student embeddings."""
    if len(train_images) == 0 or len(eval_images) == 0:
        raise ContractError("align_phase needs non-empty train and eval sets")
    size_h, size_w = train_images.shape[1], train_images.shape[2]
    emb_train = _encode_all(train_images, student_cfg, student_params, cfg.batch_size)
    emb_eval = _encode_all(eval_images, student_cfg, student_params, cfg.batch_size)
    eye = np.eye(decoder.num_classes, dtype=emb_train.dtype)
    onehot_train = eye[train_masks]
    params = decoder.params()
    state = init_adamw_state(params)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 202]))
    classes = list(range(1, decoder.num_classes))
    n = len(emb_train)
    for epoch in range(cfg.epochs_phase2):
        lr = lr_schedule(epoch, cfg, cfg.epochs_phase2)
        order = rng.permutation(n)
        loss_sum = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with Tape() as tape:
                logits = decoder_logits(Tensor(emb_train[idx]), decoder, size_h, size_w)
                loss = segmentation_loss(logits, Tensor(onehot_train[idx]))
                backward(loss, tape)
            clip_global_norm(params, cfg.grad_clip)
            adamw_step(params, state, lr, cfg)
            zero_grads(params.values())
            loss_sum += loss.item()
            batches += 1
        preds = predict_labels(emb_eval, decoder, size_h, size_w)
        dices: dict[int, list[float]] = {c: [] for c in classes}
        dists: dict[int, list[float]] = {c: [] for c in classes}
        for pred, gt in zip(preds, eval_masks):
            result = evaluate_labels(pred, gt, classes, mode=hd95_mode)
            for c in classes:
                dices[c].append(result.per_class_dice[c])
                if result.per_class_hd95[c] is not None:
                    dists[c].append(result.per_class_hd95[c])
        dice_means = {c: float(np.mean(dices[c])) for c in classes}
        hd_means = {c: (float(np.mean(dists[c])) if dists[c] else None) for c in classes}
        macro_dice = float(np.mean(list(dice_means.values())))
        defined = [v for v in hd_means.values() if v is not None]
        macro_hd = float(np.mean(defined)) if defined else None
        report.add_phase2_epoch(epoch + 1, lr, loss_sum / batches, dice_means, hd_means,
                                macro_dice, macro_hd)
        hd_text = f"{macro_hd:.3f}" if macro_hd is not None else "undef"
        log(f"[phase2] epoch {epoch + 1}/{cfg.epochs_phase2} lr={lr:.3e} "
            f"loss={loss_sum / batches:.6f} dice={macro_dice:.4f} hd95={hd_text}")

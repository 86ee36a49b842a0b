"""Losses and the three training strategies.

Two losses drive the whole system.  ``loss1`` is a smoothed dice loss on
the 4-channel segmentation against its one-hot ground truth; it supervises
the attention module and only ever sees Bonafide samples (single-side
supervision).  ``loss2`` is the standard 2-class cross entropy on the
classifier logits.  The joint objective is ``lambda1 * loss1 + lambda2 *
loss2`` with lambda1 = 0.001 and lambda2 = 1 by default.

Strategies (all start by pretraining the attention module on Bonafide
patches with loss1):

* S1 - freeze the attention module, train the classifier with loss2;
* S2 - alternate classifier epochs (attention frozen, loss2) with
  attention epochs (classifier frozen, loss1 on Bonafide only);
* S3 - alternate classifier epochs with joint epochs that optimize the
  combined objective end to end (loss1 still masked to Bonafide).

The optimizer is Adam with a learning rate decayed linearly from 1e-4 to
1e-5 over the scheduled steps.  Given a seed, runs are fully deterministic:
data order comes from seeded generators and module modes are managed so
frozen parameter groups stay bit-identical through their phases.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dual_branch import IsapadNet
from .errors import (
    ConfigError,
    ContractViolationError,
    DegenerateDatasetError,
    LabelError,
    ShapeMismatchError,
)
from .isam import IsamNet

DICE_EPS = 1e-6
LABEL_PA = 0
LABEL_BONAFIDE = 1


class Strategy(str, Enum):
    S1 = "S1"
    S2 = "S2"
    S3 = "S3"


@dataclass(frozen=True)
class TrainConfig:
    strategy: Strategy = Strategy.S3
    lambda1: float = 0.001
    lambda2: float = 1.0
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    batch_size: int = 8
    epochs_pretrain: int = 1
    epochs_main: int = 4
    alternation_period: int = 1  # epochs per phase for S2/S3
    seed: int = 0
    width_multiplier: float = 1.0
    flip_augment: bool = False

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be >= 0")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError("need lr_start >= lr_end > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.alternation_period < 1:
            raise ConfigError("alternation_period must be >= 1")
        if self.epochs_pretrain < 0 or self.epochs_main < 0:
            raise ConfigError("epoch counts must be >= 0")


@dataclass
class TrainPatch:
    """One training item: patch image, class label, optional one-hot mask."""

    image: np.ndarray  # (256, 256) float32 in [0, 1]
    label: int  # 0 = PA, 1 = Bonafide
    mask: np.ndarray | None = None  # (4, 256, 256) one-hot, Bonafide only
    sample_id: str = ""


@dataclass
class EpochStats:
    epoch: int
    phase: str
    loss1: float | None
    loss2: float | None
    combined: float
    train_acc: float | None


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def dice_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Smoothed dice loss summed over all channels and pixels; 0 at perfect
    overlap, ~1 when prediction and one-hot ground truth are disjoint."""
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    gt = gt.to(dtype=pred.dtype)
    if not torch.all((gt == 0) | (gt == 1)):
        raise LabelError("ground-truth mask must be binary")
    if gt.ndim >= 3 and not torch.all(gt.sum(dim=-3) == 1):
        raise LabelError("ground-truth mask must be one-hot across channels")
    inter = (pred * gt).sum()
    denom = pred.sum() + gt.sum()
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def ce_loss(logits: torch.Tensor, target: int | torch.Tensor) -> torch.Tensor:
    """Cross entropy from raw logits via a stable log-sum-exp; batched inputs
    return the batch mean."""
    if logits.ndim == 1:
        logits = logits.unsqueeze(0)
        target = torch.as_tensor([int(target)], device=logits.device)
    else:
        target = torch.as_tensor(target, device=logits.device, dtype=torch.long)
    picked = logits.gather(1, target.view(-1, 1)).squeeze(1)
    return (torch.logsumexp(logits, dim=1) - picked).mean()


def combined_loss(loss1, loss2, cfg: TrainConfig = TrainConfig()):
    """lambda1 * loss1 + lambda2 * loss2 (works on floats and tensors)."""
    return cfg.lambda1 * loss1 + cfg.lambda2 * loss2


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def state_checksum(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers (order-stable); two modules
    agree iff their state is bit-identical."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _make_batch(samples: list[TrainPatch], idxs, flip: np.ndarray | None = None):
    imgs, labels, masks = [], [], []
    for pos, i in enumerate(idxs):
        s = samples[i]
        img = s.image
        mask = s.mask
        if flip is not None and flip[pos]:
            img = img[:, ::-1]
            mask = mask[:, :, ::-1] if mask is not None else None
        imgs.append(np.array(img, dtype=np.float32))
        labels.append(s.label)
        masks.append(np.array(mask) if mask is not None else None)
    x = torch.from_numpy(np.stack(imgs)).unsqueeze(1)
    y = torch.as_tensor(labels, dtype=torch.long)
    return x, y, masks


def _stack_masks(masks: list[np.ndarray | None], keep: torch.Tensor) -> torch.Tensor:
    chosen = [masks[i] for i in torch.nonzero(keep).flatten().tolist()]
    return torch.from_numpy(np.stack(chosen).astype(np.float32))


def _lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    if total <= 1:
        return cfg.lr_start
    frac = step / (total - 1)
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac


def _set_requires_grad(module: nn.Module | None, flag: bool) -> None:
    if module is None:
        return
    for p in module.parameters():
        p.requires_grad_(flag)


def _epoch_order(rng: np.random.Generator, n: int, batch: int):
    order = rng.permutation(n)
    return [order[i : i + batch] for i in range(0, n, batch)]


# ---------------------------------------------------------------------------
# pretraining (single-side: Bonafide only)
# ---------------------------------------------------------------------------

def pretrain_isam(
    net: IsamNet, samples: list[TrainPatch], cfg: TrainConfig
) -> tuple[IsamNet, list[float]]:
    """Adam on the dice loss over Bonafide patches with masks.

    Every provided sample must be Bonafide and carry a mask; a PA sample
    anywhere in the input aborts before any weight update.  With
    ``epochs_pretrain == 0`` the weights are left byte-identical.
    """
    for s in samples:
        if s.label != LABEL_BONAFIDE:
            raise ContractViolationError(
                f"pretraining input contains a non-Bonafide sample ({s.sample_id!r})"
            )
        if s.mask is None:
            raise ContractViolationError(
                f"Bonafide sample {s.sample_id!r} has no segmentation mask"
            )
    history: list[float] = []
    if cfg.epochs_pretrain == 0 or not samples:
        return net, history

    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    total = cfg.epochs_pretrain * steps_per_epoch
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr_start)
    net.train()
    step = 0
    for epoch in range(cfg.epochs_pretrain):
        rng = np.random.default_rng((cfg.seed, 1, epoch))
        for idxs in _epoch_order(rng, len(samples), cfg.batch_size):
            x, _, masks = _make_batch(samples, idxs)
            gt = _stack_masks(masks, torch.ones(len(idxs), dtype=torch.bool))
            optimizer.param_groups[0]["lr"] = _lr_at(step, total, cfg)
            optimizer.zero_grad()
            loss = dice_loss(net(x), gt)
            loss.backward()
            optimizer.step()
            history.append(float(loss.detach()))
            step += 1
    return net, history


# ---------------------------------------------------------------------------
# main training strategies
# ---------------------------------------------------------------------------

def joint_losses(net: IsapadNet, x: torch.Tensor, y: torch.Tensor,
                 masks: list[np.ndarray | None], cfg: TrainConfig):
    """Combined objective for one mixed batch: loss1 is the dice over the
    batch's Bonafide samples only (exactly zero when there are none), loss2
    the cross entropy over everything.  Returns (loss, loss1, loss2, logits)."""
    logits, seg = net.forward_with_seg(x)
    loss2 = ce_loss(logits, y)
    bona = y == LABEL_BONAFIDE
    if seg is not None and bool(bona.any()):
        gt = _stack_masks(masks, bona)
        loss1 = dice_loss(seg[bona], gt)
    else:
        loss1 = torch.zeros((), dtype=logits.dtype)
    return combined_loss(loss1, loss2, cfg), loss1, loss2, logits


def _phase_plan(cfg: TrainConfig) -> list[str]:
    if cfg.strategy is Strategy.S1:
        return ["classifier"] * cfg.epochs_main
    second = "isam" if cfg.strategy is Strategy.S2 else "joint"
    plan = []
    while len(plan) < cfg.epochs_main:
        plan.extend(["classifier"] * cfg.alternation_period)
        plan.extend([second] * cfg.alternation_period)
    return plan[: cfg.epochs_main]


def run_training(
    net: IsapadNet, samples: list[TrainPatch], cfg: TrainConfig
) -> tuple[IsapadNet, list[EpochStats]]:
    """Run the selected strategy end to end (pretraining included).

    Nets without an embedded attention module (ablation variants) skip the
    pretraining and attention/joint phases degrade to classifier epochs.
    """
    labels = {s.label for s in samples}
    if labels != {LABEL_PA, LABEL_BONAFIDE}:
        raise DegenerateDatasetError(
            "classifier phases need both classes; got labels " + repr(sorted(labels))
        )
    bona_idx = [i for i, s in enumerate(samples) if s.label == LABEL_BONAFIDE]
    has_isam = net.isam is not None

    needs_masks = has_isam and (
        cfg.epochs_pretrain > 0 or cfg.strategy in (Strategy.S2, Strategy.S3)
    )
    if needs_masks:
        missing = [samples[i].sample_id for i in bona_idx if samples[i].mask is None]
        if missing:
            raise ContractViolationError(
                f"Bonafide patches without masks: {missing[:3]}{'...' if len(missing) > 3 else ''}"
            )

    history: list[EpochStats] = []
    epoch_counter = 0

    if has_isam and cfg.epochs_pretrain > 0:
        bona_samples = [samples[i] for i in bona_idx]
        _, pre_losses = pretrain_isam(net.isam, bona_samples, cfg)
        steps_per_epoch = math.ceil(len(bona_samples) / cfg.batch_size)
        for e in range(cfg.epochs_pretrain):
            chunk = pre_losses[e * steps_per_epoch : (e + 1) * steps_per_epoch]
            mean1 = float(np.mean(chunk)) if chunk else 0.0
            history.append(EpochStats(epoch_counter, "pretrain", mean1, None, mean1, None))
            epoch_counter += 1

    plan = _phase_plan(cfg)
    if not has_isam:
        plan = ["classifier"] * len(plan)

    # step budget for the linear lr schedule
    def _steps(phase: str) -> int:
        n = len(bona_idx) if phase == "isam" else len(samples)
        return math.ceil(n / cfg.batch_size)

    total_steps = sum(_steps(p) for p in plan)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr_start)
    step = 0

    for epoch_pos, phase in enumerate(plan):
        rng = np.random.default_rng((cfg.seed, 2, epoch_pos))
        if phase == "classifier":
            _set_requires_grad(net, True)
            _set_requires_grad(net.isam, False)
            net.train()
            if net.isam is not None:
                net.isam.eval()
        elif phase == "isam":
            _set_requires_grad(net, False)
            _set_requires_grad(net.isam, True)
            net.eval()
            net.isam.train()
        else:  # joint
            _set_requires_grad(net, True)
            net.train()

        pool = bona_idx if phase == "isam" else list(range(len(samples)))
        sums = {"loss1": 0.0, "loss2": 0.0, "combined": 0.0}
        counts = {"loss1": 0, "loss2": 0}
        correct = 0
        seen = 0

        for idxs in _epoch_order(rng, len(pool), cfg.batch_size):
            chosen = [pool[i] for i in idxs]
            flip = rng.random(len(chosen)) < 0.5 if cfg.flip_augment else None
            x, y, masks = _make_batch(samples, chosen, flip)
            optimizer.param_groups[0]["lr"] = _lr_at(step, total_steps, cfg)
            optimizer.zero_grad()

            if phase == "isam":
                seg = net.isam(x)
                gt = _stack_masks(masks, torch.ones(len(chosen), dtype=torch.bool))
                loss1 = dice_loss(seg, gt)
                loss = loss1  # attention epochs optimize loss1 on its own
                sums["loss1"] += float(loss1.detach())
                counts["loss1"] += 1
            elif phase == "classifier":
                logits = net(x)
                loss2 = ce_loss(logits, y)
                loss = loss2  # classifier epochs optimize loss2 on its own
                sums["loss2"] += float(loss2.detach())
                counts["loss2"] += 1
                correct += int((logits.argmax(dim=1) == y).sum())
                seen += len(chosen)
            else:  # joint
                loss, loss1, loss2, logits = joint_losses(net, x, y, masks, cfg)
                sums["loss1"] += float(loss1.detach())
                counts["loss1"] += 1
                sums["loss2"] += float(loss2.detach())
                counts["loss2"] += 1
                correct += int((logits.argmax(dim=1) == y).sum())
                seen += len(chosen)

            loss.backward()
            optimizer.step()
            sums["combined"] += float(loss.detach())
            step += 1

        n_batches = math.ceil(len(pool) / cfg.batch_size)
        history.append(
            EpochStats(
                epoch=epoch_counter,
                phase=phase,
                loss1=sums["loss1"] / counts["loss1"] if counts["loss1"] else None,
                loss2=sums["loss2"] / counts["loss2"] if counts["loss2"] else None,
                combined=sums["combined"] / max(n_batches, 1),
                train_acc=correct / seen if seen else None,
            )
        )
        epoch_counter += 1

    _set_requires_grad(net, True)
    return net, history


def write_history(history: list[EpochStats], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "phase", "loss1", "loss2", "combined", "train_acc"])
        for row in history:
            w.writerow(
                [
                    row.epoch,
                    row.phase,
                    "" if row.loss1 is None else f"{row.loss1:.6f}",
                    "" if row.loss2 is None else f"{row.loss2:.6f}",
                    f"{row.combined:.6f}",
                    "" if row.train_acc is None else f"{row.train_acc:.4f}",
                ]
            )

"""Dynamic class-specific pseudo-labelling and the supervision losses.

The frozen previous-step model scores each batch; per class we track the
score range over the pixels it claims and derive a threshold: stable and
confident classes keep their minimum score, unstable ones are clipped to a
fixed floor, low-confidence ones fall back to the floor entirely. Pixels that
clear their class threshold become pseudo labels and are fused with the
current-step ground truth (ground truth wins conflicts).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ContractError, LabelRangeError, NumericError


@dataclass
class PseudoLabelConfig:
    """Threshold policy constants.

    fixed_floor: lower bound used when a class's scores fluctuate or are weak.
    stability_ratio: mean/range ratio above which a class counts as stable.
    min_confidence: minimum usable per-class score.
    mode: none | fixed | dynamic (how the trainer builds thresholds).
    """

    fixed_floor: float = 0.7
    stability_ratio: float = 4.0
    min_confidence: float = 0.5
    mode: str = "dynamic"

    def __post_init__(self):
        if not 0 < self.min_confidence <= self.fixed_floor < 1:
            raise ContractError(
                f"need 0 < min_confidence <= fixed_floor < 1, got "
                f"{self.min_confidence}, {self.fixed_floor}"
            )
        if self.stability_ratio <= 0:
            raise ContractError(f"stability_ratio must be positive, got {self.stability_ratio}")
        if self.mode not in ("none", "fixed", "dynamic"):
            raise ContractError(f"unknown pseudo-label mode {self.mode!r}")


@dataclass
class ClassStats:
    """Score statistics over the pixels argmax-assigned to one class."""

    class_id: int
    u_low: float = 0.0
    u_high: float = 0.0
    u_mean: float = 0.0
    pixel_count: int = 0

    @property
    def delta(self):
        return abs(self.u_high - self.u_low)

    @property
    def undefined(self):
        return self.pixel_count == 0


def class_score_stats(old_probs, class_id):
    """Min/max/mean of p(class_id) over pixels whose argmax is ``class_id``."""
    assigned = old_probs.argmax(dim=1) == class_id
    count = int(assigned.sum())
    if count == 0:
        return ClassStats(class_id=int(class_id))
    scores = old_probs[:, class_id][assigned]
    return ClassStats(
        class_id=int(class_id),
        u_low=float(scores.min()),
        u_high=float(scores.max()),
        u_mean=float(scores.sum() / count),
        pixel_count=count,
    )


def threshold_decision(stats, cfg):
    """Threshold and the branch that produced it: stable | clipped | floor | empty."""
    if stats.undefined:
        return cfg.fixed_floor, "empty"
    delta = stats.delta
    stable = delta == 0 or stats.u_mean / delta >= cfg.stability_ratio
    if stats.u_low >= cfg.min_confidence:
        if stable:
            return stats.u_low, "stable"
        return max(cfg.fixed_floor, stats.u_low), "clipped"
    return cfg.fixed_floor, "floor"


def dynamic_threshold(stats, cfg):
    return threshold_decision(stats, cfg)[0]


@dataclass
class ThresholdDecision:
    stats: ClassStats
    tau: float
    branch: str


def batch_thresholds(old_probs, class_ids, cfg):
    """Per-batch dynamic thresholds for the given classes."""
    decisions = []
    for class_id in class_ids:
        stats = class_score_stats(old_probs, class_id)
        tau, branch = threshold_decision(stats, cfg)
        decisions.append(ThresholdDecision(stats=stats, tau=tau, branch=branch))
    return decisions


def generate_pseudo_labels(old_probs, thresholds):
    """Label pixel i with c when argmax = c and p_i(c) strictly exceeds tau_c.

    ``thresholds`` maps class -> threshold and defines which classes may be
    pseudo-labelled; everything else stays 0.
    """
    pred = old_probs.argmax(dim=1)
    out = torch.zeros_like(pred)
    for class_id, tau in thresholds.items():
        hit = (pred == class_id) & (old_probs[:, class_id] > tau)
        out[hit] = class_id
    return out


class LabelSource(enum.IntEnum):
    BACKGROUND = 0
    GROUND_TRUTH = 1
    PSEUDO = 2


@dataclass
class SupervisionMask:
    """Fused supervision: labels plus the per-pixel provenance."""

    labels: torch.Tensor
    source: torch.Tensor


def fuse_labels(pseudo, gt_current):
    """Combine pseudo labels with current ground truth; ground truth wins."""
    if pseudo.shape != gt_current.shape:
        raise ContractError(
            f"pseudo {tuple(pseudo.shape)} and ground truth {tuple(gt_current.shape)} differ"
        )
    labels = torch.where(gt_current != 0, gt_current, pseudo)
    source = torch.full_like(labels, LabelSource.BACKGROUND)
    source[pseudo != 0] = LabelSource.PSEUDO
    source[gt_current != 0] = LabelSource.GROUND_TRUTH
    return SupervisionMask(labels=labels, source=source)


def seg_loss(logits, supervision):
    """Mean per-pixel cross-entropy; background pixels are supervised as class 0."""
    labels = supervision.labels
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise ContractError(
            f"labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}"
        )
    if int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]:
        raise LabelRangeError(
            f"labels span [{int(labels.min())}, {int(labels.max())}] "
            f"but logits have {logits.shape[1]} channels"
        )
    return F.cross_entropy(logits, labels.long())


def total_loss(seg, distill, contrast, step):
    """Step objective: segmentation only at step 0, plain sum afterwards."""
    parts = {"seg": seg, "distill": distill, "contrast": contrast}
    for name, value in parts.items():
        value = torch.as_tensor(value)
        if not torch.isfinite(value).all():
            raise NumericError(f"{name} loss is not finite: {value}")
    if step == 0:
        return torch.as_tensor(seg)
    return torch.as_tensor(seg) + torch.as_tensor(distill) + torch.as_tensor(contrast)

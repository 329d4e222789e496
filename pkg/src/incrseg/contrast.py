"""Region-wise triplet contrast between the frozen and live models.

Anchors are taken from the previous-step model's features where *it* predicts
a previously-learned class; positive and negative regions come from the live
model's features under the live predictions. Regions are flattened and
truncated to the smallest pixel count among the three before a margin-based
triplet objective is applied. Only the live-model embeddings receive
gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ContractError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class ContrastConfig:
    margin: float = 1.0
    max_anchor_classes: int = 10
    enabled: bool = True

    def __post_init__(self):
        if self.margin < 0:
            raise ContractError(f"margin must be >= 0, got {self.margin}")
        if self.max_anchor_classes < 1:
            raise ContractError("max_anchor_classes must be >= 1")


@dataclass
class ClassMask:
    class_id: int
    mask: torch.Tensor


def class_mask(pred_map, class_id):
    """Binary mask marking where an argmax prediction map equals ``class_id``."""
    return ClassMask(class_id=class_id, mask=(pred_map == class_id).to(torch.uint8))


@dataclass
class RegionTriple:
    class_id: int
    anchor: torch.Tensor
    positive: torch.Tensor
    negative: torch.Tensor
    length: int


def _region_vector(feats, preds, scores, member, limit=None):
    """Flatten the masked region to 1-D, pixels ordered by descending score.

    Ties break row-major (batch, row, column). Returns (vector, pixel_count);
    ``limit`` keeps only the strongest pixels.
    """
    flat_member = member.reshape(-1)
    idx = flat_member.nonzero(as_tuple=False).squeeze(1)
    if idx.numel() == 0:
        return None, 0
    if scores is not None:
        region_scores = scores.reshape(-1)[idx]
        order = torch.sort(-region_scores, stable=True).indices
        idx = idx[order]
    if limit is not None:
        idx = idx[:limit]
    channels = feats.shape[1]
    flat_feats = feats.permute(0, 2, 3, 1).reshape(-1, channels)
    return flat_feats[idx].reshape(-1), int(idx.numel())


def select_region_embeddings(snapshot_feats, live_feats, snapshot_preds, live_preds,
                             anchor_class, negative_classes,
                             snapshot_scores=None, live_scores=None):
    """Build the anchor/positive/negative triple for one previously-learned class.

    Returns None when any of the three regions is empty. Confidence maps, when
    given, rank pixels before the minimum-length truncation; otherwise pixels
    keep row-major order.
    """
    if snapshot_feats.shape != live_feats.shape:
        raise ShapeError(
            f"feature shapes differ: {tuple(snapshot_feats.shape)} vs {tuple(live_feats.shape)}"
        )
    if snapshot_preds.shape != live_preds.shape or snapshot_preds.shape != snapshot_feats.shape[:1] + snapshot_feats.shape[2:]:
        raise ShapeError("prediction maps must be BxHxW matching the features")
    anchor_member = snapshot_preds == anchor_class
    positive_member = live_preds == anchor_class
    negative_member = torch.zeros_like(live_preds, dtype=torch.bool)
    for k in negative_classes:
        if k == anchor_class:
            continue
        negative_member |= live_preds == k
    counts = [int(m.sum()) for m in (anchor_member, positive_member, negative_member)]
    if min(counts) == 0:
        return None
    n_min = min(counts)
    anchor, _ = _region_vector(snapshot_feats, snapshot_preds, snapshot_scores, anchor_member, n_min)
    positive, _ = _region_vector(live_feats, live_preds, live_scores, positive_member, n_min)
    negative, _ = _region_vector(live_feats, live_preds, live_scores, negative_member, n_min)
    return RegionTriple(class_id=int(anchor_class), anchor=anchor, positive=positive,
                        negative=negative, length=int(anchor.numel()))


@dataclass
class ContrastStats:
    classes_used: int = 0
    classes_skipped: int = 0


def _sample_classes(old_classes, limit, generator):
    classes = sorted(int(c) for c in old_classes)
    if len(classes) <= limit:
        return classes
    perm = torch.randperm(len(classes), generator=generator)[:limit]
    return sorted(classes[i] for i in perm.tolist())


def region_contrast_loss(snapshot_feats, live_feats, snapshot_preds, live_preds,
                         old_classes, new_classes, cfg,
                         snapshot_scores=None, live_scores=None, generator=None):
    """Margin triplet loss averaged over the contributing anchor classes.

    Core tensor-level routine; see :func:`contrast_loss` for the model-level
    entry point. ``old_classes``/``new_classes`` are label values of the
    prediction maps.
    """
    if len(old_classes) == 0:
        raise ContractError("contrast needs previously-learned classes; none given")
    stats = ContrastStats()
    picked = _sample_classes(old_classes, cfg.max_anchor_classes, generator)
    terms = []
    for class_id in picked:
        triple = select_region_embeddings(
            snapshot_feats, live_feats, snapshot_preds, live_preds,
            class_id, new_classes, snapshot_scores, live_scores,
        )
        if triple is None:
            stats.classes_skipped += 1
            continue
        d_pos = torch.linalg.vector_norm(triple.anchor - triple.positive)
        d_neg = torch.linalg.vector_norm(triple.anchor - triple.negative)
        terms.append(F.relu(d_pos - d_neg + cfg.margin))
        stats.classes_used += 1
    if not terms:
        logger.info("SKIPPED_ALL: no anchor class had all three regions present")
        return live_feats.new_zeros(()), stats
    return torch.stack(terms).sum() / len(terms), stats


def contrast_loss(snapshot, model, batch, old_classes, new_classes, cfg,
                  generator=None, model_out=None, snapshot_out=None, return_stats=False):
    """Contrast objective at an incremental step (old_classes/new_classes are class IDs)."""
    if len(old_classes) == 0:
        raise ContractError("contrast_loss is undefined at the initial step")
    if model_out is None:
        model_out = model.forward_with_taps(batch)
    if snapshot_out is None:
        snapshot_out = snapshot.forward_with_taps(batch)
    channel_of = model.channel_for_class()
    old_ch = [channel_of[c] for c in old_classes]
    new_ch = [channel_of[c] for c in new_classes]

    live_emb = model_out.out_embedding
    snap_emb = snapshot_out.out_embedding
    with torch.no_grad():
        snap_logits = snapshot.model.classifier(snap_emb)
        snap_probs = F.softmax(snap_logits, dim=1)
        snap_scores, snap_preds = snap_probs.max(dim=1)
        live_logits = model.classifier(live_emb.detach())
        live_probs = F.softmax(live_logits, dim=1)
        live_scores, live_preds = live_probs.max(dim=1)

    loss, stats = region_contrast_loss(
        snap_emb, live_emb, snap_preds, live_preds, old_ch, new_ch, cfg,
        snapshot_scores=snap_scores, live_scores=live_scores, generator=generator,
    )
    if return_stats:
        return loss, stats
    return loss

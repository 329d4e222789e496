"""Segmentation network with intermediate-layer taps.

A small 4-stage encoder (stride 2 each, overall 16x downsampling) exposes the
last three stage outputs for distillation, mirroring the usual practice of
skipping the stem. Each tap is summarized by a lightweight multi-rate dilated
context head; a separate context head on the deepest stage produces the
pre-classifier embedding that feeds the 1x1 classifier. The classifier and
the per-tap logit heads grow together when new classes arrive.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, ShapeError

DOWNSAMPLE = 16


def _groups(channels):
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class _ConvStage(nn.Sequential):
    """stride-2 conv + 3x3 conv, GroupNorm + ReLU after each."""

    def __init__(self, in_ch, out_ch):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False),
            nn.GroupNorm(_groups(out_ch), out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.GroupNorm(_groups(out_ch), out_ch),
            nn.ReLU(inplace=True),
        )


class ContextHead(nn.Module):
    """Multi-rate dilated context summary plus a global-pool branch."""

    def __init__(self, in_ch, out_ch, dilations=(1, 2, 3)):
        super().__init__()
        branches = []
        for d in dilations:
            if d == 1:
                branches.append(nn.Conv2d(in_ch, out_ch, 1, bias=False))
            else:
                branches.append(nn.Conv2d(in_ch, out_ch, 3, padding=d, dilation=d, bias=False))
        self.branches = nn.ModuleList(branches)
        self.pool_proj = nn.Conv2d(in_ch, out_ch, 1, bias=False)
        self.project = nn.Sequential(
            nn.Conv2d(out_ch * (len(dilations) + 1), out_ch, 1, bias=False),
            nn.GroupNorm(_groups(out_ch), out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        outs = [branch(x) for branch in self.branches]
        pooled = self.pool_proj(F.adaptive_avg_pool2d(x, 1))
        outs.append(pooled.expand(-1, -1, x.shape[2], x.shape[3]))
        return self.project(torch.cat(outs, dim=1))


@dataclass
class TapOutputs:
    layer_embeddings: list
    out_embedding: torch.Tensor
    logits: torch.Tensor


class TapModel(nn.Module):
    """Encoder with feature taps, context heads and a growable classifier."""

    def __init__(self, num_classes, in_channels=3, width=64, dilations=(1, 2, 3), class_ids=None):
        super().__init__()
        if num_classes < 1:
            raise ContractError("need at least one foreground class")
        widths = (max(8, width // 4), max(8, width // 2), width, width)
        self.in_channels = in_channels
        self.width = width
        self.dilations = tuple(dilations)
        self.stages = nn.ModuleList(
            [_ConvStage(c_in, c_out) for c_in, c_out in zip((in_channels,) + widths[:-1], widths)]
        )
        # taps skip the stem stage: strides 4, 8 and 16
        self.tap_stage_indices = (1, 2, 3)
        self.tap_context = nn.ModuleList(
            [ContextHead(widths[i], width, dilations) for i in self.tap_stage_indices]
        )
        self.context_head = ContextHead(widths[-1], width, dilations)
        self.layer_heads = nn.ModuleList(
            [nn.Conv2d(width, num_classes + 1, 1) for _ in self.tap_stage_indices]
        )
        self.classifier = nn.Conv2d(width, num_classes + 1, 1)
        if class_ids is None:
            class_ids = tuple(range(1, num_classes + 1))
        class_ids = tuple(int(c) for c in class_ids)
        if len(class_ids) != num_classes:
            raise ContractError("class_ids length must match num_classes")
        self.class_ids = class_ids

    @property
    def num_taps(self):
        return len(self.tap_stage_indices)

    @property
    def num_classes_now(self):
        return self.classifier.out_channels - 1

    def channel_for_class(self):
        """Map class ID -> classifier channel (background is channel 0)."""
        mapping = {0: 0}
        for pos, class_id in enumerate(self.class_ids):
            mapping[class_id] = pos + 1
        return mapping

    def forward_with_taps(self, batch):
        if batch.ndim != 4:
            raise ShapeError(f"expected BxCxHxW input, got {tuple(batch.shape)}")
        h, w = batch.shape[2], batch.shape[3]
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ShapeError(f"input extent {h}x{w} must be divisible by {DOWNSAMPLE}")
        feats = []
        x = batch
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        layer_embeddings = [
            ctx(feats[i]) for ctx, i in zip(self.tap_context, self.tap_stage_indices)
        ]
        out_embedding = self.context_head(feats[-1])
        logits = F.interpolate(
            self.classifier(out_embedding), size=(h, w), mode="bilinear", align_corners=False
        )
        return TapOutputs(layer_embeddings, out_embedding, logits)

    def forward(self, batch):
        return self.forward_with_taps(batch).logits

    def extend_classifier(self, new_class_count, class_ids=None, noise_std=1e-3, generator=None):
        """Append output channels, seeding them from the background channel.

        Existing channel weights are preserved bit-exactly; the per-tap logit
        heads are re-dimensioned the same way.
        """
        if new_class_count < 1:
            raise ContractError("new_class_count must be >= 1")
        if class_ids is None:
            start = max(self.class_ids, default=0) + 1
            class_ids = tuple(range(start, start + new_class_count))
        class_ids = tuple(int(c) for c in class_ids)
        if len(class_ids) != new_class_count:
            raise ContractError("class_ids length must match new_class_count")
        if set(class_ids) & set(self.class_ids):
            raise ContractError(f"classes {set(class_ids) & set(self.class_ids)} already present")

        def grow(conv):
            old_out = conv.out_channels
            new = nn.Conv2d(conv.in_channels, old_out + new_class_count, 1)
            new = new.to(conv.weight.dtype)
            with torch.no_grad():
                new.weight[:old_out] = conv.weight
                new.bias[:old_out] = conv.bias
                for k in range(new_class_count):
                    noise_w = torch.randn(conv.weight[0].shape, generator=generator,
                                          dtype=conv.weight.dtype)
                    noise_b = torch.randn((), generator=generator, dtype=conv.bias.dtype)
                    new.weight[old_out + k] = conv.weight[0] + noise_std * noise_w
                    new.bias[old_out + k] = conv.bias[0] + noise_std * noise_b
            return new

        self.classifier = grow(self.classifier)
        self.layer_heads = nn.ModuleList([grow(head) for head in self.layer_heads])
        self.class_ids = self.class_ids + class_ids
        return self


@dataclass
class StepSnapshot:
    """Frozen copy of the model at the end of a step; never trained again."""

    model: TapModel
    step_index: int

    def forward_with_taps(self, batch):
        with torch.no_grad():
            return self.model.forward_with_taps(batch)


def freeze_snapshot(model, step):
    frozen = copy.deepcopy(model)
    frozen.eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    return StepSnapshot(model=frozen, step_index=step)

"""Dense distillation across tapped layers and the output embedding.

Every tapped layer of the frozen previous-step model is compared to the live
model through per-pixel KL divergence of class-probability maps, weighted by
a factor that grows with layer depth and decays over epochs. The output-layer
term compares pre-classifier embeddings through the classifier restricted to
the previously-known channels, so the divergence stays well defined after the
classifier has grown.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ContractError, NotSimplexError, ShapeError, TopologyError

PROB_FLOOR = 1e-8
SIMPLEX_TOL = 1e-5


@dataclass
class LayerWeightConfig:
    """Depth-increasing, epoch-decaying distillation weight."""

    alpha: float = 1.0
    gamma: float = 0.9
    total_epochs: int = 30
    num_layers: int = 3

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ContractError(f"gamma must lie in (0,1), got {self.gamma}")
        if self.alpha <= 0:
            raise ContractError(f"alpha must be positive, got {self.alpha}")
        if self.num_layers < 1 or self.total_epochs < 1:
            raise ContractError("num_layers and total_epochs must be >= 1")


@dataclass
class DistillConfig:
    lambda_out: float = 2.0
    layer_weight: LayerWeightConfig = field(default_factory=LayerWeightConfig)
    enabled: bool = True

    def __post_init__(self):
        if self.lambda_out < 0:
            raise ContractError(f"lambda_out must be >= 0, got {self.lambda_out}")


def layer_weight(layer_index, epoch_index, cfg):
    """Weight for layer ``layer_index`` (1-based, deeper is larger) at ``epoch_index``.

    alpha * ln(1 + n_l/N_l) * gamma^(n_e/N_e); natural logarithm.
    """
    if not 1 <= layer_index <= cfg.num_layers:
        raise ContractError(f"layer_index {layer_index} outside 1..{cfg.num_layers}")
    if not 0 <= epoch_index <= cfg.total_epochs:
        raise ContractError(f"epoch_index {epoch_index} outside 0..{cfg.total_epochs}")
    return (
        cfg.alpha
        * math.log(1.0 + layer_index / cfg.num_layers)
        * cfg.gamma ** (epoch_index / cfg.total_epochs)
    )


def pixel_kl_divergence(probs_old, probs_new):
    """Mean per-pixel KL(old || new) over BxKxHxW probability maps.

    Probabilities below PROB_FLOOR are clamped inside the logs only, so exact
    zeros stay finite without renormalizing the inputs.
    """
    if probs_old.shape != probs_new.shape:
        raise ShapeError(f"shape mismatch {tuple(probs_old.shape)} vs {tuple(probs_new.shape)}")
    if probs_old.ndim != 4:
        raise ShapeError(f"expected BxKxHxW, got {tuple(probs_old.shape)}")
    for name, p in (("probs_old", probs_old), ("probs_new", probs_new)):
        sums = p.sum(dim=1)
        if (sums - 1.0).abs().max().item() > SIMPLEX_TOL or p.min().item() < -SIMPLEX_TOL:
            raise NotSimplexError(f"{name} is not a per-pixel distribution")
    log_old = probs_old.clamp_min(PROB_FLOOR).log()
    log_new = probs_new.clamp_min(PROB_FLOOR).log()
    kl_per_pixel = (probs_old * (log_old - log_new)).sum(dim=1)
    return kl_per_pixel.mean()


@dataclass
class DistillLoss:
    total: torch.Tensor
    intermediate: torch.Tensor
    output: torch.Tensor


def _head_probs(head, embedding, channels):
    return F.softmax(head(embedding)[:, :channels], dim=1)


def distillation_loss(snapshot, model, batch, epoch_index, cfg,
                      model_out=None, snapshot_out=None):
    """Combined distillation objective between the snapshot and the live model.

    ``model_out``/``snapshot_out`` accept precomputed tap outputs to avoid
    duplicate forward passes inside a training iteration. Gradients flow only
    into the live model.
    """
    lw = cfg.layer_weight
    if model.num_taps != snapshot.model.num_taps:
        raise TopologyError(
            f"tap counts differ: model {model.num_taps} vs snapshot {snapshot.model.num_taps}"
        )
    if lw.num_layers != model.num_taps:
        raise ContractError(
            f"configured num_layers {lw.num_layers} does not match {model.num_taps} taps"
        )
    if not 0 <= epoch_index < lw.total_epochs:
        raise ContractError(f"epoch_index {epoch_index} outside 0..{lw.total_epochs - 1}")
    if model_out is None:
        model_out = model.forward_with_taps(batch)
    if snapshot_out is None:
        snapshot_out = snapshot.forward_with_taps(batch)
    old_channels = snapshot.model.classifier.out_channels

    intermediate = batch.new_zeros(())
    for l, (emb_old, emb_new) in enumerate(
        zip(snapshot_out.layer_embeddings, model_out.layer_embeddings)
    ):
        with torch.no_grad():
            p_old = _head_probs(snapshot.model.layer_heads[l], emb_old, old_channels)
        p_new = _head_probs(model.layer_heads[l], emb_new, old_channels)
        weight = layer_weight(l + 1, epoch_index, lw)
        intermediate = intermediate + weight * pixel_kl_divergence(p_old, p_new)
    intermediate = intermediate / lw.num_layers

    with torch.no_grad():
        p_out_old = _head_probs(snapshot.model.classifier, snapshot_out.out_embedding, old_channels)
    p_out_new = _head_probs(model.classifier, model_out.out_embedding, old_channels)
    output = pixel_kl_divergence(p_out_old, p_out_new)

    return DistillLoss(total=intermediate + cfg.lambda_out * output,
                       intermediate=intermediate, output=output)

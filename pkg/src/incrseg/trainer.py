"""Incremental training loop: per-step data filtering, snapshot freezing,
SGD with a poly learning-rate schedule, loss composition, checkpointing and
after-step evaluation."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import math
import os
import shutil
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics, pseudolabel, schedule as sched
from .contrast import ContrastConfig, contrast_loss
from .distill import DistillConfig, distillation_loss
from .errors import ContractError, NumericError, ResumeMismatchError
from .model import StepSnapshot, TapModel, freeze_snapshot
from .pseudolabel import PseudoLabelConfig, fuse_labels, generate_pseudo_labels, seg_loss, total_loss

METRICS_COLUMNS = (
    "iter", "lr", "seg", "il_d", "ol_d", "dada_total",
    "arcl", "arcl_classes_used", "arcl_skipped", "total",
)


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8
    epochs_per_step: int = 5
    poly_power: float = 0.9
    seed: int = 0
    hflip: bool = False
    distill: DistillConfig = field(default_factory=DistillConfig)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    pseudo: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)

    def __post_init__(self):
        if self.base_lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ContractError("rates must be positive")
        if self.epochs_per_step < 1 or self.batch_size < 1:
            raise ContractError("epochs_per_step and batch_size must be >= 1")


def poly_lr(iteration, total_iters, cfg):
    """base_lr * (1 - iter/total)^power."""
    if total_iters < 1:
        raise ContractError("total_iters must be >= 1")
    if not 0 <= iteration <= total_iters:
        raise ContractError(f"iteration {iteration} outside 0..{total_iters}")
    return cfg.base_lr * (1.0 - iteration / total_iters) ** cfg.poly_power


def derive_seed(seed, step, stream):
    """Stable per-(seed, step, purpose) RNG seed so steps replay identically."""
    digest = hashlib.sha256(f"{seed}:{step}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2 ** 63 - 1)


def derive_generator(seed, step, stream):
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, step, stream))
    return g


@dataclass
class StepState:
    model: TapModel
    snapshot: StepSnapshot | None
    step: int


@dataclass
class StepResult:
    model: TapModel
    report: metrics.StepReport
    checkpoint_path: str | None
    snapshot: StepSnapshot
    confusion: metrics.ConfusionMatrix
    metrics_rows: list


def _stack_batch(samples, indices, flip_mask=None):
    images, masks = [], []
    for pos, idx in enumerate(indices):
        image, mask = samples[idx].image, samples[idx].mask
        if flip_mask is not None and flip_mask[pos]:
            image, mask = image[:, :, ::-1].copy(), mask[:, ::-1].copy()
        images.append(torch.from_numpy(image))
        masks.append(torch.from_numpy(mask))
    return torch.stack(images).float(), torch.stack(masks).long()


def _ids_to_channels(mask_ids, channel_of):
    out = torch.zeros_like(mask_ids)
    for class_id, channel in channel_of.items():
        if class_id == 0:
            continue
        out[mask_ids == class_id] = channel
    return out


def _effective_distill_cfg(cfg, model):
    lw = dataclasses.replace(
        cfg.distill.layer_weight,
        total_epochs=cfg.epochs_per_step,
        num_layers=model.num_taps,
    )
    return dataclasses.replace(cfg.distill, layer_weight=lw)


def evaluate_model(model, val_samples, schedule, step, batch_size=8):
    """Confusion matrix on the full validation split with the current model.

    Ground-truth classes not yet learned are mapped to background.
    """
    num_slots = max([0] + [int(c) for c in schedule.class_order]) + 1
    cm = metrics.ConfusionMatrix(num_slots)
    seen = set(schedule.seen_classes(step))
    channel_ids = np.array([0] + list(model.class_ids), dtype=np.int64)
    model.eval()
    with torch.no_grad():
        for start in range(0, len(val_samples), batch_size):
            indices = range(start, min(start + batch_size, len(val_samples)))
            images, masks = _stack_batch(val_samples, indices)
            logits = model.forward_with_taps(images).logits
            pred_ids = channel_ids[logits.argmax(dim=1).numpy()]
            gt = masks.numpy()
            gt = np.where(np.isin(gt, list(seen)), gt, 0)
            cm.update(gt, pred_ids)
    model.train()
    return cm


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def train_incremental_step(state, data, cfg, schedule, val_data, out_dir=None, config_hash=""):
    """Train one incremental step and evaluate/checkpoint/freeze at the end.

    ``data`` must already be remapped so labels only cover the step's classes.
    """
    model, snapshot, step = state.model, state.snapshot, state.step
    if step > 0 and snapshot is None:
        raise ContractError(f"step {step} requires the previous-step snapshot")
    if len(data) == 0:
        raise ContractError(f"step {step} received no training images")
    gen = derive_generator(cfg.seed, step, "train")
    channel_of = model.channel_for_class()
    old_ids = list(schedule.old_classes(step))
    new_ids = list(schedule.new_classes(step))
    old_channels = [channel_of[c] for c in old_ids]
    distill_cfg = _effective_distill_cfg(cfg, model)

    use_distill = step > 0 and cfg.distill.enabled
    use_contrast = step > 0 and cfg.contrast.enabled and old_ids and new_ids
    pseudo_mode = cfg.pseudo.mode if step > 0 else "none"

    optimizer = torch.optim.SGD(
        model.parameters(), lr=cfg.base_lr, momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    iters_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total_iters = cfg.epochs_per_step * iters_per_epoch

    model.train()
    rows = []
    iteration = 0
    for epoch in range(cfg.epochs_per_step):
        order = torch.randperm(len(data), generator=gen).tolist()
        for start in range(0, len(data), cfg.batch_size):
            indices = [order[i] for i in range(start, min(start + cfg.batch_size, len(data)))]
            flips = None
            if cfg.hflip:
                flips = torch.rand(len(indices), generator=gen).tolist()
                flips = [f < 0.5 for f in flips]
            images, gt_ids = _stack_batch(data, indices, flips)
            gt_ch = _ids_to_channels(gt_ids, channel_of)

            lr = poly_lr(iteration, total_iters, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr

            model_out = model.forward_with_taps(images)
            snapshot_out = None
            if step > 0 and (use_distill or use_contrast or pseudo_mode != "none"):
                snapshot_out = snapshot.forward_with_taps(images)

            if pseudo_mode == "none":
                supervision = fuse_labels(torch.zeros_like(gt_ch), gt_ch)
            else:
                with torch.no_grad():
                    old_probs = F.softmax(snapshot_out.logits, dim=1)
                if pseudo_mode == "fixed":
                    thresholds = {ch: cfg.pseudo.fixed_floor for ch in old_channels}
                else:
                    decisions = pseudolabel.batch_thresholds(old_probs, old_channels, cfg.pseudo)
                    thresholds = {d.stats.class_id: d.tau for d in decisions}
                pseudo = generate_pseudo_labels(old_probs, thresholds)
                supervision = fuse_labels(pseudo, gt_ch)

            seg = seg_loss(model_out.logits, supervision)

            il_d = ol_d = dada_total = torch.zeros(())
            if use_distill:
                parts = distillation_loss(
                    snapshot, model, images, epoch, distill_cfg,
                    model_out=model_out, snapshot_out=snapshot_out,
                )
                il_d, ol_d, dada_total = parts.intermediate, parts.output, parts.total

            arcl = torch.zeros(())
            used = skipped = 0
            if use_contrast:
                arcl, stats = contrast_loss(
                    snapshot, model, images, old_ids, new_ids, cfg.contrast,
                    generator=gen, model_out=model_out, snapshot_out=snapshot_out,
                    return_stats=True,
                )
                used, skipped = stats.classes_used, stats.classes_skipped

            loss = total_loss(seg, dada_total, arcl, step)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step} iteration {iteration}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            rows.append([
                iteration, lr, float(seg.detach()), float(il_d.detach()),
                float(ol_d.detach()), float(dada_total.detach()), float(arcl.detach()),
                used, skipped, float(loss.detach()),
            ])
            iteration += 1

    cm = evaluate_model(model, val_data, schedule, step, cfg.batch_size)
    report = metrics.build_step_report(cm, schedule, step)
    checkpoint_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics_csv(rows, os.path.join(out_dir, "metrics.csv"))
        metrics.write_report_csv(report, os.path.join(out_dir, "report.csv"))
        checkpoint_path = os.path.join(out_dir, "model.ckpt")
        save_checkpoint(checkpoint_path, model, step, config_hash, cm)
    new_snapshot = freeze_snapshot(model, step)
    return StepResult(
        model=model, report=report, checkpoint_path=checkpoint_path,
        snapshot=new_snapshot, confusion=cm, metrics_rows=rows,
    )


# ---------------------------------------------------------------------------
# experiment orchestration


def save_checkpoint(path, model, step, config_hash, confusion):
    torch.save(
        {
            "step": step,
            "class_ids": list(model.class_ids),
            "in_channels": model.in_channels,
            "width": model.width,
            "dilations": list(model.dilations),
            "state_dict": model.state_dict(),
            "config_hash": config_hash,
            "confusion": confusion.counts,
            "confusion_classes": confusion.num_classes,
        },
        path,
    )


def load_checkpoint(path):
    blob = torch.load(path, weights_only=False)
    model = TapModel(
        num_classes=len(blob["class_ids"]),
        in_channels=blob["in_channels"],
        width=blob["width"],
        dilations=tuple(blob["dilations"]),
        class_ids=tuple(blob["class_ids"]),
    )
    model.load_state_dict(blob["state_dict"])
    cm = metrics.ConfusionMatrix(blob["confusion_classes"], blob["confusion"])
    return model, blob["step"], blob["config_hash"], cm


@dataclass
class ExperimentReport:
    run_dir: str
    config_hash: str
    reports: list
    resumed_from_step: int | None = None


def _build_datasets(config):
    data_cfg = config.dataset
    if data_cfg.kind == "synthetic":
        spec = sched.SynthSpec(
            num_classes=data_cfg.num_classes,
            images_per_class=data_cfg.images_per_class,
            height=data_cfg.height,
            width=data_cfg.width,
            noise=data_cfg.noise,
            min_radius=data_cfg.min_radius,
            max_radius=data_cfg.max_radius,
        )
        train = sched.generate_synthetic_dataset(derive_seed(config.train.seed, 0, "data-train"), spec)
        val_spec = dataclasses.replace(spec, images_per_class=data_cfg.val_images_per_class)
        val = sched.generate_synthetic_dataset(derive_seed(config.train.seed, 0, "data-val"), val_spec)
        return train, val
    samples = sched.load_voc_format(data_cfg.root, valid_classes=set(config.schedule_spec.class_order))
    n_val = max(1, len(samples) // 5)
    return samples[:-n_val], samples[-n_val:]


def _find_completed_steps(run_dir, num_steps):
    done = []
    for t in range(num_steps):
        if os.path.isfile(os.path.join(run_dir, f"step_{t}", "model.ckpt")):
            done.append(t)
        else:
            break
    return done


def run_experiment(config, resume=False, max_steps=None, out_root=None):
    """Run the full incremental schedule described by an ExperimentConfig.

    Artifacts land under ``<out_root>/<config-hash>/step_<t>/``. With
    ``resume`` the latest complete checkpoint is picked up; a differing
    config hash in a checkpoint aborts with RESUME_MISMATCH.
    """
    from .config import config_hash as hash_fn, dump_config

    schedule = config.build_schedule()
    if max_steps is not None:
        schedule = schedule.truncated(max_steps)
        config = config.with_schedule(schedule)
    cfg_hash = hash_fn(config)
    root = out_root or os.environ.get("INCRSEG_OUT") or config.output_dir
    run_dir = os.path.join(root, cfg_hash[:12])
    cfg = config.train

    start_step = 0
    model = None
    snapshot = None
    history = []
    resumed_from = None
    if resume and os.path.isdir(run_dir):
        done = _find_completed_steps(run_dir, schedule.num_steps)
        if done:
            last = done[-1]
            ckpt = os.path.join(run_dir, f"step_{last}", "model.ckpt")
            model, ckpt_step, ckpt_hash, _ = load_checkpoint(ckpt)
            if ckpt_hash != cfg_hash:
                raise ResumeMismatchError(
                    f"checkpoint {ckpt} was produced by config {ckpt_hash}, not {cfg_hash}"
                )
            for t in done:
                _, _, _, cm = load_checkpoint(os.path.join(run_dir, f"step_{t}", "model.ckpt"))
                history.append(cm)
            start_step = last + 1
            resumed_from = last
    if not resume and os.path.isdir(run_dir):
        shutil.rmtree(run_dir)
    os.makedirs(run_dir, exist_ok=True)
    dump_config(config, os.path.join(run_dir, "config.yaml"))
    with open(os.path.join(run_dir, "config_hash.txt"), "w") as fh:
        fh.write(cfg_hash + "\n")

    train_samples, val_samples = _build_datasets(config)

    for step in range(start_step, schedule.num_steps):
        if step == 0:
            torch.manual_seed(derive_seed(cfg.seed, 0, "init"))
            model = TapModel(
                num_classes=len(schedule.new_classes(0)),
                width=config.model.width,
                class_ids=schedule.new_classes(0),
            )
            snapshot = None
        else:
            snapshot = freeze_snapshot(model, step - 1)
            model.extend_classifier(
                len(schedule.new_classes(step)),
                class_ids=schedule.new_classes(step),
                generator=derive_generator(cfg.seed, step, "extend"),
            )
        indices = sched.step_image_indices(train_samples, schedule, step)
        step_data = [sched.remap_labels(train_samples[i], schedule, step) for i in indices]
        step_dir = os.path.join(run_dir, f"step_{step}")
        result = train_incremental_step(
            StepState(model=model, snapshot=snapshot, step=step),
            step_data, cfg, schedule, val_samples, out_dir=step_dir, config_hash=cfg_hash,
        )
        history.append(result.confusion)
        model = result.model

    reports = metrics.stepwise_report(history, schedule)
    return ExperimentReport(
        run_dir=run_dir, config_hash=cfg_hash, reports=reports,
        resumed_from_step=resumed_from,
    )

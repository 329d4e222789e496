"""Confusion-matrix accumulation, mIoU and step-wise forgetting reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ScheduleMismatchError


class ConfusionMatrix:
    """(K x K) counts, rows = ground truth, cols = prediction. Merge is additive."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or (counts < 0).any():
            raise ContractError("counts must be a non-negative KxK matrix")
        self.counts = counts

    def update(self, gt, pred):
        gt = np.asarray(gt).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if gt.shape != pred.shape:
            raise ContractError("ground truth and prediction sizes differ")
        if gt.min() < 0 or gt.max() >= self.num_classes or pred.min() < 0 or pred.max() >= self.num_classes:
            raise ContractError(f"labels outside 0..{self.num_classes - 1}")
        flat = self.num_classes * gt.astype(np.int64) + pred.astype(np.int64)
        self.counts += np.bincount(flat, minlength=self.num_classes ** 2).reshape(
            self.num_classes, self.num_classes
        )
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ContractError("cannot merge matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __add__(self, other):
        return self.merge(other)

    @property
    def total(self):
        return int(self.counts.sum())


def iou_per_class(cm):
    """IoU per class; None where TP+FP+FN is zero (class absent everywhere)."""
    tp = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - np.diag(cm.counts)
    out = {}
    for c in range(cm.num_classes):
        out[c] = None if denom[c] == 0 else float(tp[c] / denom[c])
    return out


def miou_detailed(cm, class_set):
    """Mean IoU over ``class_set``; classes with empty denominator are excluded."""
    if not class_set:
        raise ContractError("class_set must be non-empty")
    if max(class_set) >= cm.num_classes or min(class_set) < 0:
        raise ContractError("class_set outside matrix range")
    per_class = iou_per_class(cm)
    excluded = {c for c in class_set if per_class[c] is None}
    usable = [per_class[c] for c in sorted(class_set) if per_class[c] is not None]
    if not usable:
        return float("nan"), excluded
    return float(np.mean(usable)), excluded


def miou(cm, class_set):
    return miou_detailed(cm, class_set)[0]


@dataclass
class StepReport:
    step: int
    per_class_iou: dict
    group_ious: dict
    learned_so_far: frozenset


def _group_miou(cm, classes):
    classes = [c for c in classes]
    if not classes:
        return None
    value, _ = miou_detailed(cm, set(classes))
    return value


def build_step_report(cm, schedule, step, include_background=True):
    learned = list(schedule.seen_classes(step))
    per_class = iou_per_class(cm)
    report_classes = ([0] if include_background else []) + learned
    all_classes = ([0] if include_background else []) + learned
    groups = {
        "initial": _group_miou(cm, schedule.initial_classes()),
        "incremented": _group_miou(cm, [c for c in learned if c not in schedule.initial_classes()]),
        "all": _group_miou(cm, all_classes),
    }
    return StepReport(
        step=step,
        per_class_iou={c: per_class[c] for c in report_classes},
        group_ious=groups,
        learned_so_far=frozenset(learned),
    )


def stepwise_report(history, schedule, include_background=True):
    """Per-step group mIoU from one confusion matrix per completed step."""
    if len(history) > schedule.num_steps:
        raise ScheduleMismatchError(
            f"{len(history)} matrices for a {schedule.num_steps}-step schedule"
        )
    return [
        build_step_report(cm, schedule, step, include_background)
        for step, cm in enumerate(history)
    ]


REPORT_COLUMNS = ("step", "class_id", "iou")


def write_report_csv(report, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for class_id in sorted(report.per_class_iou):
            iou = report.per_class_iou[class_id]
            writer.writerow([report.step, class_id, "" if iou is None else repr(iou)])
        for group in ("initial", "incremented", "all"):
            iou = report.group_ious[group]
            writer.writerow([report.step, group, "" if iou is None else repr(iou)])


def read_report_csv(path):
    per_class, groups = {}, {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != REPORT_COLUMNS:
            raise ContractError(f"unexpected report header {header}")
        step = None
        for row in reader:
            step = int(row[0])
            value = None if row[2] == "" else float(row[2])
            if row[1].isdigit():
                per_class[int(row[1])] = value
            else:
                groups[row[1]] = value
    return step, per_class, groups


def plot_miou_curve(reports, schedule, path, include_background=True):
    """Line chart of group mIoU against the number of learned classes."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [len(schedule.seen_classes(r.step)) for r in reports]
    fig, ax = plt.subplots(figsize=(6, 4))
    for group in ("initial", "incremented", "all"):
        ys = [
            float("nan") if r.group_ious[group] is None else 100.0 * r.group_ious[group]
            for r in reports
        ]
        ax.plot(xs, ys, marker="o", label=group)
    ax.set_xlabel("learned classes")
    ax.set_ylabel("mIoU (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path

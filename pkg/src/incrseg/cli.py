"""Command-line entry point.

Commands: run (train an experiment config), report (print/plot step tables),
gen-data (write a synthetic dataset in VOC folder layout), dump-thresholds
(per-batch pseudo-label threshold debug CSV).

Exit codes: 0 success, 2 configuration problems, 3 numeric blow-ups,
1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys

import torch
import torch.nn.functional as F

from . import metrics, pseudolabel, schedule as sched, trainer
from .config import load_config
from .errors import ConfigError, IncrsegError, NumericError
from .model import freeze_snapshot


def _cmd_run(args):
    config = load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(
            config, train=dataclasses.replace(config.train, seed=args.seed)
        )
    report = trainer.run_experiment(config, resume=args.resume, max_steps=args.steps)
    print(f"run complete: {report.run_dir}")
    for step_report in report.reports:
        groups = {
            k: "-" if v is None else f"{100 * v:.2f}"
            for k, v in step_report.group_ious.items()
        }
        print(
            f"step {step_report.step}: initial={groups['initial']} "
            f"incremented={groups['incremented']} all={groups['all']}"
        )
    return 0


def _load_run_reports(run_dir):
    steps = []
    t = 0
    while os.path.isfile(os.path.join(run_dir, f"step_{t}", "report.csv")):
        steps.append(metrics.read_report_csv(os.path.join(run_dir, f"step_{t}", "report.csv")))
        t += 1
    return steps


def _cmd_report(args):
    reports = _load_run_reports(args.run_dir)
    if not reports:
        raise ConfigError(f"{args.run_dir} contains no step reports")
    header = f"{'step':>4} {'classes':>8} {'initial':>9} {'incremented':>12} {'all':>9}"
    print(header)
    rows = []
    for step, per_class, groups in reports:
        learned = [c for c in per_class if c != 0]
        cells = {
            k: "-" if groups.get(k) is None else f"{100 * groups[k]:.2f}"
            for k in ("initial", "incremented", "all")
        }
        print(
            f"{step:>4} {len(learned):>8} {cells['initial']:>9} "
            f"{cells['incremented']:>12} {cells['all']:>9}"
        )
        rows.append((step, len(learned), groups))
    if args.plot:
        out = os.path.join(args.run_dir, "miou_curve.png")
        _plot_from_rows(rows, out)
        print(f"wrote {out}")
    return 0


def _plot_from_rows(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [n for _, n, _ in rows]
    for group in ("initial", "incremented", "all"):
        ys = [float("nan") if g.get(group) is None else 100 * g[group] for _, _, g in rows]
        ax.plot(xs, ys, marker="o", label=group)
    ax.set_xlabel("learned classes")
    ax.set_ylabel("mIoU (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _cmd_gen_data(args):
    spec = sched.SynthSpec(
        num_classes=args.num_classes,
        images_per_class=args.images_per_class,
        height=args.height,
        width=args.width,
    )
    samples = sched.generate_synthetic_dataset(args.seed, spec)
    sched.save_voc_format(samples, args.out_dir)
    print(f"wrote {len(samples)} samples to {args.out_dir}")
    return 0


def _cmd_dump_thresholds(args):
    """Replay the step's batches through the frozen model and dump thresholds."""
    config = load_config(os.path.join(args.run_dir, "config.yaml"))
    schedule = config.build_schedule()
    step = args.step
    if step < 1 or step >= schedule.num_steps:
        raise ConfigError(f"--step must be in 1..{schedule.num_steps - 1}")
    ckpt = os.path.join(args.run_dir, f"step_{step - 1}", "model.ckpt")
    if not os.path.isfile(ckpt):
        raise ConfigError(f"missing checkpoint {ckpt}")
    model, _, _, _ = trainer.load_checkpoint(ckpt)
    snapshot = freeze_snapshot(model, step - 1)
    train_samples, _ = trainer._build_datasets(config)
    indices = sched.step_image_indices(train_samples, schedule, step)
    data = [sched.remap_labels(train_samples[i], schedule, step) for i in indices]
    cfg = config.train
    channel_of = model.channel_for_class()
    id_of_channel = {v: k for k, v in channel_of.items()}
    old_channels = [channel_of[c] for c in schedule.old_classes(step)]

    gen = trainer.derive_generator(cfg.seed, step, "train")
    out_path = args.out or os.path.join(args.run_dir, f"thresholds_step{step}.csv")
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch", "class_id", "u_low", "u_high", "u_mean", "pixel_count", "tau", "branch"])
        order = torch.randperm(len(data), generator=gen).tolist()
        for batch_idx, start in enumerate(range(0, len(data), cfg.batch_size)):
            picked = [order[i] for i in range(start, min(start + cfg.batch_size, len(data)))]
            images, _ = trainer._stack_batch(data, picked)
            with torch.no_grad():
                old_probs = F.softmax(snapshot.forward_with_taps(images).logits, dim=1)
            for d in pseudolabel.batch_thresholds(old_probs, old_channels, cfg.pseudo):
                s = d.stats
                writer.writerow([
                    batch_idx, id_of_channel[s.class_id],
                    "" if s.undefined else repr(s.u_low),
                    "" if s.undefined else repr(s.u_high),
                    "" if s.undefined else repr(s.u_mean),
                    s.pixel_count, repr(d.tau), d.branch,
                ])
    print(f"wrote {out_path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="incrseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train an experiment from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p_run.add_argument("--seed", type=int, default=None, help="override train.seed")
    p_run.add_argument("--steps", type=int, default=None, help="truncate the schedule (smoke tests)")
    p_run.set_defaults(func=_cmd_run)

    p_rep = sub.add_parser("report", help="print the step-wise mIoU table for a run")
    p_rep.add_argument("run_dir")
    p_rep.add_argument("--plot", action="store_true", help="also write miou_curve.png")
    p_rep.set_defaults(func=_cmd_report)

    p_gen = sub.add_parser("gen-data", help="write a synthetic dataset in VOC folder layout")
    p_gen.add_argument("out_dir")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--num-classes", type=int, default=5)
    p_gen.add_argument("--images-per-class", type=int, default=20)
    p_gen.add_argument("--height", type=int, default=64)
    p_gen.add_argument("--width", type=int, default=64)
    p_gen.set_defaults(func=_cmd_gen_data)

    p_thr = sub.add_parser("dump-thresholds", help="pseudo-label threshold debug CSV")
    p_thr.add_argument("run_dir")
    p_thr.add_argument("--step", type=int, required=True)
    p_thr.add_argument("-o", "--out", default=None)
    p_thr.set_defaults(func=_cmd_dump_thresholds)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except IncrsegError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Incremental class schedules and datasets.

A schedule partitions the (non-background) class IDs into ordered steps.
Background is always ID 0 and never appears in the schedule. Datasets are
plain lists of :class:`LabeledSample`; per-step subsets are selected under
the overlapped or disjoint protocol and relabelled so that only the current
step's classes stay annotated.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .errors import (
    ContractError,
    DataIOError,
    DuplicateClassError,
    InvalidMaskError,
    PairMismatchError,
    ScheduleMismatchError,
    SpecInfeasibleError,
)

BACKGROUND = 0


class Protocol(str, enum.Enum):
    OVERLAPPED = "overlapped"
    DISJOINT = "disjoint"


@dataclass(frozen=True)
class TaskSchedule:
    """Ordered class partition: step t exposes ``step_sizes[t]`` new classes."""

    class_order: tuple
    step_sizes: tuple
    protocol: Protocol

    @property
    def num_steps(self):
        return len(self.step_sizes)

    def _bounds(self, step):
        if not 0 <= step < self.num_steps:
            raise ContractError(f"step {step} outside schedule with {self.num_steps} steps")
        lo = sum(self.step_sizes[:step])
        return lo, lo + self.step_sizes[step]

    def new_classes(self, step):
        """Classes introduced at ``step`` (C^t)."""
        lo, hi = self._bounds(step)
        return tuple(self.class_order[lo:hi])

    def old_classes(self, step):
        """Classes learned before ``step`` (C^{0:t-1})."""
        lo, _ = self._bounds(step)
        return tuple(self.class_order[:lo])

    def seen_classes(self, step):
        """Classes learned up to and including ``step``."""
        _, hi = self._bounds(step)
        return tuple(self.class_order[:hi])

    def initial_classes(self):
        return self.new_classes(0)

    def truncated(self, num_steps):
        """Prefix schedule covering only the first ``num_steps`` steps."""
        if not 1 <= num_steps <= self.num_steps:
            raise ContractError(f"cannot truncate {self.num_steps}-step schedule to {num_steps}")
        keep = sum(self.step_sizes[:num_steps])
        return replace(self, class_order=self.class_order[:keep], step_sizes=self.step_sizes[:num_steps])


def build_schedule(class_order, step_sizes, protocol):
    """Validate and build a :class:`TaskSchedule`."""
    order = tuple(int(c) for c in class_order)
    sizes = tuple(int(s) for s in step_sizes)
    protocol = Protocol(protocol)
    if len(set(order)) != len(order):
        dupes = sorted({c for c in order if order.count(c) > 1})
        raise DuplicateClassError(f"duplicate class IDs in class_order: {dupes}")
    if any(c <= 0 for c in order):
        raise ContractError("class IDs must be positive; background 0 is implicit")
    if any(s <= 0 for s in sizes):
        raise ScheduleMismatchError(f"step_sizes must be positive, got {list(sizes)}")
    if sum(sizes) != len(order):
        raise ScheduleMismatchError(
            f"sum(step_sizes)={sum(sizes)} does not match {len(order)} classes"
        )
    return TaskSchedule(order, sizes, protocol)


@dataclass
class LabeledSample:
    """Image (float32, C x H x W, values in [0,1]) with integer mask (H x W)."""

    image: np.ndarray
    mask: np.ndarray
    stem: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 2:
            raise ContractError("image must be CxHxW and mask HxW")
        if self.image.shape[1:] != self.mask.shape:
            raise ContractError(
                f"image {self.image.shape[1:]} and mask {self.mask.shape} extents differ"
            )


def remap_labels(sample, schedule, step):
    """Zero out every pixel whose class is not introduced at ``step``."""
    current = set(schedule.new_classes(step))
    mask = np.where(np.isin(sample.mask, list(current)), sample.mask, BACKGROUND)
    return LabeledSample(image=sample.image, mask=mask.astype(sample.mask.dtype), stem=sample.stem)


def step_image_indices(samples, schedule, step):
    """Select the indices belonging to ``step`` under the schedule protocol.

    Overlapped: the image shows at least one pixel of a current class.
    Disjoint: additionally every non-background pixel must belong to a class
    already introduced by ``step`` (so each image lands exactly in the step
    of its newest class and the per-step sets are pairwise disjoint).
    """
    current = set(schedule.new_classes(step))
    seen = set(schedule.seen_classes(step)) | {BACKGROUND}
    picked = []
    for idx, sample in enumerate(samples):
        values = set(np.unique(sample.mask).tolist())
        if not values & current:
            continue
        if schedule.protocol is Protocol.DISJOINT and not values <= seen:
            continue
        picked.append(idx)
    return picked


# ---------------------------------------------------------------------------
# synthetic shape dataset


@dataclass(frozen=True)
class SynthSpec:
    """Layout of the generated shape dataset."""

    num_classes: int
    images_per_class: int
    height: int
    width: int
    max_shapes: int = 3
    min_radius: int = 0  # 0 means derive from the image extent
    max_radius: int = 0
    noise: float = 0.08

    def resolved(self):
        side = min(self.height, self.width)
        min_r = self.min_radius or max(3, side // 8)
        max_r = self.max_radius or max(min_r + 1, side // 4)
        return replace(self, min_radius=min_r, max_radius=max_r)


@dataclass(frozen=True)
class Shape:
    kind: str  # circle | square | triangle | diamond
    class_id: int
    cx: float
    cy: float
    radius: float


_SHAPE_KINDS = ("circle", "square", "triangle", "diamond")


def _class_style(class_id, num_classes):
    """Deterministic per-class shape family and RGB color."""
    kind = _SHAPE_KINDS[(class_id - 1) % len(_SHAPE_KINDS)]
    hue = ((class_id - 1) / max(num_classes, 1)) % 1.0
    # small hand-rolled HSV->RGB, s=0.75 v=0.9
    s, v = 0.75, 0.9
    i = int(hue * 6) % 6
    f = hue * 6 - int(hue * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return kind, np.array(rgb, dtype=np.float32)


def _shape_member(shape, ys, xs):
    dy = ys - shape.cy
    dx = xs - shape.cx
    r = shape.radius
    if shape.kind == "circle":
        return dx * dx + dy * dy <= r * r
    if shape.kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape.kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if shape.kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ContractError(f"unknown shape kind {shape.kind!r}")


def _check_feasible(spec):
    r = spec.min_radius
    side = min(spec.height, spec.width)
    if 2 * r + 1 > side:
        raise SpecInfeasibleError(
            f"min radius {r} cannot fit inside {spec.height}x{spec.width}"
        )
    if spec.max_shapes * (2 * r + 1) ** 2 > spec.height * spec.width:
        raise SpecInfeasibleError(
            f"{spec.max_shapes} shapes of radius >= {r} exceed the {spec.height}x{spec.width} area"
        )


def sample_scene(rng, spec, required_class):
    """Place 1..max_shapes non-overlapping shapes; the first shows ``required_class``."""
    spec = spec.resolved()
    shapes = []
    num_extra = int(rng.integers(0, spec.max_shapes))
    wanted = [required_class] + [
        int(rng.integers(1, spec.num_classes + 1)) for _ in range(num_extra)
    ]
    for class_id in wanted:
        kind, _ = _class_style(class_id, spec.num_classes)
        placed = False
        for _ in range(64):
            radius = float(rng.uniform(spec.min_radius, spec.max_radius))
            margin = radius + 1
            if spec.width - margin <= margin or spec.height - margin <= margin:
                continue
            cx = float(rng.uniform(margin, spec.width - margin))
            cy = float(rng.uniform(margin, spec.height - margin))
            # bounding-circle separation keeps shapes (and mask areas) disjoint
            if all(
                math.hypot(cx - s.cx, cy - s.cy) > radius + s.radius + 2 for s in shapes
            ):
                shapes.append(Shape(kind, class_id, cx, cy, radius))
                placed = True
                break
        if not placed and class_id == required_class:
            # shrink until the mandatory shape fits
            radius = float(spec.min_radius)
            margin = radius + 1
            cx = float(rng.uniform(margin, spec.width - margin))
            cy = float(rng.uniform(margin, spec.height - margin))
            shapes.append(Shape(kind, class_id, cx, cy, radius))
    return shapes


def rasterize_scene(rng, spec, shapes):
    """Exact rasterization: a pixel belongs to a shape iff its center does."""
    spec = spec.resolved()
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width]
    mask = np.zeros((spec.height, spec.width), dtype=np.int64)
    base = 0.3 + 0.1 * float(rng.uniform())
    image = np.full((3, spec.height, spec.width), base, dtype=np.float32)
    for shape in shapes:
        inside = _shape_member(shape, ys, xs)
        mask[inside] = shape.class_id
        _, color = _class_style(shape.class_id, spec.num_classes)
        jitter = rng.uniform(-0.05, 0.05, size=3).astype(np.float32)
        image[:, inside] = np.clip(color + jitter, 0.0, 1.0)[:, None]
    if spec.noise > 0:
        image += rng.uniform(-spec.noise, spec.noise, size=image.shape).astype(np.float32)
    return np.clip(image, 0.0, 1.0), mask


def generate_synthetic_dataset(seed, spec):
    """Deterministic shape dataset; every class appears in >= images_per_class images."""
    spec = spec.resolved()
    if spec.num_classes < 2:
        raise ContractError("need at least 2 classes")
    if spec.height < 16 or spec.width < 16:
        raise ContractError("image extent must be at least 16x16")
    _check_feasible(spec)
    rng = np.random.default_rng(seed)
    samples = []
    for class_id in range(1, spec.num_classes + 1):
        for k in range(spec.images_per_class):
            shapes = sample_scene(rng, spec, required_class=class_id)
            image, mask = rasterize_scene(rng, spec, shapes)
            samples.append(
                LabeledSample(image=image, mask=mask, stem=f"c{class_id:02d}_{k:04d}")
            )
    return samples


# ---------------------------------------------------------------------------
# VOC-style folder IO: root/images/*.png + root/masks/*.png


def save_voc_format(samples, root):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    for idx, sample in enumerate(samples):
        stem = sample.stem or f"img_{idx:05d}"
        rgb = np.clip(np.rint(sample.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb.transpose(1, 2, 0)).save(os.path.join(root, "images", stem + ".png"))
        Image.fromarray(sample.mask.astype(np.uint8), mode="L").save(
            os.path.join(root, "masks", stem + ".png")
        )


def load_voc_format(root, valid_classes=None):
    """Load paired images/masks sorted by stem.

    ``valid_classes``, when given, is the set of allowed non-background mask
    values; anything else raises INVALID_MASK naming the offending file.
    """
    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    if not os.path.isdir(img_dir) or not os.path.isdir(mask_dir):
        raise DataIOError(f"{root} lacks images/ and masks/ directories")
    img_stems = {os.path.splitext(f)[0] for f in os.listdir(img_dir) if f.endswith(".png")}
    mask_stems = {os.path.splitext(f)[0] for f in os.listdir(mask_dir) if f.endswith(".png")}
    if img_stems != mask_stems:
        missing = sorted(img_stems ^ mask_stems)
        raise PairMismatchError(f"unpaired stems: {missing}")
    allowed = None if valid_classes is None else set(valid_classes) | {BACKGROUND}
    samples = []
    for stem in sorted(img_stems):
        img_path = os.path.join(img_dir, stem + ".png")
        mask_path = os.path.join(mask_dir, stem + ".png")
        try:
            rgb = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
            mask = np.asarray(Image.open(mask_path).convert("L"), dtype=np.int64)
        except OSError as exc:
            raise DataIOError(f"cannot read sample {stem!r}: {exc}") from exc
        if allowed is not None:
            bad = sorted(set(np.unique(mask).tolist()) - allowed)
            if bad:
                raise InvalidMaskError(f"{mask_path} contains unknown classes {bad}")
        samples.append(LabeledSample(image=rgb.transpose(2, 0, 1), mask=mask, stem=stem))
    return samples

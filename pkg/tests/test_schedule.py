import math

import numpy as np
import pytest

from incrseg.errors import (
    ContractError,
    DataIOError,
    DuplicateClassError,
    InvalidMaskError,
    PairMismatchError,
    ScheduleMismatchError,
    SpecInfeasibleError,
)
from incrseg.schedule import (
    LabeledSample,
    Protocol,
    SynthSpec,
    build_schedule,
    generate_synthetic_dataset,
    load_voc_format,
    rasterize_scene,
    remap_labels,
    sample_scene,
    save_voc_format,
    step_image_indices,
)


def make_sample(mask, stem=""):
    mask = np.asarray(mask, dtype=np.int64)
    image = np.zeros((3,) + mask.shape, dtype=np.float32)
    return LabeledSample(image=image, mask=mask, stem=stem)


class TestBuildSchedule:
    def test_voc_15_1_shape(self):
        s = build_schedule(list(range(1, 21)), [15, 1, 1, 1, 1, 1], "overlapped")
        assert s.num_steps == 6
        assert s.new_classes(0) == tuple(range(1, 16))
        assert s.new_classes(5) == (20,)
        assert s.old_classes(1) == tuple(range(1, 16))

    def test_single_step_degenerate(self):
        s = build_schedule([1], [1], "disjoint")
        assert s.num_steps == 1
        assert s.seen_classes(0) == (1,)

    def test_unordered_ids_partition(self):
        # oracle: enumerate the partition by hand
        s = build_schedule([3, 1, 2], [2, 1], "overlapped")
        assert s.new_classes(0) == (3, 1)
        assert s.new_classes(1) == (2,)
        assert s.old_classes(1) == (3, 1)

    def test_steps_disjoint_for_every_t(self):
        s = build_schedule(list(range(1, 21)), [15, 1, 1, 1, 1, 1], "overlapped")
        for t in range(1, s.num_steps):
            assert not set(s.old_classes(t)) & set(s.new_classes(t))

    def test_sum_mismatch(self):
        with pytest.raises(ScheduleMismatchError):
            build_schedule([1, 2, 3], [2, 2], "overlapped")

    def test_duplicate_class(self):
        with pytest.raises(DuplicateClassError):
            build_schedule([1, 2, 2], [2, 1], "overlapped")

    def test_background_rejected(self):
        with pytest.raises(ContractError):
            build_schedule([0, 1], [1, 1], "overlapped")

    def test_truncated_prefix(self):
        s = build_schedule(list(range(1, 6)), [3, 1, 1], "overlapped")
        short = s.truncated(2)
        assert short.num_steps == 2
        assert short.class_order == (1, 2, 3, 4)


class TestRemapLabels:
    def test_future_class_zeroed_old_kept(self):
        s = build_schedule(list(range(1, 21)), [15, 1, 1, 1, 1, 1], "overlapped")
        sample = make_sample([[1, 16], [16, 0]])
        out = remap_labels(sample, s, 1)
        assert out.mask.tolist() == [[0, 16], [16, 0]]

    def test_background_fixed_point(self):
        s = build_schedule([1, 2], [1, 1], "overlapped")
        sample = make_sample(np.zeros((4, 4)))
        assert (remap_labels(sample, s, 0).mask == 0).all()

    def test_matches_per_pixel_oracle(self):
        rng = np.random.default_rng(0)
        s = build_schedule([1, 2, 3], [2, 1], "overlapped")
        for step in range(2):
            current = set(s.new_classes(step))
            mask = rng.integers(0, 4, size=(6, 6))
            out = remap_labels(make_sample(mask), s, step)
            for i in range(6):
                for j in range(6):
                    expect = mask[i, j] if mask[i, j] in current else 0
                    assert out.mask[i, j] == expect

    def test_output_range_property(self):
        rng = np.random.default_rng(1)
        s = build_schedule(list(range(1, 9)), [4, 2, 2], "disjoint")
        for step in range(3):
            mask = rng.integers(0, 9, size=(8, 8))
            out = remap_labels(make_sample(mask), s, step)
            assert set(np.unique(out.mask)) <= {0} | set(s.new_classes(step))

    def test_step_out_of_range(self):
        s = build_schedule([1], [1], "overlapped")
        with pytest.raises(ContractError):
            remap_labels(make_sample(np.zeros((2, 2))), s, 1)


class TestProtocols:
    def _samples(self):
        return [
            make_sample([[1, 0], [0, 0]]),   # only step-0 class
            make_sample([[1, 2], [0, 0]]),   # step-0 + step-1 classes
            make_sample([[2, 0], [0, 0]]),   # only step-1 class
            make_sample([[2, 3], [0, 0]]),   # step-1 + step-2
            make_sample([[0, 0], [0, 0]]),   # background only
        ]

    def test_overlapped_requires_current_pixel(self):
        s = build_schedule([1, 2, 3], [1, 1, 1], "overlapped")
        samples = self._samples()
        assert step_image_indices(samples, s, 0) == [0, 1]
        assert step_image_indices(samples, s, 1) == [1, 2, 3]
        assert step_image_indices(samples, s, 2) == [3]

    def test_disjoint_sets_pairwise_disjoint(self):
        s = build_schedule([1, 2, 3], [1, 1, 1], "disjoint")
        samples = self._samples()
        picked = [step_image_indices(samples, s, t) for t in range(3)]
        assert picked[0] == [0]
        assert picked[1] == [1, 2]   # image 3 contains future class 3
        assert picked[2] == [3]
        for a in range(3):
            for b in range(a + 1, 3):
                assert not set(picked[a]) & set(picked[b])

    def test_overlapped_sets_may_intersect(self):
        s = build_schedule([1, 2], [1, 1], "overlapped")
        samples = [make_sample([[1, 2], [0, 0]])]
        assert step_image_indices(samples, s, 0) == [0]
        assert step_image_indices(samples, s, 1) == [0]


class TestSyntheticDataset:
    SPEC = SynthSpec(num_classes=5, images_per_class=4, height=48, width=48)

    def test_deterministic_for_seed(self):
        a = generate_synthetic_dataset(7, self.SPEC)
        b = generate_synthetic_dataset(7, self.SPEC)
        assert len(a) == len(b)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.image, sb.image)
            assert np.array_equal(sa.mask, sb.mask)

    def test_different_seed_differs(self):
        a = generate_synthetic_dataset(7, self.SPEC)
        b = generate_synthetic_dataset(8, self.SPEC)
        assert any(not np.array_equal(sa.mask, sb.mask) for sa, sb in zip(a, b))

    def test_every_class_covered(self):
        spec = SynthSpec(num_classes=5, images_per_class=20, height=48, width=48)
        samples = generate_synthetic_dataset(3, spec)
        for class_id in range(1, 6):
            hits = sum(1 for s in samples if (s.mask == class_id).any())
            assert hits >= 20

    def test_cross_step_cooccurrence(self):
        # some image must mix an early class with a late class so the
        # overlapped protocol has images spanning future steps
        samples = generate_synthetic_dataset(3, self.SPEC)
        early, late = {1, 2, 3}, {4, 5}
        assert any(
            (set(np.unique(s.mask)) & early) and (set(np.unique(s.mask)) & late)
            for s in samples
        )

    def test_infeasible_spec(self):
        with pytest.raises(SpecInfeasibleError):
            generate_synthetic_dataset(
                0,
                SynthSpec(num_classes=3, images_per_class=1, height=16, width=16,
                          max_shapes=3, min_radius=8, max_radius=9),
            )

    def test_mask_values_within_classes(self):
        samples = generate_synthetic_dataset(11, self.SPEC)
        for s in samples:
            assert set(np.unique(s.mask)) <= set(range(6))

    def test_histogram_matches_analytic_area(self):
        # shapes never overlap, so per-class pixel counts must track the
        # analytic areas within a perimeter-sized rasterization error
        spec = self.SPEC.resolved()
        rng = np.random.default_rng(5)
        for trial in range(20):
            shapes = sample_scene(rng, spec, required_class=1 + trial % 5)
            _, mask = rasterize_scene(rng, spec, shapes)
            per_class_area = {}
            per_class_perim = {}
            for sh in shapes:
                r = sh.radius
                if sh.kind == "circle":
                    area, perim = math.pi * r * r, 2 * math.pi * r
                elif sh.kind == "square":
                    area, perim = 4 * r * r, 8 * r
                elif sh.kind == "triangle":
                    area, perim = 2 * r * r, 2 * r + 2 * math.hypot(r, 2 * r)
                else:  # diamond
                    area, perim = 2 * r * r, 4 * math.sqrt(2) * r
                per_class_area[sh.class_id] = per_class_area.get(sh.class_id, 0) + area
                per_class_perim[sh.class_id] = per_class_perim.get(sh.class_id, 0) + perim
            for class_id, area in per_class_area.items():
                count = int((mask == class_id).sum())
                tol = per_class_perim[class_id] + 8
                assert abs(count - area) <= tol, (trial, class_id, count, area, tol)


class TestVocFormat:
    def test_roundtrip_and_order(self, tmp_path):
        samples = generate_synthetic_dataset(2, SynthSpec(2, 2, 32, 32))
        save_voc_format(samples, tmp_path)
        loaded = load_voc_format(tmp_path)
        assert [s.stem for s in loaded] == sorted(s.stem for s in samples)
        by_stem = {s.stem: s for s in samples}
        for s in loaded:
            assert np.array_equal(s.mask, by_stem[s.stem].mask)
            assert s.image.shape == by_stem[s.stem].image.shape

    def test_missing_mask_names_stem(self, tmp_path):
        samples = generate_synthetic_dataset(2, SynthSpec(2, 1, 32, 32))
        save_voc_format(samples, tmp_path)
        victim = samples[0].stem
        (tmp_path / "masks" / f"{victim}.png").unlink()
        with pytest.raises(PairMismatchError, match=victim):
            load_voc_format(tmp_path)

    def test_invalid_mask_value(self, tmp_path):
        sample = make_sample(np.full((32, 32), 255), stem="bad")
        save_voc_format([sample], tmp_path)
        with pytest.raises(InvalidMaskError, match="bad"):
            load_voc_format(tmp_path, valid_classes=set(range(1, 21)))
        # value-set scan oracle: allowed values load fine
        ok = make_sample(np.full((32, 32), 7), stem="ok")
        save_voc_format([ok], tmp_path / "second")
        assert len(load_voc_format(tmp_path / "second", valid_classes=set(range(1, 21)))) == 1

    def test_unreadable_file(self, tmp_path):
        sample = make_sample(np.zeros((32, 32)), stem="x")
        save_voc_format([sample], tmp_path)
        (tmp_path / "images" / "x.png").write_bytes(b"not a png")
        with pytest.raises(DataIOError):
            load_voc_format(tmp_path)

    def test_missing_dirs(self, tmp_path):
        with pytest.raises(DataIOError):
            load_voc_format(tmp_path / "nope")

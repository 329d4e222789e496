import numpy as np
import pytest

from incrseg.errors import ContractError, ScheduleMismatchError
from incrseg.metrics import (
    ConfusionMatrix,
    build_step_report,
    iou_per_class,
    miou,
    miou_detailed,
    plot_miou_curve,
    read_report_csv,
    stepwise_report,
    write_report_csv,
)
from incrseg.schedule import build_schedule


def cm_from(counts):
    counts = np.asarray(counts)
    return ConfusionMatrix(counts.shape[0], counts)


class TestConfusionMatrix:
    def test_update_counts_pixels(self):
        cm = ConfusionMatrix(3)
        cm.update(np.array([0, 1, 1, 2]), np.array([0, 1, 2, 2]))
        assert cm.total == 4
        assert cm.counts[1, 2] == 1
        assert cm.counts[2, 2] == 1

    def test_out_of_range_rejected(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(ContractError):
            cm.update(np.array([3]), np.array([0]))

    def test_merge_is_additive(self):
        rng = np.random.default_rng(0)
        a = ConfusionMatrix(4).update(rng.integers(0, 4, 50), rng.integers(0, 4, 50))
        b = ConfusionMatrix(4).update(rng.integers(0, 4, 70), rng.integers(0, 4, 70))
        merged = a + b
        assert np.array_equal(merged.counts, a.counts + b.counts)

    def test_two_batches_equal_summed_score(self):
        rng = np.random.default_rng(1)
        gt1, pr1 = rng.integers(0, 3, 40), rng.integers(0, 3, 40)
        gt2, pr2 = rng.integers(0, 3, 40), rng.integers(0, 3, 40)
        split = ConfusionMatrix(3).update(gt1, pr1).merge(ConfusionMatrix(3).update(gt2, pr2))
        joint = ConfusionMatrix(3).update(np.concatenate([gt1, gt2]), np.concatenate([pr1, pr2]))
        assert np.array_equal(split.counts, joint.counts)
        assert miou(split, {0, 1, 2}) == miou(joint, {0, 1, 2})


class TestMiou:
    def test_diagonal_is_perfect(self):
        assert miou(cm_from(np.diag([5, 3, 2])), {0, 1, 2}) == 1.0

    def test_hand_confusion_case(self):
        # TP0=3, FP0=1, FN0=1 -> 3/5; symmetric for class 1 -> mean 0.6
        assert miou(cm_from([[3, 1], [1, 3]]), {0, 1}) == pytest.approx(0.6)

    def test_absent_class_excluded_and_flagged(self):
        counts = np.zeros((3, 3), dtype=int)
        counts[0, 0] = 10
        counts[1, 1] = 5
        value, excluded = miou_detailed(cm_from(counts), {0, 1, 2})
        assert excluded == {2}
        per_class = iou_per_class(cm_from(counts))
        assert per_class[2] is None
        assert value == pytest.approx(1.0)

    def test_empty_class_set_rejected(self):
        with pytest.raises(ContractError):
            miou(cm_from(np.eye(2, dtype=int)), set())

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        counts = rng.integers(0, 9, (4, 4))
        perm = np.array([2, 0, 3, 1])
        permuted = counts[perm][:, perm]
        assert miou(cm_from(counts), {0, 1, 2, 3}) == pytest.approx(
            miou(cm_from(permuted), {0, 1, 2, 3})
        )
        # single-class check under relabelling
        for c in range(4):
            assert miou(cm_from(counts), {c}) == pytest.approx(
                miou(cm_from(permuted), {int(np.where(perm == c)[0][0])})
            )


class TestStepwiseReport:
    SCHEDULE = build_schedule([1, 2, 3], [2, 1], "overlapped")

    def _cm(self, diag, off=0):
        counts = np.full((4, 4), off, dtype=int)
        np.fill_diagonal(counts, diag)
        return ConfusionMatrix(4, counts)

    def test_single_step_plain_summary(self):
        cm = self._cm(10)
        reports = stepwise_report([cm], self.SCHEDULE)
        assert len(reports) == 1
        r = reports[0]
        assert r.group_ious["incremented"] is None
        assert r.group_ious["initial"] == pytest.approx(miou(cm, {1, 2}))
        assert r.group_ious["all"] == pytest.approx(miou(cm, {0, 1, 2}))
        assert r.learned_so_far == frozenset({1, 2})

    def test_identical_matrices_zero_forgetting(self):
        cm = self._cm(8, off=1)
        reports = stepwise_report([cm, cm], self.SCHEDULE)
        assert reports[0].group_ious["initial"] == pytest.approx(reports[1].group_ious["initial"])

    def test_known_drop_matches_hand_ious(self):
        good = self._cm(10)
        dropped = self._cm(10)
        dropped.counts[1, 1] = 0
        dropped.counts[1, 0] = 10  # class 1 now predicted as background
        reports = stepwise_report([good, dropped], self.SCHEDULE)
        # hand arithmetic: class1 IoU 0, class2 IoU 1 -> initial mean 0.5
        assert reports[1].group_ious["initial"] == pytest.approx(0.5)
        assert reports[0].group_ious["initial"] == pytest.approx(1.0)

    def test_history_longer_than_schedule(self):
        cm = self._cm(1)
        with pytest.raises(ScheduleMismatchError):
            stepwise_report([cm, cm, cm], self.SCHEDULE)

    def test_background_excluded_when_disabled(self):
        counts = np.diag([5, 5, 5, 5])
        counts[0, 1] = 5  # background half-wrong
        cm = ConfusionMatrix(4, counts)
        with_bg = build_step_report(cm, self.SCHEDULE, 0, include_background=True)
        without = build_step_report(cm, self.SCHEDULE, 0, include_background=False)
        assert with_bg.group_ious["all"] < without.group_ious["all"]


class TestReportIO:
    def test_csv_roundtrip(self, tmp_path):
        schedule = build_schedule([1, 2, 3], [2, 1], "overlapped")
        counts = np.diag([4, 3, 2, 1])
        counts[1, 2] = 2
        report = build_step_report(ConfusionMatrix(4, counts), schedule, 1)
        path = tmp_path / "report.csv"
        write_report_csv(report, path)
        step, per_class, groups = read_report_csv(path)
        assert step == 1
        for c, iou in report.per_class_iou.items():
            assert per_class[c] == (pytest.approx(iou) if iou is not None else None)
        for g, iou in report.group_ious.items():
            assert groups[g] == (pytest.approx(iou) if iou is not None else None)

    def test_plot_written(self, tmp_path):
        schedule = build_schedule([1, 2, 3], [2, 1], "overlapped")
        cm = ConfusionMatrix(4, np.diag([4, 3, 2, 1]))
        reports = stepwise_report([cm, cm], schedule)
        out = plot_miou_curve(reports, schedule, tmp_path / "curve.png")
        assert (tmp_path / "curve.png").stat().st_size > 0

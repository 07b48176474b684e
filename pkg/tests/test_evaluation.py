import numpy as np
import pytest

from minircnn.boxes import Box, iou
from minircnn.errors import ContractError, NumericError
from minircnn.evaluation import (BenchmarkReport, EvalReport, benchmark_latency,
                                 evaluate, match)
from minircnn.model import Detection, DetectorConfig

from test_model import tiny_model, seeded_image


def det(x0, y0, x1, y1, cls, conf):
    return Detection(Box(x0, y0, x1, y1), cls, conf)


# ---------------------------------------------------------------------------
# match


def test_match_perfect():
    gt = [(0, Box(10, 10, 30, 30))]
    m = match([det(10, 10, 30, 30, 0, 0.9)], gt, 0.5)
    assert m.matched == [(0, 0)]
    assert m.false_positives == []
    assert m.missed == []


def test_match_wrong_class_is_confusion_and_fp():
    gt = [(1, Box(10, 10, 30, 30))]
    m = match([det(10, 10, 30, 30, 0, 0.9)], gt, 0.5)
    assert m.matched == []
    assert m.confused == [(0, 0)]
    assert m.false_positives == [0]
    assert m.missed == []


def test_match_each_gt_claimed_once():
    gt = [(0, Box(0, 0, 10, 10))]
    dets = [det(0, 0, 10, 10, 0, 0.9), det(0, 0, 10, 10, 0, 0.8)]
    m = match(dets, gt, 0.5)
    assert m.matched == [(0, 0)]
    assert m.false_positives == [1]


def test_match_greedy_order_replay():
    # randomized inputs vs a literal replay of the greedy rule
    rng = np.random.default_rng(3)
    for _ in range(50):
        n_gt = int(rng.integers(0, 6))
        n_det = int(rng.integers(0, 10))
        gt = []
        for _ in range(n_gt):
            x0, y0 = rng.uniform(0, 60, size=2)
            w, h = rng.uniform(5, 30, size=2)
            gt.append((int(rng.integers(0, 3)), Box(x0, y0, x0 + w, y0 + h)))
        dets = []
        for _ in range(n_det):
            x0, y0 = rng.uniform(0, 60, size=2)
            w, h = rng.uniform(5, 30, size=2)
            dets.append(det(x0, y0, x0 + w, y0 + h, int(rng.integers(0, 3)),
                            round(float(rng.uniform(0.1, 1.0)), 6)))
        got = match(dets, gt, 0.5)

        taken = set()
        want_matched = []
        for i in sorted(range(n_det), key=lambda i: (-dets[i].confidence, i)):
            cands = [(iou(dets[i].box, b), g) for g, (c, b) in enumerate(gt)
                     if g not in taken and c == dets[i].class_id]
            cands = [(v, g) for v, g in cands if v >= 0.5]
            if cands:
                g = max(cands, key=lambda t: (t[0], -t[1]))[1]
                taken.add(g)
                want_matched.append((i, g))
        assert got.matched == want_matched
        # bookkeeping: every det and gt lands in exactly one bucket
        assert len(got.matched) + len(got.false_positives) == n_det
        assert len(got.matched) + len(got.confused) + len(got.missed) == n_gt


def test_match_validates_iou_min():
    with pytest.raises(ContractError):
        match([], [], 0.0)


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_empty_model():
    samples = [(None, [(0, Box(0, 0, 10, 10))]),
               (None, [(1, Box(5, 5, 25, 25))])]
    report = evaluate(lambda x: [], samples, n_classes=2)
    assert report.accuracy == 0.0
    assert report.false_positives.sum() == 0
    assert report.confusion[0, 2] == 1  # both gts missed into background col
    assert report.confusion[1, 2] == 1
    assert report.mean_confidence is None


def test_evaluate_ground_truth_replay():
    rng = np.random.default_rng(7)
    samples = []
    for _ in range(10):
        gts = []
        for _ in range(int(rng.integers(1, 4))):
            x0, y0 = rng.uniform(0, 50, size=2)
            w, h = rng.uniform(5, 30, size=2)
            gts.append((int(rng.integers(0, 3)), Box(x0, y0, x0 + w, y0 + h)))
        samples.append((gts, gts))
    replay = lambda gts: [Detection(b, c, 1.0) for c, b in gts]
    report = evaluate(replay, samples, n_classes=3)
    assert report.accuracy == 1.0
    assert report.false_positives.sum() == 0
    assert report.mean_confidence == 1.0
    # rows reconcile with per-class gt counts
    for c in range(3):
        assert report.confusion[c].sum() == report.gt_count[c]
    assert np.trace(report.confusion[:3, :3]) == report.gt_count.sum()


def test_evaluate_confusion_rows_reconcile():
    gt = [(0, Box(0, 0, 20, 20)), (1, Box(40, 40, 60, 60))]
    # one wrong-class hit on gt0, one pure false positive, gt1 missed
    dets = [det(0, 0, 20, 20, 1, 0.9), det(80, 80, 99, 99, 0, 0.8)]
    report = evaluate(lambda x: dets, [(None, gt)], n_classes=2)
    assert report.confusion[0, 1] == 1      # true 0 predicted 1
    assert report.confusion[1, 2] == 1      # gt1 missed
    assert report.confusion[2, 0] == 1      # background predicted as 0
    for c in range(2):
        assert report.confusion[c].sum() == report.gt_count[c]
    assert report.accuracy == 0.0
    assert report.false_positives.sum() == 2


def test_evaluate_records_errors():
    calls = {"n": 0}

    def flaky(x):
        calls["n"] += 1
        if calls["n"] == 1:
            raise NumericError("boom")
        return []

    samples = [(None, [(0, Box(0, 0, 5, 5))]), (None, [(0, Box(0, 0, 5, 5))])]
    report = evaluate(flaky, samples, n_classes=1)
    assert report.errors == 1
    assert report.accuracy == 0.0


def test_evaluate_accuracy_monotone_in_iou_min():
    rng = np.random.default_rng(11)
    samples = []
    for _ in range(15):
        x0, y0 = rng.uniform(0, 40, size=2)
        w, h = rng.uniform(10, 40, size=2)
        b = Box(x0, y0, x0 + w, y0 + h)
        jitter = rng.uniform(-4, 4, size=4)
        d = Box(b.xmin + jitter[0], b.ymin + jitter[1],
                max(b.xmax + jitter[2], b.xmin + jitter[0] + 1),
                max(b.ymax + jitter[3], b.ymin + jitter[1] + 1))
        samples.append(([Detection(d, 0, 0.9)], [(0, b)]))
    accs = [evaluate(lambda dets: dets, samples, n_classes=1, iou_min=t).accuracy
            for t in (0.3, 0.5, 0.7, 0.9)]
    assert all(a >= b for a, b in zip(accs, accs[1:]))


def test_evaluate_report_serialization():
    gt = [(0, Box(0, 0, 10, 10))]
    report = evaluate(lambda x: [det(0, 0, 10, 10, 0, 0.75)], [(None, gt)],
                      n_classes=2, classes=("ka", "kha"))
    text = report.to_text()
    assert "accuracy: 1.0000" in text
    assert "ka" in text
    tsv = report.to_tsv()
    assert "accuracy\t1.0" in tsv
    assert tsv.startswith("class\tgt\tmatched\tfalse_positives")


def test_evaluate_needs_samples():
    with pytest.raises(ContractError):
        evaluate(lambda x: [], [], n_classes=1)


# ---------------------------------------------------------------------------
# benchmark


def test_benchmark_sample_count_and_order_stats():
    model = tiny_model()
    img = seeded_image()
    report = benchmark_latency(model, img, warmup=1, runs=5)
    assert len(report.samples_ms) == 5
    assert report.total.min <= report.total.median <= report.total.max
    assert set(report.stages_ms) == {"backbone", "rpn_proposals", "roi_head"}
    tsv = report.to_tsv()
    assert "runs\t5" in tsv
    assert tsv.startswith("stage\tms")


def test_benchmark_stage_sum_close_to_total():
    model = tiny_model()
    img = seeded_image()
    report = benchmark_latency(model, img, warmup=2, runs=8)
    stage_sum = sum(report.stages_ms.values())
    assert stage_sum <= report.total.mean
    assert stage_sum >= 0.80 * report.total.mean


def test_benchmark_requires_three_runs():
    with pytest.raises(ContractError):
        benchmark_latency(tiny_model(), seeded_image(), warmup=0, runs=2)

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tubeloc.core import Tube
from tubeloc.detect import Detection
from tubeloc.evaluation import (GroundTruthInstance, MatchPolicy, auc_roc, average_precision, best_per_video,
                                clip_classification_map, corloc, mean_average_precision, mean_iou, overlap,
                                ranking_ap, read_gt, recall_at, recall_curve, roc_points, top_detections,
                                write_gt)
from tubeloc.synth import oracle_ap, oracle_best_overlap

BOX = np.array([10.0, 10.0, 50.0, 90.0])
FAR = np.array([200.0, 10.0, 240.0, 90.0])


def tube(vid, box=BOX, start=0, n=10):
    return Tube(vid, start, np.tile(box, (n, 1)))


def gt(vid, label="a", box=BOX, start=0, n=10):
    return GroundTruthInstance(vid, label, tube(vid, box, start, n))


def det(vid, score, box=BOX, label="a", start=0, n=10):
    return Detection(vid, label, tube(vid, box, start, n), score)


def random_instance(rng, n_videos=4, n_det=12):
    gts, dets = [], []
    for v in range(n_videos):
        vid = f"v{v}"
        for _ in range(rng.integers(1, 3)):
            s = int(rng.integers(0, 10))
            gts.append(GroundTruthInstance(vid, "a", tube(vid, BOX + rng.uniform(-10, 10, 4) * [1, 1, 0, 0], s,
                                                           int(rng.integers(5, 15)))))
    for _ in range(n_det):
        vid = f"v{rng.integers(0, n_videos)}"
        s = int(rng.integers(0, 12))
        shift = rng.uniform(-30, 30)
        dets.append(Detection(vid, "a", tube(vid, BOX + [shift, 0, shift, 0], s, int(rng.integers(4, 15))),
                              float(rng.integers(0, 6))))  # ties exercise the canonical order
    return dets, gts


def test_ap_examples():
    p = MatchPolicy(0.5)
    assert average_precision([det("v", 1.0)], [gt("v")], p) == 1.0
    two = [det("v", 2.0, FAR), det("v", 1.0)]
    assert average_precision(two, [gt("v")], p) == pytest.approx(0.5)
    assert average_precision([], [gt("v")], p) == 0.0
    for dets in ([det("v", 1.0)], two, []):
        assert oracle_ap(dets, [gt("v")], p) == pytest.approx(average_precision(dets, [gt("v")], p), abs=1e-12)


def test_ap_exhaustive_permutation_oracle():
    # with one GT, AP = precision at the rank of the first TP; check every score ordering
    items = [BOX, FAR, FAR + [5, 0, 5, 0]]
    for perm in itertools.permutations(range(3)):
        dets = [det("v", float(3 - r), items[i]) for r, i in enumerate(perm)]
        rank = perm.index(0) + 1
        assert average_precision(dets, [gt("v")]) == pytest.approx(1 / rank)


def test_duplicates_count_as_false_positives():
    dets = [det("v", 2.0), det("v", 1.0)]
    assert average_precision(dets, [gt("v")]) == 1.0
    tp_dup = average_precision([det("v", 2.0), det("v", 1.0), det("w", 0.5)], [gt("v"), gt("w")])
    assert tp_dup == pytest.approx(0.5 * (1 + 2 / 3))


@pytest.mark.parametrize("seed", range(10))
def test_ap_matches_oracle_random(seed):
    rng = np.random.default_rng(seed)
    dets, gts = random_instance(rng)
    for mode in ("trimmed", "st"):
        p = MatchPolicy(0.3, mode)
        assert average_precision(dets, gts, p) == pytest.approx(oracle_ap(dets, gts, p), abs=1e-12)


@given(st.integers(0, 10_000))
def test_ap_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    dets, gts = random_instance(rng)
    for d in dets:
        d.score += rng.uniform(0, 0.5)  # break ties
    base = average_precision(dets, gts, MatchPolicy(0.3))
    moved = [Detection(d.video_id, d.label, d.tube, float(np.exp(d.score) * 3 - 1)) for d in dets]
    assert average_precision(moved, gts, MatchPolicy(0.3)) == base
    assert 0.0 <= base <= 1.0


def test_map_and_eleven_point():
    gts = [gt("v", "a"), gt("w", "b")]
    dets = [det("v", 1.0, label="a"), det("w", 1.0, FAR, label="b")]
    m, per = mean_average_precision(dets, gts)
    assert per == {"a": 1.0, "b": 0.0} and m == 0.5
    assert average_precision([det("v", 1.0)], [gt("v")], MatchPolicy(0.5, eleven_point=True)) == 1.0


def test_policy_validation():
    with pytest.raises(ValueError):
        MatchPolicy(0.0)
    with pytest.raises(ValueError):
        MatchPolicy(0.5, "bogus")


def test_daly_mode_equals_st_with_all_keyframes(rng):
    dets, gts = random_instance(rng)
    dense = [GroundTruthInstance(g.video_id, g.label, g.tube, tuple(range(g.tube.start, g.tube.end + 1)))
             for g in gts]
    for d in dets:
        for g, k in zip(gts, dense):
            assert overlap(d.tube, k, "daly") == overlap(d.tube, g, "st")


def test_gt_round_trip_with_keyframes(tmp_path):
    boxes = np.array([BOX, BOX + 5, BOX + 10])
    rec = {"video_id": "v", "class": "a", "start": 2, "end": 9, "keyframes": [2, 5, 8], "boxes": boxes.tolist()}
    g = GroundTruthInstance.from_record(rec)
    np.testing.assert_array_equal(g.tube.box_at(4), BOX)
    np.testing.assert_array_equal(g.tube.box_at(9), BOX + 10)
    write_gt(tmp_path / "g.jsonl", [g, gt("w")])
    back = read_gt(tmp_path / "g.jsonl")
    assert back[0].keyframes == (2, 5, 8) and back[0].tube.same_as(g.tube)
    assert back[1].tube.same_as(gt("w").tube)
    with pytest.raises(ValueError):
        GroundTruthInstance.from_record({**rec, "keyframes": [5, 2, 8]})


def test_recall_examples():
    gts = [gt("v"), gt("w")]
    assert recall_at({"v": [gt("v").tube], "w": [gt("w").tube]}, gts) == 1.0
    assert recall_at({}, gts) == 0.0
    assert recall_at({"v": [tube("v")], "w": [tube("w", FAR)]}, gts) == 0.5


def test_recall_curve_shapes(rng):
    gts = [gt(f"v{i}", box=BOX + rng.uniform(-5, 5)) for i in range(6)]
    props = {f"v{i}": [tube(f"v{i}", BOX + rng.uniform(-25, 25)) for _ in range(4)] for i in range(6)}
    c = recall_curve(props, gts, thetas=[0.01, 0.2, 0.5, 0.8])
    assert c["recall_by_budget"][0] == 0.0
    assert np.all(np.diff(c["recall_by_budget"]) >= 0)
    assert np.all(np.diff(c["recall_by_theta"]) <= 0)
    # replay against the exhaustive oracle
    for b, r in zip(c["budgets"], c["recall_by_budget"]):
        best = np.array([oracle_best_overlap(props[g.video_id][:b], [g])[0] for g in gts])
        assert r == np.mean(best >= 0.5)
    assert recall_at(props, gts) >= recall_at(props, gts, budget=1)


def test_oracle_best_overlap():
    g = gt("v")
    assert oracle_best_overlap([tube("v", FAR), g.tube], [g])[0] == 1.0
    assert oracle_best_overlap([], [g, gt("w")]).tolist() == [0.0, 0.0]


def test_corloc_examples():
    gts = [gt("v"), gt("w")]
    assert corloc({"v": tube("v"), "w": tube("w")}, gts, "a") == 1.0
    assert corloc({"v": tube("v", FAR), "w": tube("w", FAR)}, gts, "a") == 0.0
    assert corloc({"v": tube("v")}, gts, "b") == 0.0


def test_mean_iou_examples():
    gts = [gt("v"), gt("w")]
    assert mean_iou({("v", "a"): tube("v"), ("w", "a"): tube("w")}, gts) == {"a": 1.0}
    assert mean_iou({("v", "a"): tube("v")}, gts) == {"a": 0.5}


def wilcoxon(pos, neg):
    return np.mean([float(p > n) + 0.5 * float(p == n) for p in pos for n in neg])


def test_auc_perfect():
    gts = [gt("v", "a"), gt("w", "b")]
    dets = [det("v", 2.0, label="a"), det("w", 2.0, label="b"), det("v", -1.0, label="b"), det("w", -1.0, label="a")]
    top = top_detections(dets, ["v", "w"], ["a", "b"])
    assert auc_roc(top, gts) == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_auc_full_range_is_wilcoxon(seed):
    rng = np.random.default_rng(seed)
    vids, classes = [f"v{i}" for i in range(8)], ["a", "b", "c"]
    gts = [gt(v, classes[i % 3]) for i, v in enumerate(vids)]
    scores = rng.permutation(24).astype(float)
    top, k = {}, 0
    for v in vids:
        for c in classes:
            box = BOX if rng.random() < 0.8 else FAR
            top[(v, c)] = (scores[k], tube(v, box))
            k += 1
    good = {(g.video_id, g.label) for g in gts if overlap(top[(g.video_id, g.label)][1], g, "trimmed") >= 0.5}
    pos = [top[k][0] for k in good]
    neg = [top[k][0] for k in top if k not in good]
    # every annotated pair is positive for TPR; a mislocalised one is a miss that never counts as TP
    n_annot = len(gts)
    expected = wilcoxon(pos, neg) * len(pos) / n_annot
    assert auc_roc(top, gts, fpr_max=1.0) == pytest.approx(expected, abs=1e-12)


def test_auc_random_scores_near_half():
    rng = np.random.default_rng(1)
    vids = [f"v{i}" for i in range(400)]
    gts = [gt(v, "a") for v in vids[:200]]
    top = {(v, "a"): (float(rng.random()), tube(v)) for v in vids}
    assert abs(auc_roc(top, gts, fpr_max=1.0) - 0.5) < 0.06
    fpr, tpr = roc_points(top, gts)
    assert fpr[-1] == 1.0 and tpr[-1] == 1.0


def test_best_and_top_detections():
    dets = [det("v", 1.0), det("v", 3.0, FAR), det("w", 0.5, label="b")]
    best = best_per_video(dets)
    assert best[("v", "a")].score == 3.0
    top = top_detections(dets, ["v", "w"], ["a", "b"])
    assert top[("w", "a")][0] == -np.inf and top[("w", "b")][0] == 0.5


def ranking_ap_oracle(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    hits, total = 0, 0.0
    for r, i in enumerate(order, 1):
        if labels[i]:
            hits += 1
            total += hits / r
    return total / max(sum(labels), 1)


def test_clip_map():
    labels = np.array([[1, 0], [0, 1], [1, 0], [0, 0]], dtype=bool)
    assert clip_classification_map(labels.astype(float), labels)[0] == 1.0
    excl = np.zeros_like(labels)
    excl[:, 1] = True
    m, per = clip_classification_map(labels.astype(float), labels, excl)
    assert list(per) == [0] and m == 1.0
    rng = np.random.default_rng(2)
    s, l = rng.random((30, 3)), rng.random((30, 3)) < 0.3
    m, per = clip_classification_map(s, l)
    for c, ap in per.items():
        assert ap == pytest.approx(ranking_ap_oracle(list(s[:, c]), list(l[:, c])), abs=1e-12)
    assert ranking_ap(np.array([1.0]), np.array([False])) == 0.0

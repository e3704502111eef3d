import numpy as np
import pytest

from tubeloc import svm
from tubeloc.core import Tube
from tubeloc.encoder import TrajectorySet, fit_codebooks, trajectories_in_tube, tube_descriptor
from tubeloc.mil import (LabeledVideo, MilConfig, MilState, init_selection, mil_train,
                         mine_hard_negatives, refold, two_stage_train)


def make_videos(rng, n_pos=8, n_neg=8, n_tubes=3, d=6):
    """Positives hide one class tube (direction +e0) among background tubes."""
    out = []
    for i in range(n_pos):
        X = rng.normal(0, 1, (n_tubes, d))
        X[i % n_tubes, 0] += 4.0
        out.append(LabeledVideo(f"p{i:02d}", {"a"}, X, rng.uniform(0, 1, n_tubes)))
    for i in range(n_neg):
        out.append(LabeledVideo(f"n{i:02d}", {"b"}, rng.normal(0, 1, (n_tubes, d)), rng.uniform(0, 1, n_tubes)))
    return out


def test_init_selection():
    a = LabeledVideo("a", {"x"}, np.zeros((2, 2)), [0.9, 0.5])
    b = LabeledVideo("b", {"x"}, np.zeros((1, 2)), [0.2])
    c = LabeledVideo("c", set(), np.zeros((3, 2)), [0.1, 0.7, 0.7])
    s = init_selection([a, b], [c])
    assert s.positives == {"a": 0, "b": 0}
    assert s.negatives == {("c", 1)}


def test_labeled_video_validation():
    with pytest.raises(ValueError):
        LabeledVideo("a", {"x"}, np.zeros((0, 3)), [])
    with pytest.raises(ValueError):
        LabeledVideo("a", {"x"}, np.zeros((2, 3)), [0.1])


def fixed_model(w, b):
    return svm.LinearModel(weights=np.asarray(w, dtype=float), bias=float(b), C=1.0)


def test_hard_negative_rules():
    neg = [LabeledVideo("n", set(), np.array([[-5.0], [-3.0], [1.0]]), [0.1, 0.2, 0.3])]
    pos = [LabeledVideo("p", {"x"}, np.array([[3.0]]), [1.0])]
    by_id = {v.video_id: v for v in pos + neg}
    state = MilState({"p": 0}, {("n", 0)})
    cfg = MilConfig()
    # decision = x + 1: margins -4, -2, 2 -> only the last is hard
    m = fixed_model([1.0], 1.0)
    after = mine_hard_negatives(m, state, neg, 1, cfg, by_id)
    assert after.negatives == {("n", 0), ("n", 2)}
    same = mine_hard_negatives(m, state, neg, 0, cfg, by_id)
    assert same.negatives == state.negatives and same.model is m
    easy = mine_hard_negatives(fixed_model([1.0], -10.0), state, neg, 1, cfg, by_id)
    assert easy.negatives == state.negatives
    # margin exactly 0 is admitted
    zero = mine_hard_negatives(fixed_model([1.0], 3.0), state, neg, 1, cfg, by_id)
    assert ("n", 1) in zero.negatives


def test_refold_sizes_and_determinism():
    ids = [f"v{i}" for i in range(8)]
    folds = refold(ids, 4, seed=1)
    assert [len(f) for f in folds] == [2, 2, 2, 2]
    assert sorted(v for f in folds for v in f) == ids
    nine = refold([f"v{i}" for i in range(9)], 4, seed=1)
    assert sorted(len(f) for f in nine) == [2, 2, 2, 3]
    assert refold(ids, 4, 5) == refold(list(reversed(ids)), 4, 5)
    assert refold(ids, 4, 5) != refold(ids, 4, 6)


def test_refold_lowers_k(caplog):
    folds = refold(["a", "b"], 4, 0)
    assert len(folds) == 2
    assert "folds" in caplog.text


def test_mil_recovers_planted_tubes(rng):
    videos = make_videos(rng)
    res = mil_train("a", videos, MilConfig(folds=4, iterations=4))
    planted = {v.video_id: int(v.descriptors[:, 0].argmax()) for v in videos if "a" in v.labels}
    assert res.state.positives == planted
    assert res.model.duality_gap <= 1e-6


def test_mil_invariants(rng):
    videos = make_videos(rng, n_pos=9)
    cfg = MilConfig(folds=4, iterations=3)
    res = mil_train("a", videos, cfg)
    pos_ids = {v.video_id for v in videos if "a" in v.labels}
    neg_keys = {(v.video_id, t) for v in videos if "a" not in v.labels for t in range(v.n_tubes)}
    for sel in res.selections:
        assert set(sel) == pos_ids
    assert res.state.negatives <= neg_keys
    for folds in res.fold_log:
        held_all = set()
        for train_ids, held in folds:
            assert not train_ids & held  # never scored by a model that saw it
            held_all |= held
        assert held_all == pos_ids


def test_negatives_grow_within_rounds(rng):
    videos = make_videos(rng)
    pos = [v for v in videos if "a" in v.labels]
    neg = [v for v in videos if "a" not in v.labels]
    by_id = {v.video_id: v for v in videos}
    state = init_selection(pos, neg)
    cfg = MilConfig()
    sizes = [len(state.negatives)]
    model = svm.train([by_id[v].descriptors[t] for v, t in state.positives.items()],
                      [by_id[v].descriptors[t] for v, t in state.negatives])
    for _ in range(3):
        state = mine_hard_negatives(model, state, neg, 1, cfg, by_id)
        model = state.model
        sizes.append(len(state.negatives))
    assert sizes == sorted(sizes)


def test_single_tube_videos_fixed(rng):
    videos = [LabeledVideo(f"p{i}", {"a"}, rng.normal(size=(1, 3)), [0.5]) for i in range(5)]
    videos += [LabeledVideo(f"n{i}", set(), rng.normal(size=(2, 3)), [0.5, 0.4]) for i in range(5)]
    res = mil_train("a", videos, MilConfig(folds=2, iterations=3))
    assert all(sel == {f"p{i}": 0 for i in range(5)} for sel in res.selections)


def test_k1_scores_its_own_training_set(rng):
    videos = make_videos(rng)
    res = mil_train("a", videos, MilConfig(folds=1, iterations=2))
    for folds in res.fold_log:
        assert len(folds) == 1
        train_ids, held = folds[0]
        assert train_ids == held


def test_corloc_trace_and_determinism(rng):
    videos = make_videos(rng)
    planted = {v.video_id: int(v.descriptors[:, 0].argmax()) for v in videos if "a" in v.labels}
    fn = lambda sel: float(np.mean([sel[v] == t for v, t in planted.items()]))
    a = mil_train("a", videos, MilConfig(iterations=3), corloc_fn=fn)
    b = mil_train("a", videos, MilConfig(iterations=3), corloc_fn=fn)
    assert len(a.corloc_trace) == 4
    assert a.corloc_trace == b.corloc_trace
    assert np.array_equal(a.model.weights, b.model.weights)


def test_empty_sides_rejected(rng):
    videos = [v for v in make_videos(rng) if "a" in v.labels]
    with pytest.raises(ValueError):
        mil_train("a", videos)


def test_two_stage_with_whole_segments_equals_single_stage(rng):
    videos = make_videos(rng)
    by_id = {v.video_id: v for v in videos}
    cfg = MilConfig(iterations=2)
    model, res = two_stage_train("a", videos, cfg, lambda v, t: by_id[v].descriptors[t])
    single = mil_train("a", videos, cfg)
    probe = rng.normal(size=(10, 6))
    np.testing.assert_allclose(svm.decision(model, probe), svm.decision(single.model, probe), atol=1e-9)


def test_two_stage_empty_segment_descriptor(rng):
    videos = make_videos(rng)
    model, _ = two_stage_train("a", videos, MilConfig(iterations=1), lambda v, t: np.zeros(6))
    assert np.all(np.isfinite(model.weights))


def test_two_stage_missing_segment(rng):
    videos = make_videos(rng)

    def missing(v, t):
        raise KeyError(v)

    with pytest.raises(KeyError):
        two_stage_train("a", videos, MilConfig(iterations=1), missing)


def test_segment_restriction_uses_in_segment_trajectories(rng):
    # action occupies frames 14..25 of 40 (30%)
    n = 300
    dims = {"HOG": 4, "HOF": 4, "MBHx": 4, "MBHy": 4}
    trajs = TrajectorySet("v", rng.integers(0, 40, n), rng.uniform(0, 100, (n, 2)),
                          {c: rng.normal(size=(n, d)) for c, d in dims.items()})
    books = fit_codebooks(trajs.channels, K=2)
    tube = Tube("v", 0, np.tile([10.0, 10.0, 90.0, 90.0], (40, 1)))
    mask = trajectories_in_tube(tube, trajs) & (trajs.start_frame >= 14) & (trajs.start_frame <= 25)
    only = tube_descriptor(Tube("v", 0, tube.boxes), trajs.subset(mask), books)
    np.testing.assert_allclose(tube_descriptor(tube, trajs, books, (14, 25)), only, atol=1e-12)

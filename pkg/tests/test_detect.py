import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tubeloc import svm
from tubeloc.core import TemporalSegment, Tube
from tubeloc.detect import (DALY_EXTRA, DetectConfig, Detection, ShotList, WindowSpec, detect_video,
                            naive_shot_split, penalized_score, read_detections, read_shots, score_tube,
                            sliding_windows, split_at_shots, temporal_nms, write_detections, write_shots)
from tubeloc.encoder import TrajectorySet, fit_codebooks

from strategies import synthetic_field


def windows_oracle(start, end, lengths, stride):
    n = end - start + 1
    out = set()
    for L in lengths:
        if L > n:
            continue
        s = start
        while s + L - 1 <= end:
            out.add((s, s + L - 1))
            s += stride
        out.add((end - L + 1, end))
    if min(lengths) > n:
        out.add((start, end))
    return out


def as_set(ws):
    return {(w.start, w.end) for w in ws}


def test_window_examples():
    assert as_set(sliding_windows((0, 99), WindowSpec((100,)))) == {(0, 99)}
    w = sliding_windows((0, 39), WindowSpec((20,), stride=10))
    assert as_set(w) == {(0, 19), (10, 29), (20, 39)} and len(w) == 3
    assert as_set(sliding_windows((5, 19), WindowSpec((20, 30)))) == {(5, 19)}


@given(st.integers(0, 50), st.integers(1, 400), st.integers(1, 40),
       st.lists(st.integers(5, 300), min_size=1, max_size=6, unique=True))
def test_windows_match_oracle(start, n, stride, lengths):
    spec = WindowSpec(tuple(sorted(lengths)), stride)
    ws = sliding_windows((start, start + n - 1), spec)
    assert as_set(ws) == windows_oracle(start, start + n - 1, spec.lengths, stride)
    assert len(ws) == len(as_set(ws))
    assert all(start <= w.start and w.end <= start + n - 1 for w in ws)


def test_window_spec_validation_and_presets(tmp_path):
    with pytest.raises(ValueError):
        WindowSpec((30, 20))
    with pytest.raises(ValueError):
        WindowSpec((20,), stride=0)
    with pytest.raises(ValueError):
        WindowSpec((20,), alpha=-1)
    daly = WindowSpec.preset("daly")
    assert daly.lengths[-1] == 12000 and 3600 in DALY_EXTRA
    (tmp_path / "w.txt").write_text("10 25\n")
    assert WindowSpec.preset(str(tmp_path / "w.txt")).lengths == (10, 25)


def test_penalty_examples():
    assert penalized_score(2.0, 20, 20.0) == 1.0
    assert penalized_score(1.0, 100, 20.0) - penalized_score(1.0, 20, 20.0) == pytest.approx(0.8)
    assert penalized_score(1.7, 33, 0.0) == 1.7


@given(st.floats(-5, 5), st.integers(1, 1000), st.integers(1, 1000), st.floats(0.1, 50))
def test_penalty_increasing_in_length(dv, a, b, alpha):
    if a == b:
        return
    lo, hi = sorted((a, b))
    assert penalized_score(dv, lo, alpha) < penalized_score(dv, hi, alpha)


def test_score_tube_zero_descriptor_is_bias():
    m = svm.LinearModel(weights=np.array([1.0, -2.0]), bias=0.25, C=1.0)
    assert score_tube(m, np.zeros(2)) == 0.25


def det(start, end, score, tube=0, label="a"):
    return Detection("v", label, Tube("v", start, np.tile([0.0, 0, 5, 5], (end - start + 1, 1))), score,
                     meta={"tube": tube})


def test_temporal_nms():
    ds = [det(0, 19, 1.0), det(5, 24, 0.9), det(30, 49, 0.5), det(5, 24, 0.8, tube=1), det(0, 19, 0.7, label="b")]
    kept = temporal_nms(ds, 0.3)
    assert [(d.tube.start, d.label, d.meta["tube"]) for d in kept] == [(0, "a", 0), (5, "a", 1), (0, "b", 0), (30, "a", 0)]


def test_naive_shot_split():
    assert naive_shot_split(np.zeros(10), 0.5).shots == (TemporalSegment(0, 9),)
    d = np.zeros(10)
    d[4] = 0.9
    assert naive_shot_split(d, 0.5).shots == (TemporalSegment(0, 3), TemporalSegment(4, 9))
    every = naive_shot_split(np.ones(4), 0.5)
    assert every.shots == tuple(TemporalSegment(k, k) for k in range(4))


def test_shot_list_validation():
    with pytest.raises(ValueError):
        ShotList("v", (TemporalSegment(0, 3), TemporalSegment(5, 9)), 10)
    with pytest.raises(ValueError):
        ShotList("v", (TemporalSegment(0, 3),), 10)


def test_split_at_shots():
    shots = ShotList("v", (TemporalSegment(0, 4), TemporalSegment(5, 9)), 10)
    t = Tube("v", 2, np.tile([0.0, 0, 5, 5], (6, 1)))
    pieces = split_at_shots([t], shots)
    assert [(k, p.start, p.end) for k, p in pieces] == [(0, 2, 4), (1, 5, 7)]
    inside = Tube("v", 6, np.tile([0.0, 0, 5, 5], (3, 1)))
    assert split_at_shots([inside], shots)[0][1] is inside


def test_file_round_trips(tmp_path):
    ds = [det(0, 19, 1.5), det(3, 9, -0.25, tube=2)]
    write_detections(tmp_path / "d.jsonl", ds)
    back = read_detections(tmp_path / "d.jsonl")
    assert [(d.score, d.meta, d.tube.start, d.tube.end) for d in back] == [(d.score, d.meta, d.tube.start, d.tube.end) for d in ds]
    assert all(a.tube.same_as(b.tube) for a, b in zip(back, ds))
    shots = [ShotList("v", (TemporalSegment(0, 4), TemporalSegment(5, 9)), 10)]
    write_shots(tmp_path / "s.jsonl", shots)
    assert read_shots(tmp_path / "s.jsonl")["v"] == shots[0]


@pytest.fixture
def scene(rng):
    n = 60
    actor = np.array([40.0, 40.0, 100.0, 160.0])
    field = synthetic_field(np.tile(actor, (1, n, 1)), width=240, height=200)
    m = 400
    frames = rng.integers(0, n, m)
    pts = rng.uniform(0, 200, (m, 2))
    inside = (pts[:, 0] > 40) & (pts[:, 0] < 100) & (pts[:, 1] > 40) & (pts[:, 1] < 160) & (frames >= 20) & (frames < 40)
    ch = {}
    for c in ("HOG", "HOF", "MBHx", "MBHy"):
        X = rng.normal(0, 1, (m, 4))
        X[inside, 0] += 5.0
        ch[c] = X
    trajs = TrajectorySet("v", frames, pts, ch)
    books = fit_codebooks(ch, K=2)
    return field, trajs, books


def test_detect_video_respects_shots(scene):
    field, trajs, books = scene
    rng = np.random.default_rng(0)
    models = {"a": svm.LinearModel(rng.normal(size=books.dim), 0.1, 1.0),
              "b": svm.LinearModel(rng.normal(size=books.dim), -0.1, 1.0)}
    shots = ShotList("v", (TemporalSegment(0, 24), TemporalSegment(25, 59)), 60)
    cfg = DetectConfig(WindowSpec((10, 20, 30), stride=5))
    dets = detect_video(models, field, trajs, books, cfg, shots)
    assert dets and {d.label for d in dets} == {"a", "b"}
    for d in dets:
        shot = shots.shots[d.meta["shot"]]
        assert shot.start <= d.tube.start and d.tube.end <= shot.end
        assert d.score == pytest.approx(d.decision - 20.0 / d.tube.length)
    assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)
    again = detect_video(models, field, trajs, books, cfg, shots)
    assert [d.to_record() for d in again] == [d.to_record() for d in dets]
    # precomputed whole-video tubes are cut at the shot boundary
    from_tubes = detect_video(models, None, trajs, books, cfg, shots,
                              tubes=[Tube("v", 0, np.tile([40.0, 40.0, 100.0, 160.0], (60, 1)))])
    for d in from_tubes:
        shot = shots.shots[d.meta["shot"]]
        assert shot.start <= d.tube.start and d.tube.end <= shot.end


def test_planted_window_scores_highest(scene):
    field, trajs, books = scene
    from tubeloc.encoder import VideoEncoder

    enc = VideoEncoder(books, trajs)
    actor = Tube("v", 0, np.tile([40.0, 40.0, 100.0, 160.0], (60, 1)))
    pos = [enc.encode(actor, (20, 39))]
    neg = [enc.encode(actor, (0, 19)), enc.encode(actor, (40, 59)),
           enc.encode(Tube("v", 0, np.tile([120.0, 20.0, 200.0, 180.0], (60, 1))))]
    model = svm.train(pos, neg)
    cfg = DetectConfig(WindowSpec((20,), stride=10, alpha=0.0))
    dets = detect_video({"a": model}, None, trajs, books, cfg, ShotList.whole("v", 60), tubes=[actor])
    assert (dets[0].tube.start, dets[0].tube.end) == (20, 39)


def test_detect_video_needs_inputs(scene):
    _, trajs, books = scene
    with pytest.raises(ValueError):
        detect_video({}, None, trajs, books)

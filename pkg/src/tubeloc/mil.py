"""Multi-fold multiple instance learning over human tubes.

For one class, each positive video contributes exactly one (latent) tube
to the positive set. Selection starts from the tube with the highest mean
human score; every iteration trains an SVM, mines hard negatives in the
negative videos, then re-selects the tube of each positive video with a
classifier that never saw that video (trained on the other folds).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from tubeloc import svm

log = logging.getLogger(__name__)

HARD_NEGATIVE_MARGIN = -1.0


@dataclass(eq=False)
class LabeledVideo:
    video_id: str
    labels: frozenset
    descriptors: np.ndarray  # (n_tubes, d)
    human_scores: np.ndarray  # (n_tubes,)
    tube_ids: tuple = ()

    def __post_init__(self):
        self.labels = frozenset(self.labels)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        self.human_scores = np.asarray(self.human_scores, dtype=np.float64)
        if len(self.descriptors) == 0:
            raise ValueError(f"video {self.video_id} has no tubes")
        if len(self.human_scores) != len(self.descriptors):
            raise ValueError(f"video {self.video_id}: {len(self.descriptors)} descriptors, "
                             f"{len(self.human_scores)} scores")
        if not self.tube_ids:
            self.tube_ids = tuple(range(len(self.descriptors)))

    @property
    def n_tubes(self) -> int:
        return len(self.descriptors)


@dataclass
class MilConfig:
    folds: int = 4
    iterations: int = 10
    hard_negative_rounds: int = 2
    seed: int = 0
    C: float = 1.0
    persist_negatives: bool = True


@dataclass
class MilState:
    positives: dict[str, int]  # video_id -> tube index
    negatives: set[tuple[str, int]]  # (video_id, tube index)
    model: svm.LinearModel | None = None

    def copy(self) -> "MilState":
        return MilState(dict(self.positives), set(self.negatives), self.model)


@dataclass
class MilResult:
    model: svm.LinearModel
    state: MilState
    corloc_trace: list[float]
    selections: list[dict[str, int]]  # selection after init and after each iteration
    fold_log: list[list[tuple[frozenset, frozenset]]] = field(default_factory=list)
    models: list[svm.LinearModel] = field(default_factory=list)


def _argmax_first(x: np.ndarray) -> int:
    return int(np.flatnonzero(x == x.max())[0])


def init_selection(positive_videos: list[LabeledVideo], negative_videos: list[LabeledVideo]) -> MilState:
    """Highest mean human score tube per video (lowest index on ties)."""
    pos = {v.video_id: _argmax_first(v.human_scores) for v in positive_videos}
    neg = {(v.video_id, _argmax_first(v.human_scores)) for v in negative_videos}
    return MilState(pos, neg)


def _gather(state: MilState, by_id: dict[str, LabeledVideo], pos_ids=None):
    ids = sorted(state.positives) if pos_ids is None else sorted(pos_ids)
    P = np.array([by_id[v].descriptors[state.positives[v]] for v in ids])
    N = np.array([by_id[v].descriptors[t] for v, t in sorted(state.negatives)])
    return P, N


def _train(state, by_id, cfg: MilConfig, pos_ids=None) -> svm.LinearModel:
    P, N = _gather(state, by_id, pos_ids)
    return svm.train(P, N, cfg.C, seed=cfg.seed)


def mine_hard_negatives(model: svm.LinearModel, state: MilState, negative_videos: list[LabeledVideo],
                        rounds: int, cfg: MilConfig, by_id: dict[str, LabeledVideo] | None = None,
                        models: list | None = None) -> MilState:
    """Add negative-video tubes with margin >= -1, retraining after each round."""
    by_id = by_id or {v.video_id: v for v in negative_videos}
    state = state.copy()
    state.model = model
    for _ in range(rounds):
        added = 0
        for v in negative_videos:
            m = svm.decision(state.model, v.descriptors)
            for t in np.flatnonzero(np.atleast_1d(m) >= HARD_NEGATIVE_MARGIN):
                key = (v.video_id, int(t))
                if key not in state.negatives:
                    state.negatives.add(key)
                    added += 1
        P, N = _gather(state, by_id)
        state.model = svm.train(P, N, cfg.C, seed=cfg.seed)
        if models is not None:
            models.append(state.model)
        log.debug("hard-negative round added %d tubes (total %d)", added, len(state.negatives))
    return state


def refold(video_ids: list[str], K: int, seed: int) -> list[list[str]]:
    """Seeded balanced partition into K folds (sizes differ by at most one)."""
    ids = sorted(video_ids)
    if K > len(ids):
        log.warning("only %d positive videos for %d folds; using %d folds", len(ids), K, len(ids))
        K = len(ids)
    K = max(K, 1)
    perm = np.random.default_rng(seed).permutation(len(ids))
    return [sorted(ids[i] for i in perm[k::K]) for k in range(K)]


def mil_train(class_name, videos: list[LabeledVideo], config: MilConfig | None = None,
              corloc_fn: Callable[[dict[str, int]], float] | None = None,
              initial: MilState | None = None) -> MilResult:
    """Multi-fold MIL for one class.

    ``corloc_fn`` maps a positive selection ``{video_id: tube index}`` to a
    CorLoc value; when given, the trace holds the initial value followed by
    one value per iteration.
    """
    cfg = config or MilConfig()
    pos = sorted((v for v in videos if class_name in v.labels), key=lambda v: v.video_id)
    neg = sorted((v for v in videos if class_name not in v.labels), key=lambda v: v.video_id)
    if not pos or not neg:
        raise ValueError(f"class {class_name!r} needs positive and negative videos "
                         f"({len(pos)} / {len(neg)})")
    by_id = {v.video_id: v for v in pos + neg}
    state = initial.copy() if initial is not None else init_selection(pos, neg)
    initial_negatives = set(state.negatives)
    trace = [corloc_fn(dict(state.positives))] if corloc_fn else []
    selections = [dict(state.positives)]
    fold_log = []
    models: list[svm.LinearModel] = []
    ss = np.random.SeedSequence([cfg.seed, 0x4D494C])
    fold_seeds = ss.generate_state(cfg.iterations)

    for it in range(cfg.iterations):
        if not cfg.persist_negatives:
            state.negatives = set(initial_negatives)
        state.model = _train(state, by_id, cfg)
        models.append(state.model)
        state = mine_hard_negatives(state.model, state, neg, cfg.hard_negative_rounds, cfg, by_id, models)
        folds = refold([v.video_id for v in pos], cfg.folds, int(fold_seeds[it]))
        new_pos = dict(state.positives)
        log_it = []
        for k, fold in enumerate(folds):
            held = frozenset(fold)
            if len(folds) == 1:
                # plain MIL: the classifier re-scores the videos it was trained on
                train_ids = held
            else:
                train_ids = frozenset(v for f in folds[:k] + folds[k + 1:] for v in f)
            fold_model = _train(state, by_id, cfg, train_ids)
            models.append(fold_model)
            log_it.append((train_ids, held))
            for vid in fold:
                scores = np.atleast_1d(svm.decision(fold_model, by_id[vid].descriptors))
                new_pos[vid] = _argmax_first(scores)
        state.positives = new_pos
        fold_log.append(log_it)
        selections.append(dict(new_pos))
        if corloc_fn:
            trace.append(corloc_fn(dict(new_pos)))
            log.info("class %s iteration %d: CorLoc %.4f", class_name, it + 1, trace[-1])

    state.model = _train(state, by_id, cfg)
    models.append(state.model)
    return MilResult(state.model, state, trace, selections, fold_log, models)


def two_stage_train(class_name, videos: list[LabeledVideo], config: MilConfig | None,
                    segment_descriptor: Callable[[str, int], np.ndarray],
                    corloc_fn: Callable[[dict[str, int]], float] | None = None) -> tuple[svm.LinearModel, MilResult]:
    """MIL on whole-tube descriptors, then retrain with positives restricted
    to the ground-truth temporal extent.

    ``segment_descriptor(video_id, tube_index)`` returns the descriptor of
    the selected tube restricted to that video's ground-truth segment; it
    should raise ``KeyError`` when no segment is known.
    """
    cfg = config or MilConfig()
    result = mil_train(class_name, videos, cfg, corloc_fn)
    by_id = {v.video_id: v for v in videos}
    pos_ids = sorted(result.state.positives)
    P = np.array([segment_descriptor(v, result.state.positives[v]) for v in pos_ids])
    N = np.array([by_id[v].descriptors[t] for v, t in sorted(result.state.negatives)])
    model = svm.train(P, N, cfg.C, seed=cfg.seed)
    return model, result

"""Hypothesis strategies shared across test modules."""

import numpy as np
from hypothesis import strategies as st

from tubeloc.core import Tube

coord = st.floats(min_value=0, max_value=200, allow_nan=False, allow_infinity=False)
side = st.floats(min_value=1, max_value=80, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw):
    x, y, w, h = draw(coord), draw(coord), draw(side), draw(side)
    return np.array([x, y, x + w, y + h])


@st.composite
def tubes(draw, max_len=12, max_start=10):
    start = draw(st.integers(0, max_start))
    n = draw(st.integers(1, max_len))
    return Tube("v", start, np.array([draw(boxes()) for _ in range(n)]))


def synthetic_field(tracks, prototypes=None, width=320.0, height=240.0, embed_dim=8,
                    visibility=None, video_id="v", **noise):
    """Synthetic field over hand-made actor tracks of shape (n_humans, n_frames, 4)."""
    from tubeloc.scorefield import SyntheticField, SyntheticVideo

    tracks = np.asarray(tracks, dtype=np.float64)
    n = tracks.shape[0]
    if prototypes is None:
        prototypes = np.eye(n, embed_dim) * 3.0
    prototypes = np.asarray(prototypes, dtype=np.float64)
    vis = np.ones(n) if visibility is None else np.asarray(visibility, dtype=np.float64)
    d = prototypes.shape[1]
    video = SyntheticVideo(video_id, width, height, tracks, vis, prototypes, np.zeros(d),
                           np.zeros((n, d)), **noise)
    return SyntheticField(video)

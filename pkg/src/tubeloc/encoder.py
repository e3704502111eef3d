"""Tube descriptors: per-channel PCA, diagonal GMM codebooks and Fisher vectors.

Each trajectory carries one raw descriptor per channel (HOG, HOF, MBHx,
MBHy). A channel codebook is a PCA basis halving the raw dimension followed
by a K-component diagonal GMM. A tube is described by the trajectories that
start inside its (slightly enlarged) boxes; each channel's Fisher vector is
power- and L2-normalised, and the channel blocks are concatenated.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tubeloc.core import Tube

log = logging.getLogger(__name__)

CHANNELS = ("HOG", "HOF", "MBHx", "MBHy")
IDT_RAW_DIMS = {"HOG": 96, "HOF": 108, "MBHx": 96, "MBHy": 96}
TUBE_MARGIN = 0.10
CODEBOOK_VERSION = 1


@dataclass(frozen=True, eq=False)
class PCABasis:
    mean: np.ndarray
    components: np.ndarray  # (out_dim, raw_dim), rows orthonormal
    eigenvalues: np.ndarray  # all raw_dim eigenvalues, descending

    @property
    def out_dim(self) -> int:
        return self.components.shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.components + self.mean


def fit_pca(samples, out_dim: int, eig_floor: float = 0.0) -> PCABasis:
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("samples must be a 2-D array")
    n, d = X.shape
    if out_dim > d:
        raise ValueError(f"out_dim {out_dim} exceeds raw dimension {d}")
    if n < out_dim:
        raise ValueError(f"need at least {out_dim} samples, got {n}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / n
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = np.maximum(vals[order], eig_floor), vecs[:, order]
    comps = vecs[:, :out_dim].T.copy()
    # sign convention: largest-magnitude coefficient of each component positive
    flip = comps[np.arange(out_dim), np.abs(comps).argmax(axis=1)] < 0
    comps[flip] *= -1
    return PCABasis(mean, comps, vals)


@dataclass(frozen=True, eq=False)
class GMM:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D)
    log_likelihoods: tuple = ()

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_joint(self, X: np.ndarray) -> np.ndarray:
        """log(w_k N(x | mu_k, sigma_k)) for every (sample, component)."""
        X = np.asarray(X, dtype=np.float64)
        inv = 1.0 / self.variances
        quad = (X ** 2) @ inv.T - 2.0 * X @ (self.means * inv).T + np.sum(self.means ** 2 * inv, axis=1)
        log_det = np.sum(np.log(self.variances), axis=1)
        return np.log(self.weights) - 0.5 * (self.dim * np.log(2 * np.pi) + log_det + quad)

    def posteriors(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lj = self.log_joint(X)
        mx = lj.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(lj - mx).sum(axis=1))
        return np.exp(lj - lse[:, None]), lse

    def mean_log_likelihood(self, X: np.ndarray) -> float:
        return float(self.posteriors(X)[1].mean())


def _kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.asarray(centers)


def fit_gmm(samples, K: int, seed: int = 0, max_iter: int = 200, rel_tol: float = 1e-6,
            floor_factor: float = 1e-6) -> GMM:
    """Diagonal GMM by EM with seeded k-means++ initial means.

    Variances are floored at ``floor_factor`` times the per-dimension data
    variance. Stops once the relative log-likelihood gain drops below
    ``rel_tol`` or after ``max_iter`` iterations.
    """
    X = np.asarray(samples, dtype=np.float64)
    n, D = X.shape
    if K > n:
        raise ValueError(f"K={K} exceeds number of samples {n}")
    rng = np.random.default_rng(seed)
    data_var = X.var(axis=0)
    floor = np.maximum(floor_factor * data_var, 1e-300)

    means = _kmeans_pp(X, K, rng)
    d2 = ((X[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    hard = d2.argmin(axis=1)
    resp = np.zeros((n, K))
    resp[np.arange(n), hard] = 1.0
    lls = []
    gmm = None
    for it in range(max_iter):
        # M step
        nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
        weights = nk / nk.sum()
        means = resp.T @ X / nk[:, None]
        var = resp.T @ (X ** 2) / nk[:, None] - means ** 2
        var = np.maximum(var, floor)
        gmm = GMM(weights, means, var)
        # E step
        resp, lse = gmm.posteriors(X)
        ll = float(lse.mean())
        lls.append(ll)
        if it > 0 and abs(ll - lls[-2]) <= rel_tol * abs(lls[-2]):
            break
    return GMM(gmm.weights, gmm.means, gmm.variances, tuple(lls))


@dataclass(frozen=True, eq=False)
class ChannelCodebook:
    name: str
    pca: PCABasis
    gmm: GMM

    @property
    def fv_dim(self) -> int:
        return (2 * self.gmm.dim + 1) * self.gmm.n_components


def fv_dimension(D: int, K: int) -> int:
    return (2 * D + 1) * K


def fisher_vector(gmm: GMM, descriptors) -> np.ndarray:
    """Unnormalised Fisher vector ``[d weights (K), d means (K*D), d variances (K*D)]``.

    Statistics are averaged over descriptors, so an empty set yields zeros.
    """
    K, D = gmm.n_components, gmm.dim
    X = np.asarray(descriptors, dtype=np.float64)
    if X.size == 0:
        X = np.zeros((0, D))
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != D:
        raise ValueError(f"descriptor dim {X.shape[1]} != codebook dim {D}")
    n = len(X)
    if n == 0:
        return np.zeros(fv_dimension(D, K))
    gamma, _ = gmm.posteriors(X)
    return _fv_from_stats(gmm, n, gamma.sum(axis=0), gamma.T @ X, gamma.T @ (X ** 2))


def _fv_from_stats(gmm: GMM, n: int, s0: np.ndarray, s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    w, mu, var = gmm.weights, gmm.means, gmm.variances
    K, D = mu.shape
    if n == 0:
        return np.zeros(fv_dimension(D, K))
    sigma = np.sqrt(var)
    sw = np.sqrt(w)
    g_w = (s0 - n * w) / (n * sw)
    g_mu = (s1 - mu * s0[:, None]) / (sigma * (n * sw)[:, None])
    g_var = (s2 - 2 * mu * s1 + (mu ** 2 - var) * s0[:, None]) / (var * (n * np.sqrt(2 * w))[:, None])
    return np.concatenate([g_w, g_mu.ravel(), g_var.ravel()])


def normalize(fv: np.ndarray) -> np.ndarray:
    """Signed square root followed by L2 normalisation (zero stays zero)."""
    v = np.sign(fv) * np.sqrt(np.abs(fv))
    return l2_normalize(v)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    nrm = np.linalg.norm(v)
    return v / nrm if nrm > 0 else v.copy()


# --------------------------------------------------------------------------
# trajectories

@dataclass(frozen=True)
class TrajectoryRecord:
    video_id: str
    start_frame: int
    x: float
    y: float
    descriptors: dict


@dataclass(eq=False)
class TrajectorySet:
    """Columnar trajectories of one video."""

    video_id: str
    start_frame: np.ndarray
    points: np.ndarray  # (n, 2)
    channels: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.start_frame)

    @classmethod
    def from_records(cls, video_id: str, records: list[TrajectoryRecord],
                     raw_dims: dict[str, int] | None = None) -> "TrajectorySet":
        if records:
            names = list(records[0].descriptors)
            ch = {c: np.array([r.descriptors[c] for r in records], dtype=np.float64) for c in names}
        else:
            ch = {c: np.zeros((0, d)) for c, d in (raw_dims or {}).items()}
        return cls(video_id, np.array([r.start_frame for r in records], dtype=np.int64),
                   np.array([[r.x, r.y] for r in records], dtype=np.float64).reshape(-1, 2), ch)

    def subset(self, mask: np.ndarray) -> "TrajectorySet":
        return TrajectorySet(self.video_id, self.start_frame[mask], self.points[mask],
                             {c: v[mask] for c, v in self.channels.items()})


def format_trajectory_line(video_id: str, start: int, x: float, y: float, desc: dict) -> str:
    parts = [f"{video_id} {start} {x!r} {y!r}"]
    for c in CHANNELS if set(desc) == set(CHANNELS) else desc:
        parts.append(f"{c}:" + ",".join(repr(float(v)) for v in desc[c]))
    return " | ".join(parts)


def parse_trajectory_line(line: str) -> TrajectoryRecord:
    head, *chunks = [p.strip() for p in line.split("|")]
    vid, start, x, y = head.split()
    desc = {}
    for ch in chunks:
        name, _, vals = ch.partition(":")
        desc[name] = np.array([float(v) for v in vals.split(",")]) if vals else np.zeros(0)
    return TrajectoryRecord(vid, int(start), float(x), float(y), desc)


def write_trajectories(path, trajs: TrajectorySet) -> None:
    path = Path(path)
    if path.suffix == ".npz":
        np.savez(path, video_id=np.array(trajs.video_id), start_frame=trajs.start_frame,
                 points=trajs.points, **{f"ch_{c}": v for c, v in trajs.channels.items()})
        return
    names = list(trajs.channels)
    with open(path, "w") as f:
        for i in range(len(trajs)):
            desc = {c: trajs.channels[c][i] for c in names}
            f.write(format_trajectory_line(trajs.video_id, int(trajs.start_frame[i]),
                                           float(trajs.points[i, 0]), float(trajs.points[i, 1]), desc) + "\n")


def read_trajectories(path, video_id: str | None = None,
                      raw_dims: dict[str, int] | None = None) -> TrajectorySet:
    path = Path(path)
    if path.suffix == ".npz":
        z = np.load(path)
        ch = {k[3:]: z[k] for k in z.files if k.startswith("ch_")}
        return TrajectorySet(str(z["video_id"]), z["start_frame"], z["points"], ch)
    with open(path) as f:
        records = [parse_trajectory_line(line) for line in f if line.strip()]
    vid = video_id if video_id is not None else (records[0].video_id if records else path.stem)
    return TrajectorySet.from_records(vid, records, raw_dims)


# --------------------------------------------------------------------------
# codebooks and tube descriptors

@dataclass(eq=False)
class Codebooks:
    channels: dict[str, ChannelCodebook]

    @property
    def dim(self) -> int:
        return sum(cb.fv_dim for cb in self.channels.values())

    def blocks(self) -> list[tuple[str, int, int]]:
        out, off = [], 0
        for name, cb in self.channels.items():
            out.append((name, off, off + cb.fv_dim))
            off += cb.fv_dim
        return out


def fit_codebooks(samples: dict[str, np.ndarray], K: int, seed: int = 0, pca_factor: int = 2,
                  max_iter: int = 200) -> Codebooks:
    """Fit one PCA + GMM codebook per channel on pooled raw descriptors."""
    books = {}
    for i, name in enumerate(samples):
        X = np.asarray(samples[name], dtype=np.float64)
        pca = fit_pca(X, max(1, X.shape[1] // pca_factor))
        gmm = fit_gmm(pca.project(X), K, seed=seed + i, max_iter=max_iter)
        books[name] = ChannelCodebook(name, pca, gmm)
    return Codebooks(books)


def save_codebooks(path, books: Codebooks) -> None:
    arrays = {"version": np.array(CODEBOOK_VERSION), "channels": np.array(list(books.channels))}
    for name, cb in books.channels.items():
        arrays[f"{name}/pca_mean"] = cb.pca.mean
        arrays[f"{name}/pca_components"] = cb.pca.components
        arrays[f"{name}/pca_eigenvalues"] = cb.pca.eigenvalues
        arrays[f"{name}/weights"] = cb.gmm.weights
        arrays[f"{name}/means"] = cb.gmm.means
        arrays[f"{name}/variances"] = cb.gmm.variances
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_codebooks(path) -> Codebooks:
    z = np.load(path)
    if int(z["version"]) != CODEBOOK_VERSION:
        raise ValueError(f"{path}: unsupported codebook version {int(z['version'])}")
    books = {}
    for name in [str(c) for c in z["channels"]]:
        pca = PCABasis(z[f"{name}/pca_mean"], z[f"{name}/pca_components"], z[f"{name}/pca_eigenvalues"])
        gmm = GMM(z[f"{name}/weights"], z[f"{name}/means"], z[f"{name}/variances"])
        books[name] = ChannelCodebook(name, pca, gmm)
    return Codebooks(books)


def enlarge(boxes: np.ndarray, margin: float = TUBE_MARGIN) -> np.ndarray:
    """Grow width and height by ``margin`` about the box centre."""
    b = np.asarray(boxes, dtype=np.float64)
    c = 0.5 * (b[..., :2] + b[..., 2:])
    half = 0.5 * (1.0 + margin) * (b[..., 2:] - b[..., :2])
    return np.concatenate([c - half, c + half], axis=-1)


def trajectories_in_tube(tube: Tube, trajs: TrajectorySet, margin: float = TUBE_MARGIN) -> np.ndarray:
    """Mask of trajectories starting in the tube span and inside its enlarged box."""
    sf = trajs.start_frame
    inside = (sf >= tube.start) & (sf <= tube.end)
    idx = np.flatnonzero(inside)
    if len(idx) == 0:
        return inside
    boxes = enlarge(tube.boxes[sf[idx] - tube.start], margin)
    p = trajs.points[idx]
    ok = (p[:, 0] >= boxes[:, 0]) & (p[:, 0] <= boxes[:, 2]) & (p[:, 1] >= boxes[:, 1]) & (p[:, 1] <= boxes[:, 3])
    inside[idx] = ok
    return inside


class VideoEncoder:
    """Caches per-trajectory posteriors of one video so that any subset
    (a tube, or a temporal window of a tube) is encoded from sums."""

    def __init__(self, books: Codebooks, trajs: TrajectorySet):
        missing = [c for c in books.channels if c not in trajs.channels]
        if missing:
            raise KeyError(f"trajectories lack channels {missing}")
        self.books = books
        self.trajs = trajs
        self._stats = {}
        for name, cb in books.channels.items():
            Z = cb.pca.project(trajs.channels[name]) if len(trajs) else np.zeros((0, cb.gmm.dim))
            gamma = cb.gmm.posteriors(Z)[0] if len(Z) else np.zeros((0, cb.gmm.n_components))
            # per-trajectory s0, s1, s2 contributions
            self._stats[name] = (gamma, gamma[:, :, None] * Z[:, None, :], gamma[:, :, None] * (Z ** 2)[:, None, :])

    def encode_mask(self, mask: np.ndarray) -> np.ndarray:
        mask = np.asarray(mask, dtype=bool)
        n = int(mask.sum())
        out = []
        for name, cb in self.books.channels.items():
            g, s1, s2 = self._stats[name]
            if n:
                fv = _fv_from_stats(cb.gmm, n, g[mask].sum(axis=0), s1[mask].sum(axis=0), s2[mask].sum(axis=0))
            else:
                fv = np.zeros(cb.fv_dim)
            out.append(normalize(fv))
        return np.concatenate(out)

    def tube_mask(self, tube: Tube, margin: float = TUBE_MARGIN) -> np.ndarray:
        return trajectories_in_tube(tube, self.trajs, margin)

    def encode(self, tube: Tube, segment: tuple[int, int] | None = None) -> np.ndarray:
        mask = self.tube_mask(tube)
        if segment is not None:
            sf = self.trajs.start_frame
            mask &= (sf >= segment[0]) & (sf <= segment[1])
        return self.encode_mask(mask)


def tube_descriptor(tube: Tube, trajs: TrajectorySet, books: Codebooks,
                    segment: tuple[int, int] | None = None) -> np.ndarray:
    """Concatenated normalised per-channel Fisher vectors of one tube."""
    missing = [c for c in CHANNELS if c in trajs.channels and c not in books.channels]
    if missing:
        raise KeyError(f"missing channel codebooks {missing}")
    mask = trajectories_in_tube(tube, trajs)
    if segment is not None:
        mask &= (trajs.start_frame >= segment[0]) & (trajs.start_frame <= segment[1])
    sub = trajs.subset(mask)
    out = []
    for name, cb in books.channels.items():
        if name not in sub.channels:
            raise KeyError(f"trajectories lack channel {name}")
        z = cb.pca.project(sub.channels[name]) if len(sub) else np.zeros((0, cb.gmm.dim))
        out.append(normalize(fisher_vector(cb.gmm, z)))
    return np.concatenate(out)


# --------------------------------------------------------------------------
# descriptor files: b"TLFV", u16 version, u32 count, u32 dim, count*dim f64

FV_MAGIC = b"TLFV"


def write_descriptors(path, X: np.ndarray) -> None:
    X = np.asarray(X, dtype="<f8").reshape(len(X), -1)
    Path(path).write_bytes(FV_MAGIC + struct.pack("<HII", 1, X.shape[0], X.shape[1]) + X.tobytes())


def read_descriptors(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FV_MAGIC:
        raise ValueError(f"{path}: not a descriptor file")
    version, n, d = struct.unpack_from("<HII", data, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported descriptor version {version}")
    return np.frombuffer(data, dtype="<f8", count=n * d, offset=14).reshape(n, d).astype(np.float64)

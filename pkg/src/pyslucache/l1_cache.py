"""
L1 sound-unit cache.

Each cached utterance gets its own k-means alphabet (the CentroidSet) and a key: the collapsed sequence
of nearest-centroid IDs of its frames. A query is scored against an entry by turning its frame-to-centroid
distances into per-frame distributions over that entry's centroids and taking the blank-free CTC loss of
the entry key, normalised by key length.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import log_softmax

from .ctc_ops import CollapseMode, PosteriorSequence, collapse, ctc_loss, normalized_loss
from .dsp_ops import FeatureSequence
from .errors import Infeasible, ShapeError

logger = logging.getLogger(__name__)

L1_RECORD_MAGIC = b"SL1E"


@dataclass(frozen=True, eq=False)
class CentroidSet:
    centroids: np.ndarray
    utterance_id: str = ""

    def __post_init__(self):
        centroids = np.asarray(self.centroids, dtype=np.float64)
        if centroids.ndim != 2:
            raise ShapeError(f"Centroids must be a (K, dim) matrix, got shape {centroids.shape}")
        object.__setattr__(self, "centroids", centroids)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True, eq=False)
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_history: tuple[float, ...]
    n_iter: int


@dataclass(eq=False)
class L1Entry:
    centroids: CentroidSet
    key: tuple[int, ...]
    intent: int
    transcript_id: str
    created_at: int = 0
    last_hit: int = 0

    def __post_init__(self):
        self.key = tuple(int(s) for s in self.key)
        if not self.key:
            raise ValueError("L1 key must not be empty")
        if any(a == b for a, b in zip(self.key, self.key[1:])):
            raise ValueError("L1 key must not contain adjacent duplicate IDs")
        if max(self.key) >= self.centroids.k or min(self.key) < 0:
            raise ValueError(f"L1 key symbols must lie in [0, {self.centroids.k})")


@dataclass(frozen=True, eq=False)
class L1MatchResult:
    best_entry: L1Entry | None
    loss: float
    hit: bool
    losses: tuple[float, ...] = ()


def _kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [points[rng.integers(len(points))]]
    closest = cdist(points, centers[:1], "sqeuclidean")[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(len(points))
        else:
            idx = rng.choice(len(points), p=closest / total)
        centers.append(points[idx])
        closest = np.minimum(closest, cdist(points, points[idx : idx + 1], "sqeuclidean")[:, 0])
    return np.array(centers)


def _separate_duplicates(centroids: np.ndarray) -> np.ndarray:
    """Nudge exactly-equal centroids apart so the alphabet stays pairwise distinct"""

    centroids = centroids.copy()
    scale = 1e-6 * (1.0 + np.abs(centroids).max())
    for j in range(1, len(centroids)):
        nudge = 0
        while np.any(np.all(centroids[:j] == centroids[j], axis=1)):
            nudge += 1
            centroids[j, j % centroids.shape[1]] += scale * nudge
    return centroids


def kmeans(points: np.ndarray, k: int, tol: float = 1e-4, max_iter: int = 300, seed: int = 0) -> KMeansResult:
    """
    Lloyd's algorithm with k-means++ seeding.

    Args:
        - points (np.ndarray): (N, dim) data, N >= k
        - k (int): Number of clusters
        - tol (float): Stop once no centroid moves farther than this
        - max_iter (int): Iteration cap
        - seed (int): Seed for the k-means++ draws

    Returns:
        - KMeansResult: Centroids, final labels, inertia after every assignment step, iterations run

    Note:
        - An empty cluster is moved onto the point farthest from its assigned centroid
        - Exactly-duplicate centroids (degenerate data) are nudged apart by a tiny offset
    """

    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) < k or k < 1:
        raise ShapeError(f"k-means needs an (N, dim) array with N >= k, got shape {points.shape} for k={k}")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(points, k, rng)
    history = []

    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        dist = cdist(points, centroids, "sqeuclidean")
        labels = dist.argmin(axis=1)
        closest = dist[np.arange(len(points)), labels]
        history.append(float(closest.sum()))

        updated = centroids.copy()
        for j in range(k):
            members = points[labels == j]
            if len(members):
                updated[j] = members.mean(axis=0)
            elif closest.max() > 0:
                far = int(closest.argmax())
                updated[j] = points[far]
                closest[far] = 0.0

        shift = np.sqrt(((updated - centroids) ** 2).sum(axis=1)).max()
        centroids = updated
        if shift < tol:
            break

    centroids = _separate_duplicates(centroids)
    labels = cdist(points, centroids, "sqeuclidean").argmin(axis=1)
    return KMeansResult(centroids, labels, tuple(history), n_iter)


def discretize(
    features: FeatureSequence,
    k: int = 70,
    tol: float = 1e-4,
    seed: int = 0,
    max_iter: int = 300,
    extra_frames: Sequence[np.ndarray] = (),
    utterance_id: str = "",
) -> tuple[CentroidSet, np.ndarray]:
    """
    Per-utterance k-means alphabet and the nearest-centroid ID of every frame.

    Args:
        - features (FeatureSequence): The utterance to discretize
        - k (int): Requested alphabet size, clamped to the number of points (never below 2)
        - tol (float): Centroid-movement tolerance
        - seed (int): k-means++ seed
        - max_iter (int): Lloyd iteration cap
        - extra_frames (Sequence[np.ndarray]): Additional (T_i, dim) rows pooled into the fit, e.g. augmented copies
        - utterance_id (str): Recorded on the CentroidSet

    Returns:
        - tuple[CentroidSet, np.ndarray]: Alphabet and the uncollapsed ID sequence of `features`
    """

    points = np.concatenate([features.frames, *extra_frames]) if len(extra_frames) else features.frames
    k_eff = min(k, len(points))
    if k_eff < k:
        logger.warning(f"k={k} exceeds the {len(points)} available frames, clamped to {k_eff}")
    if k_eff < 2:
        # A single point still gets a two-symbol alphabet; the second centroid is its nudged duplicate
        points_fit = np.concatenate([points, points])
        result = kmeans(points_fit, 2, tol, max_iter, seed)
    else:
        result = kmeans(points, k_eff, tol, max_iter, seed)

    ids = cdist(features.frames, result.centroids, "sqeuclidean").argmin(axis=1)
    return CentroidSet(result.centroids, utterance_id), ids


def build_entry(
    features: FeatureSequence,
    intent: int,
    transcript_id: str,
    k: int = 70,
    seed: int = 0,
    tol: float = 1e-4,
    max_iter: int = 300,
    extra_frames: Sequence[np.ndarray] = (),
    utterance_id: str = "",
) -> L1Entry:
    """Discretize an utterance and key it by its collapsed centroid-ID sequence"""

    centroids, ids = discretize(features, k, tol, seed, max_iter, extra_frames, utterance_id)
    key = collapse(ids, CollapseMode.REPEAT_MERGE)
    return L1Entry(centroids, key, int(intent), str(transcript_id))


def frame_distribution(frames: np.ndarray, centroids: CentroidSet, mode: str = "softmax", temperature: float = 0.05) -> np.ndarray:
    """
    Per-frame log-distribution over an entry's centroids, argmax-consistent with the nearest centroid.

    Args:
        - frames (np.ndarray): (T, dim) query rows
        - centroids (CentroidSet): The entry's alphabet
        - mode (str): "softmax" = softmax(-d / (temperature * median(d))) per row;
          "inverse" = (max(d) - d) normalised per row, uniform when a row's distances are all equal
        - temperature (float): Softmax temperature (1.0 is the plain median scaling)

    Returns:
        - np.ndarray: (T, K) log-probabilities
    """

    if frames.shape[1] != centroids.dim:
        raise ShapeError(f"Query dim {frames.shape[1]} does not match centroid dim {centroids.dim}")
    d = cdist(frames, centroids.centroids, "euclidean")

    if mode == "softmax":
        scale = np.median(d, axis=1, keepdims=True)
        scale = np.where(scale > 0, scale, 1.0)
        return log_softmax(-d / (temperature * scale), axis=1)

    if mode == "inverse":
        inv = d.max(axis=1, keepdims=True) - d
        totals = inv.sum(axis=1, keepdims=True)
        uniform = np.full_like(inv, 1.0 / inv.shape[1])
        probs = np.where(totals > 0, inv / np.where(totals > 0, totals, 1.0), uniform)
        with np.errstate(divide="ignore"):
            return np.log(probs)

    raise ValueError(f"Unknown frame distribution mode: {mode!r}")


def entry_loss(features: FeatureSequence, entry: L1Entry, mode: str = "softmax", temperature: float = 0.05) -> float:
    """Length-normalised blank-free CTC loss of `entry.key` given the query; +inf when no path exists"""

    if len(entry.key) > features.T:
        return float("inf")
    posts = PosteriorSequence(frame_distribution(features.frames, entry.centroids, mode, temperature))
    try:
        return normalized_loss(ctc_loss(posts, entry.key, CollapseMode.REPEAT_MERGE), len(entry.key))
    except Infeasible:
        return float("inf")


def match(
    features: FeatureSequence,
    entries: Sequence[L1Entry],
    threshold_fn: Callable[[int], float],
    mode: str = "softmax",
    temperature: float = 0.05,
) -> L1MatchResult:
    """
    Score every entry and keep the lowest normalised loss (first one wins on exact ties).

    Hit iff that loss is at most threshold_fn(len(best key)).
    """

    best, best_loss, losses = None, float("inf"), []
    for entry in entries:
        loss = entry_loss(features, entry, mode, temperature)
        losses.append(loss)
        if loss < best_loss:
            best, best_loss = entry, loss

    if best is None:
        return L1MatchResult(None, float("inf"), False, tuple(losses))
    return L1MatchResult(best, best_loss, best_loss <= threshold_fn(len(best.key)), tuple(losses))


def l1_match_ops(T: int, U: int, k: int, dim: int) -> int:
    """Multiply-adds of one entry match: the T x K distance matrix plus the blank-free DP"""

    return T * k * dim + T * U * 2


def entry_to_bytes(entry: L1Entry) -> bytes:
    """
    Binary record: magic, K u16, dim u16, U u16, intent u32, created_at u64, last_hit u64,
    transcript id (u16 length + UTF-8), centroids float32 row-major, key IDs u16.
    """

    tid = entry.transcript_id.encode("utf-8")
    header = struct.pack(
        "<4sHHHIQQH",
        L1_RECORD_MAGIC,
        entry.centroids.k,
        entry.centroids.dim,
        len(entry.key),
        entry.intent,
        entry.created_at,
        entry.last_hit,
        len(tid),
    )
    body = np.ascontiguousarray(entry.centroids.centroids, dtype="<f4").tobytes() + np.asarray(entry.key, dtype="<u2").tobytes()
    return header + tid + body


def entry_from_bytes(payload: bytes) -> L1Entry:
    magic, k, dim, u, intent, created_at, last_hit, tid_len = struct.unpack_from("<4sHHHIQQH", payload)
    if magic != L1_RECORD_MAGIC:
        raise ValueError("Not an L1 entry record")
    offset = struct.calcsize("<4sHHHIQQH")
    tid = payload[offset : offset + tid_len].decode("utf-8")
    offset += tid_len
    centroids = np.frombuffer(payload, dtype="<f4", count=k * dim, offset=offset).reshape(k, dim).astype(np.float64)
    offset += 4 * k * dim
    key = tuple(int(s) for s in np.frombuffer(payload, dtype="<u2", count=u, offset=offset))
    return L1Entry(CentroidSet(centroids), key, intent, tid, created_at, last_hit)


def entry_nbytes(entry: L1Entry) -> int:
    return len(entry_to_bytes(entry))

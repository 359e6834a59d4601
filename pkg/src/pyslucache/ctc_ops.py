"""
Alignment-marginalised sequence matching.

p(l|P) sums the product of per-frame probabilities over every length-T path that collapses to l.
Two collapse maps are supported:

- RepeatMerge (blank-free, L1 sound units): merge adjacent duplicates.
- StandardCtc (L2 phonemes): merge adjacent duplicates, then drop the blank.

All DP runs in the log domain with one vectorised update per frame.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import Infeasible, OracleTooLarge, ShapeError

LabelSequence = tuple
ORACLE_MAX_PATHS = 10**7


class CollapseMode(Enum):
    REPEAT_MERGE = "repeat_merge"
    STANDARD_CTC = "standard_ctc"


@dataclass(frozen=True, eq=False)
class PosteriorSequence:
    """Per-frame log-probabilities (T, V) over an alphabet; blank_index is set for StandardCtc only"""

    log_probs: np.ndarray
    blank_index: int | None = None
    alphabet: tuple | None = None

    def __post_init__(self):
        log_probs = np.asarray(self.log_probs, dtype=np.float64)
        if log_probs.ndim != 2:
            raise ShapeError(f"Posteriors must be a (T, V) matrix, got shape {log_probs.shape}")
        if self.blank_index is not None and not 0 <= self.blank_index < log_probs.shape[1]:
            raise ShapeError(f"blank_index {self.blank_index} outside alphabet of size {log_probs.shape[1]}")
        if self.alphabet is not None and len(self.alphabet) != log_probs.shape[1]:
            raise ShapeError("Alphabet size does not match the posterior width")
        object.__setattr__(self, "log_probs", log_probs)

    @classmethod
    def from_probs(cls, probs: np.ndarray, blank_index: int | None = None, alphabet: tuple | None = None) -> "PosteriorSequence":
        with np.errstate(divide="ignore"):
            return cls(np.log(np.asarray(probs, dtype=np.float64)), blank_index, alphabet)

    @property
    def T(self) -> int:
        return self.log_probs.shape[0]

    @property
    def V(self) -> int:
        return self.log_probs.shape[1]

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


def _check_mode(mode: CollapseMode, blank_index: int | None) -> None:
    if mode is CollapseMode.STANDARD_CTC and blank_index is None:
        raise ValueError("StandardCtc requires a blank index")
    if mode is CollapseMode.REPEAT_MERGE and blank_index is not None:
        raise ValueError("RepeatMerge is blank-free; blank_index must be None")


def collapse(raw: Sequence[int], mode: CollapseMode, blank_index: int | None = None) -> LabelSequence:
    """
    Apply the collapse map: merge adjacent duplicates, and in StandardCtc mode drop blanks afterwards.

    Args:
        - raw (Sequence[int]): Frame-level symbol IDs
        - mode (CollapseMode): RepeatMerge or StandardCtc
        - blank_index (int | None): Blank symbol, required for StandardCtc

    Returns:
        - LabelSequence: Collapsed tuple of symbol IDs
    """

    _check_mode(mode, blank_index)
    merged = tuple(int(symbol) for symbol, _ in itertools.groupby(raw))
    if mode is CollapseMode.STANDARD_CTC:
        return tuple(s for s in merged if s != blank_index)
    return merged


def _validate(posts: PosteriorSequence, target: Sequence[int], mode: CollapseMode) -> np.ndarray:
    _check_mode(mode, posts.blank_index)
    if posts.T < 1:
        raise ShapeError("Posteriors need at least one frame")
    labels = np.asarray(target, dtype=np.int64)
    if labels.ndim != 1 or len(labels) == 0:
        raise ValueError("Target must be a non-empty label sequence")
    if np.any(labels < 0) or np.any(labels >= posts.V):
        raise ValueError(f"Target symbols must lie in [0, {posts.V})")
    if mode is CollapseMode.STANDARD_CTC and np.any(labels == posts.blank_index):
        raise ValueError("StandardCtc targets must not contain the blank")
    return labels


def _shift(values: np.ndarray, by: int) -> np.ndarray:
    """Shift right by `by` (positive) or left (negative), filling with -inf"""

    out = np.full_like(values, -np.inf)
    if by > 0:
        out[by:] = values[:-by]
    else:
        out[:by] = values[-by:]
    return out


def _repeat_merge_tables(log_probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    T, U = log_probs.shape[0], len(labels)
    if U > T:
        raise Infeasible(f"Target of length {U} cannot be emitted in {T} frames")
    if np.any(labels[1:] == labels[:-1]):
        raise Infeasible("Blank-free targets with adjacent duplicates have no collapsing path")

    emit = log_probs[:, labels]
    alpha = np.full((T, U), -np.inf)
    alpha[0, 0] = emit[0, 0]
    for t in range(1, T):
        alpha[t] = np.logaddexp(alpha[t - 1], _shift(alpha[t - 1], 1)) + emit[t]

    beta = np.full((T, U), -np.inf)
    beta[T - 1, U - 1] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        beta[t] = np.logaddexp(nxt, _shift(nxt, -1))

    return alpha, beta, labels, float(alpha[T - 1, U - 1])


def _standard_tables(log_probs: np.ndarray, labels: np.ndarray, blank: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    T, U = log_probs.shape[0], len(labels)
    repeats = int(np.sum(labels[1:] == labels[:-1]))
    if T < U + repeats:
        raise Infeasible(f"Target of length {U} with {repeats} adjacent repeats needs at least {U + repeats} frames, got {T}")

    ext = np.full(2 * U + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    S = len(ext)
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    emit = log_probs[:, ext]
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        two_back = np.where(skip, _shift(prev, 2), -np.inf)
        alpha[t] = np.logaddexp(np.logaddexp(prev, _shift(prev, 1)), two_back) + emit[t]

    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = 0.0
    beta[T - 1, S - 2] = 0.0
    skip_from = np.zeros(S, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        two_ahead = np.where(skip_from, _shift(nxt, -2), -np.inf)
        beta[t] = np.logaddexp(np.logaddexp(nxt, _shift(nxt, -1)), two_ahead)

    log_z = float(np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]))
    return alpha, beta, ext, log_z


def _tables(posts: PosteriorSequence, target: Sequence[int], mode: CollapseMode):
    labels = _validate(posts, target, mode)
    if mode is CollapseMode.REPEAT_MERGE:
        alpha, beta, states, log_z = _repeat_merge_tables(posts.log_probs, labels)
    else:
        alpha, beta, states, log_z = _standard_tables(posts.log_probs, labels, posts.blank_index)
    if not np.isfinite(log_z):
        raise Infeasible("Every collapsing path has probability zero")
    return alpha, beta, states, log_z


def ctc_loss(posts: PosteriorSequence, target: Sequence[int], mode: CollapseMode) -> float:
    """
    Negative log of p(target | posts), marginalised over every collapsing alignment.

    Args:
        - posts (PosteriorSequence): (T, V) log-probabilities
        - target (Sequence[int]): Collapsed label sequence, no blanks
        - mode (CollapseMode): Collapse map defining which paths count

    Returns:
        - float: Non-negative loss; raises Infeasible when the probability is exactly 0
    """

    labels = _validate(posts, target, mode)
    if mode is CollapseMode.REPEAT_MERGE:
        # Forward pass only
        T, U = posts.T, len(labels)
        if U > T or np.any(labels[1:] == labels[:-1]):
            raise Infeasible(f"No blank-free path of {T} frames collapses to a target of length {U}")
        emit = posts.log_probs[:, labels]
        alpha = np.full(U, -np.inf)
        alpha[0] = emit[0, 0]
        for t in range(1, T):
            alpha = np.logaddexp(alpha, _shift(alpha, 1)) + emit[t]
        log_z = alpha[U - 1]
    else:
        _, _, _, log_z = _standard_tables(posts.log_probs, labels, posts.blank_index)

    if not np.isfinite(log_z):
        raise Infeasible("Every collapsing path has probability zero")
    return float(-log_z)


def ctc_occupancy(posts: PosteriorSequence, target: Sequence[int], mode: CollapseMode) -> tuple[float, np.ndarray]:
    """Loss plus gamma[t, k]: posterior probability that frame t emits symbol k on a collapsing path"""

    alpha, beta, states, log_z = _tables(posts, target, mode)
    occupancy = np.exp(alpha + beta - log_z)
    gamma = np.zeros((posts.T, posts.V))
    for s, symbol in enumerate(states):
        gamma[:, symbol] += occupancy[:, s]
    return -log_z, gamma


def ctc_loss_grad(posts: PosteriorSequence, target: Sequence[int], mode: CollapseMode) -> np.ndarray:
    """
    Gradient of the loss with respect to the per-frame activations whose softmax gives the posteriors.

    Equals softmax(row) - gamma; frames or symbols on no collapsing path keep only the softmax term.
    """

    _, gamma = ctc_occupancy(posts, target, mode)
    return np.exp(posts.log_probs) - gamma


def normalized_loss(loss: float, target_length: int) -> float:
    """Loss divided by the target length, the scale thresholds are compared on"""

    return loss / target_length


def normalized_ctc_loss(posts: PosteriorSequence, target: Sequence[int], mode: CollapseMode) -> float:
    return normalized_loss(ctc_loss(posts, target, mode), len(target))


def brute_force_ctc(posts: PosteriorSequence, target: Sequence[int], mode: CollapseMode) -> float:
    """
    Exact p(target | posts) by enumerating all V**T paths. Test oracle only.

    Returns 0.0 for targets no path collapses to.
    """

    _check_mode(mode, posts.blank_index)
    if posts.V**posts.T > ORACLE_MAX_PATHS:
        raise OracleTooLarge(f"{posts.V}**{posts.T} paths exceed the oracle guard of {ORACLE_MAX_PATHS}")

    target = tuple(int(s) for s in target)
    probs = np.exp(posts.log_probs)
    total = 0.0
    for path in itertools.product(range(posts.V), repeat=posts.T):
        if collapse(path, mode, posts.blank_index) == target:
            total += float(np.prod(probs[np.arange(posts.T), path]))
    return total


def min_frames(target: Sequence[int], mode: CollapseMode) -> int:
    """Fewest frames with at least one collapsing path: U, plus one separating blank per adjacent repeat"""

    if mode is CollapseMode.REPEAT_MERGE:
        return len(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_match_ops(T: int, U: int, mode: CollapseMode) -> int:
    """Multiply-add count of one forward DP: states x frames x transitions per state"""

    if mode is CollapseMode.REPEAT_MERGE:
        return T * U * 2
    return T * (2 * U + 1) * 3

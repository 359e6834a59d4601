from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ctc_ops import CollapseMode, PosteriorSequence, ctc_loss, normalized_loss
from .dsp_ops import FeatureSequence
from .errors import Infeasible
from .tensor_ops import GruStack, forward_gru_stack

BLANK = "sp"
# Context-independent ARPAbet set plus the reduced vowel and the flap
PHONEMES = (
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F",
    "G", "HH", "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R",
    "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH", "AX", "DX",
)  # fmt: skip

L2_RECORD_MAGIC = b"SL2E"


@dataclass(frozen=True)
class PhonemeAlphabet:
    """41 phonemes plus the blank; the blank sits at `blank_index`"""

    symbols: tuple[str, ...] = (BLANK,) + PHONEMES
    blank_index: int = 0

    def __post_init__(self):
        if len(self.symbols) != 42:
            raise ValueError(f"Phoneme alphabet must have 42 symbols, got {len(self.symbols)}")
        if self.symbols[self.blank_index] != BLANK:
            raise ValueError(f"Symbol at blank_index {self.blank_index} is not {BLANK!r}")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("Phoneme symbols must be unique")

    def __len__(self) -> int:
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        return self.symbols.index(symbol)

    def encode(self, symbols: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.index(s) for s in symbols)

    def decode(self, ids: Sequence[int]) -> tuple[str, ...]:
        return tuple(self.symbols[i] for i in ids)


DEFAULT_ALPHABET = PhonemeAlphabet()


@dataclass(eq=False)
class L2Entry:
    """
    Phoneme key bound to an intent.

    `key` is the blank-free CTC target; `transport` keeps the word-boundary blanks for display.
    """

    key: tuple[int, ...]
    intent: int
    transcript_id: str
    transport: tuple[int, ...] = ()
    blank_index: int = 0
    created_at: int = 0
    last_hit: int = 0

    def __post_init__(self):
        self.key = tuple(int(s) for s in self.key)
        self.transport = tuple(int(s) for s in self.transport) or self.key
        if not self.key:
            raise ValueError("L2 key must not be empty")
        if self.blank_index in self.key:
            raise ValueError("L2 key must not contain the blank")
        if min(self.key) < 0 or max(self.key) >= 42:
            raise ValueError("L2 key symbols must lie in the 42-symbol alphabet")

    def display(self, alphabet: PhonemeAlphabet = DEFAULT_ALPHABET) -> str:
        return " ".join(alphabet.decode(self.transport))


@dataclass(frozen=True, eq=False)
class L2MatchResult:
    best_entry: L2Entry | None
    loss: float
    hit: bool
    losses: tuple[float, ...] = ()


def phoneme_posteriors(features: FeatureSequence, model: GruStack, blank_index: int = 0) -> PosteriorSequence:
    return forward_gru_stack(features, model, blank_index)


def entry_loss(posts: PosteriorSequence, entry: L2Entry) -> float:
    """Length-normalised CTC loss of the entry key; +inf when 2U+1 > T or no path exists"""

    if 2 * len(entry.key) + 1 > posts.T:
        return float("inf")
    try:
        return normalized_loss(ctc_loss(posts, entry.key, CollapseMode.STANDARD_CTC), len(entry.key))
    except Infeasible:
        return float("inf")


def match_posteriors(posts: PosteriorSequence, entries: Sequence[L2Entry], threshold_fn: Callable[[int], float]) -> L2MatchResult:
    best, best_loss, losses = None, float("inf"), []
    for entry in entries:
        loss = entry_loss(posts, entry)
        losses.append(loss)
        if loss < best_loss:
            best, best_loss = entry, loss

    if best is None:
        return L2MatchResult(None, float("inf"), False, tuple(losses))
    return L2MatchResult(best, best_loss, best_loss <= threshold_fn(len(best.key)), tuple(losses))


def match(features: FeatureSequence, model: GruStack, entries: Sequence[L2Entry], threshold_fn: Callable[[int], float], blank_index: int = 0) -> L2MatchResult:
    """
    Run the extractor once, then score every entry; the lowest normalised loss wins (first on ties).

    Args:
        - features (FeatureSequence): Query features
        - model (GruStack): Extractor snapshot for the query's bucket
        - entries (Sequence[L2Entry]): Candidates, may be empty
        - threshold_fn (Callable[[int], float]): Key length to threshold

    Returns:
        - L2MatchResult: Best entry (None when nothing is feasible), its loss and the hit flag
    """

    if not entries:
        return L2MatchResult(None, float("inf"), False, ())
    return match_posteriors(phoneme_posteriors(features, model, blank_index), entries, threshold_fn)


def l2_match_ops(T: int, U: int) -> int:
    return T * (2 * U + 1) * 3


def entry_to_bytes(entry: L2Entry) -> bytes:
    """Binary record: magic, U u16, transport length u16, intent u32, created_at u64, last_hit u64, transcript id, IDs u8"""

    tid = entry.transcript_id.encode("utf-8")
    header = struct.pack(
        "<4sHHBIQQH",
        L2_RECORD_MAGIC,
        len(entry.key),
        len(entry.transport),
        entry.blank_index,
        entry.intent,
        entry.created_at,
        entry.last_hit,
        len(tid),
    )
    return header + tid + np.asarray(entry.key, dtype=np.uint8).tobytes() + np.asarray(entry.transport, dtype=np.uint8).tobytes()


def entry_from_bytes(payload: bytes) -> L2Entry:
    magic, u, n_transport, blank, intent, created_at, last_hit, tid_len = struct.unpack_from("<4sHHBIQQH", payload)
    if magic != L2_RECORD_MAGIC:
        raise ValueError("Not an L2 entry record")
    offset = struct.calcsize("<4sHHBIQQH")
    tid = payload[offset : offset + tid_len].decode("utf-8")
    offset += tid_len
    key = tuple(payload[offset : offset + u])
    transport = tuple(payload[offset + u : offset + u + n_transport])
    return L2Entry(key, intent, tid, transport, blank, created_at, last_hit)


def entry_nbytes(entry: L2Entry) -> int:
    return len(entry_to_bytes(entry))

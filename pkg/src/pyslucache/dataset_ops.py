from __future__ import annotations

import concurrent.futures
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import pandas as pd

from .cloud_sim import Lexicon
from .dsp_ops import Waveform
from .io_ops import MANIFEST_COLUMNS, normalize_manifest, read_audio, read_manifest, write_manifest, write_wav
from .l2_cache import PHONEMES

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthSpec:
    n_words: int = 24
    n_transcripts: int = 10
    words_per_transcript: tuple[int, int] = (2, 6)
    phonemes_per_word: tuple[int, int] = (2, 4)
    n_intents: int | None = None
    speakers: int = 3
    repeats: int = 5
    jitter: float = 1.0
    phoneme_s: float = 0.16
    word_gap_s: float = 0.05
    edge_silence_s: float = 0.1
    far_fraction: float = 0.0
    sample_rate: int = 16000

    @classmethod
    def from_config(cls, synth_cfg) -> "SynthSpec":
        values = vars(synth_cfg).copy()
        values["words_per_transcript"] = tuple(values["words_per_transcript"])
        values["phonemes_per_word"] = tuple(values["phonemes_per_word"])
        return cls(**values)


@dataclass
class Corpus:
    manifest: pd.DataFrame
    waveforms: dict[str, Waveform]
    lexicon: Lexicon


def _formants(phoneme: str) -> tuple[float, float]:
    """Fixed two-formant signature of a phoneme symbol"""

    i = PHONEMES.index(phoneme) + 1
    return 250.0 + (i * 53) % 650, 900.0 + (i * 197) % 1900


def _render(words: list[tuple[str, ...]], spec: SynthSpec, pitch: float, timing: float, noise_sd: float, far: bool, rng: np.random.Generator) -> np.ndarray:
    sr = spec.sample_rate
    pieces = [np.zeros(int(spec.edge_silence_s * sr))]
    for w, phones in enumerate(words):
        if w:
            pieces.append(np.zeros(int(spec.word_gap_s * sr * timing)))
        for phone in phones:
            n = int(spec.phoneme_s * sr * timing)
            t = np.arange(n) / sr
            f1, f2 = _formants(phone)
            tone = 0.6 * np.sin(2 * np.pi * f1 * pitch * t) + 0.4 * np.sin(2 * np.pi * f2 * pitch * t)
            pieces.append(0.3 * tone * np.hanning(n))
    pieces.append(np.zeros(int(spec.edge_silence_s * sr)))
    samples = np.concatenate(pieces)

    if far:
        delay = int(0.03 * sr)
        echoed = samples.copy()
        echoed[delay:] += 0.4 * samples[:-delay]
        samples = 0.3 * echoed
    if noise_sd > 0:
        samples = samples + rng.normal(0.0, noise_sd, size=len(samples))
    return np.clip(samples, -1.0, 1.0)


def synth_dataset(spec: SynthSpec = SynthSpec(), seed: int = 0) -> Corpus:
    """
    Deterministic desk-scale corpus: every transcript is a word sequence rendered as a tone pattern.

    Args:
        - spec (SynthSpec): Vocabulary, speakers, repeats and rendering parameters
        - seed (int): Seed for the lexicon, the transcripts and every rendering

    Returns:
        - Corpus: Manifest (speakers x transcripts x repeats rows), in-memory waveforms and the lexicon

    Note:
        - Each speaker has a fixed pitch factor; each repeat draws timing and pitch factors within
          +-5% * jitter and additive noise of sd 0.005 * jitter, so jitter=0 repeats are identical
        - Intent of transcript t is t % n_intents (n_intents defaults to one intent per transcript)
    """

    lexicon = Lexicon.generate(spec.n_words, spec.phonemes_per_word, seed)
    vocabulary = sorted(lexicon.entries)
    rng = np.random.default_rng([seed, 1])

    transcripts: list[str] = []
    while len(transcripts) < spec.n_transcripts:
        n = int(rng.integers(spec.words_per_transcript[0], spec.words_per_transcript[1] + 1))
        text = " ".join(vocabulary[i] for i in rng.integers(len(vocabulary), size=n))
        if text not in transcripts:
            transcripts.append(text)

    n_intents = spec.n_intents or spec.n_transcripts
    records, waveforms = [], {}
    for s in range(spec.speakers):
        speaker_id = f"spk{s:02d}"
        pitch = np.random.default_rng([seed, 2, s]).uniform(0.85, 1.15)
        for t, text in enumerate(transcripts):
            words = [lexicon[w] for w in text.split()]
            for r in range(spec.repeats):
                utt_rng = np.random.default_rng([seed, 3, s, t, r])
                timing = 1.0 + spec.jitter * utt_rng.uniform(-0.05, 0.05)
                rep_pitch = pitch * (1.0 + spec.jitter * utt_rng.uniform(-0.05, 0.05))
                far = utt_rng.random() < spec.far_fraction
                samples = _render(words, spec, rep_pitch, timing, 0.005 * spec.jitter, far, utt_rng)

                utterance_id = f"{speaker_id}_t{t:03d}_r{r:02d}"
                waveforms[utterance_id] = Waveform(samples, spec.sample_rate)
                records.append(
                    {
                        "utterance_id": utterance_id,
                        "audio": f"audio/{utterance_id}.wav",
                        "speaker_id": speaker_id,
                        "transcript": text,
                        "intent": t % n_intents,
                        "condition": "far" if far else "close",
                        "duration_s": len(samples) / spec.sample_rate,
                    }
                )

    manifest = normalize_manifest(pd.DataFrame(records, columns=MANIFEST_COLUMNS))
    logger.info(f"Synthesised {len(manifest)} utterances, {len(transcripts)} transcripts, {spec.speakers} speakers", extra={"category": "DATAIO"})
    return Corpus(manifest, waveforms, lexicon)


def write_dataset(corpus: Corpus, out_dir: str) -> str:
    """Write WAVs, `manifest.jsonl` and `lexicon.txt` under out_dir; returns the manifest path"""

    for utterance_id, waveform in corpus.waveforms.items():
        write_wav(os.path.join(out_dir, "audio", f"{utterance_id}.wav"), waveform)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(corpus.manifest, manifest_path)
    corpus.lexicon.save(os.path.join(out_dir, "lexicon.txt"))
    logger.info(f"Corpus written to {out_dir}", extra={"category": "DATAIO"})
    return manifest_path


def load_dataset(manifest_path: str, lexicon_path: str | None = None, use_polars: bool = False) -> Corpus:
    """Read a manifest, its audio (paths relative to the manifest folder) and its lexicon (default: lexicon.txt beside it)"""

    manifest = read_manifest(manifest_path, use_polars=use_polars)
    root = Path(manifest.attrs["root"])
    has_rate = "sample_rate" in manifest.columns
    waveforms = {}
    for row in manifest.itertuples(index=False):
        rate = int(getattr(row, "sample_rate")) if has_rate else None
        waveforms[row.utterance_id] = read_audio(str(root / row.audio), rate)
    lexicon = Lexicon.from_file(lexicon_path or str(root / "lexicon.txt"))
    return Corpus(manifest, waveforms, lexicon)


def run_parallel(func: Callable, items: Iterable, workers: int = 1) -> list:
    """
    Map func over items across worker processes, results in input order

    Args:
        - func (Callable): Picklable function of one item
        - items (Iterable): Work items
        - workers (int): Process count; 1 runs inline, 0 or less uses all available cores

    Returns:
        - list: func(item) for every item, in order
    """

    items = list(items)
    workers = workers if workers > 0 else os.cpu_count()
    if workers == 1 or len(items) <= 1:
        return [func(item) for item in items]

    with concurrent.futures.ProcessPoolExecutor(max_workers=min(workers, len(items))) as executor:
        return list(executor.map(func, items))

import numpy as np
import pytest

from pyslucache.cloud_sim import AugmentationSpec, TrainConfig, TrainingSample, augment, ctc_target, finetune, tokenize
from pyslucache.ctc_ops import PosteriorSequence
from pyslucache.dsp_ops import FeatureSequence, extract_features
from pyslucache.l2_cache import (
    BLANK,
    DEFAULT_ALPHABET,
    L2Entry,
    PhonemeAlphabet,
    entry_from_bytes,
    entry_loss,
    entry_nbytes,
    entry_to_bytes,
    l2_match_ops,
    match,
    match_posteriors,
    phoneme_posteriors,
)
from pyslucache.tensor_ops import Adam, init_gru_stack


def peaked_posteriors(path, n_symbols=42, peak=0.97):
    """Posteriors that put `peak` mass on each frame's symbol of `path`"""
    probs = np.full((len(path), n_symbols), (1 - peak) / (n_symbols - 1))
    probs[np.arange(len(path)), path] = peak
    return PosteriorSequence.from_probs(probs, blank_index=0)


class TestAlphabet:
    """Test the phoneme alphabet"""

    def test_default_layout(self):
        """41 phonemes plus the blank at index 0"""
        assert len(DEFAULT_ALPHABET) == 42
        assert DEFAULT_ALPHABET.symbols[0] == BLANK
        assert DEFAULT_ALPHABET.encode(["AA", "DX"]) == (1, 41)
        assert DEFAULT_ALPHABET.decode((1, 41)) == ("AA", "DX")

    def test_invalid_alphabets(self):
        """Wrong sizes, a misplaced blank and duplicates are refused"""
        with pytest.raises(ValueError):
            PhonemeAlphabet(symbols=("sp", "AA"))
        with pytest.raises(ValueError):
            PhonemeAlphabet(blank_index=1)
        with pytest.raises(ValueError):
            PhonemeAlphabet(symbols=(BLANK,) + ("AA",) * 41)


class TestEntry:
    """Test entry validation and display"""

    def test_blank_not_in_key(self):
        """The key is blank-free"""
        with pytest.raises(ValueError):
            L2Entry((1, 0, 2), 0, "t")
        with pytest.raises(ValueError):
            L2Entry((), 0, "t")
        with pytest.raises(ValueError):
            L2Entry((42,), 0, "t")

    def test_transport_defaults_to_key(self):
        """Display uses the word-boundary transport when present"""
        plain = L2Entry((1, 2), 0, "t")
        assert plain.transport == (1, 2)
        spaced = L2Entry((1, 2), 0, "t", transport=(1, 0, 2))
        assert spaced.display() == "AA sp AE"


class TestScoring:
    """Test losses and matching over posteriors"""

    def test_matching_key_scores_low(self):
        """A key read off the posteriors beats a different key"""
        posts = peaked_posteriors([0, 5, 5, 0, 9, 0, 12, 0])
        good = L2Entry((5, 9, 12), 0, "good")
        bad = L2Entry((7, 3, 20), 1, "bad")
        assert entry_loss(posts, good) < 0.5
        assert entry_loss(posts, bad) > entry_loss(posts, good) + 2.0

    def test_too_long_key_is_inf(self):
        """2U + 1 > T scores +inf"""
        posts = peaked_posteriors([0, 5, 0, 9])
        assert entry_loss(posts, L2Entry((5, 9), 0, "t")) == float("inf")
        assert np.isfinite(entry_loss(peaked_posteriors([0, 5, 0, 9, 0]), L2Entry((5, 9), 0, "t")))

    def test_match_picks_lowest(self):
        """The lowest loss wins and hits when under threshold"""
        posts = peaked_posteriors([0, 5, 5, 0, 9, 0, 12, 0])
        good = L2Entry((5, 9, 12), 3, "good")
        bad = L2Entry((7, 3, 20), 1, "bad")
        result = match_posteriors(posts, [bad, good], lambda u: 1.0)
        assert result.best_entry is good
        assert result.hit
        assert len(result.losses) == 2

    def test_match_all_infeasible(self):
        """When no entry fits the query length there is no best entry"""
        posts = peaked_posteriors([0, 5, 0])
        result = match_posteriors(posts, [L2Entry((5, 9, 12), 0, "t")], lambda u: 10.0)
        assert result.best_entry is None and not result.hit

    def test_match_runs_extractor(self, rng):
        """Feature-level match returns finite losses for feasible keys and skips the extractor on no entries"""
        model = init_gru_stack(input_dim=6, hidden=4, n_out=42, seed=0)
        feats = FeatureSequence(rng.normal(size=(12, 6)), np.arange(12) * 0.02)
        assert match(feats, model, [], lambda u: 1.0).best_entry is None
        result = match(feats, model, [L2Entry((1, 2), 0, "t")], lambda u: 100.0)
        assert result.hit and np.isfinite(result.loss)


class TestRecords:
    """Test the binary entry record"""

    def test_round_trip(self):
        """Key, transport and metadata survive"""
        entry = L2Entry((5, 9, 12), 2, "t003", transport=(5, 0, 9, 12), created_at=4, last_hit=9)
        payload = entry_to_bytes(entry)
        restored = entry_from_bytes(payload)
        assert (restored.key, restored.transport) == (entry.key, entry.transport)
        assert (restored.intent, restored.transcript_id, restored.created_at, restored.last_hit) == (2, "t003", 4, 9)
        assert entry_nbytes(entry) == len(payload)

    def test_records_are_small(self):
        """A phoneme key costs one byte per symbol"""
        short, long = L2Entry((1,), 0, "t"), L2Entry(tuple(range(1, 31)), 0, "t")
        assert entry_nbytes(long) - entry_nbytes(short) == 2 * 29

    def test_bad_magic(self):
        """Foreign payloads are refused"""
        with pytest.raises(ValueError):
            entry_from_bytes(b"SL1E" + bytes(40))

    def test_match_ops(self):
        """Standard CTC DP over 2U + 1 states"""
        assert l2_match_ops(50, 8) == 50 * 17 * 3


@pytest.mark.slow
class TestReplay:
    """Test the cache on an extractor tuned to the cached utterance"""

    def test_tuned_entry_beats_random_keys(self, small_corpus, small_frontend):
        """After finetuning on an utterance and its augmentations, its own key scores below 10 random keys of the same length"""
        frontend, spec = small_frontend
        row = small_corpus.manifest.sort_values("duration_s").iloc[-1]
        waveform = small_corpus.waveforms[row["utterance_id"]]
        target = ctc_target(tokenize(row["transcript"], small_corpus.lexicon))
        waveforms = [waveform] + augment(waveform, AugmentationSpec(versions=1), seed=0)
        pool = [TrainingSample(extract_features(w, frontend, spec).frames, target) for w in waveforms]

        model = init_gru_stack(frontend.feature_dim, hidden=16, n_out=42, seed=0)
        cfg = TrainConfig(lr=1e-2, batch_size=4, max_epochs=150, patience=1000)
        finetune(model, pool, Adam(model.params, lr=cfg.lr), cfg, seed=0)

        posts = phoneme_posteriors(extract_features(waveform, frontend, spec), model)
        own = entry_loss(posts, L2Entry(target, 0, "own"))
        rng = np.random.default_rng(0)
        decoys = [entry_loss(posts, L2Entry(tuple(int(s) for s in rng.integers(1, 42, size=len(target))), 1, f"d{i}")) for i in range(10)]
        assert np.isfinite(own)
        assert own < min(decoys)

import json

import numpy as np
import pytest

from pyslucache.cloud_sim import (
    AugmentationSpec,
    CloudSim,
    Lexicon,
    OffloadRequest,
    TrainConfig,
    TrainingSample,
    augment,
    ctc_target,
    finetune,
    frequency_shift,
    in_domain_pretrain,
    time_shift,
    tokenize,
)
from pyslucache.dsp_ops import Waveform, extract_features
from pyslucache.errors import LexiconMiss, NonFiniteValue, NotInManifest, TrainingDiverged
from pyslucache.tensor_ops import Adam, init_gru_stack


def make_cloud(config, corpus, frontend):
    return CloudSim(config, corpus.manifest, corpus.lexicon, frontend=frontend)


def request_for(corpus, index=0, device_id="dev-0"):
    uid = corpus.manifest.iloc[index]["utterance_id"]
    return OffloadRequest(corpus.waveforms[uid], device_id, uid)


class TestLexicon:
    """Test pronunciations and tokenisation"""

    def test_generate_deterministic(self):
        """Same seed, same table; words never repeat a phoneme back to back"""
        a, b = Lexicon.generate(20, seed=4), Lexicon.generate(20, seed=4)
        assert a.entries == b.entries
        assert len(a) == 20
        for phones in a.entries.values():
            assert 2 <= len(phones) <= 4
            assert all(x != y for x, y in zip(phones, phones[1:]))

    def test_unknown_symbols(self):
        """Pronunciations outside the phoneme set, or using the blank, are refused"""
        with pytest.raises(ValueError):
            Lexicon({"hi": ["HH", "QQ"]})
        with pytest.raises(ValueError):
            Lexicon({"hi": ["sp"]})
        with pytest.raises(ValueError):
            Lexicon({"hi": []})

    def test_file_round_trip(self, tmp_path):
        """Saved lexicons load back; comment lines are skipped"""
        lexicon = Lexicon({"play": ["P", "L", "EY"], "music": ["M", "Y", "UW", "Z", "IH", "K"]})
        path = tmp_path / "lexicon.txt"
        lexicon.save(str(path))
        path.write_text(";; comment\n\n" + path.read_text(encoding="utf-8"), encoding="utf-8")
        assert Lexicon.from_file(str(path)).entries == lexicon.entries

    def test_tokenize_marks_word_boundaries(self):
        """Words are joined by one blank; the CTC target drops it"""
        lexicon = Lexicon({"play": ["P", "L", "EY"], "music": ["M", "Y", "UW"]})
        transport = tokenize("Play, MUSIC!", lexicon)
        alphabet = lexicon.alphabet
        assert transport == alphabet.encode(["P", "L", "EY"]) + (0,) + alphabet.encode(["M", "Y", "UW"])
        assert ctc_target(transport) == alphabet.encode(["P", "L", "EY", "M", "Y", "UW"])

    def test_tokenize_misses(self):
        """Out-of-vocabulary and empty transcripts raise LexiconMiss"""
        lexicon = Lexicon({"play": ["P", "L", "EY"]})
        with pytest.raises(LexiconMiss, match="jazz"):
            tokenize("play jazz", lexicon)
        with pytest.raises(LexiconMiss):
            tokenize("  ...  ", lexicon)


class TestAugment:
    """Test augmented copies"""

    def test_count_and_range(self):
        """Five versions of three transforms give 15 clipped copies"""
        rng = np.random.default_rng(0)
        waveform = Waveform(np.clip(rng.normal(0, 0.5, 16000), -1, 1))
        copies = augment(waveform, AugmentationSpec(), seed=1)
        assert len(copies) == 15
        assert all(np.abs(c.samples).max() <= 1.0 for c in copies)
        assert all(len(c) == len(waveform) for c in copies[5:])

    def test_zero_noise_and_zero_shift(self):
        """Zero shifts and zero noise reproduce the input"""
        waveform = Waveform(np.sin(np.linspace(0, 40, 8000)) * 0.5)
        spec = AugmentationSpec(time_shift_pct=(0.0, 0.0), freq_shift_pct=(0.0, 0.0), noise_pct=0.0, versions=2)
        for copy in augment(waveform, spec):
            np.testing.assert_allclose(copy.samples, waveform.samples, atol=1e-12)

    def test_deterministic_in_seed(self):
        """Same seed, same copies"""
        waveform = Waveform(np.sin(np.linspace(0, 40, 8000)) * 0.5)
        a, b = augment(waveform, AugmentationSpec(versions=1), seed=[3, 4]), augment(waveform, AugmentationSpec(versions=1), seed=[3, 4])
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.samples, y.samples)

    def test_shift_primitives(self):
        """A delay prepends zeros, an advance drops samples, a frequency shift keeps the length"""
        x = np.arange(1.0, 101.0)
        assert np.array_equal(time_shift(x, 5.0)[:5], np.zeros(5))
        assert len(time_shift(x, 5.0)) == 105
        assert np.array_equal(time_shift(x, -5.0), x[5:])
        assert len(frequency_shift(x, 10.0)) == 100
        assert len(frequency_shift(x, -10.0)) == 100


class TestTraining:
    """Test finetuning and pretraining"""

    @staticmethod
    def pool(n=4, seed=0):
        rng = np.random.default_rng(seed)
        return [TrainingSample(rng.normal(size=(10, 4)), (1 + i % 3, 5)) for i in range(n)]

    def test_finetune_lowers_loss(self):
        """A few epochs on a tiny pool reduce the mean loss"""
        model = init_gru_stack(4, 4, 42, seed=0)
        cfg = TrainConfig(lr=1e-2, batch_size=2, max_epochs=8, patience=10)
        result = finetune(model, self.pool(), Adam(model.params, lr=cfg.lr), cfg)
        assert len(result.epoch_losses) == 8
        assert result.epoch_losses[-1] < result.epoch_losses[0]
        assert result.model is model

    def test_loss_falls_across_seeds(self):
        """Over 10 seeds, 5-epoch window means of the training loss fall strictly in at least 9 runs"""
        falling = 0
        for seed in range(10):
            model = init_gru_stack(4, 4, 42, seed=seed)
            cfg = TrainConfig(lr=5e-3, batch_size=2, max_epochs=15, patience=100)
            result = finetune(model, self.pool(seed=seed), Adam(model.params, lr=cfg.lr), cfg, seed=seed)
            windows = np.asarray(result.epoch_losses).reshape(3, 5).mean(axis=1)
            falling += bool(np.all(np.diff(windows) < 0))
        assert falling >= 9

    def test_early_stop(self):
        """Training stops once improvement over `patience` epochs falls below the limit"""
        model = init_gru_stack(4, 4, 42, seed=0)
        cfg = TrainConfig(lr=0.0, batch_size=4, max_epochs=20, patience=2, min_improvement=0.01)
        result = finetune(model, self.pool(), Adam(model.params, lr=0.0), cfg)
        assert len(result.epoch_losses) == 3

    def test_min_epochs_defers_early_stop(self):
        """The stopping rule waits for `min_epochs` epochs"""
        model = init_gru_stack(4, 4, 42, seed=0)
        cfg = TrainConfig(lr=0.0, batch_size=4, max_epochs=20, patience=2, min_improvement=0.01, min_epochs=6)
        result = finetune(model, self.pool(), Adam(model.params, lr=0.0), cfg)
        assert len(result.epoch_losses) == 6

    def test_empty_pool(self):
        """Nothing to train on is an error"""
        model = init_gru_stack(4, 4, 42)
        with pytest.raises(ValueError):
            finetune(model, [], Adam(model.params))

    def test_divergence_rolls_back(self, monkeypatch):
        """A non-finite loss restores the epoch-start weights and raises TrainingDiverged"""
        model = init_gru_stack(4, 4, 42, seed=1)
        before = model.content_hash()

        def broken(*args, **kwargs):
            raise NonFiniteValue("boom")

        monkeypatch.setattr("pyslucache.cloud_sim.batch_loss", broken)
        with pytest.raises(TrainingDiverged):
            finetune(model, self.pool(), Adam(model.params, lr=1e-2), TrainConfig(batch_size=2))
        assert model.content_hash() == before

    def test_pretrain_fraction(self):
        """Fraction 0 leaves the model untouched; fractions outside [0, 1] are refused"""
        model = init_gru_stack(4, 4, 42, seed=2)
        before = model.content_hash()
        assert in_domain_pretrain(model, self.pool(), 0.0).content_hash() == before
        with pytest.raises(ValueError):
            in_domain_pretrain(model, self.pool(), 1.5)
        cfg = TrainConfig(lr=1e-2, batch_size=2, max_epochs=2)
        assert in_domain_pretrain(model, self.pool(), 0.5, cfg).content_hash() != before


class TestCloudSim:
    """Test offload resolution"""

    def test_lexicon_must_cover_manifest(self, small_config, small_corpus, small_frontend):
        """A transcript with an unknown word fails at construction"""
        manifest = small_corpus.manifest.copy()
        manifest.loc[0, "transcript"] = "zzzunknown"
        with pytest.raises(LexiconMiss):
            CloudSim(small_config, manifest, small_corpus.lexicon, frontend=small_frontend)

    def test_not_in_manifest(self, small_config, small_corpus, small_frontend):
        """Unknown utterance IDs are refused"""
        cloud = make_cloud(small_config, small_corpus, small_frontend)
        waveform = next(iter(small_corpus.waveforms.values()))
        with pytest.raises(NotInManifest):
            cloud.resolve(OffloadRequest(waveform, "dev-0", "nobody_t999_r00"))

    def test_resolve_without_learning(self, small_config, small_corpus, small_frontend):
        """learn=False answers from ground truth without counting or training"""
        cloud = make_cloud(small_config, small_corpus, small_frontend)
        before = cloud.shadow[1].content_hash()
        row = small_corpus.manifest.iloc[0]
        response = cloud.resolve(request_for(small_corpus), learn=False)
        assert response.intent == row["intent"]
        assert response.l2_entry.key == ctc_target(tokenize(row["transcript"], small_corpus.lexicon))
        assert response.l2_entry.transport == response.phonemes
        assert response.l1_entry is None
        assert (cloud.offloads, response.offload_count, response.model_push) == (0, 0, None)
        assert cloud.shadow[1].content_hash() == before

    def test_l1_entry_when_not_bypassed(self, config_with, small_corpus, small_frontend):
        """Inputs whose bucket uses L1 get an L1 entry tagged with the utterance"""
        config = config_with({"cache": {"bypass_l1_for_bucket_1": False}})
        cloud = make_cloud(config, small_corpus, small_frontend)
        response = cloud.resolve(request_for(small_corpus), learn=False)
        assert response.l1_entry is not None
        assert response.l1_entry.intent == response.intent
        assert response.l1_entry.centroids.utterance_id == response.utterance_id
        assert cloud.resolve(request_for(small_corpus), learn=False, build_entries=False).l1_entry is None

    def test_push_cadence(self, config_with, small_corpus, small_frontend):
        """Pushes ride on every push_every-th learning offload"""
        config = config_with({"cloud": {"push_every": 2, "finetune": False}})
        cloud = make_cloud(config, small_corpus, small_frontend)
        pushed = [cloud.resolve(request_for(small_corpus, i)).model_push is not None for i in range(4)]
        assert pushed == [False, True, False, True]
        assert cloud.pushes == 2
        assert cloud.offloads == 4

    def test_learning_grows_pool_and_trains(self, small_config, small_corpus, small_frontend):
        """A learning offload adds the utterance and its augmented copies, then finetunes its bucket"""
        cloud = make_cloud(small_config, small_corpus, small_frontend)
        before = cloud.shadow[1].content_hash()
        cloud.resolve(request_for(small_corpus))
        assert 1 <= len(cloud.pools[1]) <= 4
        assert cloud.shadow[1].content_hash() != before
        assert cloud.shadow[2].content_hash() == before

    def test_device_models_are_snapshots(self, small_config, small_corpus, small_frontend):
        """Later cloud training does not leak into an earlier device snapshot"""
        cloud = make_cloud(small_config, small_corpus, small_frontend)
        snapshot = cloud.device_models()
        frozen = snapshot.l2[1].content_hash()
        cloud.resolve(request_for(small_corpus))
        assert snapshot.l2[1].content_hash() == frozen
        push, hashes = cloud.push_now()
        assert hashes[1] == cloud.shadow[1].content_hash() != frozen
        assert sorted(push) == [1, 2, 3]

    def test_pretraining_changes_pushed_models(self, small_config, small_corpus, small_frontend):
        """A cloud pretrained on half the corpus hands out different extractors from an untouched one"""
        plain = make_cloud(small_config, small_corpus, small_frontend)
        pretrained = make_cloud(small_config, small_corpus, small_frontend)
        samples = []
        for row in small_corpus.manifest.itertuples(index=False):
            feats = extract_features(small_corpus.waveforms[row.utterance_id], *small_frontend)
            sample = pretrained.training_sample(feats, row.transcript)
            if sample is not None:
                samples.append(sample)
        pretrained.pretrain(samples, 0.5)
        before, after = plain.device_models().versions, pretrained.device_models().versions
        assert sorted(after) == [1, 2, 3]
        assert all(before[b] != after[b] for b in (1, 2, 3))
        assert len(set(after.values())) == 1

    def test_trace(self, tmp_path, config_with, small_corpus, small_frontend):
        """Every resolve appends a request and a response record"""
        path = tmp_path / "trace" / "cloud.jsonl"
        config = config_with({"cloud": {"trace_path": str(path), "finetune": False}})
        cloud = make_cloud(config, small_corpus, small_frontend)
        cloud.resolve(request_for(small_corpus, 0))
        cloud.resolve(request_for(small_corpus, 1), learn=False)
        records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
        assert [r["type"] for r in records] == ["request", "response", "request", "response"]
        assert records[1]["offload_count"] == 1
        assert all(isinstance(p, str) for p in records[1]["phonemes"])

import pandas as pd
import pytest

from pyslucache import load_config
from pyslucache.benchmark_ops import (
    BenchmarkSetting,
    calibrate_thresholds,
    check_report_identities,
    report_ops_budget,
    run_benchmark,
    speaker_groups,
    split_group,
    summarize,
)
from pyslucache.cache_manager import BucketConfig
from pyslucache.dataset_ops import SynthSpec, synth_dataset
from pyslucache.errors import InfeasibleSetting, InvariantViolation
from pyslucache.io_ops import REPORT_VERSION


def transcript_rows(n_transcripts, per_transcript, speaker="spk00"):
    rows = [
        {"utterance_id": f"{speaker}_t{t:03d}_r{r:02d}", "speaker_id": speaker, "transcript": f"words {t}"}
        for t in range(n_transcripts)
        for r in range(per_transcript)
    ]
    return pd.DataFrame(rows)


class TestSetting:
    """Test setting construction and parsing"""

    def test_constructors_and_labels(self):
        """Each constructor fixes speakers and seen percentage"""
        assert BenchmarkSetting.one_spk_all_seen() == BenchmarkSetting(1, 100)
        assert BenchmarkSetting.one_spk_k_seen(70).label == "1-speaker-70%-seen"
        assert BenchmarkSetting.n_spk_all_seen(3).label == "3-speakers-100%-seen"

    @pytest.mark.parametrize("text,expected", [("1spk-100", (1, 100)), ("1SPK-0", (1, 0)), ("3spk-100%", (3, 100))])
    def test_parse(self, text, expected):
        """Short names map to settings"""
        setting = BenchmarkSetting.parse(text)
        assert (setting.n_speakers, setting.k) == expected

    @pytest.mark.parametrize("text", ["spk-100", "1spk", "1spk-101", "0spk-50"])
    def test_parse_invalid(self, text):
        """Malformed or out-of-range names are refused"""
        with pytest.raises(ValueError):
            BenchmarkSetting.parse(text)


class TestSplits:
    """Test device groups and learning/test splits"""

    def test_speaker_groups_drop_remainder(self):
        """Five speakers in pairs give two groups"""
        manifest = pd.concat([transcript_rows(1, 1, f"spk{s:02d}") for s in (4, 0, 3, 1, 2)])
        assert speaker_groups(manifest, 2) == [("spk00", "spk01"), ("spk02", "spk03")]
        with pytest.raises(InfeasibleSetting):
            speaker_groups(manifest, 6)

    def test_all_seen(self):
        """One learned utterance per transcript, every other utterance is a seen test input"""
        rows = transcript_rows(4, 5)
        split = split_group(rows, BenchmarkSetting(1, 100), 0, ("spk00",), seed=0)
        assert len(split.learning) == 4
        assert len({u.split("_r")[0] for u in split.learning}) == 4
        assert len(split.test) == 16
        assert set(split.test) == split.seen
        assert not set(split.learning) & set(split.test)

    def test_k_seen_proportion(self):
        """All of the uncached half is tested plus the matching share of cached leftovers"""
        rows = transcript_rows(4, 5)
        split = split_group(rows, BenchmarkSetting(1, 40), 0, ("spk00",), seed=1)
        assert len(split.learning) == 2
        assert len(split.test) == 10 + 7
        assert len(split.seen) == 7
        learned_transcripts = {u.split("_r")[0] for u in split.learning}
        assert all(u.split("_r")[0] in learned_transcripts for u in split.seen)
        assert all(u.split("_r")[0] not in learned_transcripts for u in set(split.test) - split.seen)

    def test_k_zero_is_all_unseen(self):
        """k = 0 tests only transcripts that were never cached"""
        split = split_group(transcript_rows(4, 5), BenchmarkSetting(1, 0), 0, ("spk00",), seed=2)
        assert len(split.test) == 10
        assert not split.seen

    @pytest.mark.parametrize(
        "rows,setting",
        [
            (transcript_rows(1, 5), BenchmarkSetting(1, 70)),
            (transcript_rows(4, 5), BenchmarkSetting(1, 70)),
            (transcript_rows(3, 1), BenchmarkSetting(1, 100)),
        ],
    )
    def test_infeasible(self, rows, setting):
        """Too few transcripts, leftovers or test inputs raise InfeasibleSetting"""
        with pytest.raises(InfeasibleSetting):
            split_group(rows, setting, 0, ("spk00",), seed=0)

    def test_deterministic(self):
        """Same seed and group, same split; another group draws differently"""
        rows = transcript_rows(6, 4)
        a = split_group(rows, BenchmarkSetting(1, 100), 0, ("spk00",), seed=5)
        b = split_group(rows, BenchmarkSetting(1, 100), 0, ("spk00",), seed=5)
        assert (a.learning, a.test) == (b.learning, b.test)
        others = [split_group(rows, BenchmarkSetting(1, 100), g, ("spk00",), seed=5).test for g in range(1, 6)]
        assert any(test != a.test for test in others)


class TestIdentities:
    """Test the report consistency checks"""

    def test_tampered_summary(self):
        """Breaking the offload identity trips the check"""
        records = pd.DataFrame(
            [
                {"level": "l2_hit", "intent": 1, "predicted": 1, "bucket": 1, "seen": True, "latency_ms": 185.0, "duration_s": 1.0, "energy_mj": 37.0},
                {"level": "offload", "intent": 2, "predicted": 2, "bucket": 1, "seen": False, "latency_ms": 300.0, "duration_s": 1.0, "energy_mj": 60.0},
            ]
        )
        summary = summarize(records, BucketConfig())
        check_report_identities(summary)
        summary["offload_fraction"] = 0.9
        with pytest.raises(InvariantViolation):
            check_report_identities(summary)


class TestOpsBudget:
    """Test the analytic op counts"""

    def test_structure(self, small_config):
        """The L2 step adds the extractor to the front-end; the ratio lies in (0, 1)"""
        budget = report_ops_budget(small_config).set_index("item")
        ops = budget["ops"]
        assert list(budget.index) == ["l1_step", "l2_step_extra", "l2_step", "l1_entry_match", "l2_entry_match", "l1_to_l2_step_ratio"]
        assert ops["l2_step"] == pytest.approx(ops["l1_step"] + ops["l2_step_extra"])
        assert 0 < ops["l1_to_l2_step_ratio"] < 1
        assert ops["l1_to_l2_step_ratio"] == pytest.approx(ops["l1_step"] / ops["l2_step"])
        assert budget.loc["l1_step", "reference_ops"] == 1.8e6

    def test_default_shapes_keep_reference_ordering(self):
        """At the default shapes an L1 step is cheaper than an L2 step and an L1 entry costs more than an L2 entry"""

        ops = report_ops_budget(load_config(overrides={"frontend": {"calibration_clips": 1}})).set_index("item")["ops"]
        assert ops["l1_step"] < ops["l2_step"]
        assert ops["l1_entry_match"] > ops["l2_entry_match"]


class TestRunBenchmark:
    """Test the end-to-end harness on the small corpus"""

    def test_report_layout(self, small_config, small_corpus):
        """One group, one learned input per transcript, identities hold"""
        report = run_benchmark(small_corpus, BenchmarkSetting.one_spk_all_seen(), small_config)
        assert report["report_version"] == REPORT_VERSION
        assert report["setting"] == {"label": "1-speaker-100%-seen", "n_speakers": 1, "k": 100}
        assert (report["groups"], report["learning_inputs"]) == (1, 3)
        overall = report["overall"]
        assert overall["counts"]["inputs"] == 3
        assert overall["counts"]["seen_inputs"] == 3
        assert list(report["per_speaker"]) == ["spk00"]
        assert report["config"]["seed"] == 0
        check_report_identities(overall)

    def test_deterministic(self, small_config, small_corpus):
        """Same corpus, config and seed give the same report"""
        a = run_benchmark(small_corpus, BenchmarkSetting.one_spk_all_seen(), small_config)
        b = run_benchmark(small_corpus, BenchmarkSetting.one_spk_all_seen(), small_config)
        assert a == b

    def test_calibration(self, config_with, small_corpus):
        """Every held-out entry yields a target per level it is cached at"""
        config = config_with({"cache": {"bypass_l1_for_bucket_1": False}})
        result = calibrate_thresholds(small_corpus, config, max_entries=2)
        assert sorted(result.mlps) == ["l1", "l2"]
        assert len(result.samples) == 4
        assert sorted(result.samples["level"].unique()) == ["l1", "l2"]
        assert all(len(values) == 3 for values in result.static.values())


@pytest.mark.slow
class TestAcceptance:
    """Longer runs that check the cache semantics end to end"""

    def test_exact_replay_hits_everything(self, config_with):
        """Identical repeats of cached transcripts all hit L1 and resolve correctly"""
        config = config_with(
            {
                "l1": {"k": 70},
                "cache": {"bypass_l1_for_bucket_1": False},
                "cloud": {"finetune": False},
                "synth": {"n_transcripts": 4, "repeats": 3, "jitter": 0.0},
            }
        )
        corpus = synth_dataset(SynthSpec.from_config(config.synth), seed=config.seed)
        overall = run_benchmark(corpus, BenchmarkSetting.one_spk_all_seen(), config)["overall"]
        assert overall["counts"]["inputs"] == 8
        assert overall["filter_rate"]["combined"] == 1.0
        assert overall["cache_accuracy"]["combined"] == 1.0
        assert overall["overall_accuracy"] == 1.0

    def test_unseen_transcripts_mostly_offload(self, config_with):
        """k = 0 filters almost nothing and the cloud keeps accuracy up"""
        config = config_with({"cloud": {"finetune": False}, "synth": {"n_transcripts": 6, "repeats": 3}})
        corpus = synth_dataset(SynthSpec.from_config(config.synth), seed=config.seed)
        overall = run_benchmark(corpus, BenchmarkSetting.one_spk_k_seen(0), config)["overall"]
        assert overall["filter_rate"]["combined"] < 0.1
        assert overall["overall_accuracy"] >= 0.97

    def test_workers_do_not_change_results(self, config_with):
        """Process-parallel groups give the same report as the inline run"""
        config = config_with({"synth": {"speakers": 2}, "cloud": {"finetune": False}})
        corpus = synth_dataset(SynthSpec.from_config(config.synth), seed=config.seed)
        inline = run_benchmark(corpus, BenchmarkSetting.one_spk_all_seen(), config)
        pooled = run_benchmark(corpus, BenchmarkSetting.one_spk_all_seen(), config_with({"synth": {"speakers": 2}, "cloud": {"finetune": False}, "benchmark": {"workers": 2}}))
        assert inline["overall"] == pooled["overall"]
        assert inline["per_speaker"] == pooled["per_speaker"]


LEARNING_OVERRIDES = {
    "seed": 0,
    "frontend": {"n_filters": 24, "conv_channels": 24, "calibration_clips": 4},
    "l1": {"k": 12, "max_iter": 50, "fit_on_augmented": False},
    "l2": {"hidden": 32},
    "thresholds": {"mlp_hidden": 8, "mlp_epochs": 50},
    "cloud": {
        "finetune_every": 0,
        "push_every": 1000,
        "augment": {"versions": 2},
        "train": {"lr": 3e-3, "batch_size": 8, "max_epochs": 60, "min_epochs": 60},
    },
    "synth": {"n_words": 12, "n_transcripts": 8, "words_per_transcript": [1, 3], "speakers": 1, "repeats": 5},
}


def learning_config(**sections):
    overrides = {k: dict(v) if isinstance(v, dict) else v for k, v in LEARNING_OVERRIDES.items()}
    for section, values in sections.items():
        overrides.setdefault(section, {}).update(values)
    return load_config(overrides=overrides)


@pytest.fixture(scope="module")
def learning_runs():
    """Tuned and frozen 1spk-100 reports at thresholds calibrated on a held-out corpus"""
    base = learning_config()
    held_out = synth_dataset(SynthSpec.from_config(base.synth), seed=1)
    calibration = calibrate_thresholds(held_out, base)
    thresholds = {"l1": calibration.static["l1"], "l2": calibration.static["l2"]}

    corpus = synth_dataset(SynthSpec.from_config(base.synth), seed=0)
    tuned = learning_config(thresholds=thresholds)
    frozen = learning_config(thresholds=thresholds, cloud={"finetune": False})
    return {
        "tuned": run_benchmark(corpus, BenchmarkSetting.one_spk_all_seen(), tuned)["overall"],
        "frozen": run_benchmark(corpus, BenchmarkSetting.one_spk_all_seen(), frozen)["overall"],
    }


@pytest.mark.slow
class TestLearningEffect:
    """Extractor finetuning on jittered repeats makes the cache useful"""

    def test_calibrated_tuned_cache(self, learning_runs):
        """Jittered 1spk-100 filters at least 45% of inputs with at least 90% cache accuracy"""
        overall = learning_runs["tuned"]
        assert overall["filter_rate"]["combined"] >= 0.45
        assert overall["cache_accuracy"]["combined"] >= 0.9

    def test_finetuning_raises_filter_rate(self, learning_runs):
        """At the same thresholds the tuned extractors filter at least 15 points more than the frozen ones"""
        tuned = learning_runs["tuned"]["filter_rate"]["combined"]
        frozen = learning_runs["frozen"]["filter_rate"]["combined"]
        assert tuned - frozen >= 0.15

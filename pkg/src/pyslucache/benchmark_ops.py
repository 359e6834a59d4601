"""
Benchmark settings, learning/test phases and report aggregation.

A run splits the manifest into device groups (one speaker, or n speakers sharing one device). Each group
gets a fresh cloud and device: the learning phase offloads one utterance per cached transcript and ends
with a model sync, the test phase queries the remaining inputs against the tuned, frozen extractors.
Groups run in parallel; their per-input records are concatenated in group order before aggregation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from . import l1_cache, l2_cache
from .cache_manager import (
    BucketConfig,
    SpeechCacheDevice,
    ThresholdMlp,
    bypasses_l1,
    fit_static_thresholds,
    route,
    threshold_target,
)
from .cloud_sim import CloudSim, Lexicon, OffloadRequest, shared_frontend
from .config_utils import config_to_dict
from .dataset_ops import Corpus, run_parallel
from .dsp_ops import FeatureSequence, FrameSpec, FrontendModel, Waveform, extract_features
from .errors import InfeasibleSetting, InputTooShort, InvariantViolation
from .io_ops import REPORT_VERSION
from .l1_cache import l1_match_ops
from .l2_cache import l2_match_ops
from .latency_utils import Level
from .tensor_ops import gru_stack_ops

logger = logging.getLogger(__name__)

RECORD_COLUMNS = ["group", "utterance_id", "speaker_id", "intent", "predicted", "level", "bucket", "seen", "duration_s", "latency_ms", "energy_mj"]

# Per-step and per-entry costs measured on the reference device, shown next to the analytic counts
REFERENCE_OPS = {
    "l1_step": 1.8e6,
    "l2_step_extra": 2.9e6,
    "l1_entry_match": 2.80e3,
    "l2_entry_match": 1.68e3,
}


@dataclass(frozen=True)
class BenchmarkSetting:
    """
    n_speakers speakers share one device; k is the percentage of test inputs whose transcript was cached.

    Use the constructors: one_spk_all_seen(), one_spk_k_seen(k), n_spk_all_seen(n).
    """

    n_speakers: int = 1
    k: int = 100

    def __post_init__(self):
        if not 0 <= self.k <= 100:
            raise ValueError(f"k must lie in [0, 100], got {self.k}")
        if self.n_speakers < 1:
            raise ValueError(f"n_speakers must be at least 1, got {self.n_speakers}")

    @classmethod
    def one_spk_all_seen(cls) -> "BenchmarkSetting":
        return cls(1, 100)

    @classmethod
    def one_spk_k_seen(cls, k: int) -> "BenchmarkSetting":
        return cls(1, k)

    @classmethod
    def n_spk_all_seen(cls, n: int) -> "BenchmarkSetting":
        return cls(n, 100)

    @property
    def label(self) -> str:
        return f"{self.n_speakers}-speaker{'s' if self.n_speakers > 1 else ''}-{self.k}%-seen"

    @classmethod
    def parse(cls, text: str) -> "BenchmarkSetting":
        """Parse `1spk-100`, `1spk-70` or `3spk-100` style names"""

        try:
            spk, k = text.lower().split("-")
            return cls(int(spk.removesuffix("spk")), int(k.rstrip("%")))
        except ValueError as e:
            raise ValueError(f"Invalid setting {text!r}; expected e.g. 1spk-100, 1spk-70, 3spk-100") from e


@dataclass
class GroupSplit:
    group: int
    speakers: tuple[str, ...]
    learning: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    seen: set[str] = field(default_factory=set)


def speaker_groups(manifest: pd.DataFrame, n_speakers: int) -> list[tuple[str, ...]]:
    """Consecutive groups of n speakers in sorted order; a remainder smaller than n is dropped"""

    speakers = sorted(manifest["speaker_id"].unique())
    if len(speakers) < n_speakers:
        raise InfeasibleSetting(f"Setting needs {n_speakers} speakers per device, manifest has {len(speakers)}")
    n_groups = len(speakers) // n_speakers
    return [tuple(speakers[g * n_speakers : (g + 1) * n_speakers]) for g in range(n_groups)]


def split_group(rows: pd.DataFrame, setting: BenchmarkSetting, group: int, speakers: tuple[str, ...], seed: int) -> GroupSplit:
    """
    Learning/test split of one group's utterances.

    Note:
        - k = 100: one random utterance per transcript is learned, every other utterance is a test input
        - k < 100: transcripts split into a cached half A and an uncached half B (at least one each);
          all of B is tested, plus round(k / (100 - k) * |B inputs|) random non-learned utterances of A
    """

    rng = np.random.default_rng([seed, 17, group])
    split = GroupSplit(group, speakers)
    by_transcript = {t: sorted(df["utterance_id"]) for t, df in rows.groupby("transcript", sort=True)}
    transcripts = list(by_transcript)

    if setting.k == 100:
        for t in transcripts:
            utts = by_transcript[t]
            chosen = utts[int(rng.integers(len(utts)))]
            split.learning.append(chosen)
            split.test.extend(u for u in utts if u != chosen)
            split.seen.update(u for u in utts if u != chosen)
    else:
        if len(transcripts) < 2:
            raise InfeasibleSetting(f"Group {group} has {len(transcripts)} transcript(s); k%-seen needs at least 2")
        order = [transcripts[i] for i in rng.permutation(len(transcripts))]
        n_unseen = max(1, len(order) // 2)
        cached, uncached = order[n_unseen:], order[:n_unseen]

        leftovers = []
        for t in cached:
            utts = by_transcript[t]
            chosen = utts[int(rng.integers(len(utts)))]
            split.learning.append(chosen)
            leftovers.extend(u for u in utts if u != chosen)
        unseen = [u for t in uncached for u in by_transcript[t]]
        n_seen = int(round(setting.k / (100 - setting.k) * len(unseen)))
        if n_seen > len(leftovers):
            raise InfeasibleSetting(f"Group {group}: {setting.k}%-seen needs {n_seen} seen test inputs, only {len(leftovers)} available")
        seen = [leftovers[i] for i in sorted(rng.choice(len(leftovers), size=n_seen, replace=False))] if n_seen else []
        split.test = unseen + seen
        split.seen.update(seen)

    if not split.test:
        raise InfeasibleSetting(f"Group {group} has no test inputs; every transcript needs at least 2 utterances")
    split.test = [split.test[i] for i in rng.permutation(len(split.test))]
    return split


@dataclass
class GroupJob:
    split: GroupSplit
    manifest: pd.DataFrame
    waveforms: dict[str, Waveform]
    lexicon: Lexicon
    config: object
    frontend: tuple[FrontendModel, FrameSpec]


def _pretrain_corpus(job: GroupJob, cloud: CloudSim) -> list:
    excluded = set(job.split.test)
    samples = []
    for row in job.manifest.itertuples(index=False):
        if row.utterance_id in excluded:
            continue
        try:
            feats = extract_features(job.waveforms[row.utterance_id], cloud.frontend, cloud.spec)
        except InputTooShort:
            continue
        sample = cloud.training_sample(feats, row.transcript)
        if sample is not None:
            samples.append(sample)
    return samples


def run_group(job: GroupJob) -> pd.DataFrame:
    """
    Learning then test phase on one fresh device.

    Returns:
        - pd.DataFrame: One record per test input, columns RECORD_COLUMNS
    """

    config, split = job.config, job.split
    seed = int(config.seed)
    # Fresh cloud per group, optionally pretrained in-domain
    cloud = CloudSim(config, job.manifest, job.lexicon, job.frontend)
    if config.cloud.in_domain_fraction > 0:
        cloud.pretrain(_pretrain_corpus(job, cloud), config.cloud.in_domain_fraction)

    # Learning phase ends with a model sync
    device = SpeechCacheDevice(f"device-{split.group}", config, cloud, cloud.device_models(), seed=seed * 1000 + split.group)
    logger.info(f"Group {split.group} {split.speakers}: learning phase, {len(split.learning)} inputs", extra={"category": "STEP"})
    for utterance_id in split.learning:
        device.offload(job.waveforms[utterance_id], utterance_id, install=True, learn=True)
    device.sync()

    # Test phase on the frozen, tuned extractors
    logger.info(f"Group {split.group}: test phase, {len(split.test)} inputs", extra={"category": "STEP"})
    truth = job.manifest.set_index("utterance_id")
    records = []
    for utterance_id in split.test:
        waveform = job.waveforms[utterance_id]
        outcome = device.process(waveform, utterance_id, install_on_offload=config.benchmark.install_during_test, learn=False)
        row = truth.loc[utterance_id]
        records.append(
            {
                "group": split.group,
                "utterance_id": utterance_id,
                "speaker_id": row["speaker_id"],
                "intent": int(row["intent"]),
                "predicted": int(outcome.intent),
                "level": outcome.level.value,
                "bucket": outcome.bucket,
                "seen": utterance_id in split.seen,
                "duration_s": waveform.duration_s,
                "latency_ms": outcome.latency_ms,
                "energy_mj": outcome.energy_mj,
            }
        )
    return pd.DataFrame(records, columns=RECORD_COLUMNS)


def _ratio(num: float, den: float) -> float | None:
    return float(num / den) if den else None


def summarize(records: pd.DataFrame, buckets: BucketConfig) -> dict:
    """
    Aggregate per-input records; every input weighs the same.

    Note:
        - L1 filter rate is normalised by inputs whose bucket does not bypass L1, L2 filter rate by
          inputs L1 did not resolve; ratios with an empty denominator are None
        - Offloads resolve through the ground-truth oracle and count as correct
    """

    n = len(records)
    level = records["level"]
    correct = records["intent"] == records["predicted"]
    l1_reached = int((~records["bucket"].map(lambda b: bypasses_l1(int(b), buckets))).sum()) if n else 0
    l1_hits = int((level == Level.L1_HIT.value).sum())
    l2_hits = int((level == Level.L2_HIT.value).sum())
    offloads = int((level == Level.OFFLOAD.value).sum())
    l1_correct = int((correct & (level == Level.L1_HIT.value)).sum())
    l2_correct = int((correct & (level == Level.L2_HIT.value)).sum())

    return {
        "counts": {
            "inputs": n,
            "l1_reached": l1_reached,
            "l1_hits": l1_hits,
            "l2_reached": n - l1_hits,
            "l2_hits": l2_hits,
            "offloads": offloads,
            "seen_inputs": int(records["seen"].sum()) if n else 0,
        },
        "filter_rate": {
            "l1": _ratio(l1_hits, l1_reached),
            "l2": _ratio(l2_hits, n - l1_hits),
            "combined": _ratio(l1_hits + l2_hits, n),
        },
        "offload_fraction": _ratio(offloads, n),
        "cache_accuracy": {
            "l1": _ratio(l1_correct, l1_hits),
            "l2": _ratio(l2_correct, l2_hits),
            "combined": _ratio(l1_correct + l2_correct, l1_hits + l2_hits),
        },
        "overall_accuracy": _ratio(l1_correct + l2_correct + offloads, n),
        "mean_latency_ms": float(records["latency_ms"].mean()) if n else None,
        "mean_rtf": float((records["latency_ms"] / (records["duration_s"] * 1000.0)).mean()) if n else None,
        "mean_energy_mj": float(records["energy_mj"].mean()) if n else None,
    }


def check_report_identities(summary: dict, tol: float = 1e-9) -> None:
    """Offload fraction = 1 - combined filter rate; overall accuracy = level-weighted accuracies with the oracle at 1"""

    counts, fr, ca = summary["counts"], summary["filter_rate"], summary["cache_accuracy"]
    n = counts["inputs"]
    if not n:
        return
    if abs(summary["offload_fraction"] - (1.0 - fr["combined"])) > tol:
        raise InvariantViolation(f"Offload fraction {summary['offload_fraction']} != 1 - combined filter rate {fr['combined']}")
    weighted = counts["offloads"] / n
    for lvl in ("l1", "l2"):
        if ca[lvl] is not None:
            weighted += counts[f"{lvl}_hits"] / n * ca[lvl]
    if abs(summary["overall_accuracy"] - weighted) > tol:
        raise InvariantViolation(f"Overall accuracy {summary['overall_accuracy']} != level-weighted accuracies {weighted}")


def run_benchmark(corpus: Corpus, setting: BenchmarkSetting, config) -> dict:
    """
    Run every device group of a setting and aggregate the test-phase records.

    Args:
        - corpus (Corpus): Manifest, waveforms and lexicon
        - setting (BenchmarkSetting): Speakers per device and seen percentage
        - config (SimpleNamespace): Full run configuration (config_utils.load_config)

    Returns:
        - dict: Versioned report: overall summary, per-speaker breakdown, config echo and seed
    """

    manifest = corpus.manifest
    seed = int(config.seed)
    frontend = shared_frontend(config)
    jobs = []
    for g, speakers in enumerate(speaker_groups(manifest, setting.n_speakers)):
        rows = manifest[manifest["speaker_id"].isin(speakers)]
        split = split_group(rows, setting, g, speakers, seed)
        waveforms = {u: corpus.waveforms[u] for u in rows["utterance_id"]}
        jobs.append(GroupJob(split, rows.reset_index(drop=True), waveforms, corpus.lexicon, config, frontend))
    logger.info(f"{setting.label}: {len(jobs)} device group(s)", extra={"category": "STEP"})

    results = run_parallel(run_group, jobs, config.benchmark.workers)
    records = pd.concat(results, ignore_index=True) if results else pd.DataFrame(columns=RECORD_COLUMNS)

    buckets = BucketConfig.from_config(config.cache)
    overall = summarize(records, buckets)
    check_report_identities(overall)
    per_speaker = {spk: summarize(df, buckets) for spk, df in records.groupby("speaker_id", sort=True)}

    report = {
        "report_version": REPORT_VERSION,
        "setting": {"label": setting.label, "n_speakers": setting.n_speakers, "k": setting.k},
        "seed": seed,
        "groups": len(jobs),
        "learning_inputs": sum(len(job.split.learning) for job in jobs),
        "overall": overall,
        "per_speaker": per_speaker,
        "config": config_to_dict(config),
    }
    logger.info(
        f"{setting.label}: FR {overall['filter_rate']['combined']}, overall accuracy {overall['overall_accuracy']}",
        extra={"category": "RESULT"},
    )
    return report


@dataclass
class CalibrationResult:
    mlps: dict[str, ThresholdMlp]
    static: dict[str, list[float]]
    samples: pd.DataFrame


def calibrate_thresholds(corpus: Corpus, config, max_entries: int = 100) -> CalibrationResult:
    """
    Fit per-level threshold MLPs and per-bucket static thresholds on held-out data.

    One utterance per transcript (up to max_entries) is offloaded as in a learning phase: the cloud builds
    its entries and, when finetuning is on, trains the bucket extractors on it before the final sync.
    Every other utterance is then scored against every entry with the tuned extractors; the entry's best
    threshold separates same-transcript losses from the rest (cache_manager.threshold_target). The MLP
    maps key length to that threshold.
    """

    seed = int(config.seed)
    manifest = corpus.manifest
    cloud = CloudSim(config, manifest, corpus.lexicon)
    buckets = cloud.buckets
    rng = np.random.default_rng([seed, 23])

    features: dict[str, FeatureSequence] = {}
    for uid in manifest["utterance_id"]:
        try:
            features[uid] = extract_features(corpus.waveforms[uid], cloud.frontend, cloud.spec)
        except InputTooShort:
            logger.warning(f"Calibration skips {uid}: too short")
    usable = manifest[manifest["utterance_id"].isin(features)]

    sources = []
    for _, df in usable.groupby("transcript", sort=True):
        if len(df) >= 2:
            sources.append(df["utterance_id"].iloc[int(rng.integers(len(df)))])
    sources = sources[:max_entries]
    if not sources:
        raise InfeasibleSetting("Calibration needs transcripts with at least 2 utterances")

    # Entries and extractor tuning, as in a learning phase
    responses = {}
    for uid in sources:
        request = OffloadRequest(corpus.waveforms[uid], "calibration", uid, features[uid])
        responses[uid] = cloud.resolve(request, learn=True, build_entries=True)
    cloud.push_now()

    posts = {}
    for row in usable.itertuples(index=False):
        bucket = route(row.duration_s, buckets)
        posts[row.utterance_id] = l2_cache.phoneme_posteriors(features[row.utterance_id], cloud.shadow[bucket], cloud.blank_index)

    truth = usable.set_index("utterance_id")
    samples = []
    for uid in sources:
        response = responses[uid]
        bucket = route(truth.loc[uid, "duration_s"], buckets)
        transcript = truth.loc[uid, "transcript"]
        queries = [q for q in truth.index if q != uid]
        positives = [q for q in queries if truth.loc[q, "transcript"] == transcript]
        negatives = [q for q in queries if truth.loc[q, "transcript"] != transcript]

        entries = [("l2", response.l2_entry, lambda q, e=response.l2_entry: l2_cache.entry_loss(posts[q], e))]
        if response.l1_entry is not None:
            l1_cfg = config.l1
            entries.append(("l1", response.l1_entry, lambda q, e=response.l1_entry: l1_cache.entry_loss(features[q], e, l1_cfg.distribution, l1_cfg.temperature)))
        for level, entry, loss_of in entries:
            target = threshold_target([loss_of(q) for q in positives], [loss_of(q) for q in negatives])
            samples.append({"level": level, "utterance_id": uid, "bucket": bucket, "key_length": len(entry.key), "target": target})

    samples_df = pd.DataFrame(samples, columns=["level", "utterance_id", "bucket", "key_length", "target"])
    tcfg = config.thresholds
    mlps, static = {}, {}
    for level, defaults in (("l1", tcfg.l1), ("l2", tcfg.l2)):
        df = samples_df[samples_df["level"] == level]
        if df.empty:
            logger.warning(f"No {level} calibration samples; keeping defaults")
            static[level] = list(defaults)
            continue
        mlp = ThresholdMlp(tcfg.mlp_hidden, tcfg.length_scale, seed)
        history = mlp.fit(df["key_length"].to_numpy(float), df["target"].to_numpy(float), tcfg.mlp_epochs, tcfg.mlp_lr)
        mlps[level] = mlp
        static[level] = fit_static_thresholds({int(b): g["target"].tolist() for b, g in df.groupby("bucket")}, defaults)
        logger.info(f"{level} threshold MLP fitted on {len(df)} entries, final loss {history[-1]:.4f}", extra={"category": "RESULT"})

    return CalibrationResult(mlps, static, samples_df)


def frontend_step_ops(model: FrontendModel, window_len: int, step: int = 10) -> int:
    """Multiply-adds of the front-end per streaming step of `step` frames: sinc filtering plus each conv layer"""

    total = step * model.n_filters * window_len
    rows = step
    for w in model.conv_w:
        out_ch, in_ch, kernel = w.shape
        total += rows * out_ch * in_ch * kernel
        rows //= model.pool
    return total


def report_ops_budget(config, reference_T: int = 50, reference_U: Sequence[int] = (8, 16)) -> pd.DataFrame:
    """
    Analytic multiply-add counts from the configured shapes.

    Args:
        - config (SimpleNamespace): Run configuration (front-end, L1 and L2 shapes)
        - reference_T (int): Feature rows of the query used for per-entry match costs
        - reference_U (Sequence[int]): (L1 key length, L2 key length) used for per-entry match costs

    Returns:
        - pd.DataFrame: Columns item, ops, reference_ops
    """

    fcfg, l2cfg = config.frontend, config.l2
    model = shared_frontend(config)[0]
    step = fcfg.stream_step
    rows_per_step = step / fcfg.pool**model.n_layers

    frontend = frontend_step_ops(model, fcfg.window_len, step)
    gru = gru_stack_ops(model.feature_dim, l2cfg.hidden, l2cfg.n_phonemes) * rows_per_step
    k = min(config.l1.k, reference_T)
    rows = [
        ("l1_step", frontend, REFERENCE_OPS["l1_step"]),
        ("l2_step_extra", gru, REFERENCE_OPS["l2_step_extra"]),
        ("l2_step", frontend + gru, REFERENCE_OPS["l1_step"] + REFERENCE_OPS["l2_step_extra"]),
        ("l1_entry_match", l1_match_ops(reference_T, reference_U[0], k, model.feature_dim), REFERENCE_OPS["l1_entry_match"]),
        ("l2_entry_match", l2_match_ops(reference_T, reference_U[1]), REFERENCE_OPS["l2_entry_match"]),
        ("l1_to_l2_step_ratio", frontend / (frontend + gru), REFERENCE_OPS["l1_step"] / (REFERENCE_OPS["l1_step"] + REFERENCE_OPS["l2_step_extra"])),
    ]
    return pd.DataFrame(rows, columns=["item", "ops", "reference_ops"])

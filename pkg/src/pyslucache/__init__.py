"""
PySluCache - A two-level learning cache for spoken-intent resolution

This package provides:
- A sinc-filterbank + conv front-end with a streaming variant
- Alignment-marginalised (CTC) sequence matching, with a brute-force oracle
- L1 sound-unit entries (k-means keys) and L2 phoneme entries (GRU posteriors)
- A slot store with LRU and per-intent eviction, duration buckets and thresholds
- A simulated cloud that answers offloads from a manifest and finetunes the extractors
- A benchmark harness with latency/energy accounting and report rendering

Usage:
    from pyslucache import *

    setup_logger()
    config = load_config("config.yaml")

    # Synthetic corpus
    corpus = synth_dataset(SynthSpec.from_config(config.synth), seed=config.seed)
    write_dataset(corpus, "./corpus")

    # Benchmark
    report = run_benchmark(corpus, BenchmarkSetting.one_spk_all_seen(), config)
    print(render_report(report))

    # Matching math
    posts = PosteriorSequence.from_probs(probs, blank_index=0)
    loss = ctc_loss(posts, [1, 2], CollapseMode.STANDARD_CTC)

    # Device-side lookups
    cloud = CloudSim(config, corpus.manifest, corpus.lexicon)
    device = SpeechCacheDevice("dev-0", config, cloud, cloud.device_models())
    outcome = device.process(corpus.waveforms[utterance_id], utterance_id)
"""

# Benchmark harness
from .benchmark_ops import BenchmarkSetting, calibrate_thresholds, report_ops_budget, run_benchmark

# Cache orchestration
from .cache_manager import (
    BucketConfig,
    CacheStore,
    DeviceModels,
    SpeechCacheDevice,
    ThresholdMlp,
    ThresholdPolicy,
    install,
    lookup,
    predict_threshold,
    route,
    warm_up,
)

# Cloud simulation
from .cloud_sim import CloudSim, Lexicon, OffloadRequest, OffloadResponse, augment, finetune, in_domain_pretrain, tokenize

# Configuration
from .config_utils import config_to_dict, load_config

# Sequence matching
from .ctc_ops import CollapseMode, PosteriorSequence, brute_force_ctc, collapse, ctc_loss, ctc_loss_grad

# Corpus
from .dataset_ops import Corpus, SynthSpec, load_dataset, run_parallel, synth_dataset, write_dataset

# Front-end
from .dsp_ops import FeatureSequence, FrameSpec, FrontendModel, StreamingFrontend, Waveform, extract_features, sinc_kernel, sinc_layer

# Errors
from .errors import (
    BadPreload,
    Infeasible,
    InfeasibleSetting,
    InputTooShort,
    InvariantViolation,
    InvalidAudio,
    InvalidFilter,
    LexiconMiss,
    NoGraph,
    NonFiniteValue,
    NotInManifest,
    OracleTooLarge,
    ShapeError,
    SluCacheError,
    TrainingDiverged,
)

# I/O operations
from .io_ops import load_tensors, read_audio, read_manifest, save_tensors, write_manifest, yaml_to_object

# Cache levels
from .l1_cache import L1Entry, discretize, kmeans
from .l2_cache import DEFAULT_ALPHABET, L2Entry, PhonemeAlphabet

# Latency and energy
from .latency_utils import LatencyModel, Level, account_energy, account_latency, get_time_dif

# Logger setup
from .logger_utils import setup_logger

# Report rendering
from .report_ops import format_decimal, render_report

# Autodiff
from .tensor_ops import Adam, GruStack, Tensor, adam_step, init_gru_stack

__version__ = "0.1.0"

# Main exports for `from pyslucache import *`
__all__ = [
    # Benchmark
    "BenchmarkSetting",
    "calibrate_thresholds",
    "report_ops_budget",
    "run_benchmark",
    # Cache orchestration
    "BucketConfig",
    "CacheStore",
    "DeviceModels",
    "SpeechCacheDevice",
    "ThresholdMlp",
    "ThresholdPolicy",
    "install",
    "lookup",
    "predict_threshold",
    "route",
    "warm_up",
    # Cloud
    "CloudSim",
    "Lexicon",
    "OffloadRequest",
    "OffloadResponse",
    "augment",
    "finetune",
    "in_domain_pretrain",
    "tokenize",
    # Configuration
    "config_to_dict",
    "load_config",
    # Sequence matching
    "CollapseMode",
    "PosteriorSequence",
    "brute_force_ctc",
    "collapse",
    "ctc_loss",
    "ctc_loss_grad",
    # Corpus
    "Corpus",
    "SynthSpec",
    "load_dataset",
    "run_parallel",
    "synth_dataset",
    "write_dataset",
    # Front-end
    "FeatureSequence",
    "FrameSpec",
    "FrontendModel",
    "StreamingFrontend",
    "Waveform",
    "extract_features",
    "sinc_kernel",
    "sinc_layer",
    # Errors
    "BadPreload",
    "Infeasible",
    "InfeasibleSetting",
    "InputTooShort",
    "InvariantViolation",
    "InvalidAudio",
    "InvalidFilter",
    "LexiconMiss",
    "NoGraph",
    "NonFiniteValue",
    "NotInManifest",
    "OracleTooLarge",
    "ShapeError",
    "SluCacheError",
    "TrainingDiverged",
    # I/O operations
    "load_tensors",
    "read_audio",
    "read_manifest",
    "save_tensors",
    "write_manifest",
    "yaml_to_object",
    # Cache levels
    "DEFAULT_ALPHABET",
    "L1Entry",
    "L2Entry",
    "PhonemeAlphabet",
    "discretize",
    "kmeans",
    # Latency and energy
    "LatencyModel",
    "Level",
    "account_energy",
    "account_latency",
    "get_time_dif",
    # Logger
    "setup_logger",
    # Reports
    "format_decimal",
    "render_report",
    # Autodiff
    "Adam",
    "GruStack",
    "Tensor",
    "adam_step",
    "init_gru_stack",
]

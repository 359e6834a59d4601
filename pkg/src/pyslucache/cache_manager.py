"""
Device-side cache orchestration.

An input is routed to a duration bucket, tried against L1 (unless the bucket bypasses it), then L2, and
offloaded to the cloud on a double miss. Every offload installs one slot: the (optional) L1 entry and the
L2 entry the cloud returned for it. The store evicts least-recently-used slots, capping each intent first.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter, OrderedDict
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import l1_cache, l2_cache
from .dsp_ops import FeatureSequence, FrameSpec, FrontendModel, Waveform, extract_features
from .errors import BadPreload, InvariantViolation
from .io_ops import load_json, load_tensors, save_json, save_tensors
from .l1_cache import CentroidSet, L1Entry
from .l2_cache import L2Entry
from .latency_utils import LatencyModel, Level, account_energy, account_latency
from .tensor_ops import Adam, GruStack, Tensor, matmul, mean, mul, relu, sub

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BucketConfig:
    """Buckets are (0, b1], (b1, b2), [b2, inf), numbered 1 to 3"""

    boundaries: tuple[float, float] = (2.7, 4.0)
    bypass_l1_for_bucket_1: bool = True

    def __post_init__(self):
        lo, hi = self.boundaries
        if not 0 < lo < hi:
            raise ValueError(f"Bucket boundaries must satisfy 0 < b1 < b2, got {self.boundaries}")

    @classmethod
    def from_config(cls, cache_cfg) -> "BucketConfig":
        return cls(tuple(cache_cfg.bucket_boundaries), cache_cfg.bypass_l1_for_bucket_1)


def route(duration_s: float, config: BucketConfig) -> int:
    """Bucket index (1, 2 or 3) of an input by its duration"""

    if duration_s <= 0:
        raise ValueError(f"Duration must be positive, got {duration_s}")
    lo, hi = config.boundaries
    if duration_s <= lo:
        return 1
    if duration_s < hi:
        return 2
    return 3


def bypasses_l1(bucket: int, config: BucketConfig) -> bool:
    return bucket == 1 and config.bypass_l1_for_bucket_1


class ThresholdMlp:
    """
    Key length to match threshold: input/length_scale -> Linear(1, H) -> ReLU -> Linear(H, 1), clipped at 0.

    With the default hidden size of 64 this has 193 parameters.
    """

    def __init__(self, hidden: int = 64, length_scale: float = 100.0, seed: int = 0):
        rng = np.random.default_rng(seed)
        bound_2 = 1 / np.sqrt(hidden)
        self.hidden = hidden
        self.length_scale = length_scale
        self.params = {
            "w1": Tensor(rng.uniform(-1.0, 1.0, (1, hidden)), requires_grad=True),
            "b1": Tensor(rng.uniform(-1.0, 1.0, hidden), requires_grad=True),
            "w2": Tensor(rng.uniform(-bound_2, bound_2, (hidden, 1)), requires_grad=True),
            "b2": Tensor(rng.uniform(-bound_2, bound_2, 1), requires_grad=True),
        }

    @property
    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def _forward(self, lengths: np.ndarray) -> Tensor:
        x = Tensor(np.asarray(lengths, dtype=np.float64).reshape(-1, 1) / self.length_scale)
        p = self.params
        return matmul(relu(matmul(x, p["w1"]) + p["b1"]), p["w2"]) + p["b2"]

    def predict(self, lengths) -> np.ndarray:
        return np.maximum(self._forward(lengths).data[:, 0], 0.0)

    def fit(self, lengths: Sequence[float], targets: Sequence[float], epochs: int = 2000, lr: float = 1e-2) -> list[float]:
        """Full-batch Adam on mean squared error; returns the loss of every epoch"""

        targets = Tensor(np.asarray(targets, dtype=np.float64).reshape(-1, 1))
        optimizer = Adam(self.params, lr=lr)
        history = []
        for _ in range(epochs):
            optimizer.zero_grad()
            diff = sub(self._forward(lengths), targets)
            loss = mean(mul(diff, diff))
            loss.backward()
            optimizer.step()
            history.append(loss.item())
        return history

    def to_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        arrays = {f"{prefix}{name}": p.data.copy() for name, p in self.params.items()}
        arrays[f"{prefix}length_scale"] = np.array([self.length_scale])
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str = "") -> "ThresholdMlp":
        hidden = arrays[f"{prefix}w1"].shape[1]
        mlp = cls(hidden=hidden, length_scale=float(arrays[f"{prefix}length_scale"][0]))
        for name in mlp.params:
            mlp.params[name].data = np.array(arrays[f"{prefix}{name}"], dtype=np.float64)
        return mlp


def predict_threshold(key_length: int, mlp: ThresholdMlp) -> float:
    if key_length < 1:
        raise ValueError(f"Key length must be at least 1, got {key_length}")
    return float(mlp.predict([key_length])[0])


def threshold_target(positive_losses: Sequence[float], negative_losses: Sequence[float]) -> float:
    """
    Best threshold for one held-out entry: the largest value that still rejects every negative.

    Positives at or above the smallest negative loss cannot be admitted without admitting that negative;
    rejecting negatives wins. With no negatives the largest positive loss admits every positive.
    """

    negatives = [x for x in negative_losses if np.isfinite(x)]
    if negatives:
        return float(np.nextafter(min(negatives), -np.inf))
    positives = [x for x in positive_losses if np.isfinite(x)]
    if positives:
        return float(max(positives))
    return 0.0


def fit_static_thresholds(targets_by_bucket: dict[int, Sequence[float]], defaults: Sequence[float]) -> list[float]:
    """Per-bucket constant threshold: the median target, or the default for buckets with no samples"""

    return [float(np.median(targets_by_bucket[b])) if len(targets_by_bucket.get(b, ())) else float(defaults[b - 1]) for b in (1, 2, 3)]


class ThresholdPolicy:
    """Static per-bucket constants, or one length-conditioned MLP per cache level"""

    def __init__(self, l1: Sequence[float] = (1.0, 1.0, 1.0), l2: Sequence[float] = (1.5, 1.5, 1.5), mlps: dict[str, ThresholdMlp] | None = None):
        self.static = {"l1": [float(x) for x in l1], "l2": [float(x) for x in l2]}
        self.mlps = mlps or {}

    @classmethod
    def from_config(cls, thresholds_cfg) -> "ThresholdPolicy":
        mlps = None
        if thresholds_cfg.mode == "mlp":
            if thresholds_cfg.mlp_path is None:
                raise ValueError("thresholds.mode 'mlp' needs thresholds.mlp_path")
            mlps = load_threshold_mlps(thresholds_cfg.mlp_path)
        return cls(thresholds_cfg.l1, thresholds_cfg.l2, mlps)

    def fn(self, level: str, bucket: int) -> Callable[[int], float]:
        if level in self.mlps:
            mlp = self.mlps[level]
            return lambda key_length: predict_threshold(key_length, mlp)
        value = self.static[level][bucket - 1]
        return lambda key_length: value


def save_threshold_mlps(mlps: dict[str, ThresholdMlp], file_path: str) -> None:
    arrays = {}
    for level, mlp in mlps.items():
        arrays.update(mlp.to_arrays(prefix=f"{level}."))
    save_tensors(file_path, arrays)


def load_threshold_mlps(file_path: str) -> dict[str, ThresholdMlp]:
    arrays = load_tensors(file_path)
    levels = sorted({name.split(".")[0] for name in arrays})
    return {level: ThresholdMlp.from_arrays(arrays, prefix=f"{level}.") for level in levels}


@dataclass(eq=False)
class CacheSlot:
    slot_id: int
    l1: L1Entry | None
    l2: L2Entry
    created_at: int = 0
    last_hit: int = 0

    @property
    def intent(self) -> int:
        return self.l2.intent

    @property
    def transcript_id(self) -> str:
        return self.l2.transcript_id


class CacheStore:
    """
    Slots in least-recently-used order under a logical clock.

    Only the store writes timestamps: install stamps created_at and last_hit, touch refreshes last_hit.
    """

    def __init__(self, capacity: int = 60, per_intent_cap: int = 8):
        if capacity <= 0 or per_intent_cap <= 0:
            raise ValueError("capacity and per_intent_cap must be positive")
        self.capacity = capacity
        self.per_intent_cap = per_intent_cap
        self.clock = 0
        self._next_id = 0
        self._slots: OrderedDict[int, CacheSlot] = OrderedDict()

    def __len__(self) -> int:
        return len(self._slots)

    @property
    def slots(self) -> list[CacheSlot]:
        """Slots in creation order (the order lookups score them in)"""

        return sorted(self._slots.values(), key=lambda s: s.slot_id)

    def lru_order(self) -> list[int]:
        return list(self._slots)

    def l1_entries(self) -> list[L1Entry]:
        return [s.l1 for s in self.slots if s.l1 is not None]

    def l2_entries(self) -> list[L2Entry]:
        return [s.l2 for s in self.slots]

    def intent_counts(self) -> Counter:
        return Counter(s.intent for s in self._slots.values())

    def slot_of(self, entry: L1Entry | L2Entry) -> CacheSlot:
        for slot in self._slots.values():
            if slot.l1 is entry or slot.l2 is entry:
                return slot
        raise KeyError("Entry is not in the store")

    def _stamp(self, slot: CacheSlot) -> None:
        slot.last_hit = self.clock
        for entry in (slot.l1, slot.l2):
            if entry is not None:
                entry.last_hit = self.clock

    def touch(self, slot_id: int) -> None:
        """Refresh recency of a slot after a hit"""

        self.clock += 1
        slot = self._slots[slot_id]
        self._stamp(slot)
        self._slots.move_to_end(slot_id)

    def _evict(self, slot_id: int, reason: str) -> CacheSlot:
        slot = self._slots.pop(slot_id)
        logger.debug(f"Evicted slot {slot_id} (intent {slot.intent}, {reason})", extra={"category": "CACHE"})
        return slot

    def install(self, l1_entry: L1Entry | None, l2_entry: L2Entry) -> list[CacheSlot]:
        """
        Insert one slot, evicting first the intent's own LRU slot when the intent is at its cap,
        then the global LRU slot when the store is full.

        Returns:
            - list[CacheSlot]: Evicted slots
        """

        if l1_entry is not None and l1_entry.intent != l2_entry.intent:
            raise ValueError("L1 and L2 entries of one slot must share the intent")

        evicted = []
        if self.intent_counts()[l2_entry.intent] >= self.per_intent_cap:
            victim = next(sid for sid, s in self._slots.items() if s.intent == l2_entry.intent)
            evicted.append(self._evict(victim, "per-intent cap"))
        if len(self._slots) >= self.capacity:
            evicted.append(self._evict(next(iter(self._slots)), "capacity"))

        self.clock += 1
        slot = CacheSlot(self._next_id, l1_entry, l2_entry, created_at=self.clock)
        for entry in (l1_entry, l2_entry):
            if entry is not None:
                entry.created_at = self.clock
        self._stamp(slot)
        self._slots[slot.slot_id] = slot
        self._next_id += 1
        logger.debug(f"Installed slot {slot.slot_id} for intent {slot.intent}", extra={"category": "CACHE"})
        return evicted

    def check_invariants(self) -> None:
        """Raise InvariantViolation when capacity, per-intent caps or LRU stamps are broken"""

        if len(self._slots) > self.capacity:
            raise InvariantViolation(f"Store holds {len(self._slots)} slots, capacity {self.capacity}")
        counts = self.intent_counts()
        if any(c > self.per_intent_cap for c in counts.values()):
            raise InvariantViolation(f"Per-intent cap {self.per_intent_cap} violated: {dict(counts)}")
        stamps = [s.last_hit for s in self._slots.values()]
        if any(a >= b for a, b in zip(stamps, stamps[1:])):
            raise InvariantViolation("LRU order disagrees with last_hit timestamps")

    def content_hash(self) -> str:
        """Hash of the cached content in creation order; recency metadata is excluded"""

        digest = hashlib.sha256()
        for slot in self.slots:
            digest.update(f"{slot.slot_id}|{slot.created_at}|".encode("utf-8"))
            if slot.l1 is not None:
                l1 = replace(slot.l1, last_hit=0)
                digest.update(l1_cache.entry_to_bytes(l1))
            digest.update(l2_cache.entry_to_bytes(replace(slot.l2, last_hit=0)))
        return digest.hexdigest()

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "per_intent_cap": self.per_intent_cap,
            "clock": self.clock,
            "next_id": self._next_id,
            "slots": [_slot_to_record(s) for s in self._slots.values()],
        }

    def save(self, file_path: str) -> None:
        save_json(self.to_dict(), file_path)

    @classmethod
    def load(cls, file_path: str) -> "CacheStore":
        data = load_json(file_path)
        store = cls(data["capacity"], data["per_intent_cap"])
        store.clock = data["clock"]
        store._next_id = data["next_id"]
        for record in data["slots"]:
            slot = _slot_from_record(record)
            store._slots[slot.slot_id] = slot
        store.check_invariants()
        return store


def _slot_to_record(slot: CacheSlot) -> dict:
    record = {
        "slot_id": slot.slot_id,
        "created_at": slot.created_at,
        "last_hit": slot.last_hit,
        "intent": slot.intent,
        "transcript_id": slot.transcript_id,
        "l2": {"key": list(slot.l2.key), "transport": list(slot.l2.transport), "blank_index": slot.l2.blank_index},
        "l1": None,
    }
    if slot.l1 is not None:
        record["l1"] = {
            "centroids": slot.l1.centroids.centroids.tolist(),
            "utterance_id": slot.l1.centroids.utterance_id,
            "key": list(slot.l1.key),
        }
    return record


def _slot_from_record(record: dict) -> CacheSlot:
    try:
        stamps = {"created_at": int(record.get("created_at", 0)), "last_hit": int(record.get("last_hit", 0))}
        l2 = L2Entry(record["l2"]["key"], int(record["intent"]), str(record["transcript_id"]), record["l2"].get("transport", ()), record["l2"].get("blank_index", 0), **stamps)
        l1 = None
        if record.get("l1") is not None:
            centroids = CentroidSet(np.asarray(record["l1"]["centroids"], dtype=np.float64), record["l1"].get("utterance_id", ""))
            l1 = L1Entry(centroids, record["l1"]["key"], l2.intent, l2.transcript_id, **stamps)
        return CacheSlot(int(record.get("slot_id", 0)), l1, l2, **stamps)
    except (KeyError, TypeError, ValueError) as e:
        raise BadPreload(f"Malformed cache record: {e}") from e


def warm_up(store: CacheStore, preload: str | dict | None) -> CacheStore:
    """
    Preload example slots before live traffic.

    Args:
        - store (CacheStore): Store to fill
        - preload (str | dict | None): Snapshot file path or snapshot dict with a `slots` list; None leaves the store cold

    Returns:
        - CacheStore: The same store, populated (truncated to capacity with a warning)
    """

    if preload is None:
        return store
    try:
        data = load_json(preload) if isinstance(preload, str) else preload
        records = data["slots"]
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise BadPreload(f"Unreadable preload: {e}") from e
    if not isinstance(records, list):
        raise BadPreload("Preload `slots` must be a list")

    if len(records) > store.capacity:
        logger.warning(f"Preload has {len(records)} slots, truncated to capacity {store.capacity}")
        records = records[: store.capacity]
    for record in records:
        slot = _slot_from_record(record)
        store.install(slot.l1, slot.l2)
    logger.info(f"Warm-up installed {len(records)} slots", extra={"category": "CACHE"})
    return store


@dataclass
class DeviceModels:
    """Frozen shared front-end plus one learnable L2 extractor per bucket"""

    frontend: FrontendModel
    spec: FrameSpec
    l2: dict[int, GruStack]
    versions: dict[int, str] = field(default_factory=dict)

    def apply_push(self, push: dict[int, dict[str, np.ndarray]], content_hashes: dict[int, str] | None = None) -> None:
        """Swap in pushed extractor snapshots; lookups holding the old object keep using it"""

        for bucket, arrays in push.items():
            model = GruStack.from_arrays(arrays, classifier_bias=self.l2[bucket].classifier_bias)
            self.l2 = {**self.l2, bucket: model}
            self.versions[bucket] = (content_hashes or {}).get(bucket, model.content_hash())


@dataclass(frozen=True)
class LookupOutcome:
    level: Level
    intent: int
    bucket: int
    l1_loss: float | None = None
    l2_loss: float | None = None
    latency_ms: float = 0.0
    energy_mj: float = 0.0
    slot_id: int | None = None


def lookup(
    waveform: Waveform,
    store: CacheStore,
    models: DeviceModels,
    thresholds: ThresholdPolicy,
    offload: Callable[[FeatureSequence], int],
    buckets: BucketConfig = BucketConfig(),
    latency: LatencyModel = LatencyModel(),
    rng: np.random.Generator | None = None,
    l1_distribution: str = "softmax",
    l1_temperature: float = 0.05,
    features: FeatureSequence | None = None,
) -> LookupOutcome:
    """
    L1 (unless bypassed), then L2, then Offload.

    Args:
        - waveform (Waveform): Input audio, its duration picks the bucket
        - store (CacheStore): Cached slots; a hit touches only the matched slot's recency
        - models (DeviceModels): Front-end and per-bucket extractors
        - thresholds (ThresholdPolicy): Static or length-conditioned thresholds per level
        - offload (Callable[[FeatureSequence], int]): Called exactly once on a double miss; returns the
          cloud's intent and may install entries for later inputs
        - features (FeatureSequence | None): Precomputed features of `waveform`

    Returns:
        - LookupOutcome: Level, resolved intent, bucket, losses and the latency/energy charge
    """

    if features is None:
        features = extract_features(waveform, models.frontend, models.spec)
    bucket = route(waveform.duration_s, buckets)
    l1_loss = l2_loss = None

    if not bypasses_l1(bucket, buckets):
        r1 = l1_cache.match(features, store.l1_entries(), thresholds.fn("l1", bucket), l1_distribution, l1_temperature)
        l1_loss = r1.loss
        if r1.hit:
            slot = store.slot_of(r1.best_entry)
            store.touch(slot.slot_id)
            return _outcome(Level.L1_HIT, slot.intent, bucket, l1_loss, None, waveform, latency, rng, slot.slot_id)

    r2 = l2_cache.match(features, models.l2[bucket], store.l2_entries(), thresholds.fn("l2", bucket))
    l2_loss = r2.loss
    if r2.hit:
        slot = store.slot_of(r2.best_entry)
        store.touch(slot.slot_id)
        return _outcome(Level.L2_HIT, slot.intent, bucket, l1_loss, l2_loss, waveform, latency, rng, slot.slot_id)

    intent = int(offload(features))
    return _outcome(Level.OFFLOAD, intent, bucket, l1_loss, l2_loss, waveform, latency, rng, None)


def _outcome(level, intent, bucket, l1_loss, l2_loss, waveform, latency, rng, slot_id) -> LookupOutcome:
    latency_ms = account_latency(level, waveform.duration_s, latency, rng)
    return LookupOutcome(level, intent, bucket, l1_loss, l2_loss, latency_ms, account_energy(level, latency_ms, latency), slot_id)


def install(store: CacheStore, l1_entry: L1Entry | None, l2_entry: L2Entry) -> CacheStore:
    store.install(l1_entry, l2_entry)
    return store


class SpeechCacheDevice:
    """
    One simulated device: its store, its model snapshots and its link to the cloud.

    Inputs are processed strictly one after another.
    """

    def __init__(self, device_id: str, config, cloud, models: DeviceModels, seed: int = 0):
        self.device_id = device_id
        self.config = config
        self.cloud = cloud
        self.models = models
        self.store = CacheStore(config.cache.capacity, config.cache.per_intent_cap)
        self.buckets = BucketConfig.from_config(config.cache)
        self.thresholds = ThresholdPolicy.from_config(config.thresholds)
        self.latency = LatencyModel.from_config(config.latency)
        self.rng = np.random.default_rng(seed)
        warm_up(self.store, config.cache.preload_path)

    def process(self, waveform: Waveform, utterance_id: str, install_on_offload: bool = True, learn: bool = True) -> LookupOutcome:
        """
        Resolve one input. On offload the cloud answers; `install_on_offload` controls whether the returned
        entries are cached and `learn` whether the cloud counts the offload and trains on it.
        """

        features = extract_features(waveform, self.models.frontend, self.models.spec)

        def resolve_remotely(query: FeatureSequence) -> int:
            return self.offload(waveform, utterance_id, install_on_offload, learn, query).intent

        return lookup(
            waveform,
            self.store,
            self.models,
            self.thresholds,
            resolve_remotely,
            self.buckets,
            self.latency,
            self.rng,
            self.config.l1.distribution,
            self.config.l1.temperature,
            features,
        )

    def offload(self, waveform: Waveform, utterance_id: str, install: bool = True, learn: bool = True, features: FeatureSequence | None = None):
        """Send one input straight to the cloud, skipping the lookup; returns the OffloadResponse"""

        from .cloud_sim import OffloadRequest

        response = self.cloud.resolve(OffloadRequest(waveform, self.device_id, utterance_id, features), learn=learn, build_entries=install)
        if install:
            self.store.install(response.l1_entry, response.l2_entry)
        if response.model_push is not None:
            self.models.apply_push(response.model_push, response.model_hashes)
            logger.info(f"{self.device_id}: applied model push", extra={"category": "PROCESS"})
        return response

    def sync(self) -> None:
        """Pull the cloud's current shadow models (end of a learning phase)"""

        push, hashes = self.cloud.push_now()
        self.models.apply_push(push, hashes)

"""
Simulated cloud runtime.

The cloud resolves offloaded inputs from manifest ground truth, turns transcripts into phoneme references,
builds the new L1/L2 entries, keeps one shadow copy of the learnable extractor per duration bucket and
finetunes it on every seen utterance plus its augmented copies. Shadow copies are pushed to the device
every `push_every` offloads.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.signal import resample

from .cache_manager import BucketConfig, DeviceModels, bypasses_l1, route
from .ctc_ops import CollapseMode, min_frames
from .dsp_ops import (
    FeatureSequence,
    FrameSpec,
    FrontendModel,
    Waveform,
    calibrate_batch_norm,
    calibration_audio,
    extract_features,
    frontend_from_config,
)
from .errors import InputTooShort, LexiconMiss, NonFiniteValue, NotInManifest, TrainingDiverged
from .io_ops import append_jsonl
from .l1_cache import L1Entry, build_entry
from .l2_cache import DEFAULT_ALPHABET, PHONEMES, L2Entry, PhonemeAlphabet
from .tensor_ops import Adam, GruStack, Tensor, ctc_loss_op, gru_stack_log_probs, init_gru_stack, mul

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[a-z0-9']+")


def _stable_int(text: str) -> int:
    return int(hashlib.sha256(text.encode("utf-8")).hexdigest()[:8], 16)


class Lexicon:
    """Word to phoneme-symbol map"""

    def __init__(self, entries: dict[str, Sequence[str]], alphabet: PhonemeAlphabet = DEFAULT_ALPHABET):
        self.alphabet = alphabet
        self.entries: dict[str, tuple[str, ...]] = {}
        for word, phones in entries.items():
            phones = tuple(phones)
            if not phones:
                raise ValueError(f"Lexicon word {word!r} has no phonemes")
            unknown = [p for p in phones if p not in alphabet.symbols or p == alphabet.symbols[alphabet.blank_index]]
            if unknown:
                raise ValueError(f"Lexicon word {word!r} uses symbols outside the phoneme set: {unknown}")
            self.entries[word.lower()] = phones

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, word: str) -> tuple[str, ...]:
        return self.entries[word]

    @classmethod
    def generate(cls, n_words: int, phonemes_per_word: Sequence[int] = (2, 4), seed: int = 0) -> "Lexicon":
        """
        Deterministic grapheme-to-phoneme table for a synthetic vocabulary.

        Each word is spelled by its lower-cased phonemes; words never repeat a phoneme back to back.
        """

        rng = np.random.default_rng(seed)
        lo, hi = phonemes_per_word
        entries: dict[str, tuple[str, ...]] = {}
        while len(entries) < n_words:
            phones = [PHONEMES[rng.integers(len(PHONEMES))]]
            for _ in range(int(rng.integers(lo, hi + 1)) - 1):
                choices = [p for p in PHONEMES if p != phones[-1]]
                phones.append(choices[rng.integers(len(choices))])
            word = "".join(p.lower() for p in phones)
            entries.setdefault(word, tuple(phones))
        return cls(entries)

    @classmethod
    def from_file(cls, file_path: str) -> "Lexicon":
        """One word per line: `word PH1 PH2 ...`; blank lines and `;;` comments are skipped"""

        entries = {}
        with open(file_path, encoding="utf-8") as file:
            for line in file:
                line = line.strip()
                if not line or line.startswith(";;"):
                    continue
                word, *phones = line.split()
                entries[word] = phones
        return cls(entries)

    def save(self, file_path: str) -> None:
        with open(file_path, "w", encoding="utf-8") as file:
            for word in sorted(self.entries):
                file.write(f"{word} {' '.join(self.entries[word])}\n")

    def check_coverage(self, transcripts: Sequence[str]) -> None:
        """Raise LexiconMiss naming the first transcript with an out-of-vocabulary token"""

        for transcript in transcripts:
            tokenize(transcript, self)


def words_of(transcript: str) -> list[str]:
    return _TOKEN_RE.findall(transcript.lower())


def tokenize(transcript: str, lexicon: Lexicon) -> tuple[int, ...]:
    """
    Transport form of a transcript's phoneme reference: per-word phonemes with one blank between words.

    Args:
        - transcript (str): Text, lower-cased and split into word tokens
        - lexicon (Lexicon): Pronunciations

    Returns:
        - tuple[int, ...]: Phoneme IDs with the blank as word separator (see `ctc_target`)
    """

    words = words_of(transcript)
    if not words:
        raise LexiconMiss(f"Transcript {transcript!r} has no tokens")
    missing = [w for w in words if w not in lexicon]
    if missing:
        raise LexiconMiss(f"Tokens not in lexicon: {missing} (transcript {transcript!r})")

    alphabet = lexicon.alphabet
    ids: list[int] = []
    for i, word in enumerate(words):
        if i:
            ids.append(alphabet.blank_index)
        ids.extend(alphabet.encode(lexicon[word]))
    return tuple(ids)


def ctc_target(transport: Sequence[int], blank_index: int = 0) -> tuple[int, ...]:
    """Strip word-boundary blanks from a transport sequence"""

    return tuple(s for s in transport if s != blank_index)


@dataclass(frozen=True)
class AugmentationSpec:
    time_shift_pct: tuple[float, float] = (-5.0, 5.0)
    freq_shift_pct: tuple[float, float] = (-10.0, 10.0)
    noise_pct: float = 5.0
    versions: int = 5

    @classmethod
    def from_config(cls, augment_cfg) -> "AugmentationSpec":
        return cls(tuple(augment_cfg.time_shift_pct), tuple(augment_cfg.freq_shift_pct), augment_cfg.noise_pct, augment_cfg.versions)


def time_shift(samples: np.ndarray, pct: float) -> np.ndarray:
    """Delay by prepending zeros (pct > 0) or advance by dropping leading samples (pct < 0)"""

    s = int(round(pct / 100.0 * len(samples)))
    if s > 0:
        return np.concatenate([np.zeros(s), samples])
    if s < 0:
        return samples[-s:].copy()
    return samples.copy()


def frequency_shift(samples: np.ndarray, pct: float) -> np.ndarray:
    """Scale every frequency by (1 + pct/100) via resampling, then crop or zero-pad back to the input length"""

    n = len(samples)
    n_new = max(int(round(n / (1.0 + pct / 100.0))), 1)
    shifted = resample(samples, n_new)
    if n_new >= n:
        return shifted[:n]
    return np.concatenate([shifted, np.zeros(n - n_new)])


def augment(waveform: Waveform, spec: AugmentationSpec, seed: int | Sequence[int] = 0) -> list[Waveform]:
    """
    Augmented copies: `versions` temporal shifts, then `versions` frequency shifts, then `versions` noisy copies.

    Args:
        - waveform (Waveform): Source audio
        - spec (AugmentationSpec): Shift ranges (percent) and noise level (percent of max amplitude)
        - seed (int | Sequence[int]): Seed for every random draw

    Returns:
        - list[Waveform]: 3 * versions waveforms, clipped to [-1, 1]
    """

    rng = np.random.default_rng(seed)
    x = waveform.samples
    outputs = []
    for _ in range(spec.versions):
        outputs.append(time_shift(x, rng.uniform(*spec.time_shift_pct)))
    for _ in range(spec.versions):
        outputs.append(frequency_shift(x, rng.uniform(*spec.freq_shift_pct)))
    sigma = spec.noise_pct / 100.0 * np.abs(x).max()
    for _ in range(spec.versions):
        outputs.append(x + rng.normal(0.0, sigma, size=len(x)) if sigma > 0 else x.copy())
    return [Waveform(np.clip(out, -1.0, 1.0), waveform.sample_rate) for out in outputs]


@dataclass(eq=False)
class OffloadRequest:
    waveform: Waveform
    device_id: str
    utterance_id: str
    features: FeatureSequence | None = None


@dataclass(eq=False)
class OffloadResponse:
    utterance_id: str
    intent: int
    transcript_id: str
    phonemes: tuple[int, ...]
    l1_entry: L1Entry | None
    l2_entry: L2Entry
    offload_count: int
    model_push: dict[int, dict[str, np.ndarray]] | None = None
    model_hashes: dict[int, str] | None = None


@dataclass(eq=False)
class TrainingSample:
    frames: np.ndarray
    target: tuple[int, ...]


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 50
    min_improvement: float = 0.01
    patience: int = 3
    min_epochs: int = 0

    @classmethod
    def from_config(cls, train_cfg) -> "TrainConfig":
        return cls(**vars(train_cfg))


@dataclass
class FinetuneResult:
    model: GruStack
    epoch_losses: list[float] = field(default_factory=list)


def batch_loss(model: GruStack, batch: Sequence[TrainingSample], blank_index: int = 0) -> Tensor:
    """Mean length-normalised CTC loss over a batch, with the graph recorded"""

    total = None
    for sample in batch:
        log_probs = gru_stack_log_probs(Tensor(sample.frames), model)
        loss = mul(ctc_loss_op(log_probs, sample.target, blank_index), 1.0 / len(sample.target))
        total = loss if total is None else total + loss
    return mul(total, 1.0 / len(batch))


def _converged(losses: list[float], cfg: TrainConfig) -> bool:
    if len(losses) < cfg.min_epochs or len(losses) <= cfg.patience:
        return False
    before = losses[-1 - cfg.patience]
    if before <= 0:
        return True
    return (before - losses[-1]) / before < cfg.min_improvement


def finetune(
    shadow_model: GruStack,
    training_pool: Sequence[TrainingSample],
    optimizer: Adam,
    cfg: TrainConfig = TrainConfig(),
    seed: int | Sequence[int] = 0,
    blank_index: int = 0,
) -> FinetuneResult:
    """
    Train in place until the epoch-mean loss improves by less than `min_improvement` over `patience` epochs
    (checked from `min_epochs` on), or `max_epochs` is reached.

    Args:
        - shadow_model (GruStack): Cloud copy, updated in place
        - training_pool (Sequence[TrainingSample]): Features and blank-free phoneme targets
        - optimizer (Adam): Optimizer bound to `shadow_model.params`
        - cfg (TrainConfig): Batch size, stopping rule
        - seed (int | Sequence[int]): Shuffling seed
        - blank_index (int): Blank symbol of the output alphabet

    Returns:
        - FinetuneResult: The model and every epoch-mean loss

    Note:
        - A non-finite loss or parameter restores the epoch-start checkpoint, then raises TrainingDiverged
    """

    if not training_pool:
        raise ValueError("Finetuning needs a non-empty training pool")

    rng = np.random.default_rng(seed)
    losses: list[float] = []
    for epoch in range(cfg.max_epochs):
        # Epoch-start checkpoint for rollback
        checkpoint = shadow_model.to_arrays()
        opt_checkpoint = optimizer.state_arrays()
        order = rng.permutation(len(training_pool))
        batch_losses = []
        try:
            for start in range(0, len(order), cfg.batch_size):
                batch = [training_pool[i] for i in order[start : start + cfg.batch_size]]
                optimizer.zero_grad()
                loss = batch_loss(shadow_model, batch, blank_index)
                loss.backward()
                optimizer.step()
                if not all(np.all(np.isfinite(p.data)) for p in shadow_model.params.values()):
                    raise NonFiniteValue("Parameters became non-finite")
                batch_losses.append(loss.item() * len(batch))
        except NonFiniteValue as e:
            shadow_model.load_arrays(checkpoint)
            optimizer.restore(opt_checkpoint)
            logger.warning(f"Training diverged in epoch {epoch}, rolled back: {e}")
            raise TrainingDiverged(f"Training diverged in epoch {epoch}") from e

        # Stopping rule on the epoch-mean loss
        losses.append(sum(batch_losses) / len(training_pool))
        logger.debug(f"Epoch {epoch}: mean loss {losses[-1]:.4f}")
        if _converged(losses, cfg):
            break
    return FinetuneResult(shadow_model, losses)


def in_domain_pretrain(
    model: GruStack,
    corpus: Sequence[TrainingSample],
    fraction: float,
    cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    blank_index: int = 0,
) -> GruStack:
    """Train the base extractor on a seeded `fraction` of an in-domain corpus before any device traffic"""

    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    n = int(round(fraction * len(corpus)))
    if n == 0:
        return model
    rng = np.random.default_rng(seed)
    chosen = [corpus[i] for i in sorted(rng.choice(len(corpus), size=n, replace=False))]
    optimizer = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    result = finetune(model, chosen, optimizer, cfg, seed, blank_index)
    logger.info(f"In-domain pretraining on {n} utterances, final loss {result.epoch_losses[-1]:.4f}", extra={"category": "PROCESS"})
    return model


def shared_frontend(config) -> tuple[FrontendModel, FrameSpec]:
    """The frozen front-end every device and the cloud share, batch norm calibrated on seeded audio"""

    fcfg = config.frontend
    spec = FrameSpec(fcfg.window_len, fcfg.hop)
    model = frontend_from_config(fcfg, config.seed)
    clips = calibration_audio(config.seed, fcfg.calibration_clips, sample_rate=fcfg.sample_rate)
    return calibrate_batch_norm(model, clips, spec), spec


class CloudSim:
    """
    Manifest-oracle cloud with per-bucket shadow extractors.

    Args:
        - config (SimpleNamespace): Full run configuration
        - manifest (pd.DataFrame): Ground truth, indexed by utterance_id on construction
        - lexicon (Lexicon): Must cover every manifest transcript
        - frontend (tuple[FrontendModel, FrameSpec] | None): Shared front-end; built from config when None
        - base_model (GruStack | None): Initial extractor for every bucket; initialised from config when None
    """

    def __init__(self, config, manifest: pd.DataFrame, lexicon: Lexicon, frontend: tuple[FrontendModel, FrameSpec] | None = None, base_model: GruStack | None = None):
        self.config = config
        self.seed = config.seed
        self.manifest = manifest.set_index("utterance_id", drop=False)
        self.lexicon = lexicon
        lexicon.check_coverage(manifest["transcript"].tolist())

        self.frontend, self.spec = frontend if frontend is not None else shared_frontend(config)
        self.buckets = BucketConfig.from_config(config.cache)
        self.augment_spec = AugmentationSpec.from_config(config.cloud.augment)
        self.train_cfg = TrainConfig.from_config(config.cloud.train)
        self.blank_index = config.l2.blank_index

        if base_model is None:
            base_model = init_gru_stack(self.frontend.feature_dim, config.l2.hidden, config.l2.n_phonemes, classifier_bias=config.l2.classifier_bias, seed=config.seed)
        self.shadow = {b: base_model.copy() for b in (1, 2, 3)}
        self.optimizers = {b: self._optimizer(self.shadow[b]) for b in (1, 2, 3)}
        self.pools: dict[int, list[TrainingSample]] = {b: [] for b in (1, 2, 3)}
        self._pending: set[int] = set()
        self.offloads = 0
        self.pushes = 0

    def _optimizer(self, model: GruStack) -> Adam:
        cfg = self.train_cfg
        return Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    def device_models(self) -> DeviceModels:
        """Snapshot of the current shadow models for a new device"""

        models = {b: m.copy() for b, m in self.shadow.items()}
        return DeviceModels(self.frontend, self.spec, models, {b: m.content_hash() for b, m in models.items()})

    def pretrain(self, corpus: Sequence[TrainingSample], fraction: float) -> None:
        """In-domain pretraining of the base model, then every bucket restarts from it"""

        base = in_domain_pretrain(self.shadow[1].copy(), corpus, fraction, self.train_cfg, self.seed, self.blank_index)
        self.shadow = {b: base.copy() for b in (1, 2, 3)}
        self.optimizers = {b: self._optimizer(self.shadow[b]) for b in (1, 2, 3)}

    def training_sample(self, features: FeatureSequence, transcript: str) -> TrainingSample | None:
        target = ctc_target(tokenize(transcript, self.lexicon), self.blank_index)
        if features.T < min_frames(target, CollapseMode.STANDARD_CTC):
            logger.debug(f"Skipping training sample: {features.T} frames cannot carry {len(target)} phonemes")
            return None
        return TrainingSample(features.frames, target)

    def _features(self, waveform: Waveform) -> FeatureSequence | None:
        try:
            return extract_features(waveform, self.frontend, self.spec)
        except InputTooShort:
            return None

    def _record(self, utterance_id: str) -> pd.Series:
        if utterance_id not in self.manifest.index:
            raise NotInManifest(f"Utterance {utterance_id!r} is not in the manifest")
        return self.manifest.loc[utterance_id]

    def resolve(self, request: OffloadRequest, learn: bool = True, build_entries: bool = True) -> OffloadResponse:
        """
        Answer one offload from ground truth.

        Args:
            - request (OffloadRequest): Offloaded audio (and its features when the device already has them)
            - learn (bool): Count the offload, grow the bucket's training pool, finetune and maybe push
            - build_entries (bool): Build the L1 entry for the device to install

        Returns:
            - OffloadResponse: Ground-truth intent, phoneme reference, new entries, optional model push
        """

        # Ground truth from the manifest
        row = self._record(request.utterance_id)
        cloud_cfg = self.config.cloud
        intent = int(row["intent"])
        transcript_id = " ".join(words_of(row["transcript"]))
        transport = tokenize(row["transcript"], self.lexicon)
        target = ctc_target(transport, self.blank_index)
        features = request.features if request.features is not None else extract_features(request.waveform, self.frontend, self.spec)
        bucket = route(request.waveform.duration_s, self.buckets)

        # Augmented copies feed training and, optionally, the L1 fit
        needs_l1 = build_entries and not bypasses_l1(bucket, self.buckets)
        needs_aug = (learn and cloud_cfg.finetune) or (needs_l1 and self.config.l1.fit_on_augmented)
        aug_features = []
        if needs_aug:
            for wav in augment(request.waveform, self.augment_spec, seed=[self.seed, _stable_int(request.utterance_id)]):
                feats = self._features(wav)
                if feats is not None:
                    aug_features.append(feats)

        # New cache entries
        l1_entry = None
        if needs_l1:
            l1_cfg = self.config.l1
            extra = [f.frames for f in aug_features] if l1_cfg.fit_on_augmented else []
            l1_entry = build_entry(features, intent, transcript_id, l1_cfg.k, self.seed, l1_cfg.tol, l1_cfg.max_iter, extra, request.utterance_id)
        l2_entry = L2Entry(target, intent, transcript_id, transport, self.blank_index)

        # Learning path
        model_push = model_hashes = None
        if learn:
            self.offloads += 1
            if cloud_cfg.finetune:
                for feats in [features, *aug_features]:
                    sample = self.training_sample(feats, row["transcript"])
                    if sample is not None:
                        self.pools[bucket].append(sample)
                self._pending.add(bucket)
                if cloud_cfg.finetune_every > 0 and self.offloads % cloud_cfg.finetune_every == 0:
                    self._train_pending()
            if self.offloads % cloud_cfg.push_every == 0:
                model_push, model_hashes = self._push()
            logger.info(f"Offload {self.offloads} from {request.device_id}: {request.utterance_id} -> intent {intent}", extra={"category": "PROCESS"})

        response = OffloadResponse(request.utterance_id, intent, transcript_id, transport, l1_entry, l2_entry, self.offloads, model_push, model_hashes)
        if cloud_cfg.trace_path is not None:
            self._trace(request, response)
        return response

    def _train_pending(self) -> None:
        for bucket in sorted(self._pending):
            if not self.pools[bucket]:
                continue
            try:
                finetune(self.shadow[bucket], self.pools[bucket], self.optimizers[bucket], self.train_cfg, [self.seed, self.offloads, bucket], self.blank_index)
            except TrainingDiverged:
                logger.warning(f"Bucket {bucket} shadow model kept at its last checkpoint")
        self._pending.clear()

    def _push(self) -> tuple[dict[int, dict[str, np.ndarray]], dict[int, str]]:
        self.pushes += 1
        push = {b: m.to_arrays() for b, m in self.shadow.items()}
        hashes = {b: m.content_hash() for b, m in self.shadow.items()}
        logger.info(f"Model push {self.pushes} after {self.offloads} offloads", extra={"category": "PROCESS"})
        return push, hashes

    def push_now(self) -> tuple[dict[int, dict[str, np.ndarray]], dict[int, str]]:
        """Finish any deferred training and push the shadow models regardless of the offload count"""

        if self.config.cloud.finetune:
            self._train_pending()
        return self._push()

    def _trace(self, request: OffloadRequest, response: OffloadResponse) -> None:
        path = self.config.cloud.trace_path
        audio_hash = hashlib.sha256(np.ascontiguousarray(request.waveform.samples, dtype="<f4").tobytes()).hexdigest()
        append_jsonl(
            path,
            {
                "type": "request",
                "device_id": request.device_id,
                "utterance_id": request.utterance_id,
                "n_samples": len(request.waveform),
                "sample_rate": request.waveform.sample_rate,
                "audio_sha256": audio_hash,
            },
        )
        append_jsonl(
            path,
            {
                "type": "response",
                "utterance_id": response.utterance_id,
                "intent": response.intent,
                "phonemes": list(self.lexicon.alphabet.decode(response.phonemes)),
                "offload_count": response.offload_count,
                "l1_key": list(response.l1_entry.key) if response.l1_entry is not None else None,
                "model_push": response.model_hashes,
            },
        )

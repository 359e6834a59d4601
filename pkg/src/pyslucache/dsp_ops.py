"""
Time-domain front-end shared by both cache levels.

A waveform is cut into Hamming-tapered frames (401 samples, hop 80), each frame is reduced to the
log energy it passes through every sinc band-pass filter, and two frozen 1D convolution blocks
(conv, average pooling, batch norm, leaky ReLU) turn those rows into the FeatureSequence.

Every stage is computed row by row from a fixed receptive field, so the batch path
(`extract_features`) and the streaming path (`StreamingFrontend`) produce identical arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InputTooShort, InvalidAudio, InvalidFilter, ShapeError


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64).reshape(-1))
        if self.sample_rate <= 0:
            raise InvalidAudio(f"Sample rate must be positive, got {self.sample_rate}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class FrameSpec:
    window_len: int = 401
    hop: int = 80
    window: str = "hamming"

    def __post_init__(self):
        if not 0 < self.hop <= self.window_len:
            raise ValueError(f"FrameSpec needs 0 < hop <= window_len, got hop={self.hop}, window_len={self.window_len}")
        if self.window != "hamming":
            raise ValueError(f"Unsupported window taper: {self.window}")

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window_len:
            return 0
        return (n_samples - self.window_len) // self.hop + 1

    @property
    def n_fft(self) -> int:
        # Long enough that frame * kernel energy is a linear (not circular) convolution
        return int(2 ** np.ceil(np.log2(2 * self.window_len - 1)))


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    frames: np.ndarray
    frame_times: np.ndarray

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True, eq=False)
class FrontendModel:
    """
    Frozen front-end parameters.

    conv_w[i] has shape (out_channels, in_channels, kernel); batch-norm statistics are the frozen running values.
    """

    f_low: np.ndarray
    f_high: np.ndarray
    conv_w: tuple
    conv_b: tuple
    bn_mean: tuple
    bn_var: tuple
    bn_gamma: tuple
    bn_beta: tuple
    sample_rate: int = 16000
    pool: int = 2
    leaky_slope: float = 0.2
    bn_eps: float = 1e-5
    log_floor: float = 1e-8

    def __post_init__(self):
        nyquist = self.sample_rate / 2
        f_low = np.asarray(self.f_low, dtype=np.float64)
        f_high = np.asarray(self.f_high, dtype=np.float64)
        if f_low.shape != f_high.shape or f_low.ndim != 1:
            raise ShapeError("f_low and f_high must be 1-D arrays of equal length")
        if not (np.all(f_low > 0) and np.all(f_low < f_high) and np.all(f_high < nyquist)):
            raise InvalidFilter("Sinc cutoffs must satisfy 0 < f_low < f_high < Nyquist for every filter")

        in_channels = f_low.shape[0]
        for w, b, stats in zip(self.conv_w, self.conv_b, zip(self.bn_mean, self.bn_var, self.bn_gamma, self.bn_beta)):
            if w.ndim != 3 or w.shape[1] != in_channels:
                raise ShapeError(f"Conv weight shape {w.shape} does not take {in_channels} input channels")
            if b.shape != (w.shape[0],) or any(s.shape != (w.shape[0],) for s in stats):
                raise ShapeError("Conv bias and batch-norm vectors must match the conv output channels")
            in_channels = w.shape[0]

    @property
    def n_filters(self) -> int:
        return len(self.f_low)

    @property
    def n_layers(self) -> int:
        return len(self.conv_w)

    @property
    def kernel(self) -> int:
        return self.conv_w[0].shape[2]

    @property
    def feature_dim(self) -> int:
        return self.conv_w[-1].shape[0]

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"sinc.f_low": self.f_low, "sinc.f_high": self.f_high}
        for i in range(self.n_layers):
            arrays[f"conv{i}.w"] = self.conv_w[i]
            arrays[f"conv{i}.b"] = self.conv_b[i]
            arrays[f"bn{i}.mean"] = self.bn_mean[i]
            arrays[f"bn{i}.var"] = self.bn_var[i]
            arrays[f"bn{i}.gamma"] = self.bn_gamma[i]
            arrays[f"bn{i}.beta"] = self.bn_beta[i]
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], **kwargs) -> "FrontendModel":
        n_layers = sum(1 for name in arrays if name.startswith("conv") and name.endswith(".w"))

        def per_layer(template: str) -> tuple:
            return tuple(np.asarray(arrays[template.format(i)]) for i in range(n_layers))

        return cls(
            f_low=np.asarray(arrays["sinc.f_low"]),
            f_high=np.asarray(arrays["sinc.f_high"]),
            conv_w=per_layer("conv{}.w"),
            conv_b=per_layer("conv{}.b"),
            bn_mean=per_layer("bn{}.mean"),
            bn_var=per_layer("bn{}.var"),
            bn_gamma=per_layer("bn{}.gamma"),
            bn_beta=per_layer("bn{}.beta"),
            **kwargs,
        )


def sinc_kernel(f_low: float, f_high: float, length: int, sample_rate: int = 16000) -> np.ndarray:
    """
    Band-pass kernel built as the difference of two Hamming-windowed sinc low-pass filters.

    Args:
        - f_low (float): Lower cutoff in Hz
        - f_high (float): Upper cutoff in Hz
        - length (int): Kernel length in samples
        - sample_rate (int): Sample rate in Hz

    Returns:
        - np.ndarray: Kernel of shape (length,), symmetric about its centre
    """

    if not 0 < f_low < f_high < sample_rate / 2:
        raise InvalidFilter(f"Need 0 < f_low < f_high < {sample_rate / 2}, got f_low={f_low}, f_high={f_high}")

    n = np.arange(length) - (length - 1) / 2
    low = f_low / sample_rate
    high = f_high / sample_rate
    kernel = 2 * high * np.sinc(2 * high * n) - 2 * low * np.sinc(2 * low * n)
    return kernel * np.hamming(length)


def frame(waveform: Waveform, spec: FrameSpec) -> np.ndarray:
    """
    Cut a waveform into Hamming-tapered frames.

    Args:
        - waveform (Waveform): Input audio
        - spec (FrameSpec): Window length and hop

    Returns:
        - np.ndarray: (T, window_len) frames, T = floor((len - window_len) / hop) + 1
    """

    n_samples = len(waveform.samples)
    if n_samples < spec.window_len:
        raise InputTooShort(f"Need at least {spec.window_len} samples for one frame, got {n_samples}")

    n_frames = spec.n_frames(n_samples)
    starts = np.arange(n_frames) * spec.hop
    indices = starts[:, None] + np.arange(spec.window_len)[None, :]
    return waveform.samples[indices] * np.hamming(spec.window_len)


def band_response(model: FrontendModel, spec: FrameSpec) -> np.ndarray:
    """Per-filter power response on the one-sided FFT grid, weighted so `response @ |X|^2` is a filtered-frame energy"""

    kernels = np.stack([sinc_kernel(lo, hi, spec.window_len, model.sample_rate) for lo, hi in zip(model.f_low, model.f_high)])
    spectrum = np.fft.rfft(kernels, n=spec.n_fft, axis=1)
    power = spectrum.real**2 + spectrum.imag**2

    # Parseval on the one-sided spectrum: interior bins count twice
    weights = np.full(power.shape[1], 2.0)
    weights[0] = 1.0
    if spec.n_fft % 2 == 0:
        weights[-1] = 1.0
    return power * weights / spec.n_fft


def _sinc_row(frame_row: np.ndarray, response: np.ndarray, n_fft: int, log_floor: float) -> np.ndarray:
    spectrum = np.fft.rfft(frame_row, n=n_fft)
    power = spectrum.real**2 + spectrum.imag**2
    return np.log(response @ power + log_floor)


def _conv_row(window_rows: np.ndarray, w_flat: np.ndarray, bias: np.ndarray) -> np.ndarray:
    # window_rows is (kernel, in_channels); w_flat is (out, in_channels * kernel)
    return w_flat @ window_rows.T.ravel() + bias


def _pool_row(rows: np.ndarray) -> np.ndarray:
    return rows.sum(axis=0) / rows.shape[0]


def _norm_act(row: np.ndarray, model: FrontendModel, layer: int) -> np.ndarray:
    normed = (row - model.bn_mean[layer]) / np.sqrt(model.bn_var[layer] + model.bn_eps) * model.bn_gamma[layer] + model.bn_beta[layer]
    return np.where(normed >= 0, normed, model.leaky_slope * normed)


class _ConvBlock:
    """One causal conv + pool + norm block fed row by row"""

    def __init__(self, model: FrontendModel, layer: int, normalize: bool = True):
        w = model.conv_w[layer]
        self.model = model
        self.layer = layer
        self.normalize = normalize
        self.kernel = w.shape[2]
        self.w_flat = w.reshape(w.shape[0], -1)
        self.bias = model.conv_b[layer]
        self.inputs: list[np.ndarray] = []
        self.conv_rows: list[np.ndarray] = []
        self.n_pooled = 0

    def push(self, rows: list[np.ndarray]) -> list[np.ndarray]:
        if not self.inputs and rows:
            # Causal edge padding: conv row t sees input rows t-k+1 .. t, the first row repeated before the start
            self.inputs = [rows[0]] * (self.kernel - 1)
        self.inputs.extend(rows)
        while len(self.conv_rows) + self.kernel <= len(self.inputs):
            t = len(self.conv_rows)
            self.conv_rows.append(_conv_row(np.stack(self.inputs[t : t + self.kernel]), self.w_flat, self.bias))

        out = []
        pool = self.model.pool
        while (self.n_pooled + 1) * pool <= len(self.conv_rows):
            u = self.n_pooled
            pooled = _pool_row(np.stack(self.conv_rows[u * pool : (u + 1) * pool]))
            out.append(_norm_act(pooled, self.model, self.layer) if self.normalize else pooled)
            self.n_pooled += 1
        return out


def _run_stack(sinc_rows: list[np.ndarray], model: FrontendModel) -> list[np.ndarray]:
    rows = sinc_rows
    for layer in range(model.n_layers):
        rows = _ConvBlock(model, layer).push(rows)
    return rows


def _feature_times(n_rows: int, model: FrontendModel, spec: FrameSpec) -> np.ndarray:
    stride = model.pool**model.n_layers * spec.hop
    return np.arange(n_rows) * stride / model.sample_rate


def feature_length(n_samples: int, spec: FrameSpec, pool: int = 2, n_layers: int = 2) -> int:
    """Number of feature rows for an input of n_samples: the frame count halved (floor) per pooling layer"""

    length = spec.n_frames(n_samples)
    for _ in range(n_layers):
        length //= pool
    return length


def _check_audio(waveform: Waveform, model: FrontendModel) -> None:
    if waveform.sample_rate != model.sample_rate:
        raise InvalidAudio(f"Waveform sample rate {waveform.sample_rate} does not match front-end rate {model.sample_rate}")
    if len(waveform.samples) == 0:
        raise InputTooShort("Empty waveform")
    if not np.all(np.isfinite(waveform.samples)):
        raise InvalidAudio("Waveform contains non-finite samples")


def sinc_layer(waveform: Waveform, model: FrontendModel, spec: FrameSpec) -> np.ndarray:
    """Log band energies per frame, the pre-convolution rows (T, n_filters)"""

    _check_audio(waveform, model)
    frames = frame(waveform, spec)
    response = band_response(model, spec)
    return np.stack([_sinc_row(f, response, spec.n_fft, model.log_floor) for f in frames])


def extract_features(waveform: Waveform, model: FrontendModel, spec: FrameSpec) -> FeatureSequence:
    """
    Whole-input feature extraction.

    Args:
        - waveform (Waveform): Input audio at the model's sample rate
        - model (FrontendModel): Frozen front-end
        - spec (FrameSpec): Framing parameters

    Returns:
        - FeatureSequence: (T', feature_dim) rows, T' = frame count halved (floor) per pooling layer
    """

    sinc_rows = list(sinc_layer(waveform, model, spec))
    rows = _run_stack(sinc_rows, model)
    if not rows:
        raise InputTooShort(f"{len(waveform.samples)} samples give {len(sinc_rows)} frames, too few for one feature row")
    return FeatureSequence(np.stack(rows), _feature_times(len(rows), model, spec))


class StreamingFrontend:
    """
    Incremental front-end: feed audio chunks as they arrive, get feature rows back in `step`-frame steps.

    The concatenation of every `push` result and `finish()` equals `extract_features` on the whole input.
    """

    def __init__(self, model: FrontendModel, spec: FrameSpec, step: int = 10):
        if step <= 0:
            raise ValueError("Streaming step must be positive")
        self.model = model
        self.spec = spec
        self.step = step
        self._response = band_response(model, spec)
        self._taper = np.hamming(spec.window_len)
        self._samples = np.zeros(0)
        self._frames_done = 0
        self._blocks = [_ConvBlock(model, layer) for layer in range(model.n_layers)]
        self._n_out = 0

    def _process_frames(self, n: int) -> list[np.ndarray]:
        spec = self.spec
        rows = []
        for i in range(self._frames_done, self._frames_done + n):
            start = i * spec.hop
            frame_row = self._samples[start : start + spec.window_len] * self._taper
            rows.append(_sinc_row(frame_row, self._response, spec.n_fft, self.model.log_floor))
        self._frames_done += n

        for block in self._blocks:
            rows = block.push(rows)
        self._n_out += len(rows)
        return rows

    def push(self, samples: np.ndarray) -> np.ndarray:
        """Append samples; returns the feature rows completed by this chunk (possibly none)"""

        samples = np.asarray(samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(samples)):
            raise InvalidAudio("Waveform contains non-finite samples")
        self._samples = np.concatenate([self._samples, samples])

        rows = []
        while self.spec.n_frames(len(self._samples)) - self._frames_done >= self.step:
            rows.extend(self._process_frames(self.step))
        return self._stack(rows)

    def finish(self) -> np.ndarray:
        """Flush the frames of the last partial step"""

        remaining = self.spec.n_frames(len(self._samples)) - self._frames_done
        rows = self._process_frames(remaining) if remaining > 0 else []
        return self._stack(rows)

    def _stack(self, rows: list[np.ndarray]) -> np.ndarray:
        if not rows:
            return np.zeros((0, self.model.feature_dim))
        return np.stack(rows)


def init_frontend(
    seed: int = 0,
    n_filters: int = 60,
    conv_channels: int = 60,
    conv_kernel: int = 5,
    n_layers: int = 2,
    sample_rate: int = 16000,
    min_hz: float = 30.0,
    max_hz: float = 7800.0,
    pool: int = 2,
    leaky_slope: float = 0.2,
    bn_eps: float = 1e-5,
    log_floor: float = 1e-8,
) -> FrontendModel:
    """
    Seedable random-but-fixed front-end: mel-spaced sinc bands, uniform(+-1/sqrt(fan_in)) conv weights,
    identity batch-norm statistics (see calibrate_batch_norm).
    """

    if not 0 < min_hz < max_hz < sample_rate / 2:
        raise InvalidFilter(f"Need 0 < min_hz < max_hz < {sample_rate / 2}")

    def to_mel(hz):
        return 2595 * np.log10(1 + hz / 700)

    def to_hz(mel):
        return 700 * (10 ** (mel / 2595) - 1)

    edges = to_hz(np.linspace(to_mel(min_hz), to_mel(max_hz), n_filters + 1))
    rng = np.random.default_rng(seed)

    conv_w, conv_b = [], []
    in_channels = n_filters
    for _ in range(n_layers):
        bound = 1 / np.sqrt(in_channels * conv_kernel)
        conv_w.append(rng.uniform(-bound, bound, size=(conv_channels, in_channels, conv_kernel)))
        conv_b.append(rng.uniform(-bound, bound, size=conv_channels))
        in_channels = conv_channels

    return FrontendModel(
        f_low=edges[:-1],
        f_high=edges[1:],
        conv_w=tuple(conv_w),
        conv_b=tuple(conv_b),
        bn_mean=tuple(np.zeros(conv_channels) for _ in range(n_layers)),
        bn_var=tuple(np.ones(conv_channels) for _ in range(n_layers)),
        bn_gamma=tuple(np.ones(conv_channels) for _ in range(n_layers)),
        bn_beta=tuple(np.zeros(conv_channels) for _ in range(n_layers)),
        sample_rate=sample_rate,
        pool=pool,
        leaky_slope=leaky_slope,
        bn_eps=bn_eps,
        log_floor=log_floor,
    )


def frontend_from_config(frontend_cfg, seed: int) -> FrontendModel:
    return init_frontend(
        seed=seed,
        n_filters=frontend_cfg.n_filters,
        conv_channels=frontend_cfg.conv_channels,
        conv_kernel=frontend_cfg.conv_kernel,
        sample_rate=frontend_cfg.sample_rate,
        min_hz=frontend_cfg.min_hz,
        max_hz=frontend_cfg.max_hz,
        pool=frontend_cfg.pool,
        leaky_slope=frontend_cfg.leaky_slope,
        bn_eps=frontend_cfg.bn_eps,
        log_floor=frontend_cfg.log_floor,
    )


def calibration_audio(seed: int, n_clips: int = 8, duration_s: float = 1.0, sample_rate: int = 16000) -> list[Waveform]:
    """Seeded tone-mixture clips with silent gaps, used to fix the frozen batch-norm statistics"""

    rng = np.random.default_rng(seed)
    n = int(duration_s * sample_rate)
    t = np.arange(n) / sample_rate
    clips = []
    for _ in range(n_clips):
        samples = rng.normal(0, 1e-3, size=n)
        pos = 0
        while pos < n:
            seg = int(rng.uniform(0.08, 0.2) * sample_rate)
            if rng.random() < 0.75:
                for _ in range(rng.integers(1, 4)):
                    freq = rng.uniform(100, 4000)
                    samples[pos : pos + seg] += rng.uniform(0.05, 0.3) * np.sin(2 * np.pi * freq * t[pos : pos + seg])
            pos += seg
        clips.append(Waveform(np.clip(samples, -1, 1), sample_rate))
    return clips


def calibrate_batch_norm(model: FrontendModel, waveforms: list[Waveform], spec: FrameSpec) -> FrontendModel:
    """
    Fix each layer's batch-norm running statistics to the pooled-activation mean/variance over the given audio.

    Layers are calibrated in order, so layer i+1 sees layer i already normalised.
    """

    calibrated = model
    sinc_rows = [list(sinc_layer(w, model, spec)) for w in waveforms]

    for layer in range(model.n_layers):
        pooled = []
        for rows in sinc_rows:
            current = rows
            for prior in range(layer):
                current = _ConvBlock(calibrated, prior).push(current)
            pooled.extend(_ConvBlock(calibrated, layer, normalize=False).push(current))
        if not pooled:
            raise InputTooShort("Calibration audio too short to reach every conv layer")
        stacked = np.stack(pooled)
        bn_mean = list(calibrated.bn_mean)
        bn_var = list(calibrated.bn_var)
        bn_mean[layer] = stacked.mean(axis=0)
        bn_var[layer] = stacked.var(axis=0)
        calibrated = replace(calibrated, bn_mean=tuple(bn_mean), bn_var=tuple(bn_var))

    return calibrated

"""STFT framing, streaming mask-based denoising, WAV I/O and synthetic mixtures.

The model sees one magnitude spectrum per 8 ms hop and emits a real mask
per bin; the mask multiplies the noisy complex spectrum (noisy phase is
reused) and overlap-add resynthesizes the waveform.
"""
from __future__ import annotations

import time
import wave
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import median_filter
from scipy.signal import get_window, lfilter

from .s5 import ModelSpec, S5Model, SequenceState, model_forward_scan, model_forward_step

__all__ = [
    "StftConfig",
    "AudioFormatError",
    "stft",
    "istft",
    "interior",
    "read_wav",
    "write_wav",
    "FloatProcessor",
    "FxpProcessor",
    "SpectralFloorMask",
    "DenoiseResult",
    "denoise_stream",
    "parse_mode",
    "synth_mixture",
    "identity_mask_model",
    "zero_mask_model",
]


class AudioFormatError(ValueError):
    """Waveform or WAV file does not match the configured format."""


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    window_len: int = 512
    hop: int = 128
    fft_size: int = 512
    window: str = "sqrt_hann"
    mask_max: float = 2.0

    def __post_init__(self):
        if self.window != "sqrt_hann":
            raise ValueError("only the sqrt_hann window pair is supported")
        if not 0 < self.hop <= self.window_len <= self.fft_size:
            raise ValueError("need 0 < hop <= window_len <= fft_size")
        if self.window_len % self.hop:
            raise ValueError("window_len must be a multiple of hop for constant overlap-add")
        if not self.mask_max > 0:
            raise ValueError("mask_max must be positive")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def frame_budget_s(self) -> float:
        """Wall-clock time available per hop in a real-time stream."""
        return self.hop / self.sample_rate

    def analysis_window(self) -> np.ndarray:
        return np.sqrt(get_window("hann", self.window_len, fftbins=True))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("sample_rate", "window_len", "hop", "fft_size", "window", "mask_max")}


def _check_len(wav: np.ndarray, cfg: StftConfig) -> None:
    if wav.ndim != 1:
        raise AudioFormatError("expected a mono waveform")
    if wav.size < cfg.window_len:
        raise AudioFormatError(f"waveform shorter than one window ({wav.size} < {cfg.window_len})")


def n_frames(n_samples: int, cfg: StftConfig) -> int:
    return 1 + (n_samples - cfg.window_len) // cfg.hop


def stft(wav, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """(frames, bins) complex spectra; frame k starts at sample k*hop, no padding."""
    wav = np.asarray(wav, dtype=np.float64)
    _check_len(wav, cfg)
    F = n_frames(wav.size, cfg)
    idx = np.arange(cfg.window_len)[None, :] + cfg.hop * np.arange(F)[:, None]
    return np.fft.rfft(wav[idx] * cfg.analysis_window(), n=cfg.fft_size, axis=1)


def _ola_envelope(F: int, cfg: StftConfig) -> np.ndarray:
    w2 = cfg.analysis_window() ** 2
    env = np.zeros((F - 1) * cfg.hop + cfg.window_len)
    for k in range(F):
        env[k * cfg.hop: k * cfg.hop + cfg.window_len] += w2
    return env


def istft(frames, cfg: StftConfig = StftConfig(), length: int | None = None) -> np.ndarray:
    """Overlap-add with the synthesis window, normalized by the window envelope."""
    frames = np.asarray(frames)
    F = frames.shape[0]
    if F == 0:
        return np.zeros(length or 0)
    w = cfg.analysis_window()
    seg = np.fft.irfft(frames, n=cfg.fft_size, axis=1)[:, : cfg.window_len] * w
    out = np.zeros((F - 1) * cfg.hop + cfg.window_len)
    for k in range(F):
        out[k * cfg.hop: k * cfg.hop + cfg.window_len] += seg[k]
    env = _ola_envelope(F, cfg)
    good = env > 1e-8 * env.max()
    out[good] /= env[good]
    out[~good] = 0.0
    if length is not None:
        out = np.pad(out, (0, max(0, length - out.size)))[:length]
    return out


def interior(n_samples: int, cfg: StftConfig = StftConfig()) -> slice:
    """Samples covered by the full window overlap (edges excluded)."""
    F = n_frames(n_samples, cfg)
    return slice(cfg.window_len - cfg.hop, (F - 1) * cfg.hop + cfg.hop)


# ---------------------------------------------------------------------------
# WAV

def read_wav(path, cfg: StftConfig | None = None) -> tuple[int, np.ndarray]:
    """16-bit PCM mono WAV -> (sample_rate, float64 samples in [-1, 1))."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise AudioFormatError(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise AudioFormatError(f"{path}: expected 16-bit PCM")
        rate = f.getframerate()
        data = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    if cfg is not None and rate != cfg.sample_rate:
        raise AudioFormatError(f"{path}: sample rate {rate} != configured {cfg.sample_rate}")
    return rate, data.astype(np.float64) / 32768.0


def write_wav(path, samples, sample_rate: int = 16000) -> None:
    x = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(x.tobytes())


# ---------------------------------------------------------------------------
# mask processors

class FloatProcessor:
    """Float model: step mode for fall-through, parallel scan for chunks."""

    def __init__(self, model: S5Model):
        self.model = model

    def init_state(self):
        return SequenceState.zeros(self.model.spec)

    def step(self, state, mag):
        state, y, _ = model_forward_step(self.model, state, mag)
        return state, y

    def chunk(self, state, mags):
        Y, _, state = model_forward_scan(self.model, mags, chunk=max(1, len(mags)), state=state)
        return state, Y


class FxpProcessor:
    """Integer checkpoint; chunks run frame by frame (the integer recurrence is never reassociated)."""

    def __init__(self, ckpt, policy="saturate"):
        from .fxp import OverflowCounter, OverflowPolicy

        self.ckpt = ckpt
        self.policy = OverflowPolicy(policy)
        self.overflow = OverflowCounter()

    def init_state(self):
        from .fxp import FxpState

        return FxpState.zeros(self.ckpt.spec)

    def step(self, state, mag):
        from .fxp import fxp_step

        state, yq, _ = fxp_step(self.ckpt, state, self.ckpt.quantize_input(mag), self.policy, overflow=self.overflow)
        return state, self.ckpt.dequantize_output(yq)

    def chunk(self, state, mags):
        ys = []
        for m in mags:
            state, y = self.step(state, m)
            ys.append(y)
        return state, np.stack(ys)


@dataclass
class _FloorState:
    frame: int = 0
    smooth: np.ndarray | None = None


class SpectralFloorMask:
    """Training-free baseline: a per-frame noise floor plus spectral subtraction.

    The floor is the running median, across ``width`` neighbouring bins, of
    recursively smoothed power, scaled by ``bias``. Narrowband harmonics sit
    above a broadband floor, so the median tracks the noise without any
    warm-up. The gain is ``sqrt(1 - noise/power)`` floored at ``floor``.
    """

    def __init__(self, width: int = 61, smoothing: float = 0.8, bias: float = 2.5, floor: float = 0.3):
        self.width, self.smoothing, self.bias, self.floor = width, smoothing, bias, floor

    def init_state(self):
        return _FloorState()

    def step(self, state: _FloorState, mag):
        p = np.asarray(mag, dtype=np.float64) ** 2
        state.smooth = p.copy() if state.smooth is None else self.smoothing * state.smooth + (1 - self.smoothing) * p
        noise = self.bias * median_filter(state.smooth, size=self.width, mode="nearest")
        gain = np.sqrt(np.clip(1.0 - noise / np.maximum(p, 1e-20), self.floor**2, 1.0))
        state.frame += 1
        return state, gain

    def chunk(self, state, mags):
        ys = []
        for m in mags:
            state, y = self.step(state, m)
            ys.append(y)
        return state, np.stack(ys)


def _processor(obj, policy="saturate"):
    from .fxp import FxpCheckpoint

    if isinstance(obj, S5Model):
        return FloatProcessor(obj)
    if isinstance(obj, FxpCheckpoint):
        return FxpProcessor(obj, policy)
    if hasattr(obj, "step") and hasattr(obj, "init_state"):
        return obj
    raise TypeError(f"cannot denoise with {type(obj).__name__}")


@dataclass
class DenoiseResult:
    wave: np.ndarray
    masks: np.ndarray
    frame_ns: list
    mode: str

    @property
    def mean_frame_ms(self) -> float:
        return float(np.mean(self.frame_ns)) / 1e6 if self.frame_ns else 0.0

    @property
    def max_frame_ms(self) -> float:
        return float(np.max(self.frame_ns)) / 1e6 if self.frame_ns else 0.0


def parse_mode(mode) -> tuple[str, int]:
    """'fall-through' / 'fall_through' -> ('fall_through', 1); 'chunked:N' -> ('chunked', N)."""
    if isinstance(mode, tuple):
        return mode
    m = str(mode).replace("-", "_")
    if m == "fall_through":
        return ("fall_through", 1)
    if m.startswith("chunked"):
        _, _, n = m.partition(":")
        size = int(n) if n else 16
        if size < 1:
            raise ValueError("chunk size must be >= 1")
        return ("chunked", size)
    raise ValueError(f"unknown mode {mode!r}")


def denoise_stream(model, noisy, cfg: StftConfig = StftConfig(), mode="fall_through", *,
                   policy="saturate", sample_rate: int | None = None) -> DenoiseResult:
    """Mask-based denoising of a whole waveform, streamed frame by frame.

    In fall-through mode each frame goes through the model on its own and
    ``frame_ns`` holds the per-frame compute time; in chunked mode blocks of
    frames are evaluated together and the block time is spread evenly over
    its frames.
    """
    if sample_rate is not None and sample_rate != cfg.sample_rate:
        raise AudioFormatError(f"sample rate {sample_rate} != configured {cfg.sample_rate}")
    kind, size = parse_mode(mode)
    noisy = np.asarray(noisy, dtype=np.float64)
    X = stft(noisy, cfg)
    proc = _processor(model, policy)
    spec = getattr(getattr(proc, "model", None), "spec", None) or getattr(getattr(proc, "ckpt", None), "spec", None)
    if spec is not None and spec.n_input != cfg.bins:
        raise ValueError(f"model input width {spec.n_input} != {cfg.bins} STFT bins")
    mags = np.abs(X)
    state = proc.init_state()
    masks = np.empty(mags.shape)
    times: list[int] = []
    if kind == "fall_through":
        for k, m in enumerate(mags):
            t0 = time.perf_counter_ns()
            state, y = proc.step(state, m)
            times.append(time.perf_counter_ns() - t0)
            masks[k] = y
    else:
        for s in range(0, len(mags), size):
            t0 = time.perf_counter_ns()
            state, Y = proc.chunk(state, mags[s: s + size])
            dt = time.perf_counter_ns() - t0
            masks[s: s + len(Y)] = Y
            times += [dt // len(Y)] * len(Y)
    masks = np.clip(masks, 0.0, cfg.mask_max)
    out = istft(masks * X, cfg, length=noisy.size)
    return DenoiseResult(out, masks, times, kind)


# ---------------------------------------------------------------------------
# synthetic data and constructed models

def synth_mixture(seed: int, seconds: float = 1.0, snr_db: float = 5.0, sample_rate: int = 16000):
    """Harmonic-tone "speech" plus colored noise at an exact SNR. Returns (noisy, clean)."""
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    clean = np.zeros(n)
    for _ in range(rng.integers(3, 9)):
        f0 = rng.uniform(100.0, 400.0)
        onset, dur = rng.uniform(0, 0.6) * seconds, rng.uniform(0.2, 0.6) * seconds
        env = np.clip(np.sin(np.pi * np.clip((t - onset) / dur, 0.0, 1.0)), 0.0, None) ** 2
        tone = sum(rng.uniform(0.3, 1.0) / h * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
                   for h in range(1, int(rng.integers(2, 6)) + 1))
        clean += env * tone
    if not np.any(clean):
        clean = np.sin(2 * np.pi * 220.0 * t)
    pole = rng.uniform(0.3, 0.9)
    noise = lfilter([1.0], [1.0, -pole], rng.standard_normal(n))
    noise *= np.linalg.norm(clean) / (np.linalg.norm(noise) * 10 ** (snr_db / 20.0))
    gain = 0.3 / np.max(np.abs(clean + noise))  # leave headroom for 16-bit WAV
    clean, noise = gain * clean, gain * noise
    return clean + noise, clean


def _constant_output_model(spec: ModelSpec, value: float) -> S5Model:
    from .s5 import S5LayerParams

    M, N = spec.n_model, spec.n_ssm
    z = lambda *s: np.zeros(s, dtype=np.float32)  # noqa: E731
    layers = [S5LayerParams(lambda_re=z(N), lambda_im=z(N), B_re=z(N, M), B_im=z(N, M), C_re=z(M, N),
                            C_im=z(M, N), D=z(M), glu_W=z(M, M), norm_scale=z(M), norm_shift=z(M))
              for _ in range(spec.depth)]
    return S5Model(spec, z(M, spec.n_input), z(M), layers, z(spec.n_output, M),
                   np.full(spec.n_output, value, dtype=np.float32))


def identity_mask_model(spec: ModelSpec = ModelSpec()) -> S5Model:
    """All weights zero, decoder bias one: the mask is 1 everywhere."""
    return _constant_output_model(spec, 1.0)


def zero_mask_model(spec: ModelSpec = ModelSpec()) -> S5Model:
    return _constant_output_model(spec, 0.0)

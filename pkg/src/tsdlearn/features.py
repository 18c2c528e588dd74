"""Log-mel front end shared by every model in the package.

All audio is brought to 22.05 kHz mono, then analysed with a 2048-sample
Hann window and a 441-sample hop, which gives exactly 50 frames per second.
Frame timing helpers live here too so that labels, decoding and metrics all
use the same clock.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

SAMPLE_RATE = 22050
N_FFT = 2048
HOP_LENGTH = 441  # 22050 / 441 = 50 frames per second exactly
N_MELS = 64
LOG_FLOOR = 1e-10


@dataclass
class MelConfig:
    sample_rate: int = SAMPLE_RATE
    n_fft: int = N_FFT
    hop_length: int = HOP_LENGTH
    n_mels: int = N_MELS
    fmin: float = 0.0
    fmax: float | None = None  # defaults to sample_rate / 2
    log_floor: float = LOG_FLOOR

    @property
    def frames_per_second(self) -> float:
        return self.sample_rate / self.hop_length

    def to_dict(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "n_fft": self.n_fft,
            "hop_length": self.hop_length,
            "n_mels": self.n_mels,
            "fmin": self.fmin,
            "fmax": self.fmax,
            "log_floor": self.log_floor,
        }


DEFAULT_MEL = MelConfig()


@dataclass
class Waveform:
    samples: np.ndarray  # (n,) float32, mono
    sample_rate: int = SAMPLE_RATE

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (T, n_mels) float32
    frames_per_second: float
    clip_duration: float
    config: MelConfig = field(default_factory=MelConfig)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def load_audio(path: str | os.PathLike) -> Waveform:
    """Read a WAV file, average channels to mono and resample to 22.05 kHz.

    Accepts PCM 16/24/32-bit and float32/float64 WAV. Files already at the
    target rate are returned without resampling.
    """
    path = os.fspath(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise OSError(f"could not read audio file {path!r}: {exc}") from exc

    if data.size == 0:
        raise OSError(f"empty audio: {path!r}")

    samples = _to_float_mono(data)
    if rate != SAMPLE_RATE:
        g = math.gcd(rate, SAMPLE_RATE)
        samples = resample_poly(samples, SAMPLE_RATE // g, rate // g)
    return Waveform(samples.astype(np.float32), SAMPLE_RATE)


def _to_float_mono(data: np.ndarray) -> np.ndarray:
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    return data.astype(np.float64)


def save_audio(path: str | os.PathLike, waveform: Waveform) -> None:
    """Write a mono float32 WAV."""
    wavfile.write(os.fspath(path), waveform.sample_rate,
                  waveform.samples.astype(np.float32))


def mel_filterbank(cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, 1 + n_fft // 2)."""
    fmax = cfg.fmax if cfg.fmax is not None else cfg.sample_rate / 2.0

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fft_freqs = np.linspace(0.0, cfg.sample_rate / 2.0, 1 + cfg.n_fft // 2)

    fb = np.zeros((cfg.n_mels, len(fft_freqs)))
    for m in range(cfg.n_mels):
        lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (fft_freqs - lo) / max(mid - lo, 1e-12)
        falling = (hi - fft_freqs) / max(hi - mid, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


_FILTERBANK_CACHE: dict = {}


def _cached_filterbank(cfg: MelConfig) -> np.ndarray:
    key = (cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    if key not in _FILTERBANK_CACHE:
        _FILTERBANK_CACHE[key] = mel_filterbank(cfg)
    return _FILTERBANK_CACHE[key]


def frames_for_duration(duration: float, cfg: MelConfig = DEFAULT_MEL) -> int:
    """Number of analysis frames covering `duration` seconds."""
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    n_samples = int(round(duration * cfg.sample_rate))
    return -(-n_samples // cfg.hop_length)  # ceil division


def time_of_frame(index: int, cfg: MelConfig = DEFAULT_MEL) -> float:
    """Time in seconds of frame `index` (frame centres sit on the hop grid)."""
    if index < 0:
        raise ValueError(f"frame index must be >= 0, got {index}")
    return index * cfg.hop_length / cfg.sample_rate


def mel_spectrogram(waveform: Waveform, cfg: MelConfig = DEFAULT_MEL) -> MelSpectrogram:
    """Log-mel spectrogram of a mono waveform.

    Output has T = ceil(n_samples / hop) frames and `cfg.n_mels` bins.
    Mel energies are floored at `cfg.log_floor` before the log, so silence
    maps to log(log_floor) rather than -inf.
    """
    x = np.asarray(waveform.samples, dtype=np.float64)
    if waveform.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"waveform rate {waveform.sample_rate} != config rate {cfg.sample_rate}")
    if len(x) < cfg.n_fft:
        raise ValueError(
            f"waveform of {len(x)} samples is shorter than one "
            f"{cfg.n_fft}-sample analysis window")

    n_frames = -(-len(x) // cfg.hop_length)
    half = cfg.n_fft // 2
    # Centre convention: frame k is windowed around sample k * hop.
    pad_right = max(0, (n_frames - 1) * cfg.hop_length + half + 1 - len(x))
    x = np.pad(x, (half, pad_right))

    window = get_window("hann", cfg.n_fft, fftbins=True)
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop_length * np.arange(n_frames)[:, None]
    frames = x[idx] * window
    spectrum = np.abs(np.fft.rfft(frames, axis=1)) ** 2

    fb = _cached_filterbank(cfg)
    mel = spectrum @ fb.T
    logmel = np.log(np.maximum(mel, cfg.log_floor))

    duration = len(waveform.samples) / cfg.sample_rate
    return MelSpectrogram(logmel.astype(np.float32), cfg.frames_per_second,
                          duration, cfg)


def mel_for_file(path: str | os.PathLike, cfg: MelConfig = DEFAULT_MEL,
                 cache_dir: str | os.PathLike | None = None) -> MelSpectrogram:
    """Features for a WAV file, optionally cached on disk under `cache_dir`."""
    if cache_dir is None:
        return mel_spectrogram(load_audio(path), cfg)
    import hashlib

    abspath = os.path.abspath(os.fspath(path))
    stem = os.path.splitext(os.path.basename(abspath))[0]
    tag = hashlib.sha1(abspath.encode()).hexdigest()[:8]
    cache_path = os.path.join(os.fspath(cache_dir), f"{stem}-{tag}.npy")
    if os.path.exists(cache_path):
        return load_feature_cache(cache_path)
    mel = mel_spectrogram(load_audio(path), cfg)
    os.makedirs(os.fspath(cache_dir), exist_ok=True)
    save_feature_cache(mel, cache_path)
    return mel


def save_feature_cache(mel: MelSpectrogram, path: str | os.PathLike) -> None:
    """Store features as a raw .npy array plus a JSON sidecar with metadata."""
    path = os.fspath(path)
    np.save(path, mel.values)
    sidecar = {
        "shape": list(mel.values.shape),
        "frames_per_second": mel.frames_per_second,
        "clip_duration": mel.clip_duration,
        "mel_config": mel.config.to_dict(),
    }
    with open(_sidecar_path(path), "w") as fh:
        json.dump(sidecar, fh, indent=2)


def load_feature_cache(path: str | os.PathLike) -> MelSpectrogram:
    path = os.fspath(path)
    values = np.load(path)
    with open(_sidecar_path(path)) as fh:
        meta = json.load(fh)
    if list(values.shape) != meta["shape"]:
        raise ValueError(f"feature cache {path!r} does not match its sidecar")
    cfg = MelConfig(**meta["mel_config"])
    return MelSpectrogram(values, meta["frames_per_second"],
                          meta["clip_duration"], cfg)


def _sidecar_path(path: str) -> str:
    base = path[:-4] if path.endswith(".npy") else path
    return base + ".json"

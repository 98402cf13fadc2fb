"""Waveform I/O, STFT/mel analysis, Griffin-Lim inversion, and mel distances."""

from __future__ import annotations

import struct
import wave as wave_module
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import DataError


class UnsupportedFormat(DataError):
    """Audio file is not mono 16-bit PCM WAV."""


class TooShort(ValueError):
    """Waveform shorter than one analysis frame."""


class MelDimMismatch(ValueError):
    """Mel spectrograms disagree in mel-bin count."""


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 16000
    frame_length: int = 1024
    hop: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    griffin_lim_iters: int = 60
    log_floor: float = 1e-5

    def __post_init__(self) -> None:
        if self.fmax is None:
            object.__setattr__(self, "fmax", self.sample_rate / 2.0)
        if self.hop > self.frame_length:
            raise ValueError(f"hop {self.hop} exceeds frame_length {self.frame_length}")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not (0.0 <= self.fmin < self.fmax <= self.sample_rate / 2.0):
            raise ValueError(f"need 0 <= fmin < fmax <= sr/2, got {self.fmin}..{self.fmax}")
        if self.log_floor <= 0.0:
            raise ValueError("log_floor must be positive")

    @property
    def n_bins(self) -> int:
        return self.frame_length // 2 + 1

    @property
    def hop_seconds(self) -> float:
        return self.hop / self.sample_rate

    def _key(self) -> tuple:
        return (self.sample_rate, self.frame_length, self.hop, self.n_mels,
                self.fmin, self.fmax)

    def to_dict(self) -> dict:
        return {"sample_rate": self.sample_rate, "frame_length": self.frame_length,
                "hop": self.hop, "n_mels": self.n_mels, "fmin": self.fmin,
                "fmax": self.fmax, "griffin_lim_iters": self.griffin_lim_iters,
                "log_floor": self.log_floor}

    @staticmethod
    def from_dict(d: dict) -> "DspConfig":
        return DspConfig(**d)


@dataclass
class MelSpectrogram:
    """Log-magnitude mel frames, shape (T, n_mels)."""

    frames: np.ndarray
    config: DspConfig

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"expected (T>=1, n_mels) frames, got {self.frames.shape}")
        if self.frames.shape[1] != self.config.n_mels:
            raise MelDimMismatch(
                f"frames have {self.frames.shape[1]} bins, config says {self.config.n_mels}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("mel frames contain non-finite values")

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


# ---------------------------------------------------------------------------
# WAV I/O (RIFF, PCM16, mono)


def load_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a mono PCM16 WAV file. Returns (int16 samples, sample rate)."""
    try:
        with wave_module.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise UnsupportedFormat(f"{path}: expected mono, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise UnsupportedFormat(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
            if w.getcomptype() != "NONE":
                raise UnsupportedFormat(f"{path}: compressed WAV ({w.getcomptype()}) not supported")
            n = w.getnframes()
            data = np.frombuffer(w.readframes(n), dtype="<i2")
            return data.copy(), w.getframerate()
    except wave_module.Error as exc:
        raise UnsupportedFormat(f"{path}: not a readable WAV file: {exc}") from exc


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono PCM16. Float input is scaled by 32767 and clipped."""
    samples = np.asarray(samples)
    if np.issubdtype(samples.dtype, np.floating):
        samples = to_pcm16(samples)
    elif samples.dtype != np.int16:
        raise ValueError(f"expected float or int16 samples, got {samples.dtype}")
    with wave_module.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(samples.astype("<i2").tobytes())


def to_pcm16(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 32767.0),
                   -32768, 32767).astype(np.int16)


def pcm16_to_float(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) / 32767.0


# ---------------------------------------------------------------------------
# STFT / mel analysis


def _hann(n: int) -> np.ndarray:
    # Periodic Hann; together with hop <= n/2 this overlap-adds smoothly.
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, config: DspConfig) -> int:
    if n_samples < config.frame_length:
        raise TooShort(f"{n_samples} samples < frame_length {config.frame_length}")
    return 1 + (n_samples - config.frame_length) // config.hop


def stft(x: np.ndarray, config: DspConfig) -> np.ndarray:
    """Magnitude-and-phase STFT, shape (T, frame_length//2 + 1). No padding."""
    x = np.asarray(x)
    if np.issubdtype(x.dtype, np.integer):
        x = pcm16_to_float(x)
    else:
        x = x.astype(np.float64)
    t = frame_count(len(x), config)
    idx = np.arange(config.frame_length)[None, :] + config.hop * np.arange(t)[:, None]
    frames = x[idx] * _hann(config.frame_length)[None, :]
    return np.fft.rfft(frames, axis=1)


def istft(spec: np.ndarray, config: DspConfig) -> np.ndarray:
    """Overlap-add inverse of `stft`. Output length (T-1)*hop + frame_length."""
    t = spec.shape[0]
    flen, hop = config.frame_length, config.hop
    win = _hann(flen)
    frames = np.fft.irfft(spec, n=flen, axis=1) * win[None, :]
    out = np.zeros((t - 1) * hop + flen, dtype=np.float64)
    norm = np.zeros_like(out)
    win_sq = win * win
    for i in range(t):
        out[i * hop:i * hop + flen] += frames[i]
        norm[i * hop:i * hop + flen] += win_sq
    return out / np.maximum(norm, 1e-12)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def _filterbank(key: tuple) -> np.ndarray:
    sample_rate, frame_length, _, n_mels, fmin, fmax = key
    n_bins = frame_length // 2 + 1
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bin_freqs = np.arange(n_bins) * sample_rate / frame_length
    fb = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        left, center, right = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (bin_freqs - left) / max(center - left, 1e-12)
        falling = (right - bin_freqs) / max(right - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def mel_filterbank(config: DspConfig) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, n_bins)."""
    return _filterbank(config._key())


@lru_cache(maxsize=16)
def _filterbank_pinv(key: tuple) -> np.ndarray:
    return np.linalg.pinv(_filterbank(key))


def mel_spectrogram(x: np.ndarray, config: DspConfig) -> MelSpectrogram:
    """Hann-window magnitude STFT -> mel filterbank -> log with floor."""
    mag = np.abs(stft(x, config))
    mel = mag @ mel_filterbank(config).T
    return MelSpectrogram(np.log(np.maximum(mel, config.log_floor)), config)


def mel_to_linear_magnitude(mel: MelSpectrogram) -> np.ndarray:
    """Pseudo-inverse projection back to linear magnitudes, clipped at zero.

    The log floor encodes silence, so it is subtracted before inversion;
    an all-floor mel maps to an exactly zero signal.
    """
    amp = np.exp(mel.frames.astype(np.float64)) - mel.config.log_floor
    lin = np.maximum(amp, 0.0) @ _filterbank_pinv(mel.config._key()).T
    return np.maximum(lin, 0.0)


def griffin_lim(mel: MelSpectrogram, iters: int | None = None,
                track_convergence: bool = False):
    """Invert a mel spectrogram to a waveform via Griffin-Lim.

    Starts from zero phase, so the result is deterministic. Returns the
    waveform, or (waveform, per-iteration spectral convergence errors) when
    `track_convergence` is set.
    """
    config = mel.config
    if iters is None:
        iters = config.griffin_lim_iters
    target = mel_to_linear_magnitude(mel)
    x = istft(target.astype(np.complex128), config)
    errors = []
    denom = np.linalg.norm(target) + 1e-12
    for _ in range(iters):
        spec = stft(x, config)
        if track_convergence:
            errors.append(float(np.linalg.norm(np.abs(spec) - target) / denom))
        phase = np.exp(1j * np.angle(spec))
        x = istft(target * phase, config)
    if track_convergence:
        return x, errors
    return x


# ---------------------------------------------------------------------------
# Distances


def resample_time(frames: np.ndarray, target_frames: int) -> np.ndarray:
    """Linear resampling of (T, n) frames along the time axis."""
    frames = np.asarray(frames, dtype=np.float64)
    t = frames.shape[0]
    if t == 1:
        return np.repeat(frames, target_frames, axis=0)
    xs = np.linspace(0.0, t - 1.0, target_frames)
    grid = np.arange(t, dtype=np.float64)
    out = np.empty((target_frames, frames.shape[1]), dtype=np.float64)
    for j in range(frames.shape[1]):
        out[:, j] = np.interp(xs, grid, frames[:, j])
    return out


def mel_distance(a: MelSpectrogram, b: MelSpectrogram, target_frames: int = 64) -> float:
    """Mean squared cell difference after resampling both to target_frames."""
    if a.frames.shape[1] != b.frames.shape[1]:
        raise MelDimMismatch(f"{a.frames.shape[1]} vs {b.frames.shape[1]} mel bins")
    ra = resample_time(a.frames, target_frames)
    rb = resample_time(b.frames, target_frames)
    return float(np.mean((ra - rb) ** 2))


# ---------------------------------------------------------------------------
# Serialization (binary with an 8-byte header, plus CSV for debugging)


def mel_to_bytes(mel: MelSpectrogram) -> bytes:
    t, n = mel.frames.shape
    return struct.pack("<II", t, n) + mel.frames.astype("<f4").tobytes()


def mel_from_bytes(data: bytes, config: DspConfig) -> MelSpectrogram:
    if len(data) < 8:
        raise DataError("mel blob shorter than its 8-byte header")
    t, n = struct.unpack("<II", data[:8])
    expected = 8 + 4 * t * n
    if len(data) != expected:
        raise DataError(f"mel blob size {len(data)} != expected {expected}")
    frames = np.frombuffer(data[8:], dtype="<f4").reshape(t, n)
    return MelSpectrogram(frames.copy(), config)


def write_mel(path: str | Path, mel: MelSpectrogram) -> None:
    Path(path).write_bytes(mel_to_bytes(mel))


def read_mel(path: str | Path, config: DspConfig) -> MelSpectrogram:
    return mel_from_bytes(Path(path).read_bytes(), config)


def mel_to_csv(path: str | Path, mel: MelSpectrogram) -> None:
    np.savetxt(str(path), mel.frames, delimiter=",", fmt="%.6f")

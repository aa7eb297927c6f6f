"""Log-mel front-end and dataset standardization."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    fft_length: int = 1024
    hop: int = 256
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-5

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(cfg: MelConfig) -> np.ndarray:
    """Center frequency (Hz) of every filter."""
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    return pts[1:-1]


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """HTK-scale triangular filters, ``[n_mels, fft_length // 2 + 1]``, peak 1."""
    n_bins = cfg.fft_length // 2 + 1
    freqs = np.arange(n_bins) * cfg.sample_rate / cfg.fft_length
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    lower, center, upper = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rise = (freqs[None, :] - lower) / (center - lower)
    fall = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rise, fall))
    if np.any(fb.sum(axis=1) <= 0):
        raise ValueError("mel_filterbank: empty filter; reduce n_mels or increase fft_length")
    return fb


def power_spectrogram(waveform: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Centered STFT (reflect padding, periodic Hann), ``|X|^2``, ``[bins, frames]``."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"power_spectrogram: expected mono waveform, got shape {x.shape}")
    if x.size < cfg.fft_length:
        raise ValueError(f"power_spectrogram: need at least {cfg.fft_length} samples, got {x.size}")
    half = cfg.fft_length // 2
    xp = np.pad(x, half, mode="reflect")
    n_frames = 1 + x.size // cfg.hop
    idx = np.arange(cfg.fft_length)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(cfg.fft_length) / cfg.fft_length)
    spec = np.fft.rfft(xp[idx] * window[None, :], axis=1)
    return (spec.real**2 + spec.imag**2).T


def mel_encode(waveform: np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """``log(mel power + floor)``, shape ``[n_mels, 1 + len // hop]``."""
    power = power_spectrogram(waveform, cfg)
    return np.log(mel_filterbank(cfg) @ power + cfg.log_floor)


def load_waveform(path: str | Path, sample_rate: int = 16000) -> np.ndarray:
    """Read mono 16-bit PCM WAV, or raw little-endian float32 samples."""
    path = Path(path)
    if path.suffix.lower() == ".wav":
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
                raise ValueError(f"{path}: expected mono 16-bit PCM")
            if wf.getframerate() != sample_rate:
                raise ValueError(f"{path}: expected {sample_rate} Hz, got {wf.getframerate()}")
            raw = wf.readframes(wf.getnframes())
        return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return np.fromfile(path, dtype="<f4").astype(np.float64)


def save_wav(path: str | Path, waveform: np.ndarray, sample_rate: int = 16000) -> None:
    pcm = np.clip(np.round(np.asarray(waveform) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


@dataclass(frozen=True)
class Standardizer:
    """``(x - shift) / scale`` with dataset mean 0 and variance 0.5 afterwards."""

    shift: float
    scale: float
    target_var: float = 0.5

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.shift) / self.scale

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.scale + self.shift


def fit_standardizer(data, target_var: float = 0.5, min_frames: int = 1000) -> Standardizer:
    """Fit on a ``[..., n_a, T]`` array or a list of ``[n_a, T]`` tracks."""
    tracks = [np.asarray(d, dtype=np.float64) for d in data] if isinstance(data, (list, tuple)) else [np.asarray(data, dtype=np.float64)]
    frames = sum(t.shape[-1] * (int(np.prod(t.shape[:-2])) if t.ndim > 2 else 1) for t in tracks)
    if frames < min_frames:
        raise ValueError(f"fit_standardizer: need >= {min_frames} frames, got {frames}")
    count = sum(t.size for t in tracks)
    mu = sum(float(t.sum()) for t in tracks) / count
    var = sum(float(np.sum((t - mu) ** 2)) for t in tracks) / count
    if not var > 0:
        raise ValueError("fit_standardizer: dataset has zero variance")
    return Standardizer(shift=mu, scale=float(np.sqrt(var / target_var)), target_var=target_var)

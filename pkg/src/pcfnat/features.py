"""Log-Mel filterbank features from 16 kHz mono audio."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ContractError

SUPPORTED_RATE = 16000
LOG_FLOOR = 1e-10


class UnsupportedRateError(ContractError):
    pass


@dataclass(frozen=True)
class FbankConfig:
    sample_rate: int = SUPPORTED_RATE
    window_ms: float = 25.0
    shift_ms: float = 10.0
    n_mels: int = 80
    cms: bool = True
    n_fft: int = 512

    def __post_init__(self):
        if self.window_ms < self.shift_ms:
            raise ConfigError(f"window ({self.window_ms} ms) shorter than shift ({self.shift_ms} ms)")
        if self.shift_ms <= 0:
            raise ConfigError("shift must be positive")
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if self.n_fft < self.window_length:
            raise ConfigError(f"n_fft {self.n_fft} shorter than the {self.window_length}-sample window")

    @property
    def window_length(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.shift_ms / 1000))

    def num_frames(self, n_samples: int) -> int:
        if n_samples < self.window_length:
            return 0
        return (n_samples - self.window_length) // self.hop_length + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FbankConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown fbank config keys: {', '.join(unknown)}")
        return cls(**d)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                   f_min: float = 0.0, f_max: float | None = None) -> np.ndarray:
    """Triangular filters, equally spaced on the HTK mel scale, ``[n_mels, n_fft//2+1]``."""
    f_max = sample_rate / 2 if f_max is None else f_max
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def frame_signal(wav: np.ndarray, cfg: FbankConfig) -> np.ndarray:
    T = cfg.num_frames(wav.shape[0])
    idx = np.arange(cfg.window_length)[None, :] + cfg.hop_length * np.arange(T)[:, None]
    return wav[idx]


def extract_fbank(wav, cfg: FbankConfig = FbankConfig(), sample_rate: int | None = None) -> np.ndarray:
    """``[n_mels, T]`` float32 log-Mel features of a mono waveform.

    Integer PCM is scaled to [-1, 1).  Each frame is Hamming-windowed and
    zero-padded to ``n_fft``; the STFT magnitude goes through the filterbank,
    then ``log(max(., 1e-10))``.  With ``cms`` the per-bin mean over time is
    removed.
    """
    rate = cfg.sample_rate if sample_rate is None else sample_rate
    if rate != SUPPORTED_RATE or cfg.sample_rate != SUPPORTED_RATE:
        raise UnsupportedRateError(f"only {SUPPORTED_RATE} Hz audio is supported, got {rate} Hz")
    wav = np.asarray(wav)
    if wav.ndim != 1:
        raise ContractError(f"expected mono samples, got shape {wav.shape}")
    if np.issubdtype(wav.dtype, np.integer):
        wav = wav.astype(np.float64) / 32768.0
    else:
        wav = wav.astype(np.float64)
    if wav.shape[0] < cfg.window_length:
        raise ContractError(f"{wav.shape[0]} samples is shorter than one {cfg.window_length}-sample window")
    frames = frame_signal(wav, cfg) * np.hamming(cfg.window_length)
    mag = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1))
    fb = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate)
    feats = np.log(np.maximum(mag @ fb.T, LOG_FLOOR)).T
    if cfg.cms:
        feats = feats - feats.mean(axis=1, keepdims=True)
    return feats.astype(np.float32)

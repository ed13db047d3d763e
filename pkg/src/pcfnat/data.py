"""Synthetic pseudo-Fbank speakers for desk-scale training and tests."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class DataConfig:
    n_speakers: int = 32
    utts_per_speaker: int = 8
    n_mels: int = 80
    n_frames: int = 400
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 1 or self.utts_per_speaker < 1:
            raise ConfigError("need at least one speaker and one utterance per speaker")
        if self.n_mels < 1 or self.n_frames < 1:
            raise ConfigError("n_mels and n_frames must be >= 1")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown data config keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SpeakerSignature:
    envelope: np.ndarray     # [n_mels] static spectral tilt and formants
    amplitude: np.ndarray    # [n_mels] depth of the temporal modulation per bin
    rate: float              # modulation cycles per frame


def _smooth(rng, n, width):
    x = rng.standard_normal(n + 2 * width)
    kernel = np.hanning(2 * width + 1)
    return np.convolve(x, kernel / kernel.sum(), mode="valid")[:n]


class SyntheticSpeakerDataset:
    """``n_speakers * utts_per_speaker`` log-Mel-like matrices.

    Speaker ``s`` owns a smooth spectral envelope, a smooth per-bin
    modulation depth and a modulation rate.  An utterance renders the
    modulation with a random phase, adds a random per-utterance channel
    offset and white noise of std ``noise``.  Everything is derived from
    ``(seed, speaker, utterance)``, so any item can be regenerated alone.
    """

    def __init__(self, config: DataConfig = DataConfig()):
        self.config = config
        self.signatures = [self._signature(s) for s in range(config.n_speakers)]

    def _signature(self, s: int) -> SpeakerSignature:
        rng = np.random.default_rng([self.config.seed, 0, s])
        n = self.config.n_mels
        width = max(1, n // 10)
        env = 3.0 * _smooth(rng, n, width)
        amp = 1.5 * np.abs(_smooth(rng, n, width)) + 0.2
        rate = float(rng.uniform(0.02, 0.12))
        return SpeakerSignature(env, amp, rate)

    def __len__(self):
        return self.config.n_speakers * self.config.utts_per_speaker

    @property
    def labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.config.n_speakers), self.config.utts_per_speaker)

    @property
    def utt_ids(self) -> list[str]:
        return [self.utt_id(i) for i in range(len(self))]

    def utt_id(self, index: int) -> str:
        s, u = divmod(index, self.config.utts_per_speaker)
        return f"spk{s:03d}-utt{u:03d}"

    def speaker_id(self, index: int) -> str:
        return f"spk{index // self.config.utts_per_speaker:03d}"

    def __getitem__(self, index: int) -> tuple[np.ndarray, int]:
        if not 0 <= index < len(self):
            raise IndexError(index)
        cfg = self.config
        s, u = divmod(index, cfg.utts_per_speaker)
        sig = self.signatures[s]
        rng = np.random.default_rng([cfg.seed, 1, s, u])
        t = np.arange(cfg.n_frames)
        phase = rng.uniform(0, 2 * np.pi)
        mod = np.sin(2 * np.pi * sig.rate * t + phase)
        channel = 0.3 * _smooth(rng, cfg.n_mels, max(1, cfg.n_mels // 4))
        x = (sig.envelope + channel)[:, None] + sig.amplitude[:, None] * mod[None, :]
        x = x + cfg.noise * rng.standard_normal((cfg.n_mels, cfg.n_frames))
        return x.astype(np.float32), s

    def items(self):
        for i in range(len(self)):
            yield self.utt_id(i), *self[i]

    def trials(self, max_nontarget_per_utt: int | None = None, seed: int = 0) -> list[tuple[int, str, str]]:
        """All target pairs plus nontarget pairs (optionally subsampled per
        enrollment utterance), as ``(label, enroll, test)``."""
        rng = np.random.default_rng(seed)
        ids, labels = self.utt_ids, self.labels
        out = []
        for i, j in itertools.combinations(range(len(self)), 2):
            if labels[i] == labels[j]:
                out.append((1, ids[i], ids[j]))
        for i in range(len(self)):
            others = np.flatnonzero(labels > labels[i])
            if max_nontarget_per_utt is not None and others.size > max_nontarget_per_utt:
                others = np.sort(rng.choice(others, max_nontarget_per_utt, replace=False))
            out.extend((0, ids[i], ids[j]) for j in others)
        return out


def random_crop(frames: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Fixed-length crop along time; shorter inputs are tiled to ``length``."""
    T = frames.shape[-1]
    if T == 0:
        raise ContractError("cannot crop an empty utterance")
    if T < length:
        reps = -(-length // T)
        frames = np.concatenate([frames] * reps, axis=-1)
        T = frames.shape[-1]
    start = int(rng.integers(0, T - length + 1))
    return frames[..., start:start + length]

"""Mono audio clips and 16-bit PCM WAV I/O."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
from scipy.io import wavfile

DEFAULT_SAMPLE_RATE = 16000


@dataclasses.dataclass
class AudioClip:
    """A mono waveform held as float64 samples nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("samples must be a non-empty 1-D array")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def power(self) -> float:
        """Mean squared amplitude over the full clip."""
        return float(np.mean(self.samples ** 2))


def write_wav(path, clip: AudioClip) -> None:
    """Write PCM 16-bit mono WAV; float samples are saturated at [-1, 1]."""
    sat = np.clip(clip.samples, -1.0, 1.0)
    pcm = np.round(sat * 32767.0).astype(np.int16)
    wavfile.write(str(path), clip.sample_rate, pcm)


def read_wav(path) -> AudioClip:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such audio file: {path}")
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"expected mono WAV, got shape {data.shape}: {path}")
    if data.dtype != np.int16:
        raise ValueError(f"expected PCM 16-bit WAV, got {data.dtype}: {path}")
    return AudioClip(data.astype(np.float64) / 32767.0, sample_rate=int(rate))

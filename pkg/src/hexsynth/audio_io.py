"""WAV audio containers and file I/O (48 kHz, mono or 6-channel)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .features import SAMPLE_RATE


@dataclass
class AudioBuffer:
    """Sampled waveform. ``samples`` is (n,) for mono or (channels, n)."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")

    @property
    def n_samples(self):
        return self.samples.shape[-1]

    @property
    def duration_s(self):
        return self.n_samples / self.sample_rate


def read_wav(path) -> AudioBuffer:
    """Read a WAV file into float64 samples in [-1, 1], channels first."""
    rate, data = wavfile.read(Path(path))
    if data.dtype == np.int16:
        samples = data / 32768.0
    elif data.dtype == np.int32:
        samples = data / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)
    if samples.ndim == 2:  # scipy gives (n, channels)
        samples = samples.T
    return AudioBuffer(samples=samples, sample_rate=int(rate))


def write_wav(path, audio: AudioBuffer, bit_depth="float32"):
    """Write mono (n,) or multichannel (channels, n) audio to a WAV file."""
    samples = audio.samples
    if samples.ndim == 2:
        samples = samples.T
    if bit_depth == "float32":
        wavfile.write(Path(path), audio.sample_rate, samples.astype(np.float32))
    elif bit_depth == "int16":
        clipped = np.clip(samples, -1.0, 1.0)
        wavfile.write(Path(path), audio.sample_rate, (clipped * 32767).astype(np.int16))
    else:
        raise ValueError(f"unsupported bit depth: {bit_depth}")

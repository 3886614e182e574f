"""16-bit PCM WAV reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import Waveform

ACCEPTED_RATES = (16000, 1600, 1200, 800, 400)


def read_wav(path: str | Path) -> Waveform:
    rate, data = wavfile.read(str(path))
    if rate not in ACCEPTED_RATES:
        raise ValueError(f"{path}: unsupported sample rate {rate} Hz (accepted: {ACCEPTED_RATES})")
    if data.dtype != np.int16:
        raise ValueError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    if data.ndim == 2 and data.shape[1] not in (1, 3):
        raise ValueError(f"{path}: expected 1 or 3 channels, got {data.shape[1]}")
    samples = data.astype(np.float64) / 32768.0
    if samples.ndim == 2 and samples.shape[1] == 1:
        samples = samples[:, 0]
    return Waveform(samples, float(rate))


def write_wav(path: str | Path, w: Waveform) -> None:
    if int(w.sample_rate) not in ACCEPTED_RATES:
        raise ValueError(f"unsupported sample rate {w.sample_rate} Hz (accepted: {ACCEPTED_RATES})")
    if w.channels not in (1, 3):
        raise ValueError(f"expected 1 or 3 channels, got {w.channels}")
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), int(w.sample_rate), pcm)

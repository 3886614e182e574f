"""DSP primitives: waveforms, STFT/iSTFT, zero-phase filtering, resampling and
vibration-intensity extraction."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal

AUDIO_RATE = 16000
VIB_RATE = 1600
AUDIO_WINDOW = 640
VIB_WINDOW = 64
MOTION_CUTOFF_HZ = 85.0
VIB_BAND_HZ = 800.0


@dataclass(frozen=True)
class Waveform:
    """Sampled signal; ``samples`` is ``(n,)`` for mono or ``(n, channels)``."""

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim not in (1, 2):
            raise ValueError(f"samples must be 1-D or 2-D, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def channels(self) -> int:
        return 1 if self.samples.ndim == 1 else self.samples.shape[1]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def __len__(self) -> int:
        return self.samples.shape[0]

    def mono(self) -> np.ndarray:
        if self.channels != 1:
            raise ValueError(f"expected a mono waveform, got {self.channels} channels")
        return self.samples.reshape(-1)


@dataclass(frozen=True)
class Spectrogram:
    """One-sided complex STFT, frames laid out ``[time, freq]``."""

    frames: np.ndarray
    window_size: int
    hop: int
    sample_rate: float
    n_samples: int

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]


def default_hop(window_size: int) -> int:
    return window_size // 2


def hann(window_size: int) -> np.ndarray:
    # periodic Hann: exact constant-overlap-add at 50% overlap
    return signal.get_window("hann", window_size, fftbins=True)


def frame_count(n_samples: int, window_size: int, hop: int) -> int:
    """Number of STFT frames needed for full two-frame coverage of ``n_samples``."""
    return -(-(n_samples + window_size - hop) // hop)


def _check_window(window_size: int, hop: int) -> None:
    if window_size <= 0 or window_size % 2:
        raise ValueError(f"window_size must be a positive even integer, got {window_size}")
    if hop <= 0 or hop > window_size:
        raise ValueError(f"hop must be in (0, window_size], got hop={hop}, window={window_size}")


def stft_array(x: np.ndarray, window_size: int, hop: int) -> np.ndarray:
    """Complex STFT of a 1-D array, shape ``[frames, window_size // 2 + 1]``.

    The signal is padded by ``window_size - hop`` zeros on the left and enough
    zeros on the right that every input sample is covered by overlapping frames.
    """
    _check_window(window_size, hop)
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    n_frames = frame_count(n, window_size, hop)
    pad_left = window_size - hop
    total = (n_frames - 1) * hop + window_size
    padded = np.zeros(total)
    padded[pad_left:pad_left + n] = x
    idx = np.arange(window_size)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(padded[idx] * hann(window_size), axis=-1)


def istft_array(frames: np.ndarray, window_size: int, hop: int, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft_array` (least-squares iSTFT)."""
    _check_window(window_size, hop)
    frames = np.asarray(frames)
    n_frames, n_bins = frames.shape
    if n_bins != window_size // 2 + 1:
        raise ValueError(f"frames have {n_bins} bins, window {window_size} needs {window_size // 2 + 1}")
    window = hann(window_size)
    segments = np.fft.irfft(frames, n=window_size, axis=-1) * window
    total = (n_frames - 1) * hop + window_size
    idx = np.arange(window_size)[None, :] + hop * np.arange(n_frames)[:, None]
    out = np.zeros(total)
    np.add.at(out, idx, segments)
    norm = synthesis_norm(n_frames, window_size, hop)
    out = np.divide(out, norm, out=np.zeros_like(out), where=norm > 1e-10)
    pad_left = window_size - hop
    if length is None:
        length = n_frames * hop - pad_left
    return out[pad_left:pad_left + length]


def synthesis_norm(n_frames: int, window_size: int, hop: int) -> np.ndarray:
    """Overlap-added squared window; the iSTFT divides by this."""
    total = (n_frames - 1) * hop + window_size
    idx = np.arange(window_size)[None, :] + hop * np.arange(n_frames)[:, None]
    norm = np.zeros(total)
    np.add.at(norm, idx, np.broadcast_to(hann(window_size) ** 2, idx.shape))
    return norm


def stft(w: Waveform, window_size: int, hop: int | None = None) -> Spectrogram:
    """Hann-windowed STFT of a mono waveform."""
    hop = default_hop(window_size) if hop is None else hop
    if w.channels != 1:
        raise ValueError(f"stft needs a mono waveform, got {w.channels} channels")
    frames = stft_array(w.mono(), window_size, hop)
    return Spectrogram(frames, window_size, hop, w.sample_rate, len(w))


def istft(
    mag: np.ndarray,
    phase: np.ndarray,
    window_size: int,
    hop: int | None = None,
    sample_rate: float = AUDIO_RATE,
    length: int | None = None,
) -> Waveform:
    hop = default_hop(window_size) if hop is None else hop
    mag = np.asarray(mag, dtype=np.float64)
    phase = np.asarray(phase, dtype=np.float64)
    if mag.shape != phase.shape:
        raise ValueError(f"magnitude {mag.shape} and phase {phase.shape} shapes differ")
    x = istft_array(mag * np.exp(1j * phase), window_size, hop, length)
    return Waveform(x, sample_rate)


def filter(w: Waveform, kind: str, cutoff: float, order: int = 4) -> Waveform:
    """Zero-phase Butterworth filtering (forward-backward, second-order sections)."""
    nyquist = w.sample_rate / 2
    if not 0 < cutoff < nyquist:
        raise ValueError(f"cutoff {cutoff} Hz outside (0, {nyquist}) Hz")
    if kind not in ("lowpass", "highpass"):
        raise ValueError(f"kind must be 'lowpass' or 'highpass', got {kind!r}")
    sos = signal.butter(order, cutoff, btype=kind, fs=w.sample_rate, output="sos")
    y = signal.sosfiltfilt(sos, w.samples, axis=0)
    return Waveform(y, w.sample_rate)


def resample(w: Waveform, target_rate: float) -> Waveform:
    """Polyphase band-limited resampling (anti-alias lowpass built into the FIR)."""
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    ratio = Fraction(target_rate / w.sample_rate).limit_denominator(10000)
    y = signal.resample_poly(w.samples, ratio.numerator, ratio.denominator, axis=0)
    return Waveform(y, target_rate)


def vib_intensity(w: Waveform, cutoff: float = MOTION_CUTOFF_HZ, order: int = 4) -> Waveform:
    """Collapse tri-axial acceleration to a mono vibration intensity.

    Per-sample L2 norm over the axes, mean removal, then a zero-phase high-pass
    at ``cutoff`` to reject body-motion components.
    """
    if w.channels != 3:
        raise ValueError(f"vib_intensity needs 3 acceleration axes, got {w.channels}")
    norm = np.linalg.norm(w.samples, axis=1)
    norm = norm - norm.mean()
    return filter(Waveform(norm, w.sample_rate), "highpass", cutoff, order)


def rms(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x ** 2))) if x.size else 0.0

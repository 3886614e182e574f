"""Bone-conduction function (BCF) estimation, Gaussian modelling and
vibration synthesis from clean audio."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.interpolate import CubicSpline

from .dsp import VIB_RATE, VIB_WINDOW, Waveform, default_hop, istft_array, resample, stft_array

UNRELIABLE_FLOOR = 1e-8
WINDOW_SECONDS = 5.0
DEFAULT_CORR_BINS = 4.0


@dataclass(frozen=True)
class FrequencyResponse:
    """Linear magnitude gain per vibration-STFT bin."""

    gains: np.ndarray
    bin_hz: float
    reliable: np.ndarray | None = None

    def __post_init__(self):
        gains = np.asarray(self.gains, dtype=np.float64)
        if np.any(gains < 0) or not np.all(np.isfinite(gains)):
            raise ValueError("gains must be finite and non-negative")
        object.__setattr__(self, "gains", gains)
        reliable = np.ones(gains.shape, bool) if self.reliable is None else np.asarray(self.reliable, bool)
        if reliable.shape != gains.shape:
            raise ValueError("reliable mask must match gains")
        object.__setattr__(self, "reliable", reliable)

    def __len__(self) -> int:
        return self.gains.shape[0]


@dataclass(frozen=True)
class BcfModel:
    """Per-bin Gaussian over linear gains."""

    mu: np.ndarray
    sigma: np.ndarray
    bin_hz: float
    n_windows: int

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.shape != sigma.shape:
            raise ValueError("mu and sigma lengths differ")
        if np.any(mu < 0) or np.any(sigma < 0):
            raise ValueError("mu and sigma must be non-negative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    def to_dict(self) -> dict:
        return {
            "bin_hz": float(self.bin_hz),
            "mu": [float(v) for v in self.mu],
            "sigma": [float(v) for v in self.sigma],
            "n_windows": int(self.n_windows),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BcfModel":
        return cls(np.array(d["mu"]), np.array(d["sigma"]), float(d["bin_hz"]), int(d["n_windows"]))


def save_pool(path: str | Path, models: list[BcfModel]) -> None:
    Path(path).write_text(json.dumps([m.to_dict() for m in models], indent=2, sort_keys=True) + "\n")


def load_pool(path: str | Path) -> list[BcfModel]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [BcfModel.from_dict(d) for d in data]


def _to_vib_rate(audio: Waveform, vib_rate: float) -> np.ndarray:
    # resample_poly's FIR is the anti-alias lowpass at the vibration Nyquist
    if audio.sample_rate != vib_rate:
        audio = resample(audio, vib_rate)
    return audio.mono()


def estimate_response(audio: Waveform, vib: Waveform, window_size: int = VIB_WINDOW) -> FrequencyResponse:
    """Per-bin gain ``sqrt(P_vib / P_audio)`` from Welch PSDs of one paired window.

    The audio is brought to the vibration rate first. Welch segments equal
    the vibration STFT window (50% overlap), so bins line up with the grid
    used by :func:`synthesize_vibration`. Bins where the audio PSD falls below
    ``1e-8`` of its peak are flagged unreliable.
    """
    fs = vib.sample_rate
    a = _to_vib_rate(audio, fs)
    v = vib.mono()
    n = min(len(a), len(v))
    if abs(len(a) - len(v)) > max(2, len(v) // 100):
        raise ValueError(f"audio ({len(a)} samples at {fs} Hz) and vibration ({len(v)}) are misaligned")
    a, v = a[:n], v[:n]
    welch = dict(fs=fs, window="hann", nperseg=window_size, noverlap=window_size - default_hop(window_size),
                 detrend=False, scaling="density")
    _, p_audio = signal.welch(a, **welch)
    _, p_vib = signal.welch(v, **welch)
    peak = p_audio.max()
    if peak <= 0.0:
        raise ValueError("estimate_response: audio window is silent")
    reliable = p_audio >= UNRELIABLE_FLOOR * peak
    gains = np.zeros_like(p_audio)
    gains[reliable] = np.sqrt(p_vib[reliable] / p_audio[reliable])
    return FrequencyResponse(gains, fs / window_size, reliable)


def split_windows(audio: Waveform, vib: Waveform, seconds: float = WINDOW_SECONDS):
    """Yield time-aligned ``(audio, vib)`` windows of ``seconds`` length."""
    na = int(round(seconds * audio.sample_rate))
    nv = int(round(seconds * vib.sample_rate))
    count = min(len(audio) // na, len(vib) // nv)
    for i in range(count):
        yield (Waveform(audio.samples[i * na:(i + 1) * na], audio.sample_rate),
               Waveform(vib.samples[i * nv:(i + 1) * nv], vib.sample_rate))


def _fill_unreliable(r: FrequencyResponse) -> np.ndarray:
    gains = r.gains.copy()
    good = np.flatnonzero(r.reliable)
    if good.size == len(gains):
        return gains
    if good.size == 0:
        raise ValueError("response has no reliable bins")
    bins = np.arange(len(gains))
    if good.size == 1:
        gains[:] = gains[good[0]]
        return gains
    spline = CubicSpline(good, gains[good], extrapolate=False)
    bad = ~r.reliable
    filled = spline(bins[bad])
    # outside the reliable span hold the nearest reliable value
    outside = np.isnan(filled)
    filled[outside] = gains[good[np.abs(good[:, None] - bins[bad][outside][None, :]).argmin(axis=0)]]
    gains[bad] = np.maximum(filled, 0.0)
    return gains


def fit_bcf(responses: list[FrequencyResponse]) -> BcfModel:
    """Per-bin sample mean and sample standard deviation of window responses.

    Unreliable bins of each response are first filled by cubic interpolation
    across frequency from that response's reliable bins.
    """
    if len(responses) < 2:
        raise ValueError(f"fit_bcf needs at least 2 responses, got {len(responses)}")
    bin_hz = responses[0].bin_hz
    n_bins = len(responses[0])
    if any(len(r) != n_bins or r.bin_hz != bin_hz for r in responses):
        raise ValueError("responses have different bin layouts")
    stacked = np.stack([_fill_unreliable(r) for r in responses])
    # sort each bin's column so the reduction order, hence the floats, ignore input order
    stacked = np.sort(stacked, axis=0)
    # shift by the column minimum: identical responses give mu exactly and sigma exactly 0
    lo = stacked[0]
    shifted = stacked - lo
    mu = lo + shifted.mean(axis=0)
    sigma = shifted.std(axis=0, ddof=1)
    return BcfModel(mu, sigma, bin_hz, len(responses))


def fit_from_pair(audio: Waveform, vib: Waveform, seconds: float = WINDOW_SECONDS,
                  window_size: int = VIB_WINDOW) -> BcfModel:
    responses = [estimate_response(a, v, window_size) for a, v in split_windows(audio, vib, seconds)]
    return fit_bcf(responses)


def _correlation_factor(n_bins: int, corr_bins: float) -> np.ndarray:
    if corr_bins <= 0:
        return np.eye(n_bins)
    d = np.arange(n_bins)[:, None] - np.arange(n_bins)[None, :]
    cov = np.exp(-0.5 * (d / corr_bins) ** 2)
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_response(model: BcfModel, seed, corr_bins: float = DEFAULT_CORR_BINS) -> FrequencyResponse:
    """Draw one response with per-bin marginals ``N(mu, sigma^2)``, clipped at 0.

    ``corr_bins`` is the length (in bins) of a squared-exponential correlation
    between neighbouring bins; 0 gives independent bins.
    """
    rng = np.random.default_rng(seed)
    z = _correlation_factor(len(model.mu), corr_bins) @ rng.standard_normal(len(model.mu))
    gains = np.maximum(model.mu + model.sigma * z, 0.0)
    return FrequencyResponse(gains, model.bin_hz)


def synthesize_vibration(clean: Waveform, fr: FrequencyResponse, vib_rate: float = VIB_RATE,
                         window_size: int = VIB_WINDOW) -> Waveform:
    """Synthetic vibration: resample to ``vib_rate``, scale STFT magnitudes by the
    response, keep the phase and invert."""
    hop = default_hop(window_size)
    x = _to_vib_rate(clean, vib_rate)
    frames = stft_array(x, window_size, hop)
    if frames.shape[1] != len(fr):
        raise ValueError(f"response has {len(fr)} bins, STFT has {frames.shape[1]}")
    if abs(fr.bin_hz - vib_rate / window_size) > 1e-9:
        raise ValueError(f"response bin spacing {fr.bin_hz} Hz != STFT bin spacing {vib_rate / window_size} Hz")
    return Waveform(istft_array(frames * fr.gains, window_size, hop, len(x)), vib_rate)


def reference_model(n_bins: int = VIB_WINDOW // 2 + 1, bin_hz: float = VIB_RATE / VIB_WINDOW,
                    rel_sigma: float = 0.15) -> BcfModel:
    """Smooth low-pass BCF used by the synthetic fixtures.

    Low-pass Gaussian roll-off (flat at DC, 0.15 floor); it varies slowly
    enough across bins that STFT leakage does not bias the round trip.
    """
    f = np.arange(n_bins) * bin_hz
    mu = 0.15 + 0.85 * np.exp(-0.5 * (f / 300.0) ** 2)
    return BcfModel(mu, rel_sigma * mu, bin_hz, 0)

"""Evaluation metrics: SI-SNR, SNR, log-spectral distance, spectrogram similarity."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsp import AUDIO_WINDOW, VIB_WINDOW, Waveform, default_hop, stft_array

SNR_CAP_DB = 60.0
POWER_FLOOR = 1e-10


def _as_array(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.mono()
    return np.asarray(x, dtype=np.float64).reshape(-1)


def _check_lengths(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")


def _capped_ratio_db(signal_energy: float, noise_energy: float) -> float:
    # max() on the noise term is the same as min(ratio, cap) but never divides by zero
    floor = signal_energy * 10.0 ** (-SNR_CAP_DB / 10.0)
    return float(10.0 * np.log10(signal_energy / max(noise_energy, floor)))


def si_snr(est, ref) -> float:
    """Scale-invariant SNR in dB, capped at +60 dB.

    Both signals are zero-meaned, ``est`` is projected onto ``ref`` and the
    ratio of projected to residual energy is returned.
    """
    est, ref = _as_array(est), _as_array(ref)
    _check_lengths(est, ref)
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = float(ref @ ref)
    if ref_energy <= 0.0:
        raise ValueError("si_snr: reference is silent")
    target = (est @ ref) / ref_energy * ref
    residual = est - target
    target_energy = float(target @ target)
    if target_energy == 0.0:
        # est orthogonal to ref (or silent): no projected signal at all
        return -np.inf
    return _capped_ratio_db(target_energy, float(residual @ residual))


def snr_metric(est, ref) -> float:
    """Plain SNR, ``10 log10(|ref|^2 / |est - ref|^2)``, capped at +60 dB."""
    est, ref = _as_array(est), _as_array(ref)
    _check_lengths(est, ref)
    ref_energy = float(ref @ ref)
    if ref_energy <= 0.0:
        raise ValueError("snr_metric: reference is silent")
    diff = est - ref
    return _capped_ratio_db(ref_energy, float(diff @ diff))


def snr_improvement(enhanced, noisy, clean) -> float:
    return snr_metric(enhanced, clean) - snr_metric(noisy, clean)


def lsd(x, y, window_size: int = AUDIO_WINDOW, hop: int | None = None) -> float:
    """Log-spectral distance with natural-log power spectra.

    Per frame, the RMS over bins of the log-power difference; then the mean
    over frames. Powers are floored at 1e-10.
    """
    x, y = _as_array(x), _as_array(y)
    _check_lengths(x, y)
    hop = default_hop(window_size) if hop is None else hop
    px = np.abs(stft_array(x, window_size, hop)) ** 2
    py = np.abs(stft_array(y, window_size, hop)) ** 2
    diff = np.log(np.maximum(py, POWER_FLOOR)) - np.log(np.maximum(px, POWER_FLOOR))
    return float(np.mean(np.sqrt(np.mean(diff ** 2, axis=1))))


def spec_similarity_error(real, synth, window_size: int = VIB_WINDOW, hop: int | None = None) -> float:
    """Mean absolute magnitude-spectrogram difference over the peak of ``real``.

    Clipped to 1.0 so the value stays a fraction.
    """
    real, synth = _as_array(real), _as_array(synth)
    _check_lengths(real, synth)
    hop = default_hop(window_size) if hop is None else hop
    r = np.abs(stft_array(real, window_size, hop))
    s = np.abs(stft_array(synth, window_size, hop))
    peak = r.max()
    if peak <= 0.0:
        raise ValueError("spec_similarity_error: real signal is silent")
    return float(min(np.mean(np.abs(r - s)) / peak, 1.0))


@dataclass
class ClipScores:
    clip_id: str
    si_snr_db: float
    snr_db: float
    lsd: float
    similarity_error: float
    si_snr_input_db: float | None = None
    snr_input_db: float | None = None
    blocks_used: int | None = None


@dataclass
class EvalReport:
    clips: list[ClipScores] = field(default_factory=list)
    external: dict = field(default_factory=lambda: {"pesq": "external", "wer": "external"})

    _METRICS = ("si_snr_db", "snr_db", "lsd", "similarity_error")

    def aggregate(self) -> dict:
        out = {}
        for name in self._METRICS:
            values = np.array([getattr(c, name) for c in self.clips], dtype=np.float64)
            if values.size == 0:
                continue
            out[name] = {
                "mean": float(values.mean()),
                "p10": float(np.percentile(values, 10)),
                "p50": float(np.percentile(values, 50)),
                "p90": float(np.percentile(values, 90)),
            }
        return out

    def to_json(self, path: str | Path, extra: dict | None = None) -> None:
        payload = {
            "clips": [asdict(c) for c in self.clips],
            "aggregate": self.aggregate(),
            "external": self.external,
        }
        if extra:
            payload.update(extra)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def to_csv(self, path: str | Path) -> None:
        names = list(ClipScores.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names)
            for c in self.clips:
                writer.writerow([_fmt(getattr(c, n)) for n in names])


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def score_clip(clip_id: str, enhanced, clean, noisy=None, blocks_used: int | None = None,
               window_size: int = AUDIO_WINDOW) -> ClipScores:
    enhanced, clean = _as_array(enhanced), _as_array(clean)
    scores = ClipScores(
        clip_id=clip_id,
        si_snr_db=si_snr(enhanced, clean),
        snr_db=snr_metric(enhanced, clean),
        lsd=lsd(enhanced, clean, window_size),
        similarity_error=spec_similarity_error(clean, enhanced, window_size),
        blocks_used=blocks_used,
    )
    if noisy is not None:
        noisy = _as_array(noisy)
        scores.si_snr_input_db = si_snr(noisy, clean)
        scores.snr_input_db = snr_metric(noisy, clean)
    return scores

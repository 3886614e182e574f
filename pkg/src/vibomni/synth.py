"""Synthetic speech-like corpora for hermetic experiments.

"Speech" is a harmonic complex with a wandering pitch, gated into syllables
by a sinusoidal envelope. Noises are white, competing speech-like talkers,
and a stationary tonal "machine" noise used as an out-of-domain family.
"""

from __future__ import annotations

import numpy as np

from . import bcf
from .dsp import AUDIO_RATE, Waveform
from .mixer import Example, mix_at_snr

NOISE_FAMILIES = ("white", "speech", "machine")


def speech_like(seconds: float, rng: np.random.Generator, f0_range=(100.0, 180.0),
                sample_rate: int = AUDIO_RATE, level: float = 0.1) -> np.ndarray:
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(*f0_range)
    vibrato = 1.0 + 0.06 * np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t + rng.uniform(0, 2 * np.pi))
    drift = 1.0 + 0.1 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * vibrato * drift) / sample_rate
    formants = rng.uniform([400, 1100, 2300], [800, 1700, 3000])
    x = np.zeros(n)
    for h in range(1, int(3800 // f0) + 1):
        fh = h * f0
        gain = sum(np.exp(-0.5 * ((fh - fc) / 180.0) ** 2) for fc in formants) + 0.3 / h
        x += gain * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    # syllable gating: ~4 Hz raised-cosine envelope with some syllables dropped
    rate = rng.uniform(3.0, 5.0)
    env = (0.5 - 0.5 * np.cos(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))) ** 1.5
    syllable = np.floor(rate * t + rng.uniform()).astype(int)
    keep = rng.uniform(size=syllable.max() + 1) > 0.2
    x *= env * keep[syllable]
    power = np.mean(x ** 2)
    return level * x / np.sqrt(power) if power > 0 else x


def machine_noise(seconds: float, rng: np.random.Generator, sample_rate: int = AUDIO_RATE) -> np.ndarray:
    """Stationary tonal noise: a fixed-pitch harmonic hum plus narrowband hiss."""
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(180.0, 320.0)
    x = np.zeros(n)
    for h in range(1, int(3000 // f0) + 1):
        x += rng.uniform(0.3, 1.0) / np.sqrt(h) * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / sample_rate)
    centre = rng.uniform(1200.0, 2500.0)
    spec *= np.exp(-0.5 * ((f - centre) / 200.0) ** 2)
    band = np.fft.irfft(spec, n)
    x = x / np.sqrt(np.mean(x ** 2)) + 0.7 * band / np.sqrt(np.mean(band ** 2))
    return x / np.sqrt(np.mean(x ** 2))


def noise(family: str, seconds: float, rng: np.random.Generator, sample_rate: int = AUDIO_RATE) -> np.ndarray:
    if family == "white":
        return rng.standard_normal(int(round(seconds * sample_rate)))
    if family == "speech":
        return speech_like(seconds, rng, f0_range=(170.0, 260.0), sample_rate=sample_rate)
    if family == "machine":
        return machine_noise(seconds, rng, sample_rate)
    raise ValueError(f"unknown noise family {family!r}; expected one of {NOISE_FAMILIES}")


def make_examples(n_clips: int, seconds: float, snr_range: tuple[float, float], families=("white", "speech"),
                  seed: int = 0, model: bcf.BcfModel | None = None, prefix: str = "clip",
                  level_db: tuple[float, float] = (0.0, 0.0)) -> list[Example]:
    """Paired ``(noisy, vibration, clean)`` clips with vibration from a known BCF.

    ``level_db`` draws a per-clip gain applied to the whole triple, so that
    absolute loudness carries no information about the SNR.
    """
    model = bcf.reference_model() if model is None else model
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_clips):
        clean = Waveform(speech_like(seconds, rng), AUDIO_RATE)
        family = families[i % len(families)]
        snr = float(rng.uniform(*snr_range))
        noisy = mix_at_snr(clean, Waveform(noise(family, seconds, rng), AUDIO_RATE), snr)
        fr = bcf.sample_response(model, int(rng.integers(2 ** 63)))
        vib = bcf.synthesize_vibration(clean, fr)
        meta = {"snr_db": snr, "noise_kind": family}
        if level_db != (0.0, 0.0):
            gain_db = float(rng.uniform(*level_db))
            g = 10.0 ** (gain_db / 20.0)
            clean, noisy, vib = (Waveform(w.samples * g, w.sample_rate) for w in (clean, noisy, vib))
            meta["gain_db"] = gain_db
        out.append(Example(f"{prefix}{i:04d}", noisy, vib, clean, meta))
    return out


def sensor_noise(seconds: float, rng: np.random.Generator, sample_rate: float = 1600.0, level: float = 1e-4):
    """Accelerometer floor recorded while nobody speaks."""
    return level * rng.standard_normal(int(round(seconds * sample_rate)))


def wild_stream(n_clean: int, n_noise: int, n_mid: int, seconds: float = 2.0, family: str = "machine",
                seed: int = 0, model: bcf.BcfModel | None = None, clean_snr=(25.0, 35.0), mid_snr=(-5.0, 12.0),
                prefix: str = "wild"):
    """Unlabelled-style recordings in a new noise environment, shuffled.

    Three kinds: near-clean speech (``clean_snr``), noise with no speech at
    all (vibration is only the sensor floor; true SNR is -inf) and ordinary
    noisy speech (``mid_snr``). The true SNR is kept in ``meta["snr_db"]``
    for oracle experiments.
    """
    from .noise_adapt import StreamClip

    model = bcf.reference_model() if model is None else model
    rng = np.random.default_rng(seed)
    kinds = ["clean"] * n_clean + ["noise"] * n_noise + ["mid"] * n_mid
    order = rng.permutation(len(kinds))
    out = []
    for i, j in enumerate(order):
        kind = kinds[j]
        noise_wave = Waveform(noise(family, seconds, rng), AUDIO_RATE)
        if kind == "noise":
            audio = Waveform(0.1 * noise_wave.samples, AUDIO_RATE)
            vib = Waveform(sensor_noise(seconds, rng), 1600.0)
            snr = float("-inf")
        else:
            clean = Waveform(speech_like(seconds, rng), AUDIO_RATE)
            snr = float(rng.uniform(*(clean_snr if kind == "clean" else mid_snr)))
            audio = mix_at_snr(clean, noise_wave, snr)
            vib = bcf.synthesize_vibration(clean, bcf.sample_response(model, int(rng.integers(2 ** 63))))
        out.append(StreamClip(f"{prefix}{i:04d}", audio, vib, {"snr_db": snr, "kind": kind}))
    return out

"""Corpus construction: SNR-controlled mixing, reverberation and BCF augmentation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from . import bcf as bcf_mod
from .dsp import VIB_RATE, Waveform, vib_intensity
from .wavio import read_wav, write_wav

ACTIVE_DBFS = -40.0
ACTIVE_FRAME_SECONDS = 0.02
NOISE_KINDS = ("environmental", "speech", "self")


@dataclass(frozen=True)
class MixSpec:
    snr_db: float
    noise_kind: str = "environmental"
    rir: str | dict | None = None
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ValueError(f"snr_db must be finite, got {self.snr_db}")
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"noise_kind must be one of {NOISE_KINDS}, got {self.noise_kind!r}")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    clean_path: Path
    mix: MixSpec
    noise_path: Path | None = None
    vib_path: Path | None = None
    speaker: str | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        """Read a JSON-lines manifest; relative paths resolve against its directory."""
        path = Path(path)
        root = path.parent
        entries = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            d = json.loads(line)
            mix = MixSpec(**d["mix"])

            def resolve(key):
                value = d.get(key)
                return None if value is None else (root / value)

            entry = ManifestEntry(
                id=str(d.get("id", f"{lineno - 1:05d}")),
                clean_path=resolve("clean_path"),
                mix=mix,
                noise_path=resolve("noise_path"),
                vib_path=resolve("vib_path"),
                speaker=d.get("speaker"),
            )
            for p in (entry.clean_path, entry.noise_path, entry.vib_path):
                if p is not None and not p.exists():
                    raise FileNotFoundError(f"{path}:{lineno}: missing file {p}")
            if entry.noise_path is None and mix.noise_kind != "self":
                raise ValueError(f"{path}:{lineno}: noise_path required for noise_kind {mix.noise_kind!r}")
            entries.append(entry)
        return cls(entries, root)


@dataclass
class Example:
    """One dataset triple plus provenance."""

    id: str
    noisy: Waveform
    vib: Waveform
    clean: Waveform
    meta: dict = field(default_factory=dict)


def active_power(x: np.ndarray, sample_rate: float, threshold_dbfs: float = ACTIVE_DBFS) -> float:
    """Mean power over 20 ms frames whose RMS exceeds ``threshold_dbfs``.

    Falls back to the whole-signal power when no frame is active.
    """
    x = np.asarray(x, dtype=np.float64)
    n = max(1, int(round(ACTIVE_FRAME_SECONDS * sample_rate)))
    n_frames = len(x) // n
    frames = x[:n_frames * n].reshape(n_frames, n) if n_frames else np.empty((0, n))
    power = np.mean(frames ** 2, axis=1) if n_frames else np.empty(0)
    active = power > 10.0 ** (threshold_dbfs / 10.0)
    if not np.any(active):
        return float(np.mean(x ** 2))
    return float(np.mean(power[active]))


def fit_length(noise: np.ndarray, n: int, offset: int = 0) -> np.ndarray:
    """Loop or truncate ``noise`` to ``n`` samples starting at ``offset``."""
    idx = (offset + np.arange(n)) % len(noise)
    return noise[idx]


def noise_gain(clean: np.ndarray, noise: np.ndarray, snr_db: float, sample_rate: float) -> float:
    p_clean = active_power(clean, sample_rate)
    p_noise = float(np.mean(noise ** 2))
    if p_noise <= 0.0:
        raise ValueError("mix_at_snr: noise is silent")
    if p_clean <= 0.0:
        raise ValueError("mix_at_snr: clean signal is silent")
    return float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float, offset: int = 0) -> Waveform:
    """``clean + g * noise`` with ``g`` set so active-speech SNR equals ``snr_db``."""
    if clean.sample_rate != noise.sample_rate:
        raise ValueError(f"sample rates differ: {clean.sample_rate} vs {noise.sample_rate}")
    if not np.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite, got {snr_db}")
    c = clean.mono()
    n = fit_length(noise.mono(), len(c), offset)
    g = noise_gain(c, n, snr_db, clean.sample_rate)
    return Waveform(c + g * n, clean.sample_rate)


def measured_snr(clean: np.ndarray, scaled_noise: np.ndarray, sample_rate: float) -> float:
    return float(10.0 * np.log10(active_power(clean, sample_rate) / np.mean(scaled_noise ** 2)))


def reverberate(x: Waveform, rir: np.ndarray) -> Waveform:
    """Full convolution with ``rir`` truncated to the input length."""
    rir = np.asarray(rir, dtype=np.float64).reshape(-1)
    if rir.size == 0:
        raise ValueError("reverberate: empty impulse response")
    if not np.all(np.isfinite(rir)):
        raise ValueError("reverberate: impulse response is not finite")
    y = signal.fftconvolve(x.mono(), rir, mode="full")[:len(x)]
    return Waveform(y, x.sample_rate)


def synthetic_rir(rt60: float, sample_rate: float, seed, delay_s: float = 0.0,
                  tail_gain: float = 0.3, length_s: float | None = None) -> np.ndarray:
    """Direct-path impulse followed by an exponentially decaying Gaussian tail.

    The tail amplitude falls 60 dB over ``rt60`` seconds. The direct path is
    the peak (1.0); the tail is clipped below it.
    """
    if rt60 <= 0:
        raise ValueError(f"rt60 must be positive, got {rt60}")
    rng = np.random.default_rng(seed)
    length_s = rt60 if length_s is None else length_s
    delay = int(round(delay_s * sample_rate))
    n_tail = max(1, int(round(length_s * sample_rate)))
    t = np.arange(1, n_tail + 1)
    tail = tail_gain * rng.standard_normal(n_tail) * np.exp(-decay_rate(rt60, sample_rate) * t)
    tail = np.clip(tail, -0.99, 0.99)
    h = np.zeros(delay + 1 + n_tail)
    h[delay] = 1.0
    h[delay + 1:] = tail
    return h


def decay_rate(rt60: float, sample_rate: float) -> float:
    """Per-sample amplitude decay constant for a 60 dB drop in ``rt60`` seconds."""
    return 3.0 * np.log(10.0) / (rt60 * sample_rate)


def expected_rir_energy(rt60: float, sample_rate: float, tail_gain: float = 0.3,
                        length_s: float | None = None) -> float:
    """Expected ``sum(h**2)`` of :func:`synthetic_rir` (ignoring clipping)."""
    length_s = rt60 if length_s is None else length_s
    n_tail = int(round(length_s * sample_rate))
    q = np.exp(-2.0 * decay_rate(rt60, sample_rate))
    return 1.0 + tail_gain ** 2 * q * (1.0 - q ** n_tail) / (1.0 - q)


def _entry_rng(global_seed: int, entry_seed: int, stream: int) -> np.random.Generator:
    # independent streams per purpose: the vibration never depends on the noise draw
    return np.random.default_rng(np.random.SeedSequence([global_seed, entry_seed, stream]))


_POOL_STREAM, _RESPONSE_STREAM, _NOISE_STREAM, _RIR_STREAM = range(4)


def _load_rir(spec, sample_rate: float, root: Path, rng: np.random.Generator) -> np.ndarray | None:
    if spec is None:
        return None
    if isinstance(spec, dict):
        return synthetic_rir(float(spec["rt60"]), sample_rate, rng, float(spec.get("delay_s", 0.0)),
                             float(spec.get("tail_gain", 0.3)))
    return read_wav(root / spec).mono()


def _vibration_for(entry: ManifestEntry, clean: Waveform, pool: list[bcf_mod.BcfModel],
                   seed: int) -> tuple[Waveform, dict]:
    if entry.vib_path is not None:
        vib = read_wav(entry.vib_path)
        if vib.channels == 3:
            vib = vib_intensity(vib)
        return vib, {"vib_source": "recorded"}
    if not pool:
        raise ValueError(f"entry {entry.id}: no recorded vibration and the BCF pool is empty")
    pool_index = int(_entry_rng(seed, entry.mix.seed, _POOL_STREAM).integers(len(pool)))
    response_seed = int(_entry_rng(seed, entry.mix.seed, _RESPONSE_STREAM).integers(2 ** 63))
    fr = bcf_mod.sample_response(pool[pool_index], response_seed)
    vib = bcf_mod.synthesize_vibration(clean, fr, vib_rate=VIB_RATE)
    return vib, {"vib_source": "synthesized", "pool_index": pool_index, "response_seed": response_seed}


def _self_noise_path(entry: ManifestEntry, manifest: DatasetManifest, rng: np.random.Generator) -> Path:
    candidates = [e.clean_path for e in manifest.entries
                  if e.speaker is not None and e.speaker == entry.speaker and e.clean_path != entry.clean_path]
    if not candidates:
        raise ValueError(f"entry {entry.id}: self noise needs another utterance of speaker {entry.speaker!r}")
    return candidates[int(rng.integers(len(candidates)))]


def build_example(entry: ManifestEntry, manifest: DatasetManifest, pool: list[bcf_mod.BcfModel],
                  seed: int = 0) -> Example:
    clean = read_wav(entry.clean_path)
    if clean.channels != 1:
        raise ValueError(f"entry {entry.id}: clean audio must be mono")
    vib, vib_meta = _vibration_for(entry, clean, pool, seed)

    noise_rng = _entry_rng(seed, entry.mix.seed, _NOISE_STREAM)
    noise_path = entry.noise_path
    if noise_path is None:
        noise_path = _self_noise_path(entry, manifest, noise_rng)
    noise = read_wav(noise_path)
    offset = int(noise_rng.integers(len(noise)))

    rir = _load_rir(entry.mix.rir, clean.sample_rate, manifest.root, _entry_rng(seed, entry.mix.seed, _RIR_STREAM))
    reverberant = clean if rir is None else reverberate(clean, rir)
    # the noise is scaled against the reverberant speech actually heard by the mic
    noisy = mix_at_snr(reverberant, noise, entry.mix.snr_db, offset)
    meta = {
        "id": entry.id,
        "snr_db": float(entry.mix.snr_db),
        "noise_kind": entry.mix.noise_kind,
        "noise_path": str(Path(noise_path).name),
        "noise_offset": offset,
        "seed": int(seed),
        "entry_seed": int(entry.mix.seed),
        "reverberant": rir is not None,
        **vib_meta,
    }
    return Example(entry.id, noisy, vib, clean, meta)


def build_training_set(manifest: DatasetManifest, bcf_pool: list[bcf_mod.BcfModel], seed: int = 0) -> list[Example]:
    """Materialize every manifest entry as a ``(noisy, vibration, clean)`` triple."""
    needs_pool = any(e.vib_path is None for e in manifest.entries)
    if needs_pool and not bcf_pool:
        raise ValueError("manifest has entries without vibration but the BCF pool is empty")
    return [build_example(e, manifest, bcf_pool, seed) for e in manifest.entries]


def write_dataset(examples: list[Example], out_dir: str | Path) -> None:
    """Write ``out/{id}/noisy.wav, vib.wav, clean.wav, meta.json`` (no clean.wav when ``clean`` is None)."""
    out_dir = Path(out_dir)
    for ex in examples:
        d = out_dir / ex.id
        d.mkdir(parents=True, exist_ok=True)
        write_wav(d / "noisy.wav", ex.noisy)
        write_wav(d / "vib.wav", ex.vib)
        if ex.clean is not None:
            write_wav(d / "clean.wav", ex.clean)
        (d / "meta.json").write_text(json.dumps(ex.meta, indent=2, sort_keys=True) + "\n")


def read_dataset(root: str | Path, noisy_name: str = "noisy.wav") -> list[Example]:
    """Load a directory written by :func:`write_dataset` (sorted by id)."""
    root = Path(root)
    examples = []
    for d in sorted(p for p in root.iterdir() if p.is_dir() and (p / noisy_name).exists()):
        meta_path = d / "meta.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        clean = read_wav(d / "clean.wav") if (d / "clean.wav").exists() else None
        vib = read_wav(d / "vib.wav")
        if vib.channels == 3:
            vib = vib_intensity(vib)
        examples.append(Example(d.name, read_wav(d / noisy_name), vib, clean, meta))
    if not examples:
        raise FileNotFoundError(f"no dataset entries (with {noisy_name}) under {root}")
    return examples

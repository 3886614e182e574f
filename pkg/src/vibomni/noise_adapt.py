"""SNR estimation, continual curation, adaptive-depth inference and VAD."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import container
from .dsp import AUDIO_WINDOW, VIB_WINDOW, Spectrogram, Waveform, stft
from .metrics import snr_metric
from .mixer import Example, measured_snr, mix_at_snr
from .model import Enhancer, _relu, align_frames, apply_mask_and_reconstruct, enhance
from .training import LossConfig, OptimizerConfig, train

log = logging.getLogger(__name__)

SNR_MIN_DB, SNR_MAX_DB = -20.0, 20.0
ESTIMATOR_KIND = "snr_estimator"
DEFAULT_POOL_SIZE = 32
DEFAULT_REMIX_SNR = (-5.0, 15.0)


# -- SNR estimator ----------------------------------------------------------

@dataclass(frozen=True)
class EstimatorConfig:
    audio_bins: int = AUDIO_WINDOW // 2 + 1
    vib_bins: int = VIB_WINDOW // 2 + 1
    channels: int = 128
    kernel: int = 4
    n_conv: int = 5
    fc: int = 256
    log_floor: float = 1e-5

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class SnrEstimate:
    value_db: float

    def __post_init__(self):
        if not SNR_MIN_DB <= self.value_db <= SNR_MAX_DB:
            raise ValueError(f"estimate {self.value_db} outside [{SNR_MIN_DB}, {SNR_MAX_DB}] dB")


def db_to_unit(db):
    return (np.clip(db, SNR_MIN_DB, SNR_MAX_DB) - SNR_MIN_DB) / (SNR_MAX_DB - SNR_MIN_DB)


def unit_to_db(u):
    return SNR_MIN_DB + (SNR_MAX_DB - SNR_MIN_DB) * u


class SnrEstimator(nn.Module):
    """Temporal CNN over concatenated log spectra, mean/std pooling, MLP, sigmoid.

    The vibration magnitude is zero-padded along frequency to the audio bin
    count and concatenated with the audio magnitude, giving ``2 * audio_bins``
    features per frame. ``zero_vibration`` turns the model into the
    audio-only ablation (the vibration half is always zero).
    """

    def __init__(self, config: EstimatorConfig = EstimatorConfig(), zero_vibration: bool = False):
        super().__init__()
        self.config = config
        self.zero_vibration = zero_vibration
        n_in = 2 * config.audio_bins
        convs = []
        for i in range(config.n_conv):
            convs.append(nn.Conv1d(n_in if i == 0 else config.channels, config.channels, config.kernel))
        self.convs = nn.ModuleList(convs)
        self.fc1 = nn.Linear(2 * config.channels, config.fc)
        self.fc2 = nn.Linear(config.fc, config.fc)
        self.head = nn.Linear(config.fc, 1)
        self.register_buffer("feature_mean", torch.zeros(n_in))
        self.register_buffer("feature_std", torch.ones(n_in))

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def features(self, audio_mag, vib_mag) -> torch.Tensor:
        """``[B, T, 2 * audio_bins]`` log features (vibration zero-padded)."""
        audio_mag = torch.as_tensor(np.asarray(audio_mag) if not isinstance(audio_mag, torch.Tensor) else audio_mag,
                                    dtype=self.dtype)
        vib_mag = torch.as_tensor(np.asarray(vib_mag) if not isinstance(vib_mag, torch.Tensor) else vib_mag,
                                  dtype=self.dtype)
        if audio_mag.dim() == 2:
            audio_mag, vib_mag = audio_mag[None], vib_mag[None]
        c = self.config
        if audio_mag.shape[-1] != c.audio_bins or vib_mag.shape[-1] != c.vib_bins:
            raise ValueError(f"expected {c.audio_bins} audio and {c.vib_bins} vibration bins, got "
                             f"{audio_mag.shape[-1]} and {vib_mag.shape[-1]}")
        if audio_mag.shape[:2] != vib_mag.shape[:2]:
            raise ValueError(f"audio {tuple(audio_mag.shape)} and vibration {tuple(vib_mag.shape)} frames differ")
        if self.zero_vibration:
            vib_mag = torch.zeros_like(vib_mag)
        vib_padded = F.pad(vib_mag, (0, c.audio_bins - c.vib_bins))
        return torch.log(torch.cat([audio_mag, vib_padded], dim=-1) + c.log_floor)

    def forward_features(self, feats: torch.Tensor) -> torch.Tensor:
        """Normalized output in (0, 1) for ``[B, T, D]`` log features."""
        x = ((feats - self.feature_mean) / self.feature_std).transpose(1, 2)
        for conv in self.convs:
            x = _relu(conv(F.pad(x, (conv.kernel_size[0] - 1, 0))))
        pooled = torch.cat([x.mean(dim=-1), x.std(dim=-1, unbiased=False)], dim=-1)
        h = _relu(self.fc2(_relu(self.fc1(pooled))))
        return torch.sigmoid(self.head(h))[:, 0]

    def forward(self, audio_mag, vib_mag) -> torch.Tensor:
        return unit_to_db(self.forward_features(self.features(audio_mag, vib_mag)))

    def score(self, audio_mag, vib_mag) -> float:
        with torch.no_grad():
            return float(self.forward(audio_mag, vib_mag)[0])

    def score_clip(self, clip) -> float:
        spec, vib_mag = clip_magnitudes(clip.audio, clip.vib)
        return self.score(spec.magnitude, vib_mag)


def estimate_snr(params: SnrEstimator, audio_mag, vib_mag) -> SnrEstimate:
    """Bounded SNR estimate of one ``[T, 321]`` / ``[T, 33]`` magnitude pair."""
    audio_mag, vib_mag = np.asarray(audio_mag), np.asarray(vib_mag)
    if audio_mag.ndim != 2 or vib_mag.ndim != 2:
        raise ValueError("estimate_snr expects [T, F] magnitudes")
    value = params.score(audio_mag, vib_mag)
    return SnrEstimate(float(np.clip(value, SNR_MIN_DB, SNR_MAX_DB)))


def clip_magnitudes(audio: Waveform, vib: Waveform, audio_window: int = AUDIO_WINDOW,
                    vib_window: int = VIB_WINDOW) -> tuple[Spectrogram, np.ndarray]:
    spec = stft(Waveform(audio.mono(), audio.sample_rate), audio_window)
    vib_mag = stft(Waveform(vib.mono(), vib.sample_rate), vib_window).magnitude
    return spec, align_frames(vib_mag, spec.n_frames)


@dataclass(frozen=True)
class EstimatorTrainConfig:
    lr: float = 1e-3
    steps: int = 1200
    batch_size: int = 16
    seed: int = 0
    weight_decay: float = 0.0


def _init_estimator(est: SnrEstimator, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in est.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = int(np.prod(p.shape[1:]))
                bound = float(np.sqrt(6.0 / fan_in))  # He-uniform for ReLU layers
                p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)


def new_estimator(config: EstimatorConfig = EstimatorConfig(), seed: int = 0, zero_vibration: bool = False,
                  dtype=torch.float32) -> SnrEstimator:
    est = SnrEstimator(config, zero_vibration).to(dtype)
    _init_estimator(est, seed)
    return est


def train_estimator(dataset, cfg: EstimatorTrainConfig = EstimatorTrainConfig(),
                    config: EstimatorConfig = EstimatorConfig(), zero_vibration: bool = False,
                    dtype=torch.float32) -> SnrEstimator:
    """Fit an estimator to ``(audio, vib, true_snr_db)`` triples.

    Targets are clipped to [-20, 20] dB and mapped to [0, 1]; the loss is the
    squared error on that normalized scale. Clips may differ in length;
    each minibatch draws clips with a seeded generator and runs them one
    pooled sequence at a time.
    """
    if len(dataset) == 0:
        raise ValueError("train_estimator: empty dataset")
    est = new_estimator(config, cfg.seed, zero_vibration, dtype)
    feats, targets = [], []
    for audio, vib, snr in dataset:
        spec, vib_mag = clip_magnitudes(audio, vib, 2 * (config.audio_bins - 1), 2 * (config.vib_bins - 1))
        with torch.no_grad():
            feats.append(est.features(spec.magnitude, vib_mag)[0])
        targets.append(float(db_to_unit(snr)))
    stacked = torch.cat(feats)
    est.feature_mean.copy_(stacked.mean(0))
    est.feature_std.copy_(stacked.std(0, unbiased=False).clamp_min(1e-3))
    same_length = len({f.shape[0] for f in feats}) == 1
    if same_length:
        all_feats = torch.stack(feats)
    all_targets = torch.as_tensor(targets, dtype=dtype)
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(est.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    est.train()
    for step in range(cfg.steps):
        idx = rng.choice(len(feats), size=min(cfg.batch_size, len(feats)), replace=False)
        if same_length:
            pred = est.forward_features(all_feats[idx])
        else:
            pred = torch.cat([est.forward_features(feats[i][None]) for i in idx])
        loss = ((pred - all_targets[idx]) ** 2).mean()
        if not torch.isfinite(loss):
            raise FloatingPointError(f"estimator training diverged at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % 100 == 0:
            log.info("estimator step %d mse %.5f", step, loss.item())
    est.eval()
    return est


def crop_snr_dataset(examples: list[Example], seconds: float = 1.0, crops_per_clip: int = 2, seed: int = 0):
    """Fixed-length crops of ``(noisy, vib, clean)`` examples labelled with their crop SNR.

    The label is the power ratio of the clean crop to the residual
    ``noisy - clean`` over the same crop, clipped to [-20, 20] dB.
    """
    rng = np.random.default_rng(seed)
    out = []
    for ex in examples:
        n = int(round(seconds * ex.noisy.sample_rate))
        ratio = ex.noisy.sample_rate / ex.vib.sample_rate
        noisy, clean, vib = ex.noisy.mono(), ex.clean.mono(), ex.vib.mono()
        for _ in range(crops_per_clip):
            hop = int(round(ratio))
            start = int(rng.integers(0, max(1, (len(noisy) - n) // hop + 1))) * hop
            a, c = noisy[start:start + n], clean[start:start + n]
            v = vib[start // hop:(start + n) // hop]
            # a crop without speech has SNR -inf, i.e. the bottom of the range
            label = snr_metric(a, c) if np.any(c != 0) else SNR_MIN_DB
            out.append((Waveform(a, ex.noisy.sample_rate), Waveform(v, ex.vib.sample_rate),
                        float(np.clip(label, SNR_MIN_DB, SNR_MAX_DB))))
    return out


def enhanced_examples(model: Enhancer, examples: list[Example]) -> list[Example]:
    """Examples whose input is the enhancer's own output (depth cycling 1..N).

    Used to expose the estimator to reconstructions, which is what it scores
    inside :func:`adaptive_enhance`.
    """
    out = []
    n = model.config.n_blocks
    for i, ex in enumerate(examples):
        depth = 1 + i % n
        enhanced = enhance(model, ex.noisy, ex.vib, depth)
        out.append(Example(f"{ex.id}_k{depth}", enhanced, ex.vib, ex.clean, {**ex.meta, "depth": depth}))
    return out


def save_estimator(path, est: SnrEstimator) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in est.state_dict().items()}
    container.save(path, ESTIMATOR_KIND, {"estimator": est.config.to_dict(), "zero_vibration": est.zero_vibration},
                   tensors)


def load_estimator(path, dtype=torch.float32) -> SnrEstimator:
    config, tensors = container.load(path, ESTIMATOR_KIND)
    est = SnrEstimator(EstimatorConfig(**config["estimator"]), config["zero_vibration"]).to(dtype)
    est.load_state_dict({k: torch.as_tensor(v, dtype=dtype) for k, v in tensors.items()})
    est.eval()
    return est


# -- continual curation -----------------------------------------------------

@dataclass
class StreamClip:
    """An unlabelled in-the-wild recording."""

    id: str
    audio: Waveform
    vib: Waveform
    meta: dict = field(default_factory=dict)


@dataclass
class PooledClip:
    clip: StreamClip
    estimate_db: float


@dataclass
class CurationPools:
    clean: list[PooledClip] = field(default_factory=list)
    noise: list[PooledClip] = field(default_factory=list)
    noisy: list[Example] = field(default_factory=list)
    discarded: list[str] = field(default_factory=list)
    remix_calls: int = 0
    # number of clips of each pool already handed to a remix
    consumed_clean: int = 0
    consumed_noise: int = 0

    def ids(self, pool: str) -> list[str]:
        return [p.clip.id for p in getattr(self, pool)]


def _scorer(estimator) -> Callable:
    if isinstance(estimator, SnrEstimator):
        return estimator.score_clip
    if callable(estimator):
        return estimator
    raise TypeError("estimator must be an SnrEstimator or a callable clip -> dB")


def curate(clips, estimator, beta: float, pool_size: int = DEFAULT_POOL_SIZE, teacher: Enhancer | None = None,
           snr_range: tuple[float, float] = DEFAULT_REMIX_SNR, seed: int = 0,
           pools: CurationPools | None = None) -> CurationPools:
    """Sort clips into clean (estimate > beta) and noise (estimate < -beta) pools.

    ``estimator`` is an :class:`SnrEstimator` or any callable mapping a
    :class:`StreamClip` to dB. Whenever both pools hold ``pool_size`` clips
    that have not been remixed yet, those clips are remixed (with
    ``teacher`` as the pseudo-labeller) and appended to ``pools.noisy``.
    Clips are processed strictly in order, so the result is a pure function
    of the inputs.
    """
    if beta <= 0:
        raise ValueError("beta must be > 0 dB")
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    score = _scorer(estimator)
    pools = CurationPools() if pools is None else pools
    for clip in clips:
        est = float(score(clip))
        if est > beta:
            pools.clean.append(PooledClip(clip, est))
        elif est < -beta:
            pools.noise.append(PooledClip(clip, est))
        else:
            pools.discarded.append(clip.id)
            continue
        if (len(pools.clean) - pools.consumed_clean >= pool_size
                and len(pools.noise) - pools.consumed_noise >= pool_size):
            batch_clean = pools.clean[pools.consumed_clean:pools.consumed_clean + pool_size]
            batch_noise = pools.noise[pools.consumed_noise:pools.consumed_noise + pool_size]
            pools.noisy.extend(remix_dataset([p.clip for p in batch_clean], [p.clip for p in batch_noise],
                                             snr_range, seed=(seed, pools.remix_calls), teacher=teacher))
            pools.consumed_clean += pool_size
            pools.consumed_noise += pool_size
            pools.remix_calls += 1
    return pools


def remix_dataset(clean_pool: list[StreamClip], noise_pool: list[StreamClip],
                  snr_range: tuple[float, float] = DEFAULT_REMIX_SNR, seed=0,
                  teacher: Enhancer | Callable | None = None) -> list[Example]:
    """Pseudo-labelled triples: teacher-enhanced clean clip + a noise clip at a drawn SNR.

    ``teacher`` is an :class:`Enhancer` (its output is the pseudo-clean
    target), any callable ``(audio, vib) -> Waveform``, or None for the
    identity (plain remixing).
    """
    if not clean_pool or not noise_pool:
        raise ValueError("remix_dataset: both pools must be non-empty")
    lo, hi = snr_range
    if lo > hi:
        raise ValueError("snr_range must be (low, high)")
    seq = np.random.SeedSequence(list(np.atleast_1d(seed).astype(np.int64)) + [0x5245])
    rng = np.random.default_rng(seq)
    if teacher is None:
        label = lambda clip: clip.audio
    elif isinstance(teacher, Enhancer):
        label = lambda clip: enhance(teacher, clip.audio, clip.vib)
    else:
        label = lambda clip: teacher(clip.audio, clip.vib)
    out = []
    for i, clip in enumerate(clean_pool):
        noise = noise_pool[int(rng.integers(len(noise_pool)))]
        snr = float(rng.uniform(lo, hi))
        offset = int(rng.integers(max(1, len(noise.audio))))
        pseudo = label(clip)
        pseudo = Waveform(pseudo.mono(), pseudo.sample_rate)
        mixture = mix_at_snr(pseudo, Waveform(noise.audio.mono(), noise.audio.sample_rate), snr, offset)
        out.append(Example(f"remix{i:04d}_{clip.id}_{noise.id}", mixture, clip.vib, pseudo,
                           {"snr_db": snr, "clean_id": clip.id, "noise_id": noise.id, "noise_offset": offset}))
    return out


def remix_snr_error(example: Example) -> float:
    """Measured minus requested SNR of a remixed triple (dB)."""
    noise = example.noisy.mono() - example.clean.mono()
    return measured_snr(example.clean.mono(), noise, example.clean.sample_rate) - example.meta["snr_db"]


def continual_finetune(model: Enhancer, clips, estimator, beta: float = 17.5, epochs: int = 2,
                       opt: OptimizerConfig = OptimizerConfig(steps=100), loss_cfg: LossConfig = LossConfig(),
                       pool_size: int = DEFAULT_POOL_SIZE, snr_range=DEFAULT_REMIX_SNR, seed: int = 0):
    """Curate ``clips``, then fine-tune on remixed pools with an epoch-refreshed teacher.

    The teacher starts as a copy of ``model``; at the end of every epoch it
    is replaced by a full copy of the student and the pseudo-labelled set is
    regenerated. Returns ``(student, pools)``.
    """
    teacher = model.copy()
    pools = curate(clips, estimator, beta, pool_size, teacher, snr_range, seed)
    if not pools.noisy:
        raise ValueError(f"curation produced no remixed data (clean={len(pools.clean)}, "
                         f"noise={len(pools.noise)}, pool_size={pool_size})")
    used_clean = [p.clip for p in pools.clean[:pools.consumed_clean]]
    used_noise = [p.clip for p in pools.noise[:pools.consumed_noise]]
    student, data = model, pools.noisy
    for epoch in range(epochs):
        student = train(student, data, loss_cfg,
                        OptimizerConfig(opt.lr, opt.steps, opt.seed + epoch, opt.batch_size,
                                        opt.segment_seconds, opt.clip_norm))
        if epoch + 1 < epochs:
            teacher = copy.deepcopy(student)
            data = remix_dataset(used_clean, used_noise, snr_range, seed=(seed, 1000 + epoch), teacher=teacher)
    return student, pools


# -- adaptive depth ----------------------------------------------------------

def _segment_estimate(estimator, audio_mag: np.ndarray, vib_mag: np.ndarray, frames_per_segment: int) -> float:
    """Mean estimate over near-equal segments of about ``frames_per_segment`` frames."""
    n_segments = max(1, int(round(audio_mag.shape[0] / frames_per_segment)))
    values = []
    for idx in np.array_split(np.arange(audio_mag.shape[0]), n_segments):
        a, v = audio_mag[idx], vib_mag[idx]
        values.append(estimator.score(a, v) if isinstance(estimator, SnrEstimator) else float(estimator(a, v)))
    return float(np.mean(values))


def adaptive_enhance(model: Enhancer, estimator, noisy: Spectrogram, vib: Spectrogram | np.ndarray,
                     threshold_db: float = 15.0, segment_seconds: float = 1.0) -> tuple[Waveform, int]:
    """Run separator blocks one at a time and stop once the output looks clean enough.

    After block ``k`` the mask is applied, the waveform reconstructed and its
    SNR estimated (mean over ``segment_seconds`` segments of the
    reconstruction's spectrogram). The first ``k`` whose estimate reaches
    ``threshold_db`` is used; otherwise all blocks run.
    """
    vib_mag = vib.magnitude if isinstance(vib, Spectrogram) else np.asarray(vib)
    vib_mag = align_frames(vib_mag, noisy.n_frames)
    dtype = model.dtype
    frames_per_segment = max(1, int(round(segment_seconds * noisy.sample_rate / noisy.hop)))
    with torch.no_grad():
        enc = model.encode(torch.as_tensor(noisy.magnitude, dtype=dtype)[None],
                           torch.as_tensor(vib_mag, dtype=dtype)[None])
        z = enc.fused
        n = model.config.n_blocks
        for k in range(1, n + 1):
            z = model.separator[k - 1](z)
            mask = model.decode_mask(z, enc.audio_skips)[0]
            out = apply_mask_and_reconstruct(mask, noisy)
            if k == n:
                return out, k
            if threshold_db == -np.inf:
                return out, k
            if threshold_db == np.inf:
                continue
            out_mag = stft(out, noisy.window_size, noisy.hop).magnitude
            if _segment_estimate(estimator, out_mag, vib_mag, frames_per_segment) >= threshold_db:
                return out, k
    raise AssertionError("unreachable")


# -- voice activity ----------------------------------------------------------

VAD_FRAME_SECONDS = 0.02
VAD_THRESHOLD_DBFS = -40.0
VAD_HANGOVER = 3


def frame_energy_db(x: np.ndarray, frame: int) -> np.ndarray:
    """Mean-square level (dBFS) of consecutive non-overlapping frames; the last is zero-padded."""
    n_frames = -(-len(x) // frame)
    padded = np.zeros(n_frames * frame)
    padded[:len(x)] = x
    power = np.mean(padded.reshape(n_frames, frame) ** 2, axis=1)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(power)


def vad(intensity: Waveform, frame_seconds: float = VAD_FRAME_SECONDS,
        energy_threshold_db: float = VAD_THRESHOLD_DBFS, hangover: int = VAD_HANGOVER) -> np.ndarray:
    """Per-frame activity of a mono vibration-intensity signal.

    A frame is active when its mean-square level exceeds the threshold, or
    when one of the ``hangover`` preceding frames did.
    """
    x = intensity.mono()
    frame = max(1, int(round(frame_seconds * intensity.sample_rate)))
    if len(x) == 0:
        return np.zeros(0, dtype=bool)
    raw = frame_energy_db(x, frame) > energy_threshold_db
    active = raw.copy()
    for lag in range(1, hangover + 1):
        active[lag:] |= raw[:-lag]
    return active


def gate_mask(mask: np.ndarray, active: np.ndarray, hop_seconds: float, frame_seconds: float = VAD_FRAME_SECONDS,
              inactive_gain: float = 0.0) -> np.ndarray:
    """Replace the mask by ``inactive_gain`` on STFT frames whose VAD frame is inactive.

    STFT frame ``m`` is centred at ``m * hop`` and maps to the VAD frame
    containing that instant.
    """
    mask = np.array(mask, dtype=np.float64, copy=True)
    if len(active) == 0:
        return mask
    idx = np.minimum((np.arange(mask.shape[0]) * hop_seconds / frame_seconds + 1e-9).astype(int), len(active) - 1)
    mask[~active[idx]] = inactive_gain
    return mask

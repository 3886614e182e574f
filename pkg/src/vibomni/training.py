"""Losses, gradient verification and the seeded training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dsp import (AUDIO_RATE, AUDIO_WINDOW, VIB_BAND_HZ, VIB_RATE, VIB_WINDOW, Spectrogram, Waveform,
                  default_hop, filter, hann, resample, stft_array, synthesis_norm)
from .metrics import SNR_CAP_DB
from .model import Enhancer, EnhancerOutput, record_branches

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    aux_weight: float = 0.05
    # None -> uniform 1/N over the separator depths
    level_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be >= 0")

    def weights(self, n_levels: int) -> list[float]:
        if self.level_weights is None:
            return [1.0 / n_levels] * n_levels
        if len(self.level_weights) != n_levels:
            raise ValueError(f"{len(self.level_weights)} level weights for {n_levels} levels")
        return list(self.level_weights)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 2e-3
    steps: int = 500
    seed: int = 0
    batch_size: int = 4
    segment_seconds: float = 1.0
    clip_norm: float = 5.0


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step


# -- differentiable signal ops ----------------------------------------------

def istft_torch(frames: torch.Tensor, window_size: int, hop: int, length: int) -> torch.Tensor:
    """Batched ``[B, T, F]`` complex -> ``[B, length]`` weighted overlap-add iSTFT.

    Numerically the same operator as :func:`vibomni.dsp.istft_array`.
    """
    b, n_frames, _ = frames.shape
    dtype = frames.real.dtype
    window = torch.as_tensor(hann(window_size), dtype=dtype)
    segments = torch.fft.irfft(frames, n=window_size, dim=-1) * window
    total = (n_frames - 1) * hop + window_size
    y = F.fold(segments.transpose(1, 2), output_size=(1, total), kernel_size=(1, window_size), stride=(1, hop))
    norm = torch.as_tensor(synthesis_norm(n_frames, window_size, hop), dtype=dtype)
    y = y[:, 0, 0] / torch.where(norm > 1e-10, norm, torch.ones_like(norm))
    pad_left = window_size - hop
    return y[:, pad_left:pad_left + length]


def si_snr_torch(est: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Row-wise SI-SNR in dB, clamped to [-60, +60] dB (differentiable).

    The upper cap matches :func:`vibomni.metrics.si_snr`; the lower clamp keeps
    the loss finite for a silent estimate (e.g. an all-zero mask).
    """
    est = est - est.mean(dim=-1, keepdim=True)
    ref = ref - ref.mean(dim=-1, keepdim=True)
    ref_energy = (ref * ref).sum(dim=-1, keepdim=True)
    if bool((ref_energy <= 0).any()):
        raise ValueError("si_snr: reference is silent")
    target = (est * ref).sum(dim=-1, keepdim=True) / ref_energy * ref
    t_energy = (target * target).sum(dim=-1)
    residual = est - target
    r_energy = (residual * residual).sum(dim=-1)
    cap = 10.0 ** (-SNR_CAP_DB / 10.0)
    r_energy = torch.maximum(r_energy, t_energy * cap)
    r_energy = torch.maximum(r_energy, ref_energy[..., 0] * 1e-30)
    t_energy = torch.maximum(t_energy, r_energy * cap)
    return 10.0 * torch.log10(t_energy / r_energy)


def low_band_target(clean: Waveform, window_size: int = VIB_WINDOW, vib_rate: float = VIB_RATE) -> np.ndarray:
    """``|STFT(lowpass(clean, 800 Hz))|`` on the vibration frame grid."""
    low = filter(clean, "lowpass", VIB_BAND_HZ, 4) if clean.sample_rate > 2 * VIB_BAND_HZ else clean
    low = resample(low, vib_rate)
    return np.abs(stft_array(low.mono(), window_size, default_hop(window_size)))


# -- losses -------------------------------------------------------------------

@dataclass
class Batch:
    audio_mag: torch.Tensor
    vib_mag: torch.Tensor
    noisy_frames: torch.Tensor
    clean: torch.Tensor
    low_target: torch.Tensor
    window_size: int = AUDIO_WINDOW
    hop: int = AUDIO_WINDOW // 2

    @property
    def input_si_snr(self) -> torch.Tensor:
        noisy = istft_torch(self.noisy_frames, self.window_size, self.hop, self.clean.shape[-1])
        return si_snr_torch(noisy, self.clean)


def level_si_snrs(output: EnhancerOutput, batch: Batch) -> list[torch.Tensor]:
    out = []
    for mask in output.masks:
        est = istft_torch(mask * batch.noisy_frames, batch.window_size, batch.hop, batch.clean.shape[-1])
        out.append(si_snr_torch(est, batch.clean))
    return out


def composite_loss_batch(output: EnhancerOutput, batch: Batch, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Weighted multi-level negative SI-SNR plus the weighted auxiliary term, batch mean."""
    weights = cfg.weights(len(output.masks))
    loss = 0.0
    for w, s in zip(weights, level_si_snrs(output, batch)):
        loss = loss + w * (-s)
    if cfg.aux_weight > 0:
        b = batch.low_target.shape[0]
        aux = si_snr_torch(output.low_band_estimate.reshape(b, -1), batch.low_target.reshape(b, -1))
        loss = loss + cfg.aux_weight * (-aux)
    return loss.mean()


def composite_loss(output: EnhancerOutput, noisy: Spectrogram, clean: Waveform, cfg: LossConfig = LossConfig(),
                   low_target: np.ndarray | None = None) -> torch.Tensor:
    """Single-clip form of :func:`composite_loss_batch` on numpy/dsp inputs."""
    dtype = output.masks[0].dtype
    masks = [m if m.dim() == 3 else m[None] for m in output.masks]
    low = output.low_band_estimate
    low = low if low.dim() == 3 else low[None]
    if low_target is None:
        low_target = low_band_target(clean)
    batch = Batch(
        audio_mag=torch.as_tensor(noisy.magnitude, dtype=dtype)[None],
        vib_mag=torch.empty(0),
        noisy_frames=torch.as_tensor(noisy.frames, dtype=_complex(dtype))[None],
        clean=torch.as_tensor(clean.mono(), dtype=dtype)[None],
        low_target=torch.as_tensor(low_target, dtype=dtype)[None],
        window_size=noisy.window_size,
        hop=noisy.hop,
    )
    return composite_loss_batch(EnhancerOutput(masks, low), batch, cfg)


def _complex(dtype):
    return torch.complex128 if dtype == torch.float64 else torch.complex64


# -- batching -----------------------------------------------------------------

@dataclass
class ClipFeatures:
    """Full-length waveforms of one training triple at the model's rates."""

    noisy: np.ndarray
    vib: np.ndarray
    clean: np.ndarray
    low: np.ndarray  # low-passed clean at the vibration rate
    audio_window: int = AUDIO_WINDOW
    vib_window: int = VIB_WINDOW

    @classmethod
    def from_example(cls, ex, audio_window: int = AUDIO_WINDOW, vib_window: int = VIB_WINDOW) -> "ClipFeatures":
        clean = ex.clean
        low = filter(clean, "lowpass", VIB_BAND_HZ, 4)
        low = resample(low, ex.vib.sample_rate).mono()
        return cls(ex.noisy.mono(), ex.vib.mono(), clean.mono(), low, audio_window, vib_window)

    @property
    def ratio(self) -> int:
        return self.audio_window // self.vib_window


def _crop(x: np.ndarray, start: int, n: int) -> np.ndarray:
    out = np.zeros(n)
    piece = x[start:start + n]
    out[:len(piece)] = piece
    return out


def make_batch(clips: list[ClipFeatures], segment_frames: int | None, rng: np.random.Generator | None,
               dtype=torch.float64) -> Batch:
    """Stack aligned crops of ``segment_frames`` hops (whole clips when None)."""
    aw, vw = clips[0].audio_window, clips[0].vib_window
    ah, vh = default_hop(aw), default_hop(vw)
    if segment_frames is None:
        segment_frames = min(len(c.noisy) // ah for c in clips)
    n_audio, n_vib = segment_frames * ah, segment_frames * vh
    rows = {k: [] for k in ("audio", "frames", "vib", "clean", "low")}
    for c in clips:
        max_start = max(0, len(c.noisy) // ah - segment_frames)
        j = int(rng.integers(max_start + 1)) if rng is not None else 0
        noisy = _crop(c.noisy, j * ah, n_audio)
        frames = stft_array(noisy, aw, ah)
        rows["frames"].append(frames)
        rows["audio"].append(np.abs(frames))
        rows["vib"].append(np.abs(stft_array(_crop(c.vib, j * vh, n_vib), vw, vh)))
        rows["clean"].append(_crop(c.clean, j * ah, n_audio))
        rows["low"].append(np.abs(stft_array(_crop(c.low, j * vh, n_vib), vw, vh)))
    as_t = lambda k: torch.as_tensor(np.stack(rows[k]), dtype=dtype)
    return Batch(as_t("audio"), as_t("vib"), torch.as_tensor(np.stack(rows["frames"]), dtype=_complex(dtype)),
                 as_t("clean"), as_t("low"), aw, ah)


def clip_features(examples, audio_window: int = AUDIO_WINDOW, vib_window: int = VIB_WINDOW) -> list[ClipFeatures]:
    return [ClipFeatures.from_example(ex, audio_window, vib_window) for ex in examples]


# -- gradient verification ----------------------------------------------------

# antisymmetric stencils as (offset k, weight c): f' ~ sum c * (f(x + k h) - f(x - k h)) / h
_STENCILS = {2: ((1, 0.5),),
             4: ((1, 8 / 12), (2, -1 / 12))}


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def central_difference(f, x: torch.Tensor, index: int, h: float, order: int = 4,
                       reference_branches: list | None = None) -> tuple[float, bool]:
    """Central finite difference of ``f()`` w.r.t. ``x.flat[index]``.

    ``order=2`` is the two-point stencil; ``order=4`` the five-point stencil
    (truncation O(h^4)), which keeps ``h`` large enough for cancellation error
    to stay far below the gradient scale. Returns ``(derivative, crossed)``
    where ``crossed`` reports that some stencil point took a different
    ReLU/max-pool branch than ``reference_branches`` (a kink lies inside the
    stencil, so the difference is not a derivative estimate).
    """
    if order not in _STENCILS:
        raise ValueError("order must be 2 or 4")
    flat = x.data.view(-1)
    orig = flat[index].item()
    total, crossed = 0.0, False
    try:
        for k, c in _STENCILS[order]:
            values = []
            for sign in (1, -1):
                flat[index] = orig + sign * k * h
                with record_branches() as branches:
                    values.append(float(f()))
                if reference_branches is not None and not _same_branches(branches, reference_branches):
                    crossed = True
            # difference first: a parameter the loss ignores gives exactly 0
            total += c * (values[0] - values[1])
    finally:
        flat[index] = orig
    return total / h, crossed


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    """``|a - b| / max(|a|, |b|, floor)``."""
    return abs(a - b) / max(abs(a), abs(b), floor)


@dataclass
class GradCheckResult:
    max_relative_error: float
    # (parameter name, flat index, analytic, numeric, relative error, step used, kink-free)
    probes: list = field(default_factory=list)


def grad_check(model: torch.nn.Module, loss_fn, n_probes: int = 50, h: float = 1e-4, seed: int = 0,
               floor: float = 1e-6, order: int = 4, max_shrink: int = 6) -> GradCheckResult:
    """Compare autograd against central finite differences on random parameters.

    ``loss_fn(model)`` must return a scalar tensor. Probes are drawn uniformly
    over all scalar parameters. The network is piecewise smooth (ReLU,
    max-pool); when a stencil straddles a kink the step is divided by 4 and
    the probe retried, up to ``max_shrink`` times.

    ``floor`` bounds the denominator of the relative error: gradients smaller
    than it are compared in absolute terms scaled by ``floor``, since the
    finite difference cannot resolve them relatively (its cancellation error
    is about ``eps * |loss| / h``).
    """
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    model.zero_grad()
    with record_branches() as reference:
        loss = loss_fn(model)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"grad_check: loss is not finite ({loss.item()})")
    loss.backward()
    sizes = np.array([p.numel() for _, p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(n_probes, offsets[-1]), replace=False)
    result = GradCheckResult(0.0)
    with torch.no_grad():
        for flat in sorted(int(i) for i in picks):
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, p = params[k]
            idx = flat - offsets[k]
            # a parameter outside the graph has no .grad: its derivative is exactly 0
            analytic = 0.0 if p.grad is None else p.grad.reshape(-1)[idx].item()
            step = h
            for _ in range(max_shrink + 1):
                numeric, crossed = central_difference(lambda: loss_fn(model), p, idx, step, order, reference)
                if not crossed:
                    break
                step /= 4
            err = relative_error(analytic, numeric, floor)
            result.probes.append((name, idx, analytic, numeric, err, step, not crossed))
            result.max_relative_error = max(result.max_relative_error, err)
    model.zero_grad()
    return result


# -- training loop ------------------------------------------------------------

def calibrate(model: Enhancer, clips: list[ClipFeatures], seed: int = 0, max_clips: int = 16) -> None:
    rng = np.random.default_rng(seed)
    take = clips[:max_clips]
    batch = make_batch(take, None, rng, model.dtype)
    model.calibrate(batch.audio_mag, batch.vib_mag)


def train(model: Enhancer, dataset, cfg: LossConfig = LossConfig(), opt: OptimizerConfig = OptimizerConfig(),
          log_path: str | Path | None = None, callback=None) -> Enhancer:
    """Train a copy of ``model`` with Adam; returns the trained copy.

    ``dataset`` is a list of examples (noisy, vib, clean) or of
    :class:`ClipFeatures`. Each step draws ``batch_size`` clips and aligned
    random crops of ``segment_seconds`` from a seeded generator, so the run is
    a pure function of (model, dataset order, cfg, opt).
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    clips = dataset if isinstance(dataset[0], ClipFeatures) else clip_features(
        dataset, 2 * (model.config.audio_bins - 1), 2 * (model.config.vib_bins - 1))
    model = model.copy()
    model.train()
    torch.manual_seed(opt.seed)
    rng = np.random.default_rng(opt.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=opt.lr)
    hop = default_hop(clips[0].audio_window)
    segment_frames = max(1, int(round(opt.segment_seconds * AUDIO_RATE / hop)))
    rows = []
    for step in range(opt.steps):
        order = rng.choice(len(clips), size=min(opt.batch_size, len(clips)), replace=False)
        batch = make_batch([clips[i] for i in order], segment_frames, rng, model.dtype)
        output = model(batch.audio_mag, batch.vib_mag)
        loss = composite_loss_batch(output, batch, cfg)
        value = float(loss.item())
        if not np.isfinite(value):
            raise TrainingDiverged(step, value)
        optimizer.zero_grad()
        loss.backward()
        if opt.clip_norm:
            torch.nn.utils.clip_grad_norm_(model.parameters(), opt.clip_norm)
        optimizer.step()
        with torch.no_grad():
            deepest = float(level_si_snrs(EnhancerOutput(output.masks[-1:], None), batch)[0].mean())
        rows.append((step, value, deepest))
        if callback is not None:
            callback(step, value, deepest)
        if step % 50 == 0:
            log.info("step %d loss %.4f si_snr %.2f dB", step, value, deepest)
    if log_path is not None:
        write_loss_log(log_path, rows)
    model.eval()
    return model


def write_loss_log(path: str | Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "si_snr_train"])
        for step, loss, s in rows:
            writer.writerow([step, repr(loss), repr(s)])

"""Causal two-branch mask-estimation enhancer.

Audio and vibration magnitudes are encoded by stacks of dilated causal 2-D
convolution blocks; the vibration features are projected onto the audio
frequency grid and concatenated along channels. A stack of dual-path
recurrent blocks (bidirectional along frequency, unidirectional along time)
separates the fused features; after every block the shared fusion decoder
emits a sigmoid magnitude mask. An auxiliary decoder reads only the
vibration features and predicts the low-band magnitude of the clean speech.

Everything along the time axis is causal, so the same weights can be run
offline over a whole spectrogram or frame by frame with a :class:`StreamState`.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import container
from .dsp import AUDIO_WINDOW, VIB_WINDOW, Spectrogram, Waveform, istft_array, stft

CHECKPOINT_KIND = "enhancer"

# When not None, piecewise-linear ops append their branch pattern here
# (ReLU on/off masks, max-pool winner indices). Used to detect when a finite
# difference step crosses a kink.
_branch_log: list | None = None


class record_branches:
    """Context manager collecting the branch pattern of every forward pass."""

    def __enter__(self):
        global _branch_log
        self._saved, _branch_log = _branch_log, []
        return _branch_log

    def __exit__(self, *exc):
        global _branch_log
        _branch_log = self._saved


def _relu(x):
    if _branch_log is not None:
        _branch_log.append(x.detach() > 0)
    return F.relu(x)


def _freq_pool(x):
    if _branch_log is not None:
        y, idx = F.max_pool2d(x, (1, 2), ceil_mode=True, return_indices=True)
        _branch_log.append(idx)
        return y
    return F.max_pool2d(x, (1, 2), ceil_mode=True)


@dataclass(frozen=True)
class ModelConfig:
    audio_bins: int = AUDIO_WINDOW // 2 + 1
    vib_bins: int = VIB_WINDOW // 2 + 1
    audio_channels: tuple[int, ...] = (16, 16, 32, 32, 32)
    vib_channels: tuple[int, ...] = (16, 32)
    n_blocks: int = 4
    dilations: tuple[int, ...] = (1, 2, 4)
    hidden: int = 32
    time_kernel: int = 2
    freq_kernel: int = 3
    # frequency chunk length for the intra (frequency) recurrence; 0 = whole axis
    freq_chunk: int = 0
    log_floor: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "audio_channels", tuple(self.audio_channels))
        object.__setattr__(self, "vib_channels", tuple(self.vib_channels))
        object.__setattr__(self, "dilations", tuple(self.dilations))
        self.validate()

    def validate(self) -> None:
        if len(self.audio_channels) != len(self.vib_channels) + 3:
            raise ValueError("the audio encoder must have exactly three more stages than the vibration encoder")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.freq_kernel % 2 == 0:
            raise ValueError("freq_kernel must be odd")
        if not self.dilations or min(self.dilations) < 1:
            raise ValueError("dilations must be positive")
        for sizes in (self.audio_sizes, self.vib_sizes):
            if sizes[-1] < 1:
                raise ValueError("too many pooling stages for the frequency axis")

    @property
    def audio_sizes(self) -> list[int]:
        """Frequency size at the input of each audio stage, plus the final pooled size."""
        return _pooled_sizes(self.audio_bins, len(self.audio_channels))

    @property
    def vib_sizes(self) -> list[int]:
        return _pooled_sizes(self.vib_bins, len(self.vib_channels))

    def dilation(self, stage: int) -> int:
        return self.dilations[stage % len(self.dilations)]

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _pooled_sizes(n: int, stages: int) -> list[int]:
    sizes = [n]
    for _ in range(stages):
        sizes.append((sizes[-1] + 1) // 2)
    return sizes


class FrozenNorm(nn.Module):
    """Per-channel affine normalization with stored (not batch) statistics.

    Setting ``calibrating`` makes the next forward pass record the channel
    mean and variance of its input before normalizing with them.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.calibrating = False

    def forward(self, x):
        if self.calibrating:
            with torch.no_grad():
                self.running_mean.copy_(x.mean(dim=(0, 2, 3)))
                self.running_var.copy_(x.var(dim=(0, 2, 3), unbiased=False))
        shape = (1, -1, 1, 1)
        scale = self.weight * torch.rsqrt(self.running_var + self.eps)
        return (x - self.running_mean.view(shape)) * scale.view(shape) + self.bias.view(shape)


class CausalConv2d(nn.Module):
    """2-D convolution, causal and dilated along time, centred along frequency."""

    def __init__(self, cin: int, cout: int, kt: int, kf: int, dilation: int):
        super().__init__()
        self.context = dilation * (kt - 1)
        self.conv = nn.Conv2d(cin, cout, (kt, kf), dilation=(dilation, dilation),
                              padding=(0, dilation * (kf - 1) // 2))

    def forward(self, x):
        return self.conv(F.pad(x, (0, 0, self.context, 0)))

    def step(self, x, buf):
        """One frame ``x`` ``[B, C, 1, F]`` with ``buf`` holding the previous ``context`` frames."""
        if self.context == 0:
            return self.conv(x), buf
        window = torch.cat([buf, x], dim=2)
        return self.conv(window), window[:, :, 1:]


class EncoderBlock(nn.Module):
    def __init__(self, cin: int, cout: int, kt: int, kf: int, dilation: int):
        super().__init__()
        self.conv = CausalConv2d(cin, cout, kt, kf, dilation)
        self.norm = FrozenNorm(cout)
        self.skip = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1)

    def _finish(self, x, y):
        pre = _relu(self.norm(y)) + self.skip(x)
        return _freq_pool(pre), pre

    def forward(self, x):
        return self._finish(x, self.conv(x))

    def step(self, x, buf):
        y, buf = self.conv.step(x, buf)
        pooled, pre = self._finish(x, y)
        return pooled, pre, buf


class DecoderStage(nn.Module):
    """Frequency upsampling (transposed conv), skip addition, conv, norm, ReLU."""

    def __init__(self, cin: int, cout: int, size_in: int, size_out: int, kf: int):
        super().__init__()
        extra = size_out - (2 * size_in - 1)
        if extra not in (0, 1):
            raise ValueError(f"cannot upsample {size_in} -> {size_out} bins")
        self.up = nn.ConvTranspose2d(cin, cout, (1, 3), stride=(1, 2), padding=(0, 1), output_padding=(0, extra))
        self.conv = nn.Conv2d(cout, cout, (1, kf), padding=(0, kf // 2))
        self.norm = FrozenNorm(cout)

    def forward(self, x, skip):
        return _relu(self.norm(self.conv(self.up(x) + skip)))


class Decoder(nn.Module):
    def __init__(self, cin: int, channels: tuple[int, ...], sizes: list[int], kf: int, activation: str):
        super().__init__()
        stages = []
        for j in reversed(range(len(channels))):
            stages.append(DecoderStage(cin, channels[j], sizes[j + 1], sizes[j], kf))
            cin = channels[j]
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(cin, 1, 1)
        self.activation = activation

    def forward(self, x, skips):
        for stage, skip in zip(self.stages, reversed(skips)):
            x = stage(x, skip)
        y = self.head(x)[:, 0]
        return torch.sigmoid(y) if self.activation == "sigmoid" else F.softplus(y)


class DualPathBlock(nn.Module):
    """Intra-frame recurrence over frequency, then causal recurrence over time."""

    def __init__(self, channels: int, hidden: int, freq_chunk: int = 0):
        super().__init__()
        self.freq_chunk = freq_chunk
        self.intra_rnn = nn.LSTM(channels, hidden, batch_first=True, bidirectional=True)
        self.intra_fc = nn.Linear(2 * hidden, channels)
        self.intra_norm = nn.LayerNorm(channels)
        self.inter_rnn = nn.LSTM(channels, hidden, batch_first=True)
        self.inter_fc = nn.Linear(hidden, channels)
        self.inter_norm = nn.LayerNorm(channels)

    def _intra(self, z):
        b, c, t, f = z.shape
        x = z.permute(0, 2, 3, 1).reshape(b * t, f, c)
        chunk = self.freq_chunk if 0 < self.freq_chunk < f else f
        n_chunks = -(-f // chunk)
        if n_chunks > 1:
            x = F.pad(x, (0, 0, 0, n_chunks * chunk - f)).reshape(b * t * n_chunks, chunk, c)
        y, _ = self.intra_rnn(x)
        y = self.intra_norm(self.intra_fc(y))
        if n_chunks > 1:
            y = y.reshape(b * t, n_chunks * chunk, c)[:, :f]
        return z + y.reshape(b, t, f, c).permute(0, 3, 1, 2)

    def _inter(self, z, state=None):
        b, c, t, f = z.shape
        x = z.permute(0, 3, 2, 1).reshape(b * f, t, c)
        y, state = self.inter_rnn(x, state)
        y = self.inter_norm(self.inter_fc(y))
        return z + y.reshape(b, f, t, c).permute(0, 3, 2, 1), state

    def forward(self, z):
        return self._inter(self._intra(z))[0]

    def step(self, z, state):
        return self._inter(self._intra(z), state)


@dataclass
class EnhancerOutput:
    """``masks[k]`` is the mask after ``k + 1`` separator blocks."""

    masks: list
    low_band_estimate: object


@dataclass
class Encoded:
    fused: torch.Tensor
    audio_skips: list
    vib_features: torch.Tensor
    vib_skips: list


@dataclass
class StreamState:
    conv_buffers: list
    rnn_states: list
    frame: int = 0
    config: ModelConfig | None = None
    batch: int = 1


class Enhancer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        kt, kf = c.time_kernel, c.freq_kernel
        self.audio_encoder = nn.ModuleList(
            EncoderBlock(1 if i == 0 else c.audio_channels[i - 1], ch, kt, kf, c.dilation(i))
            for i, ch in enumerate(c.audio_channels))
        self.vib_encoder = nn.ModuleList(
            EncoderBlock(1 if i == 0 else c.vib_channels[i - 1], ch, kt, kf, c.dilation(i))
            for i, ch in enumerate(c.vib_channels))
        self.projection = nn.Linear(c.vib_sizes[-1], c.audio_sizes[-1])
        fused = c.audio_channels[-1] + c.vib_channels[-1]
        self.separator = nn.ModuleList(DualPathBlock(fused, c.hidden, c.freq_chunk) for _ in range(c.n_blocks))
        self.fusion_decoder = Decoder(fused, c.audio_channels, c.audio_sizes, kf, "sigmoid")
        self.aux_decoder = Decoder(c.vib_channels[-1], c.vib_channels, c.vib_sizes, kf, "softplus")

    # -- building blocks ---------------------------------------------------

    def _features(self, mag):
        return torch.log(mag + self.config.log_floor).unsqueeze(1)

    def _fuse(self, a, v):
        return torch.cat([a, self.projection(v)], dim=1)

    def encode(self, audio_mag, vib_mag) -> Encoded:
        a, v = self._features(audio_mag), self._features(vib_mag)
        audio_skips, vib_skips = [], []
        for block in self.audio_encoder:
            a, pre = block(a)
            audio_skips.append(pre)
        for block in self.vib_encoder:
            v, pre = block(v)
            vib_skips.append(pre)
        return Encoded(self._fuse(a, v), audio_skips, v, vib_skips)

    def decode_mask(self, z, audio_skips):
        return self.fusion_decoder(z, audio_skips)

    def decode_low_band(self, vib_features, vib_skips):
        return self.aux_decoder(vib_features, vib_skips)

    # -- offline -----------------------------------------------------------

    def forward(self, audio_mag, vib_mag, n_blocks: int | None = None) -> EnhancerOutput:
        """Masks for depths ``1..n_blocks`` and the low-band estimate.

        Inputs are ``[T, F]`` or ``[B, T, F]`` magnitude tensors.
        """
        audio_mag, vib_mag, squeeze = self._check_inputs(audio_mag, vib_mag)
        n_blocks = self.config.n_blocks if n_blocks is None else n_blocks
        if not 1 <= n_blocks <= self.config.n_blocks:
            raise ValueError(f"n_blocks must be in [1, {self.config.n_blocks}], got {n_blocks}")
        enc = self.encode(audio_mag, vib_mag)
        z, masks = enc.fused, []
        for block in self.separator[:n_blocks]:
            z = block(z)
            masks.append(self.decode_mask(z, enc.audio_skips))
        low = self.decode_low_band(enc.vib_features, enc.vib_skips)
        for t in masks + [low]:
            if not torch.isfinite(t).all():
                raise FloatingPointError("non-finite activation in enhancer output")
        if squeeze:
            masks, low = [m[0] for m in masks], low[0]
        return EnhancerOutput(masks, low)

    def _check_inputs(self, audio_mag, vib_mag):
        audio_mag = torch.as_tensor(audio_mag, dtype=self.dtype)
        vib_mag = torch.as_tensor(vib_mag, dtype=self.dtype)
        squeeze = audio_mag.dim() == 2
        if squeeze:
            audio_mag, vib_mag = audio_mag[None], vib_mag[None]
        if audio_mag.dim() != 3 or vib_mag.dim() != 3:
            raise ValueError("magnitudes must be [T, F] or [B, T, F]")
        if audio_mag.shape[-1] != self.config.audio_bins or vib_mag.shape[-1] != self.config.vib_bins:
            raise ValueError(f"expected {self.config.audio_bins} audio bins and {self.config.vib_bins} vibration "
                             f"bins, got {audio_mag.shape[-1]} and {vib_mag.shape[-1]}")
        if audio_mag.shape[:2] != vib_mag.shape[:2]:
            raise ValueError(f"audio {tuple(audio_mag.shape)} and vibration {tuple(vib_mag.shape)} frames differ")
        if not (torch.isfinite(audio_mag).all() and torch.isfinite(vib_mag).all()):
            raise ValueError("non-finite input magnitudes")
        return audio_mag, vib_mag, squeeze

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    # -- streaming ---------------------------------------------------------

    def reset(self, batch: int = 1) -> StreamState:
        c = self.config
        buffers = []
        for blocks, sizes in ((self.audio_encoder, c.audio_sizes), (self.vib_encoder, c.vib_sizes)):
            for i, block in enumerate(blocks):
                cin = block.conv.conv.in_channels
                buffers.append(torch.zeros(batch, cin, block.conv.context, sizes[i], dtype=self.dtype))
        f = c.audio_sizes[-1]
        rnn = [(torch.zeros(1, batch * f, c.hidden, dtype=self.dtype),
                torch.zeros(1, batch * f, c.hidden, dtype=self.dtype)) for _ in self.separator]
        return StreamState(buffers, rnn, 0, c, batch)

    def step(self, state: StreamState, audio_frame, vib_frame, n_blocks: int | None = None):
        """Advance one frame; returns ``(mask_frame, low_band_frame, new_state)``."""
        if state.config != self.config:
            raise ValueError("stream state was created for a different model configuration")
        audio_frame = torch.as_tensor(audio_frame, dtype=self.dtype)
        vib_frame = torch.as_tensor(vib_frame, dtype=self.dtype)
        squeeze = audio_frame.dim() == 1
        if squeeze:
            audio_frame, vib_frame = audio_frame[None], vib_frame[None]
        if audio_frame.shape != (state.batch, self.config.audio_bins) or \
                vib_frame.shape != (state.batch, self.config.vib_bins):
            raise ValueError("frame shapes do not match the stream state")
        n_blocks = self.config.n_blocks if n_blocks is None else n_blocks
        a = self._features(audio_frame[:, None])
        v = self._features(vib_frame[:, None])
        buffers, audio_skips, vib_skips = [], [], []
        bufs = iter(state.conv_buffers)
        for block in self.audio_encoder:
            a, pre, buf = block.step(a, next(bufs))
            audio_skips.append(pre)
            buffers.append(buf)
        for block in self.vib_encoder:
            v, pre, buf = block.step(v, next(bufs))
            vib_skips.append(pre)
            buffers.append(buf)
        z = self._fuse(a, v)
        rnn = list(state.rnn_states)
        for k, block in enumerate(self.separator[:n_blocks]):
            z, rnn[k] = block.step(z, rnn[k])
        mask = self.decode_mask(z, audio_skips)[:, 0]
        low = self.decode_low_band(v, vib_skips)[:, 0]
        if squeeze:
            mask, low = mask[0], low[0]
        return mask, low, StreamState(buffers, rnn, state.frame + 1, state.config, state.batch)

    # -- convenience -------------------------------------------------------

    def calibrate(self, audio_mag, vib_mag) -> None:
        """Set every normalization layer's statistics from one representative batch."""
        norms = [m for m in self.modules() if isinstance(m, FrozenNorm)]
        for m in norms:
            m.calibrating = True
        try:
            with torch.no_grad():
                self.forward(audio_mag, vib_mag)
        finally:
            for m in norms:
                m.calibrating = False

    def named_tensors(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    def parameter_vector(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    def copy(self) -> "Enhancer":
        return copy.deepcopy(self)


def init_params(config: ModelConfig | None = None, seed: int = 0, dtype=torch.float64) -> Enhancer:
    """Deterministically initialized enhancer.

    Kernels and linear maps: fan-in-scaled uniform; biases: zero; recurrent
    matrices: orthogonal per gate.
    """
    config = ModelConfig() if config is None else config
    gen = torch.Generator().manual_seed(int(seed))
    model = Enhancer(config).to(dtype)
    norm_params = {id(p) for m in model.modules() if isinstance(m, (FrozenNorm, nn.LayerNorm))
                   for p in m.parameters()}
    with torch.no_grad():
        for name, p in model.named_parameters():
            if id(p) in norm_params:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif "bias" in name:
                p.zero_()
            elif "weight_hh" in name:
                hidden = p.shape[1]
                for g in range(p.shape[0] // hidden):
                    q, r = torch.linalg.qr(torch.randn(hidden, hidden, generator=gen, dtype=torch.float64))
                    p[g * hidden:(g + 1) * hidden] = (q * torch.sign(torch.diagonal(r))).to(dtype)
            else:
                bound = float(np.sqrt(3.0 / _fan_in(name, p)))
                p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
    return model


def _fan_in(name: str, p: torch.Tensor) -> int:
    if p.dim() == 1:
        return p.shape[0]
    if ".up." in name:
        # ConvTranspose weight is [cin, cout, kt, kf]; each output sums cin * kernel / stride taps
        return max(1, p.shape[0] * p[0, 0].numel() // 2)
    return int(np.prod(p.shape[1:]))


def parameter_count(config: ModelConfig) -> int:
    """Closed-form number of learnable scalars for ``config``."""
    c = config
    kt, kf, h = c.time_kernel, c.freq_kernel, c.hidden
    total = 0

    def encoder(channels):
        n, cin = 0, 1
        for ch in channels:
            n += cin * ch * kt * kf + ch  # conv
            n += 2 * ch  # norm affine
            if cin != ch:
                n += cin * ch + ch  # 1x1 shortcut
            cin = ch
        return n

    def decoder(cin, channels):
        n = 0
        for ch in reversed(channels):
            n += cin * ch * 3 + ch  # transposed conv
            n += ch * ch * kf + ch  # conv
            n += 2 * ch  # norm affine
            cin = ch
        return n + cin + 1  # head

    def lstm(cin, hidden, directions):
        return directions * (4 * hidden * (cin + hidden) + 8 * hidden)

    fused = c.audio_channels[-1] + c.vib_channels[-1]
    total += encoder(c.audio_channels) + encoder(c.vib_channels)
    total += c.vib_sizes[-1] * c.audio_sizes[-1] + c.audio_sizes[-1]
    block = (lstm(fused, h, 2) + 2 * h * fused + fused + 2 * fused
             + lstm(fused, h, 1) + h * fused + fused + 2 * fused)
    total += c.n_blocks * block
    total += decoder(fused, c.audio_channels) + decoder(c.vib_channels[-1], c.vib_channels)
    return total


# -- functional surface ----------------------------------------------------

def forward_offline(model: Enhancer, audio_mag, vib_mag, n_blocks: int | None = None) -> EnhancerOutput:
    with torch.no_grad():
        return model(audio_mag, vib_mag, n_blocks)


def forward_streaming_step(model: Enhancer, state: StreamState, audio_frame, vib_frame, n_blocks: int | None = None):
    with torch.no_grad():
        return model.step(state, audio_frame, vib_frame, n_blocks)


def stream(model: Enhancer, audio_mag, vib_mag, n_blocks: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Run a whole ``[T, F]`` clip through the streaming path frame by frame."""
    state = model.reset()
    masks, lows = [], []
    with torch.no_grad():
        audio_mag = torch.as_tensor(np.asarray(audio_mag), dtype=model.dtype)
        vib_mag = torch.as_tensor(np.asarray(vib_mag), dtype=model.dtype)
        for t in range(audio_mag.shape[0]):
            m, low, state = model.step(state, audio_mag[t], vib_mag[t], n_blocks)
            masks.append(m)
            lows.append(low)
    return torch.stack(masks).numpy(), torch.stack(lows).numpy()


def apply_mask_and_reconstruct(mask, noisy: Spectrogram) -> Waveform:
    """Scale the noisy magnitude by ``mask``, keep the noisy phase, invert."""
    mask = mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask, dtype=np.float64)
    if mask.shape != noisy.frames.shape:
        raise ValueError(f"mask shape {mask.shape} != spectrogram shape {noisy.frames.shape}")
    frames = mask * noisy.frames  # |mask X| e^{j angle X} with mask >= 0
    return Waveform(istft_array(frames, noisy.window_size, noisy.hop, noisy.n_samples), noisy.sample_rate)


def align_frames(mag: np.ndarray, n_frames: int) -> np.ndarray:
    """Trim or zero-pad a ``[T, F]`` magnitude to ``n_frames`` frames."""
    if mag.shape[0] >= n_frames:
        return mag[:n_frames]
    return np.concatenate([mag, np.zeros((n_frames - mag.shape[0], mag.shape[1]))])


def features(model: Enhancer, noisy: Waveform, vib: Waveform) -> tuple[Spectrogram, np.ndarray]:
    """Noisy audio spectrogram and the vibration magnitude on the same frame grid."""
    noisy_spec = stft(Waveform(noisy.mono(), noisy.sample_rate), 2 * (model.config.audio_bins - 1))
    vib_spec = stft(Waveform(vib.mono(), vib.sample_rate), 2 * (model.config.vib_bins - 1))
    return noisy_spec, align_frames(vib_spec.magnitude, noisy_spec.n_frames)


def enhance(model: Enhancer, noisy: Waveform, vib: Waveform, n_blocks: int | None = None) -> Waveform:
    """Offline enhancement of one clip using the mask after ``n_blocks`` blocks."""
    spec, vib_mag = features(model, noisy, vib)
    out = forward_offline(model, torch.as_tensor(spec.magnitude, dtype=model.dtype),
                          torch.as_tensor(vib_mag, dtype=model.dtype), n_blocks)
    return apply_mask_and_reconstruct(out.masks[-1], spec)


def save_model(path, model: Enhancer, extra: dict | None = None) -> None:
    config = {"model": model.config.to_dict(), **(extra or {})}
    container.save(path, CHECKPOINT_KIND, config, model.named_tensors())


def load_model(path, dtype=torch.float64) -> Enhancer:
    config, tensors = container.load(path, CHECKPOINT_KIND)
    model = Enhancer(ModelConfig.from_dict(config["model"])).to(dtype)
    model.load_state_dict({k: torch.as_tensor(v, dtype=dtype) for k, v in tensors.items()})
    return model

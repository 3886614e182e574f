import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vibomni import dsp, metrics, synth, training
from vibomni import model as M
from vibomni.model import EnhancerOutput
from vibomni.training import LossConfig, OptimizerConfig

SMALL = M.ModelConfig(audio_channels=(4, 4, 8, 8, 8), vib_channels=(4, 8), n_blocks=2, hidden=8)


@pytest.fixture(scope="module")
def examples():
    return synth.make_examples(4, 0.5, (0, 10), seed=3)


@pytest.fixture(scope="module")
def batch(examples):
    clips = training.clip_features(examples)
    return training.make_batch(clips[:2], 8, np.random.default_rng(0), torch.float64)


def test_si_snr_torch_matches_numpy():
    rng = np.random.default_rng(0)
    ref = rng.standard_normal((50, 300))
    est = ref * rng.uniform(0.1, 3, (50, 1)) + rng.standard_normal((50, 300)) * rng.uniform(0.01, 3, (50, 1))
    t = training.si_snr_torch(torch.as_tensor(est), torch.as_tensor(ref)).numpy()
    n = np.array([metrics.si_snr(e, r) for e, r in zip(est, ref)])
    assert np.max(np.abs(t - n)) < 1e-9


def test_si_snr_examples():
    rng = np.random.default_rng(1)
    ref = rng.standard_normal(512)
    ref -= ref.mean()
    assert metrics.si_snr(ref, ref) == 60.0
    assert metrics.si_snr(2 * ref, ref) == metrics.si_snr(ref, ref)
    noise = rng.standard_normal(512)
    basis = np.stack([np.ones(512), ref])
    coef, *_ = np.linalg.lstsq(basis.T, noise, rcond=None)
    noise -= basis.T @ coef  # orthogonal to ref and zero-mean
    noise *= np.linalg.norm(ref) / np.linalg.norm(noise)
    assert abs(metrics.si_snr(ref + noise, ref)) < 1e-9
    t = training.si_snr_torch(torch.as_tensor(ref + noise)[None], torch.as_tensor(ref)[None])
    assert abs(float(t)) < 1e-9


def test_si_snr_torch_bounds_and_silent_reference():
    ref = torch.randn(3, 64, dtype=torch.float64)
    assert torch.all(training.si_snr_torch(torch.zeros_like(ref), ref) == -60.0)
    assert torch.all(training.si_snr_torch(ref, ref) == 60.0)
    with pytest.raises(ValueError, match="silent"):
        training.si_snr_torch(ref, torch.zeros_like(ref))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100.0), st.floats(-5, 5), st.integers(0, 2 ** 31))
def test_si_snr_scale_and_offset_invariance(alpha, offset, seed):
    rng = np.random.default_rng(seed)
    ref = rng.standard_normal(400)
    est = ref + 0.5 * rng.standard_normal(400)
    base = metrics.si_snr(est, ref)
    assert abs(metrics.si_snr(alpha * est, ref) - base) < 1e-9
    assert abs(metrics.si_snr(est + offset, ref) - base) < 1e-9


def test_istft_torch_matches_numpy():
    rng = np.random.default_rng(2)
    frames = rng.standard_normal((2, 13, 321)) + 1j * rng.standard_normal((2, 13, 321))
    frames[..., 0] = frames[..., 0].real
    frames[..., -1] = frames[..., -1].real
    y = training.istft_torch(torch.as_tensor(frames), 640, 320, 3500).numpy()
    for b in range(2):
        assert np.max(np.abs(y[b] - dsp.istft_array(frames[b], 640, 320, 3500))) < 1e-12


def test_low_band_target_grid(examples):
    target = training.low_band_target(examples[0].clean)
    spec = dsp.stft(examples[0].noisy, 640)
    assert target.shape == (spec.n_frames, 33)
    assert np.all(target >= 0)


def test_loss_config():
    assert LossConfig().weights(4) == [0.25] * 4
    assert LossConfig(level_weights=(0.2, 0.8)).weights(2) == [0.2, 0.8]
    with pytest.raises(ValueError):
        LossConfig(level_weights=(1.0,)).weights(2)
    with pytest.raises(ValueError):
        LossConfig(aux_weight=-1)


def test_oracle_best_case_and_zero_masks(examples):
    ex = examples[0]
    clean_spec = dsp.stft(ex.clean, 640)
    ones = [torch.ones(clean_spec.frames.shape, dtype=torch.float64)] * 3
    low = torch.as_tensor(training.low_band_target(ex.clean))
    best = training.composite_loss(EnhancerOutput(ones, low), clean_spec, ex.clean)
    # perfect masks and perfect low band: every term sits at the cap
    assert abs(float(best) - (-60.0 - 0.05 * 60.0)) < 1e-9
    noisy_spec = dsp.stft(ex.noisy, 640)
    zeros = [torch.zeros(noisy_spec.frames.shape, dtype=torch.float64)] * 3
    worst = training.composite_loss(EnhancerOutput(zeros, low), noisy_spec, ex.clean, LossConfig(aux_weight=0))
    assert float(worst) == 60.0


def test_single_level_reduces_to_negative_si_snr(examples):
    ex = examples[1]
    spec = dsp.stft(ex.noisy, 640)
    mask = np.random.default_rng(4).uniform(0, 1, spec.frames.shape)
    out = EnhancerOutput([torch.as_tensor(mask)], torch.zeros(spec.n_frames, 33, dtype=torch.float64))
    loss = training.composite_loss(out, spec, ex.clean, LossConfig(aux_weight=0.0, level_weights=(1.0,)))
    rec = M.apply_mask_and_reconstruct(mask, spec)
    assert abs(float(loss) + metrics.si_snr(rec, ex.clean)) < 1e-9


def test_composite_weights_levels_and_aux(examples):
    ex = examples[2]
    spec = dsp.stft(ex.noisy, 640)
    rng = np.random.default_rng(5)
    masks = [torch.as_tensor(rng.uniform(0, 1, spec.frames.shape)) for _ in range(3)]
    target = training.low_band_target(ex.clean)
    low = torch.as_tensor(target * rng.uniform(0.5, 1.5, target.shape))
    loss = training.composite_loss(EnhancerOutput(masks, low), spec, ex.clean, LossConfig(0.3, (0.1, 0.3, 0.6)))
    terms = [-metrics.si_snr(M.apply_mask_and_reconstruct(m.numpy(), spec), ex.clean) for m in masks]
    aux = -metrics.si_snr(low.numpy().ravel(), target.ravel())
    assert abs(float(loss) - (0.1 * terms[0] + 0.3 * terms[1] + 0.6 * terms[2] + 0.3 * aux)) < 1e-9


def test_oracle_mask_substitution_lowers_loss(batch):
    m = M.init_params(SMALL, seed=1)
    with torch.no_grad():
        out = m(batch.audio_mag, batch.vib_mag)
    base = float(training.composite_loss_batch(out, batch))
    clean_mag = torch.as_tensor(np.abs(np.stack([dsp.stft_array(c.numpy(), 640, 320) for c in batch.clean])))
    oracle = torch.clamp(clean_mag / torch.clamp(batch.audio_mag, min=1e-12), 0, 1)
    for k in range(len(out.masks)):
        masks = list(out.masks)
        masks[k] = oracle
        assert float(training.composite_loss_batch(EnhancerOutput(masks, out.low_band_estimate), batch)) < base


def test_central_difference_richardson():
    # smooth function with known derivative
    x = torch.tensor([0.7, -0.3], dtype=torch.float64)
    f = lambda: torch.sin(3 * x[0]) * torch.exp(x[1])
    exact = 3 * math.cos(2.1) * math.exp(-0.3)
    e_small = abs(training.central_difference(f, x, 0, 1e-3, order=2)[0] - exact)
    e_large = abs(training.central_difference(f, x, 0, 1e-2, order=2)[0] - exact)
    # two-point stencil: error ~ h^2, so 10x the step gives ~100x the error
    assert 80 < e_large / e_small < 120
    e4_small = abs(training.central_difference(f, x, 0, 1e-2, order=4)[0] - exact)
    e4_large = abs(training.central_difference(f, x, 0, 1e-1, order=4)[0] - exact)
    assert 8e3 < e4_large / e4_small < 1.2e4
    assert torch.equal(x, torch.tensor([0.7, -0.3], dtype=torch.float64))
    with pytest.raises(ValueError):
        training.central_difference(f, x, 0, 1e-3, order=3)


def test_relative_error_floor():
    assert training.relative_error(1.0, 1.0001) == pytest.approx(1e-4 / 1.0001)
    assert training.relative_error(1e-9, -1e-9, floor=1e-6) == pytest.approx(2e-3)


def test_grad_check_small_config(batch):
    m = M.init_params(SMALL, seed=2)
    m.calibrate(batch.audio_mag, batch.vib_mag)
    loss_fn = lambda model: training.composite_loss_batch(model(batch.audio_mag, batch.vib_mag), batch)
    result = training.grad_check(m, loss_fn, n_probes=30, seed=1)
    assert len(result.probes) == 30
    assert result.max_relative_error < 1e-4
    assert all(p.grad is None or torch.all(p.grad == 0) for p in m.parameters())


def test_grad_check_degenerate_parameters_are_zero(batch):
    # with the auxiliary term off, the auxiliary decoder cannot influence the loss
    m = M.init_params(SMALL, seed=3)
    cfg = LossConfig(aux_weight=0.0)
    loss_fn = lambda model: training.composite_loss_batch(model(batch.audio_mag, batch.vib_mag), batch, cfg)
    aux_only = torch.nn.Module()
    aux_only.aux = m.aux_decoder

    def aux_loss(_):
        return loss_fn(m)

    result = training.grad_check(aux_only, aux_loss, n_probes=10, seed=4)
    for _, _, analytic, numeric, err, _, _ in result.probes:
        assert analytic == 0.0 and numeric == 0.0 and err == 0.0


def test_grad_check_rejects_non_finite_loss():
    m = M.init_params(SMALL)
    with pytest.raises(FloatingPointError):
        training.grad_check(m, lambda model: torch.tensor(float("nan"), requires_grad=True))


def test_make_batch_alignment(examples):
    clips = training.clip_features(examples)
    b = training.make_batch(clips, 10, np.random.default_rng(6))
    assert b.audio_mag.shape == (4, 11, 321) and b.vib_mag.shape == (4, 11, 33)
    assert b.clean.shape == (4, 3200) and b.low_target.shape == (4, 11, 33)
    whole = training.make_batch(clips[:1], None, None)
    assert whole.audio_mag.shape[1] == dsp.stft(examples[0].noisy, 640).n_frames


def test_lr_zero_leaves_parameters_unchanged(examples):
    m = M.init_params(SMALL, seed=5)
    trained = training.train(m, examples, opt=OptimizerConfig(lr=0.0, steps=2, batch_size=2, segment_seconds=0.2))
    assert torch.equal(m.parameter_vector(), trained.parameter_vector())
    for a, b in zip(m.state_dict().values(), trained.state_dict().values()):
        assert torch.equal(a, b)


def test_training_is_deterministic_and_logs(examples, tmp_path):
    m = M.init_params(SMALL, seed=6)
    opt = OptimizerConfig(lr=1e-3, steps=3, batch_size=2, segment_seconds=0.2, seed=9)
    seen = []
    a = training.train(m, examples, opt=opt, log_path=tmp_path / "log.csv", callback=lambda *r: seen.append(r))
    b = training.train(m, examples, opt=opt)
    assert torch.equal(a.parameter_vector(), b.parameter_vector())
    assert not torch.equal(a.parameter_vector(), m.parameter_vector())
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["step", "loss", "si_snr_train"] and len(rows) == 4
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2]
    assert float(rows[1][1]) == seen[0][1]
    c = training.train(m, examples, opt=OptimizerConfig(lr=1e-3, steps=3, batch_size=2, segment_seconds=0.2, seed=10))
    assert not torch.equal(a.parameter_vector(), c.parameter_vector())


def test_divergence_reports_step(examples, monkeypatch):
    real = training.composite_loss_batch
    calls = []

    def flaky(output, batch, cfg=LossConfig()):
        calls.append(1)
        loss = real(output, batch, cfg)
        return loss * float("nan") if len(calls) == 3 else loss

    monkeypatch.setattr(training, "composite_loss_batch", flaky)
    with pytest.raises(training.TrainingDiverged) as err:
        training.train(M.init_params(SMALL), examples,
                       opt=OptimizerConfig(steps=5, batch_size=2, segment_seconds=0.2))
    assert err.value.step == 2


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError, match="empty"):
        training.train(M.init_params(SMALL), [])

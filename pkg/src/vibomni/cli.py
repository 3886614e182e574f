"""``vibomni`` command-line entry point.

Every flag can also be supplied through an environment variable named
``VIBOMNI_<FLAG>`` (upper case, dashes as underscores), e.g.
``VIBOMNI_SEED=3``; an explicit flag wins over the environment.

Exit status: 0 success, 1 invalid input (bad flags, missing or malformed
files), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__, bcf, metrics, mixer, model as model_mod, noise_adapt, training
from .dsp import AUDIO_WINDOW, VIB_WINDOW, Waveform, default_hop, stft
from .wavio import read_wav, write_wav

log = logging.getLogger("vibomni")

ENV_PREFIX = "VIBOMNI_"


class ValidationError(Exception):
    """Bad user input; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# -- helpers -----------------------------------------------------------------

def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n"


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


def record_config(args, out: str | Path) -> Path:
    """Write the resolved run configuration next to (or into) ``out``."""
    out = Path(out)
    target = out / "run_config.json" if out.is_dir() else out.with_name(out.name + ".run.json")
    target.write_text(_dump({"tool": "vibomni", "version": __version__, "config": _resolved(args)}))
    return target


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _model_config(args) -> model_mod.ModelConfig:
    return model_mod.ModelConfig(audio_bins=args.window_audio // 2 + 1, vib_bins=args.window_vib // 2 + 1)


def _check_windows(args, config: model_mod.ModelConfig) -> None:
    want = (args.window_audio // 2 + 1, args.window_vib // 2 + 1)
    if want != (config.audio_bins, config.vib_bins):
        raise ValidationError(f"--window-audio/--window-vib {args.window_audio}/{args.window_vib} do not match the "
                              f"checkpoint ({2 * (config.audio_bins - 1)}/{2 * (config.vib_bins - 1)})")


def _load_model(args, dtype=torch.float64) -> model_mod.Enhancer:
    net = model_mod.load_model(_require(args.model, "model checkpoint"), dtype)
    _check_windows(args, net.config)
    net.eval()
    return net


def _load_estimator(path) -> noise_adapt.SnrEstimator:
    return noise_adapt.load_estimator(_require(path, "estimator checkpoint"))


def _read_pair(noisy, vib) -> tuple[Waveform, Waveform]:
    audio = read_wav(_require(noisy, "audio file"))
    v = read_wav(_require(vib, "vibration file"))
    if v.channels == 3:
        from .dsp import vib_intensity
        v = vib_intensity(v)
    return audio, v


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


# -- subcommands ---------------------------------------------------------------

def cmd_fit_bcf(args) -> int:
    if len(args.audio) != len(args.vib):
        raise ValidationError("fit-bcf: give the same number of --audio and --vib files")
    models = []
    for a_path, v_path in zip(args.audio, args.vib):
        audio, vib = _read_pair(a_path, v_path)
        models.append(bcf.fit_from_pair(audio, vib, args.window_seconds, args.window_vib))
    out = Path(args.out)
    bcf.save_pool(out, models)
    record_config(args, out)
    log.info("wrote %d BCF model(s) to %s", len(models), out)
    return 0


def cmd_augment(args) -> int:
    pool = bcf.load_pool(_require(args.pool, "BCF pool"))
    if not pool:
        raise ValidationError("augment: BCF pool is empty")
    clean_dir = _require(args.clean_dir, "clean corpus directory")
    files = sorted(clean_dir.glob("*.wav"))
    if not files:
        raise ValidationError(f"augment: no .wav files in {clean_dir}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(files):
        clean = read_wav(f)
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, i]))
        k = int(rng.integers(len(pool)))
        response_seed = int(rng.integers(2 ** 63))
        vib = bcf.synthesize_vibration(Waveform(clean.mono(), clean.sample_rate),
                                       bcf.sample_response(pool[k], response_seed))
        d = out / f.stem
        d.mkdir(exist_ok=True)
        write_wav(d / "clean.wav", Waveform(clean.mono(), clean.sample_rate))
        write_wav(d / "vib.wav", vib)
        (d / "meta.json").write_text(_dump({"pool_index": k, "response_seed": response_seed, "source": f.name}))
    record_config(args, out)
    return 0


def cmd_mix(args) -> int:
    manifest = mixer.DatasetManifest.load(_require(args.manifest, "manifest"))
    pool = bcf.load_pool(_require(args.pool, "BCF pool")) if args.pool else []
    examples = mixer.build_training_set(manifest, pool, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mixer.write_dataset(examples, out)
    record_config(args, out)
    return 0


def cmd_train(args) -> int:
    examples = mixer.read_dataset(_require(args.data, "dataset directory"))
    if any(ex.clean is None for ex in examples):
        raise ValidationError("train: every dataset entry needs clean.wav")
    _seed_everything(args.seed)
    dtype = torch.float32 if args.precision == "float32" else torch.float64
    if args.init:
        net = model_mod.load_model(_require(args.init, "initial checkpoint"), dtype)
        _check_windows(args, net.config)
    else:
        net = model_mod.init_params(_model_config(args), seed=args.seed, dtype=dtype)
    clips = training.clip_features(examples, args.window_audio, args.window_vib)
    if not args.init:
        training.calibrate(net, clips, args.seed)
    opt = training.OptimizerConfig(lr=args.lr, steps=args.steps, seed=args.seed, batch_size=args.batch_size,
                                   segment_seconds=args.segment_seconds)
    trained = training.train(net, clips, training.LossConfig(aux_weight=args.aux_weight), opt, log_path=args.log)
    out = Path(args.out)
    model_mod.save_model(out, trained, {"steps": args.steps, "seed": args.seed})
    record_config(args, out)
    return 0


def cmd_train_estimator(args) -> int:
    examples = mixer.read_dataset(_require(args.data, "dataset directory"))
    if any(ex.clean is None for ex in examples):
        raise ValidationError("train-estimator: every dataset entry needs clean.wav for SNR labels")
    _seed_everything(args.seed)
    data = noise_adapt.crop_snr_dataset(examples, args.segment_seconds, args.crops, args.seed)
    cfg = noise_adapt.EstimatorTrainConfig(lr=args.lr, steps=args.steps, batch_size=args.batch_size, seed=args.seed)
    est_cfg = noise_adapt.EstimatorConfig(audio_bins=args.window_audio // 2 + 1, vib_bins=args.window_vib // 2 + 1)
    est = noise_adapt.train_estimator(data, cfg, est_cfg, zero_vibration=args.zero_vib)
    out = Path(args.out)
    noise_adapt.save_estimator(out, est)
    record_config(args, out)
    return 0


def _enhance_one(net, args, audio: Waveform, vib: Waveform, estimator=None) -> tuple[Waveform, int]:
    if args.adaptive:
        spec = stft(audio, args.window_audio)
        vib_spec = stft(vib, args.window_vib)
        return noise_adapt.adaptive_enhance(net, estimator, spec, vib_spec, args.threshold)
    n_blocks = args.blocks
    used = net.config.n_blocks if n_blocks is None else n_blocks
    spec, vib_mag = model_mod.features(net, audio, vib)
    if args.stream:
        masks, _ = model_mod.stream(net, spec.magnitude, vib_mag, n_blocks)
        mask = masks
    else:
        out = model_mod.forward_offline(net, torch.as_tensor(spec.magnitude, dtype=net.dtype),
                                        torch.as_tensor(vib_mag, dtype=net.dtype), n_blocks)
        mask = out.masks[-1].numpy()
    if args.vad:
        active = noise_adapt.vad(vib, energy_threshold_db=args.vad_threshold)
        mask = noise_adapt.gate_mask(mask, active, spec.hop / spec.sample_rate)
    return model_mod.apply_mask_and_reconstruct(mask, spec), used


def cmd_enhance(args) -> int:
    if args.adaptive and args.stream:
        raise ValidationError("enhance: --adaptive and --stream are mutually exclusive")
    if args.adaptive and not args.estimator:
        raise ValidationError("enhance: --adaptive needs --estimator")
    net = _load_model(args)
    if args.blocks is not None and not 1 <= args.blocks <= net.config.n_blocks:
        raise ValidationError(f"enhance: --blocks must be in [1, {net.config.n_blocks}]")
    estimator = _load_estimator(args.estimator) if args.adaptive else None
    report = {"clips": []}
    out = Path(args.out)
    if args.data:
        examples = mixer.read_dataset(_require(args.data, "dataset directory"))
        out.mkdir(parents=True, exist_ok=True)
        for ex in examples:
            enhanced, used = _enhance_one(net, args, ex.noisy, ex.vib, estimator)
            write_wav(out / f"{ex.id}.wav", enhanced)
            report["clips"].append({"id": ex.id, "blocks_used": used})
        (out / "report.json").write_text(_dump(report))
    else:
        if not (args.noisy and args.vib):
            raise ValidationError("enhance: give --data DIR or both --noisy and --vib")
        audio, vib = _read_pair(args.noisy, args.vib)
        enhanced, used = _enhance_one(net, args, audio, vib, estimator)
        write_wav(out, enhanced)
        report["clips"].append({"id": Path(args.noisy).stem, "blocks_used": used})
        out.with_name(out.name + ".report.json").write_text(_dump(report))
    record_config(args, out)
    return 0


def cmd_estimate_snr(args) -> int:
    est = _load_estimator(args.estimator)
    audio, vib = _read_pair(args.noisy, args.vib)
    spec, vib_mag = noise_adapt.clip_magnitudes(audio, vib, args.window_audio, args.window_vib)
    value = noise_adapt.estimate_snr(est, spec.magnitude, vib_mag).value_db
    text = _dump({"snr_db": value, "clip": Path(args.noisy).name})
    if args.out:
        Path(args.out).write_text(text)
        record_config(args, args.out)
    else:
        sys.stdout.write(text)
    return 0


def _oracle(clip) -> float:
    if "snr_db" not in clip.meta:
        raise ValidationError(f"curate --oracle: {clip.id} has no snr_db in meta.json")
    return float(np.clip(clip.meta["snr_db"], noise_adapt.SNR_MIN_DB, noise_adapt.SNR_MAX_DB))


def cmd_curate(args) -> int:
    examples = mixer.read_dataset(_require(args.clips, "clip directory"))
    clips = [noise_adapt.StreamClip(ex.id, ex.noisy, ex.vib, ex.meta) for ex in examples]
    if args.oracle:
        estimator = _oracle
    elif args.estimator:
        estimator = _load_estimator(args.estimator)
    else:
        raise ValidationError("curate: give --estimator CKPT or --oracle")
    teacher = _load_model(args) if args.model else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _seed_everything(args.seed)
    if args.finetune_steps and teacher is not None:
        opt = training.OptimizerConfig(lr=args.lr, steps=args.finetune_steps, seed=args.seed,
                                       batch_size=args.batch_size)
        student, pools = noise_adapt.continual_finetune(teacher, clips, estimator, args.beta, args.epochs, opt,
                                                        pool_size=args.pool_size, seed=args.seed)
        model_mod.save_model(out / "model.ckpt", student, {"beta": args.beta})
    else:
        pools = noise_adapt.curate(clips, estimator, args.beta, args.pool_size, teacher, seed=args.seed)
    summary = {
        "beta": args.beta,
        "clean": [{"id": p.clip.id, "estimate_db": p.estimate_db} for p in pools.clean],
        "noise": [{"id": p.clip.id, "estimate_db": p.estimate_db} for p in pools.noise],
        "discarded": pools.discarded,
        "remix_calls": pools.remix_calls,
        "remixed": [ex.id for ex in pools.noisy],
    }
    (out / "pools.json").write_text(_dump(summary))
    if pools.noisy:
        mixer.write_dataset(pools.noisy, out / "remixed")
    record_config(args, out)
    return 0


def cmd_eval(args) -> int:
    net = _load_model(args)
    estimator = _load_estimator(args.estimator) if args.adaptive else None
    if args.adaptive and estimator is None:
        raise ValidationError("eval: --adaptive needs --estimator")
    examples = mixer.read_dataset(_require(args.data, "dataset directory"))
    report = metrics.EvalReport()
    for ex in examples:
        if ex.clean is None:
            raise ValidationError(f"eval: {ex.id} has no clean.wav")
        enhanced, used = _enhance_one(net, args, ex.noisy, ex.vib, estimator)
        report.clips.append(metrics.score_clip(ex.id, enhanced.mono(), ex.clean.mono(), ex.noisy.mono(), used,
                                               args.window_audio))
    out = Path(args.out)
    report.to_json(out, {"tool": "vibomni", "version": __version__})
    report.to_csv(out.with_suffix(".csv"))
    record_config(args, out)
    return 0


def bench(net: model_mod.Enhancer, seconds: float = 5.0, runs: int = 100, stream: bool = True,
          n_blocks: int | None = None, seed: int = 0) -> dict:
    """Mean wall-clock latency for enhancing one ``seconds``-long clip, and its real-time factor."""
    rng = np.random.default_rng(seed)
    c = net.config
    hop = default_hop(2 * (c.audio_bins - 1))
    n_frames = int(round(seconds * 16000 / hop)) + 1
    audio_mag = np.abs(rng.standard_normal((n_frames, c.audio_bins)))
    vib_mag = np.abs(rng.standard_normal((n_frames, c.vib_bins)))
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        if stream:
            model_mod.stream(net, audio_mag, vib_mag, n_blocks)
        else:
            model_mod.forward_offline(net, torch.as_tensor(audio_mag, dtype=net.dtype),
                                      torch.as_tensor(vib_mag, dtype=net.dtype), n_blocks)
        times.append(time.perf_counter() - t0)
    times = np.array(times)
    return {"clip_seconds": seconds, "runs": runs, "mode": "stream" if stream else "offline",
            "mean_latency_s": float(times.mean()), "p90_latency_s": float(np.percentile(times, 90)),
            "rtf": float(times.mean() / seconds), "frame_ms": 1000.0 * float(times.mean()) / n_frames}


def cmd_bench(args) -> int:
    if args.model:
        net = _load_model(args, torch.float32 if args.precision == "float32" else torch.float64)
    else:
        net = model_mod.init_params(_model_config(args), seed=args.seed,
                                    dtype=torch.float32 if args.precision == "float32" else torch.float64)
    result = bench(net, args.seconds, args.runs, not args.offline, args.blocks, args.seed)
    result.update({"tool": "vibomni", "version": __version__, "parameters": model_mod.parameter_count(net.config),
                   "threads": torch.get_num_threads()})
    text = _dump(result)
    if args.out:
        Path(args.out).write_text(text)
        record_config(args, args.out)
    else:
        sys.stdout.write(text)
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--window-audio", type=int, default=AUDIO_WINDOW)
    common.add_argument("--window-vib", type=int, default=VIB_WINDOW)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="vibomni", description="Vibration-assisted speech enhancement.")
    parser.add_argument("--version", action="version", version=f"vibomni {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("fit-bcf", cmd_fit_bcf, "fit a bone-conduction model from paired recordings")
    p.add_argument("--audio", action="append", required=True, help="air-conducted speech WAV (repeatable)")
    p.add_argument("--vib", action="append", required=True, help="vibration WAV paired with --audio (repeatable)")
    p.add_argument("--window-seconds", type=float, default=bcf.WINDOW_SECONDS)
    p.add_argument("--out", required=True)

    p = add("augment", cmd_augment, "synthesize vibration for a clean corpus from a BCF pool")
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--out", required=True)

    p = add("mix", cmd_mix, "materialize a JSON-lines manifest into training triples")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pool")
    p.add_argument("--out", required=True)

    def train_flags(p, steps, lr, batch):
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--steps", type=int, default=steps)
        p.add_argument("--lr", type=float, default=lr)
        p.add_argument("--batch-size", type=int, default=batch)
        p.add_argument("--segment-seconds", type=float, default=1.0)

    p = add("train", cmd_train, "train the enhancer")
    train_flags(p, 500, 2e-3, 4)
    p.add_argument("--aux-weight", type=float, default=0.05)
    p.add_argument("--init", help="checkpoint to fine-tune from")
    p.add_argument("--log", help="loss log CSV")
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")

    p = add("train-estimator", cmd_train_estimator, "train the SNR estimator")
    train_flags(p, 1200, 1e-3, 16)
    p.add_argument("--crops", type=int, default=2, help="labelled crops per clip")
    p.add_argument("--zero-vib", action="store_true", help="audio-only ablation")

    def infer_flags(p):
        p.add_argument("--model", required=True)
        p.add_argument("--blocks", type=int)
        p.add_argument("--stream", action="store_true")
        p.add_argument("--adaptive", action="store_true")
        p.add_argument("--estimator")
        p.add_argument("--threshold", type=float, default=15.0)
        p.add_argument("--vad", action="store_true")
        p.add_argument("--vad-threshold", type=float, default=noise_adapt.VAD_THRESHOLD_DBFS)

    p = add("enhance", cmd_enhance, "enhance a clip or a dataset directory")
    infer_flags(p)
    p.add_argument("--noisy")
    p.add_argument("--vib")
    p.add_argument("--data")
    p.add_argument("--out", required=True)

    p = add("estimate-snr", cmd_estimate_snr, "estimate the SNR of a clip")
    p.add_argument("--estimator", required=True)
    p.add_argument("--noisy", required=True)
    p.add_argument("--vib", required=True)
    p.add_argument("--out")

    p = add("curate", cmd_curate, "sort in-the-wild clips into pools and remix them")
    p.add_argument("--clips", required=True)
    p.add_argument("--estimator")
    p.add_argument("--oracle", action="store_true", help="use snr_db from each clip's meta.json")
    p.add_argument("--beta", type=float, default=17.5)
    p.add_argument("--pool-size", type=int, default=noise_adapt.DEFAULT_POOL_SIZE)
    p.add_argument("--model", help="teacher checkpoint for pseudo-labels")
    p.add_argument("--finetune-steps", type=int, default=0)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "score an enhancer on a dataset")
    infer_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = add("bench", cmd_bench, "latency and real-time factor")
    p.add_argument("--model")
    p.add_argument("--blocks", type=int)
    p.add_argument("--seconds", type=float, default=5.0)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--offline", action="store_true")
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.add_argument("--out")

    _apply_env(parser)
    return parser


def _iter_actions(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for child in action.choices.values():
                yield from _iter_actions(child)
        else:
            yield action


def _apply_env(parser, environ=None) -> None:
    """Use ``VIBOMNI_*`` variables as defaults for the matching flags."""
    environ = os.environ if environ is None else environ
    for action in _iter_actions(parser):
        if not action.option_strings or action.dest in ("help", "version"):
            continue
        value = environ.get(ENV_PREFIX + action.dest.upper())
        if value is None:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            action.default = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            action.default = value.split(os.pathsep)
        else:
            try:
                action.default = action.type(value) if action.type else value
            except ValueError as exc:
                raise ValidationError(f"{ENV_PREFIX}{action.dest.upper()}={value!r}: {exc}") from exc
        action.required = False


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

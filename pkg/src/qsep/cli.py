"""``qsep`` command line: data generation, training, separation, encoding,
interpolation, evaluation and latent export."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data, dsp, evaluation, latent, model, train
from .inference import encode, separate_waveform


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared helpers


def _config(args) -> model.ModelConfig:
    overrides = {}
    for item in args.model or []:
        key, _, value = item.partition("=")
        if key not in model.ModelConfig.__dataclass_fields__ or key == "preset":
            raise CliError(f"unknown model field {key!r}")
        if key in ("query_channels", "query_time_strides", "sep_channels"):
            overrides[key] = tuple(int(v) for v in value.split(","))
        elif key == "segment_seconds":
            overrides[key] = float(value)
        else:
            overrides[key] = int(value)
    return model.get_config(args.preset, **overrides)


def _load(args):
    if not args.checkpoint:
        raise CliError("--checkpoint is required")
    path = Path(args.checkpoint)
    if path.is_dir():
        path = path / train.CHECKPOINT_NAME
    if not path.exists():
        raise CliError(f"checkpoint {path} not found")
    params, _, cfg, meta = model.load_checkpoint(path)
    return params, cfg, path


def _read_audio(path, cfg) -> np.ndarray:
    if not path:
        raise CliError("missing audio path")
    return dsp.read_wav(path, expected_rate=cfg.sample_rate).samples


def _stems(args, cfg, seed: int | None = None) -> data.StemSet:
    """Stems from ``--data-dir`` or, without it, the synthetic set generated in memory."""
    if getattr(args, "data_dir", None):
        return data.load_stem_dir(args.data_dir, cfg.sample_rate, cfg.segment_samples)
    specs = data.default_class_specs(args.classes)
    return data.synthetic_stems(specs, args.tracks, args.track_seconds, args.seed if seed is None else seed,
                                cfg.sample_rate, cfg.segment_samples)


def _library_from_csv(path, by: str) -> latent.LatentLibrary:
    """Group ``class/track/segment`` (or coarser) labels into class or track means."""
    groups: dict[str, list] = {}
    for label, z in latent.read_latents(path):
        parts = label.split("/")
        key = parts[0] if by == "class" else "/".join(parts[:2])
        groups.setdefault(key, []).append(z)
    if not groups:
        raise CliError(f"latent library {path} is empty")
    return latent.LatentLibrary.from_groups(groups)


def _write(out, w: np.ndarray, rate: int) -> Path:
    out = Path(out)
    dsp.write_wav(out, dsp.Waveform(w, rate))
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    specs = data.default_class_specs(args.classes)
    manifest = data.generate_dataset(args.out, specs, args.tracks, args.track_seconds, args.seed, cfg.sample_rate)
    print(f"wrote {len(specs)} classes x {args.tracks} tracks to {Path(args.out)} ({manifest.name})")
    return 0


def _hyper(args) -> train.Hyper:
    return train.Hyper(lambda_r=args.lambda_r, lambda_kl=args.lambda_kl, lambda_latent=args.lambda_latent,
                       lr=args.lr, decay_start=args.decay_start, decay_every=args.decay_every,
                       decay_step=args.decay_step, decay_mode=args.decay_mode, batch=args.batch,
                       clip_norm=args.clip_norm, conv_dtype=args.conv_dtype)


def cmd_train(args) -> int:
    cfg = _config(args)
    pool = data.flatten(_stems(args, cfg))
    hyper = _hyper(args)

    def progress(r):
        if args.log_every and (r.iteration + 1) % args.log_every == 0:
            print(f"iter {r.iteration + 1}\tL_R {r.loss_r:.4f}\tL_KL {r.loss_kl:.3f}\tL_latent {r.loss_latent:.4f}",
                  flush=True)

    final = train.train_loop(cfg, pool, args.iterations, args.out, seed=args.seed, hyper=hyper,
                             checkpoint_every=args.checkpoint_every, resume=args.resume, progress=progress)
    print(f"checkpoint {final}")
    return 0


def cmd_separate(args) -> int:
    params, cfg, _ = _load(args)
    mixture = _read_audio(args.mixture, cfg)
    chosen = [f for f in ("query", "cls", "retrieve") if getattr(args, f)]
    if len(chosen) != 1:
        raise CliError("give exactly one of --query, --class or --retrieve")
    if args.query:
        z = encode(params, cfg, _read_audio(args.query, cfg))
    else:
        if not args.library:
            raise CliError("--class and --retrieve need --library (see export-latents)")
        if args.cls:
            lib = _library_from_csv(args.library, "class")
            if args.cls not in lib:
                raise CliError(f"unknown class label {args.cls!r}; library has {', '.join(lib.labels())}")
            z = lib[args.cls]
        else:
            lib = _library_from_csv(args.library, "track")
            label, z = latent.retrieve_nearest(encode(params, cfg, _read_audio(args.retrieve, cfg)), lib)
            print(f"retrieved {label}")
    if args.rounds > 1:
        w, trace = latent.iterative_separate(params, cfg, dsp.Waveform(mixture, cfg.sample_rate), z, args.rounds)
        est = w.samples
        print(f"rounds completed: {len(trace)}")
    else:
        est = separate_waveform(params, cfg, mixture, z)
    print(f"wrote {_write(args.out, est, cfg.sample_rate)}")
    return 0


def cmd_encode(args) -> int:
    params, cfg, _ = _load(args)
    z = encode(params, cfg, _read_audio(args.query, cfg))
    label = args.label or Path(args.query).stem
    if args.out:
        latent.export_latents([(label, z)], args.out)
        print(f"wrote {args.out}")
    else:
        print(",".join(["label"] + [f"z_{i}" for i in range(z.shape[0])]))
        print(",".join([label] + [repr(float(v)) for v in z]))
    return 0


def cmd_interpolate(args) -> int:
    params, cfg, _ = _load(args)
    if args.steps < 2:
        raise CliError("--steps must be at least 2")
    mixture = _read_audio(args.mixture, cfg)
    za = encode(params, cfg, _read_audio(args.query_a, cfg))
    zb = encode(params, cfg, _read_audio(args.query_b, cfg))
    out = Path(args.out)
    for i, alpha in enumerate(np.linspace(0.0, 1.0, args.steps)):
        z = latent.slerp(za, zb, float(alpha))
        path = _write(out / f"interp_{i:02d}_alpha{alpha:.3f}.wav", separate_waveform(params, cfg, mixture, z),
                      cfg.sample_rate)
        print(f"alpha {alpha:.3f}\t{path}")
    return 0


def cmd_eval(args) -> int:
    params, cfg, path = _load(args)
    test_stems = (data.load_stem_dir(args.test_dir, cfg.sample_rate, cfg.segment_samples) if args.test_dir
                  else data.synthetic_stems(data.default_class_specs(args.classes), args.tracks, args.track_seconds,
                                            args.test_seed, cfg.sample_rate, cfg.segment_samples))
    mixtures = data.make_test_mixtures(test_stems, args.mixtures, args.test_seed)
    library = None
    if args.mode != "ground-truth-query":
        by = "track" if args.mode == "retrieved" else "class"
        if args.library:
            library = _library_from_csv(args.library, by)
        else:
            library = latent.build_library(latent.encode_stems(params, cfg, _stems(args, cfg)), by)
    report = evaluation.evaluate(params, cfg, mixtures, library, args.mode, args.rounds, cfg.preset, path.name)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_tsv())
    sys.stdout.write(report.summary())
    return 0


def cmd_export_latents(args) -> int:
    params, cfg, _ = _load(args)
    stems = data.load_stem_dir(args.stems, cfg.sample_rate, cfg.segment_samples) if args.stems else _stems(args, cfg)
    encoded = latent.encode_stems(params, cfg, stems)
    if args.group == "segment":
        rows = [(f"{c}/{t}/{i}", z) for c, t, i, z in encoded]
    else:
        lib = latent.build_library(encoded, args.group)
        rows = [(e.label, e.z) for e in lib.entries()]
    latent.export_latents(rows, args.out, cfg.latent_dim)
    print(f"wrote {len(rows)} latents to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _read_config_file(path) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _common(p: argparse.ArgumentParser, data_flags: bool = False, checkpoint: bool = False) -> None:
    p.add_argument("--config", help="key=value file of flag defaults (flags override it)")
    p.add_argument("--preset", choices=sorted(model.PRESETS), default="desk", help="model/STFT preset")
    p.add_argument("--model", action="append", metavar="FIELD=VALUE", help="override one model config field")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    if checkpoint:
        p.add_argument("--checkpoint", help="checkpoint file or training output directory")
    if data_flags:
        p.add_argument("--data-dir", help="stem directory <root>/<class>/<track>.wav; synthetic stems in memory when omitted")
        p.add_argument("--classes", type=int, default=4, help="synthetic classes")
        p.add_argument("--tracks", type=int, default=12, help="synthetic tracks per class")
        p.add_argument("--track-seconds", type=float, default=10.0, help="synthetic track length")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="qsep", description="Query-conditioned music source separation.",
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="write synthetic stems and a manifest", formatter_class=fmt)
    _common(p)
    p.add_argument("--out", default="stems", help="output stem directory")
    p.add_argument("--classes", type=int, default=4, help="number of classes")
    p.add_argument("--tracks", type=int, default=12, help="tracks per class")
    p.add_argument("--track-seconds", type=float, default=10.0, help="track length in seconds")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train Q and S", formatter_class=fmt)
    _common(p, data_flags=True)
    h = train.Hyper()
    p.add_argument("--iterations", type=int, default=5000, help="total training iterations")
    p.add_argument("--out", default="run", help="output directory (checkpoints, loss.log)")
    p.add_argument("--checkpoint-every", type=int, default=0, help="intermediate checkpoint period (0: off)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=100, help="progress print period (0: quiet)")
    p.add_argument("--lr", type=float, default=h.lr, help="initial learning rate")
    p.add_argument("--lambda-r", type=float, default=h.lambda_r, help="reconstruction weight")
    p.add_argument("--lambda-kl", type=float, default=h.lambda_kl, help="KL weight")
    p.add_argument("--lambda-latent", type=float, default=h.lambda_latent, help="latent regressor weight")
    p.add_argument("--decay-start", type=int, default=h.decay_start, help="iteration where lr decay starts")
    p.add_argument("--decay-every", type=int, default=h.decay_every, help="lr decay period")
    p.add_argument("--decay-step", type=float, default=h.decay_step, help="lr decrement (or value, mode set)")
    p.add_argument("--decay-mode", choices=("subtract", "set"), default=h.decay_mode, help="lr decay reading")
    p.add_argument("--batch", type=int, default=h.batch, help="batch size")
    p.add_argument("--clip-norm", type=float, default=h.clip_norm, help="global gradient norm clip (0: off)")
    p.add_argument("--conv-dtype", choices=("float32", "float64"), default=h.conv_dtype,
                   help="convolution matmul precision")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="separate one source from a mixture WAV", formatter_class=fmt)
    _common(p, checkpoint=True)
    p.add_argument("--mixture", required=True, help="mixture WAV")
    p.add_argument("--query", help="query WAV (encoded and used directly)")
    p.add_argument("--class", "--class-mean", dest="cls", help="condition on this class's mean vector")
    p.add_argument("--retrieve", metavar="QUERY_WAV", help="condition on the library track mean nearest to this query")
    p.add_argument("--library", help="latent CSV from export-latents")
    p.add_argument("--rounds", "--iterative", type=int, default=1, help="separation rounds (re-encoding between)")
    p.add_argument("--out", default="separated.wav", help="output WAV")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("encode", help="encode a query WAV to a latent CSV row", formatter_class=fmt)
    _common(p, checkpoint=True)
    p.add_argument("--query", "--audio", dest="query", required=True, help="query WAV")
    p.add_argument("--label", help="row label; the file stem when omitted")
    p.add_argument("--out", help="CSV path; stdout when omitted")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("interpolate", help="separate along a slerp path between two queries", formatter_class=fmt)
    _common(p, checkpoint=True)
    p.add_argument("--mixture", required=True, help="mixture WAV")
    p.add_argument("--query-a", required=True, help="query WAV at alpha = 0")
    p.add_argument("--query-b", required=True, help="query WAV at alpha = 1")
    p.add_argument("--steps", type=int, default=5, help="points on the alpha grid")
    p.add_argument("--out", default="interp", help="output directory")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("eval", help="median SDR on held-out mixtures", formatter_class=fmt)
    _common(p, data_flags=True, checkpoint=True)
    p.add_argument("--mode", choices=evaluation.MODES, default="mean-vector", help="conditioning mode")
    p.add_argument("--library", help="latent CSV; the training stems are encoded when omitted")
    p.add_argument("--test-dir", help="held-out stem directory; synthetic from --test-seed when omitted")
    p.add_argument("--test-seed", type=int, default=1000, help="seed of the synthetic held-out stems and mixtures")
    p.add_argument("--mixtures", type=int, default=40, help="number of test mixtures")
    p.add_argument("--rounds", type=int, default=2, help="rounds for mode iterative")
    p.add_argument("--out", help="per-estimate TSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-latents", help="write latents of stem segments as CSV", formatter_class=fmt)
    _common(p, data_flags=True, checkpoint=True)
    p.add_argument("--stems", help="stem directory; --data-dir or synthetic when omitted")
    p.add_argument("--group", choices=("segment", "track", "class"), default="segment", help="row granularity")
    p.add_argument("--out", default="latents.csv", help="CSV path")
    p.set_defaults(func=cmd_export_latents)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Load ``--config`` values as subcommand defaults so explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or not known.command:
        return
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sp = subparsers.choices.get(known.command)
    if sp is None:
        return
    actions = {a.dest: a for a in sp._actions}
    defaults = {}
    for key, raw in _read_config_file(known.config).items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise CliError(f"{known.config}: unknown key {key!r} for {known.command}")
        value = action.type(raw) if action.type else raw
        if action.choices and value not in action.choices:
            raise CliError(f"{known.config}: invalid value {raw!r} for {key}")
        defaults[key] = [value] if isinstance(action, argparse._AppendAction) else value
    sp.set_defaults(**defaults)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except (CliError, ValueError, KeyError, OSError, ArithmeticError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"qsep: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

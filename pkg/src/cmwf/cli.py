"""Command-line entry point: ``cmwf <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .beamformer import VARIANTS, batch_enhance, recursive_enhance
from .cyclic import scd
from .harness import (ExperimentConfig, SWEEPS, config_to_text, emit_plots, load_config,
                      run_sweep, summarize, write_summary)
from .pitch import pitch_track
from .scene import HarmonicSourceParams, simulate_scene
from .stft import WindowSpec, hz_to_rad, read_wav, write_wav

OUT_DIR_ENV = "CMWF_OUT_DIR"


class CliError(Exception):
    pass


def _default_out_dir() -> Path:
    return Path(os.environ.get(OUT_DIR_ENV, "cmwf_out"))


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"file not found: {p}")
    return p


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base random seed")
    common.add_argument("--out-dir", type=Path, default=None,
                        help=f"output directory (default: ${OUT_DIR_ENV} or ./cmwf_out)")
    common.add_argument("--config", type=str, default=None, help="INI experiment config")
    common.add_argument("--print-config", action="store_true",
                        help="print the effective configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cmwf", description="Cyclic multichannel Wiener filtering.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-sweep", parents=[common], help="Monte Carlo sweep on synthetic scenes")
    p.add_argument("--sweep", choices=SWEEPS)
    p.add_argument("--values", type=str, help="comma-separated sweep values")
    p.add_argument("--runs", type=int)
    p.add_argument("--variants", type=str, help="comma-separated variants")
    p.add_argument("--workers", type=int)
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("enhance", parents=[common], help="enhance a multichannel WAV")
    p.add_argument("noisy", help="multichannel noisy WAV")
    p.add_argument("noise_only", help="multichannel noise-only WAV (>= 2 s recommended)")
    p.add_argument("--f0", type=float, default=None, help="fundamental in Hz (default: tracked)")
    p.add_argument("--variant", choices=[v for v in VARIANTS if "+" not in v], default="cMWF")
    p.add_argument("--C", type=int, default=None)
    p.add_argument("--recursive", action="store_true", help="frame-recursive statistics")
    p.add_argument("--bits", type=int, choices=(16, 24, 32), default=32)

    p = sub.add_parser("scd", parents=[common], help="ACP cyclic spectrum of one channel")
    p.add_argument("input")
    p.add_argument("--alphas-hz", type=str, default=None, help="comma-separated cyclic frequencies")
    p.add_argument("--f0", type=float, default=None, help="use 0, f0, ..., (C-1) f0")
    p.add_argument("--C", type=int, default=5)
    p.add_argument("--channel", type=int, default=0)

    p = sub.add_parser("pitch", parents=[common], help="per-frame f0 track CSV")
    p.add_argument("input")
    p.add_argument("--channel", type=int, default=0)

    p = sub.add_parser("gen-scene", parents=[common], help="export synthetic scenes as WAV")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--M", type=int, default=None)
    p.add_argument("--isnr", type=float, default=None)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--notes", type=int, default=1)
    return parser


def _experiment_config(args) -> ExperimentConfig:
    override = {}
    if args.seed is not None:
        override["seed"] = args.seed
    for key in ("sweep", "runs", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            override[key] = value
    if getattr(args, "values", None):
        override["values"] = tuple(float(v) for v in args.values.split(","))
    if getattr(args, "variants", None):
        override["variants"] = tuple(v.strip() for v in args.variants.split(","))
    if args.config is not None:
        return load_config(args.config, **override)
    return ExperimentConfig(**override)


def _cmd_synth_sweep(args, out_dir: Path) -> None:
    config = _experiment_config(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(config_to_text(config))
    csv_path = out_dir / f"{config.sweep}_results.csv"

    def progress(done, total):
        print(f"\r{done}/{total} cells", end="", file=sys.stderr, flush=True)

    records = run_sweep(config, csv_path, progress)
    print(file=sys.stderr)
    summary = summarize(records)
    write_summary(summary, out_dir / f"{config.sweep}_summary.csv")
    for s in summary:
        print(f"{s.sweep} {s.value:g} {s.variant:8s} n={s.n} mean={s.mean:.2f} dB "
              f"CI=[{s.ci_low:.2f}, {s.ci_high:.2f}]")
    failed = sum(r.status != "ok" for r in records)
    if failed:
        print(f"{failed} row(s) failed, see {csv_path}", file=sys.stderr)
    if not args.no_plots and summary:
        for path in emit_plots(csv_path, out_dir):
            print(f"wrote {path}")


def _cmd_enhance(args, out_dir: Path) -> None:
    config = _experiment_config(args)
    ecfg = config.enhance_config()
    if args.C is not None:
        ecfg = replace(ecfg, C=args.C)
    noisy = read_wav(_existing(args.noisy))
    noise_only = read_wav(_existing(args.noise_only))
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.noisy).stem
    if args.recursive:
        res = recursive_enhance(noisy, noise_only, ecfg, args.variant)
        res.to_csv(out_dir / f"{stem}_frames.csv")
        audio = res.audio
        notes = [f"recursive, {sum(r['mode'] == 'cyclic' for r in res.frames)} cyclic frames"]
    else:
        f0 = args.f0
        if f0 is None:
            track = pitch_track(noisy.channel(ecfg.ref_mic), ecfg.win)
            voiced = track.raw[track.voiced]
            f0 = float(np.median(voiced)) * noisy.fs / (2 * np.pi) if voiced.size else None
        res = batch_enhance(noisy, noise_only, f0, ecfg, args.variant)
        audio = res.audio
        notes = [f"{k} = {v}" for k, v in res.diagnostics.items()]
    path = out_dir / f"{stem}_enhanced.wav"
    write_wav(path, audio, args.bits)
    (out_dir / f"{stem}_diagnostics.txt").write_text("\n".join(notes) + "\n")
    print(f"wrote {path}")


def _cmd_scd(args, out_dir: Path) -> None:
    audio = read_wav(_existing(args.input))
    if not 0 <= args.channel < audio.n_channels:
        raise CliError(f"channel {args.channel} out of range for {audio.n_channels} channels")
    if args.alphas_hz:
        alphas_hz = [float(a) for a in args.alphas_hz.split(",")]
    elif args.f0:
        alphas_hz = [c * args.f0 for c in range(args.C)]
    else:
        alphas_hz = [0.0]
    alphas = [hz_to_rad(a, audio.fs) for a in alphas_hz]
    est = scd(audio, alphas, WindowSpec(), args.channel)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{Path(args.input).stem}_scd.csv"
    est.to_csv(path)
    print(f"wrote {path}")


def _cmd_pitch(args, out_dir: Path) -> None:
    audio = read_wav(_existing(args.input))
    if not 0 <= args.channel < audio.n_channels:
        raise CliError(f"channel {args.channel} out of range for {audio.n_channels} channels")
    track = pitch_track(audio, WindowSpec(), channel=args.channel)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{Path(args.input).stem}_pitch.csv"
    track.to_csv(path)
    print(f"wrote {path}")


def _cmd_gen_scene(args, out_dir: Path) -> None:
    config = _experiment_config(args)
    scfg = config.scene_config(**{k: v for k, v in (("M", args.M), ("isnr_db", args.isnr))
                                  if v is not None})
    duration = args.duration if args.duration is not None else config.duration
    source = HarmonicSourceParams(duration=duration)
    for i in range(args.count):
        seed = np.random.SeedSequence(config.seed, spawn_key=(i,))
        scene = simulate_scene(scfg, source, seed, notes=args.notes,
                               note_seconds=duration / max(args.notes, 1))
        scene.meta["seed"] = f"{config.seed}/{i}"
        path = scene.export(out_dir / f"scene_{i:03d}")
        print(f"wrote {path}")


_COMMANDS = {
    "synth-sweep": _cmd_synth_sweep,
    "enhance": _cmd_enhance,
    "scd": _cmd_scd,
    "pitch": _cmd_pitch,
    "gen-scene": _cmd_gen_scene,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.print_config:
            print(config_to_text(_experiment_config(args)), end="")
            return 0
        out_dir = args.out_dir if args.out_dir is not None else _default_out_dir()
        _COMMANDS[args.command](args, out_dir)
    except (CliError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"cmwf {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

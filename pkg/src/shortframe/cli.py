"""Command-line entry point: ``shortframe <command> [options]``.

Exit status is 0 on success, 1 on invalid input (bad flags, missing or invalid
config, unreadable audio, resume mismatch) and 2 on runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import torch

from .audio import AudioClip, AudioFormatError, CorpusSpec, build_manifest, load_split, \
    make_synthetic_corpus, read_manifest, wav_read, wav_write, write_manifest
from .sweep import ConfigError, ResumeError, SweepConfig, load_config, load_model, ms_tag

log = logging.getLogger("shortframe")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_flags(sub: bool) -> argparse.ArgumentParser:
    # flags are accepted before or after the subcommand; the subcommand copy must
    # not overwrite a value given earlier, hence SUPPRESS defaults there
    d = (lambda v: argparse.SUPPRESS) if sub else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=d(None), help="TOML config file")
    p.add_argument("--seed", type=int, default=d(None), help="master seed (overrides the config)")
    p.add_argument("--out", type=Path, default=d(None), help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, default=d(1), help="torch intra-op threads")
    p.add_argument("--quiet", action="store_true", default=d(False), help="only log warnings and errors")
    return p


def build_parser() -> argparse.ArgumentParser:
    g = _global_flags(sub=True)
    parser = _Parser(prog="shortframe", description=__doc__.splitlines()[0],
                     parents=[_global_flags(sub=False)])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    corpus = sub.add_parser("corpus", help="build datasets")
    csub = corpus.add_subparsers(dest="corpus_command", required=True, parser_class=_Parser)
    csub.add_parser("make", parents=[g], help="generate the synthetic speech-like corpus")
    man = csub.add_parser("manifest", parents=[g], help="index folders of clean and noise WAVs")
    man.add_argument("--clean", type=Path, required=True)
    man.add_argument("--noise", type=Path, required=True)
    man.add_argument("--snr", type=float, nargs="+", default=[-5.0, 0.0, 5.0, 10.0])
    man.add_argument("--excerpt", type=float, default=2.0, help="excerpt length in seconds")
    man.add_argument("--val-fraction", type=float, default=0.2)
    man.add_argument("--split", choices=["train", "val", "test"],
                     help="tag every record with one split instead of a train/val split")

    tr = sub.add_parser("train", parents=[g], help="train one model")
    tr.add_argument("--frame-ms", type=float, help="frame length (default: first in config)")

    en = sub.add_parser("enhance", parents=[g], help="enhance one WAV into the three reconstructions")
    en.add_argument("--checkpoint", type=Path, required=True)
    en.add_argument("input", type=Path)

    ev = sub.add_parser("evaluate", parents=[g], help="score a manifest with a checkpoint")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--manifest", type=Path, required=True)
    ev.add_argument("--split", default=None, help="only records with this split tag")
    ev.add_argument("--no-estoi", action="store_true")

    sub.add_parser("sweep", parents=[g], help="run the frame-length experiment")
    sub.add_parser("report", parents=[g], help="re-render charts from a sweep directory")
    return parser


def _sweep_config(args) -> SweepConfig:
    cfg = load_config(args.config) if args.config else SweepConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = str(args.out)
    return cfg


def _corpus_spec(args) -> CorpusSpec:
    if not args.config:
        return CorpusSpec()
    from .sweep import tomllib
    if not args.config.is_file():
        raise ConfigError(f"config file not found: {args.config}")
    sec = tomllib.loads(args.config.read_text()).get("corpus", {})
    bad = set(sec) - {f.name for f in fields(CorpusSpec)}
    if bad:
        raise ConfigError(f"unknown keys in [corpus]: {sorted(bad)}")
    return CorpusSpec(**sec)


def cmd_corpus(args) -> int:
    out = args.out or Path("corpus")
    seed = args.seed if args.seed is not None else 0
    if args.corpus_command == "make":
        paths = make_synthetic_corpus(out, _corpus_spec(args), seed)
        for k, p in paths.items():
            print(f"{k}: {p}")
        return 0
    clean = sorted(args.clean.glob("*.wav"))
    noise = sorted(args.noise.glob("*.wav"))
    if not clean or not noise:
        raise ConfigError(f"no WAV files found in {args.clean if not clean else args.noise}")
    out.mkdir(parents=True, exist_ok=True)
    recs = build_manifest([p.resolve() for p in clean], [p.resolve() for p in noise], args.snr,
                          excerpt_s=args.excerpt, val_fraction=args.val_fraction,
                          split=args.split, seed=seed)
    path = out / "manifest.jsonl"
    write_manifest(path, recs)
    print(path)
    return 0


def cmd_train(args) -> int:
    from .model import EnhancerModel
    from .sweep import _load_data, sub_seed
    from .training import save_checkpoint, train

    cfg = _sweep_config(args)
    ms = args.frame_ms if args.frame_ms is not None else cfg.frame_ms[0]
    stft_cfg = cfg.stft_config(ms)
    seed = sub_seed(cfg.seed, ms)
    (trn, trc), (van, vac), _ = _load_data(cfg)
    model = EnhancerModel(replace(cfg.model, n_bins=stft_cfg.n_bins, seed=seed))
    out = Path(cfg.out_dir)
    res = train(model, (trn, trc), (van, vac), stft_cfg, replace(cfg.train, seed=seed),
                log_path=out / "logs" / f"{ms_tag(ms)}.jsonl")
    path = out / "checkpoints" / f"{ms_tag(ms)}.ckpt"
    save_checkpoint(path, res.checkpoint)
    print(f"{path} (best epoch {res.best_epoch}, status {res.status})")
    return 0 if res.status != "diverged" else 2


def cmd_enhance(args) -> int:
    from .sweep import enhance_clip

    model, stft_cfg = load_model(args.checkpoint)
    clip = wav_read(args.input)
    sigs = enhance_clip(clip, model, stft_cfg)
    out = args.out or Path(".")
    for kind in ("joint", "mag_only", "phase_only"):
        p = out / f"{args.input.stem}_{kind}.wav"
        wav_write(p, AudioClip(np.clip(sigs[kind], -1.0, 1.0)))
        print(p)
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_triplet, records_to_csv

    model, stft_cfg = load_model(args.checkpoint)
    recs, noisy, clean = load_split(read_manifest(args.manifest), args.manifest.parent,
                                    args.split, dtype=np.float64)
    if not recs:
        raise ConfigError(f"{args.manifest}: no records" + (f" with split {args.split}" if args.split else ""))
    records = []
    for r, x, s in zip(recs, noisy, clean):
        records += evaluate_triplet(model, x, s, stft_cfg, r.uid, r.snr_db, not args.no_estoi)
    out = args.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "records.csv").write_text(records_to_csv(records))
    print(out / "records.csv")
    return 0


def cmd_sweep(args) -> int:
    from .sweep import run_sweep

    cfg = _sweep_config(args)
    report = run_sweep(cfg)
    failed = [k for k, c in report.cells.items() if c["status"] != "ok"]
    print(Path(cfg.out_dir) / "report")
    return 2 if failed else 0


def cmd_report(args) -> int:
    from .report import load_report, render_report

    out = args.out or (Path(_sweep_config(args).out_dir) if args.config else None)
    if out is None:
        raise ConfigError("report needs --out or --config")
    d = out / "report"
    if not (d / "report.json").is_file():
        raise ConfigError(f"no sweep report found in {d}")
    rep, records = load_report(d)
    res = render_report(rep, records, d)
    return res.status


COMMANDS = {"corpus": cmd_corpus, "train": cmd_train, "enhance": cmd_enhance,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ResumeError, AudioFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.exception("runtime failure")
        print(f"failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

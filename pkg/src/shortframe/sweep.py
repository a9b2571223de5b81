"""The frame-length sweep: configs, per-frame-length cells, resumable orchestration."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .audio import AudioClip, load_split, peak_normalize, read_manifest
from .metrics import EvalRecord, aggregate, evaluate_triplet, sort_records, triplet_signals
from .model import EnhancerModel, ModelConfig, enhance, parameter_count
from .stft import StftConfig, stft
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class ResumeError(RuntimeError):
    pass


@dataclass
class SweepConfig:
    frame_ms: list = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0, 16.0, 32.0])
    n_fft: int = 512
    overlap: float = 0.5
    sample_rate: int = 16000
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    trainval_manifest: str = ""
    test_manifest: str = ""
    out_dir: str = "sweep_out"
    seed: int = 0
    snr_fig_frame_ms: list = field(default_factory=lambda: [4.0, 16.0])
    estoi: bool = True
    n_bootstrap: int = 10000
    workers: int = 1

    def __post_init__(self):
        self.frame_ms = [float(x) for x in self.frame_ms]
        if not self.frame_ms:
            raise ConfigError("frame_ms must list at least one frame length")
        bins = set()
        for ms in self.frame_ms:
            try:
                c = self.stft_config(ms)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            bins.add(c.n_bins)
        if len(bins) != 1:
            raise ConfigError(f"frame lengths give different bin counts {sorted(bins)}")

    def stft_config(self, ms: float) -> StftConfig:
        return StftConfig.from_ms(ms, self.n_fft, self.overlap, self.sample_rate)

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


def _section(raw: dict, name: str, cls):
    sec = dict(raw.get(name, {}))
    known = {f.name for f in fields(cls)}
    bad = set(sec) - known
    if bad:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
    return cls(**sec)


def load_config(path) -> SweepConfig:
    """Read a TOML sweep config; relative paths are taken from the file's directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, path.parent)


def config_from_dict(raw: dict, base: Path = Path(".")) -> SweepConfig:
    allowed = {"seed", "out", "sweep", "data", "model", "train", "corpus"}
    bad = set(raw) - allowed
    if bad:
        raise ConfigError(f"unknown top-level keys: {sorted(bad)}")
    sweep = dict(raw.get("sweep", {}))
    data = dict(raw.get("data", {}))
    try:
        model = _section(raw, "model", ModelConfig)
        tcfg = _section(raw, "train", TrainConfig)
        kw = {k: sweep.pop(k) for k in list(sweep)
              if k in {"frame_ms", "n_fft", "overlap", "sample_rate", "snr_fig_frame_ms",
                       "estoi", "n_bootstrap", "workers"}}
        if sweep:
            raise ConfigError(f"unknown keys in [sweep]: {sorted(sweep)}")

        def rel(p):
            return str(p) if not p or Path(p).is_absolute() else str(base / p)

        return SweepConfig(model=model, train=tcfg, seed=int(raw.get("seed", 0)),
                           out_dir=rel(raw.get("out", "sweep_out")),
                           trainval_manifest=rel(data.get("trainval", "")),
                           test_manifest=rel(data.get("test", "")), **kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def sub_seed(seed: int, frame_ms: float) -> int:
    """Per-frame-length seed; independent of which other frame lengths are swept."""
    h = hashlib.sha256(f"{seed}/{frame_ms:g}".encode()).digest()
    return int.from_bytes(h[:4], "little") % (2 ** 31)


def _file_digest(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest() if path else ""


def cell_identity(cfg: SweepConfig, ms: float) -> dict:
    return {
        "frame_ms": ms, "n_fft": cfg.n_fft, "overlap": cfg.overlap,
        "sample_rate": cfg.sample_rate, "seed": cfg.seed, "model": asdict(cfg.model),
        "train": asdict(cfg.train), "estoi": cfg.estoi,
        "trainval_sha256": _file_digest(cfg.trainval_manifest),
        "test_sha256": _file_digest(cfg.test_manifest),
        "version": __version__,
    }


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def ms_tag(ms: float) -> str:
    return f"{ms:g}ms"


@dataclass
class CellResult:
    frame_ms: float
    status: str
    config_hash: str
    n_parameters: int = 0
    best_epoch: int = 0
    records: list = field(default_factory=list)
    error: str = ""


@dataclass
class SweepReport:
    by_framelen: list
    by_snr: list
    cells: dict
    provenance: dict

    def to_json(self) -> str:
        return json.dumps({"by_framelen": [asdict(r) for r in self.by_framelen],
                           "by_snr": [asdict(r) for r in self.by_snr],
                           "cells": self.cells, "provenance": self.provenance},
                          sort_keys=True, indent=1)


def _load_data(cfg: SweepConfig):
    for p in (cfg.trainval_manifest, cfg.test_manifest):
        if not p or not Path(p).is_file():
            raise ConfigError(f"manifest not found: {p!r}")
    tv = read_manifest(cfg.trainval_manifest)
    base = Path(cfg.trainval_manifest).parent
    _, trn, trc = load_split(tv, base, "train")
    _, van, vac = load_split(tv, base, "val")
    te = read_manifest(cfg.test_manifest)
    te_recs, ten, tec = load_split(te, Path(cfg.test_manifest).parent, None, dtype=np.float64)
    if len(trn) == 0 or len(van) == 0:
        raise ConfigError("train/val manifest yields an empty split")
    return (trn, trc), (van, vac), (te_recs, ten, tec)


def run_cell(cfg: SweepConfig, ms: float, data=None) -> CellResult:
    """Train and evaluate one frame length; writes checkpoint, log and cell file."""
    out = Path(cfg.out_dir)
    ident = cell_identity(cfg, ms)
    chash = config_hash(ident)
    tag = ms_tag(ms)
    stft_cfg = cfg.stft_config(ms)
    seed = sub_seed(cfg.seed, ms)
    mcfg = replace(cfg.model, n_bins=stft_cfg.n_bins, seed=seed)
    tcfg = replace(cfg.train, seed=seed)
    t0 = time.perf_counter()
    try:
        train_set, val_set, (te_recs, ten, tec) = data if data is not None else _load_data(cfg)
        torch.manual_seed(seed)
        model = EnhancerModel(mcfg)
        res = train(model, train_set, val_set, stft_cfg, tcfg, log_path=out / "logs" / f"{tag}.jsonl",
                    extra_config={"cell": ident})
        if res.checkpoint.epoch == 0:
            raise RuntimeError(f"training {res.status} before the first completed epoch")
        save_checkpoint(out / "checkpoints" / f"{tag}.ckpt", res.checkpoint)
        model = res.checkpoint.build_model()
        records = []
        for r, x, s in zip(te_recs, ten, tec):
            records += evaluate_triplet(model, x, s, stft_cfg, r.uid, r.snr_db, cfg.estoi)
        cell = CellResult(ms, "ok", chash, model.n_parameters(), res.best_epoch,
                          [asdict(r) for r in sort_records(records)])
    except (ConfigError, ResumeError):
        raise
    except Exception as exc:  # a failed cell must not sink the sweep
        log.exception("cell %s failed", tag)
        cell = CellResult(ms, "failed", chash, parameter_count(mcfg), error=f"{type(exc).__name__}: {exc}")
    _write_json(out / "cells" / f"{tag}.json", asdict(cell))
    _update_timing(out, tag, time.perf_counter() - t0)
    return cell


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=1))
    tmp.replace(path)


def _update_timing(out: Path, tag: str, seconds: float) -> None:
    p = out / "logs" / "timing.json"
    times = json.loads(p.read_text()) if p.exists() else {}
    times[tag] = round(seconds, 3)
    _write_json(p, times)


def _cell_worker(args):
    cfg, ms = args
    torch.set_num_threads(1)
    return run_cell(cfg, ms)


def run_sweep(cfg: SweepConfig) -> SweepReport:
    """Run every frame-length cell (skipping finished ones) and write the report."""
    out = Path(cfg.out_dir)
    cells: dict[float, CellResult] = {}
    todo = []
    for ms in cfg.frame_ms:
        p = out / "cells" / f"{ms_tag(ms)}.json"
        if p.exists():
            done = CellResult(**json.loads(p.read_text()))
            expect = config_hash(cell_identity(cfg, ms))
            if done.config_hash != expect:
                raise ResumeError(f"{p}: config hash {done.config_hash} does not match current "
                                  f"config {expect}; use a fresh output directory")
            if done.status == "ok":
                log.info("cell %s already complete, skipping", ms_tag(ms))
                cells[ms] = done
                continue
        todo.append(ms)
    if todo:
        if cfg.workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
                for ms, cell in zip(todo, ex.map(_cell_worker, [(cfg, ms) for ms in todo])):
                    cells[ms] = cell
        else:
            data = _load_data(cfg)
            for ms in todo:
                log.info("cell %s: training", ms_tag(ms))
                cells[ms] = run_cell(cfg, ms, data)
    report, records = build_report(cfg, cells)
    from .report import render_report
    render_report(report, records, out / "report")
    return report


def build_report(cfg: SweepConfig, cells: dict) -> tuple[SweepReport, list[EvalRecord]]:
    records = []
    for ms in cfg.frame_ms:
        records += [EvalRecord(**r) for r in cells[ms].records]
    records = sort_records(records)
    by_fl = aggregate(records, by_snr=False, n_resamples=cfg.n_bootstrap, seed=cfg.seed)
    by_snr = aggregate(records, by_snr=True, metrics=("si_sdr_improvement", "estoi"),
                       n_resamples=cfg.n_bootstrap, seed=cfg.seed)
    summary = {ms_tag(ms): {"status": cells[ms].status, "config_hash": cells[ms].config_hash,
                            "n_parameters": cells[ms].n_parameters,
                            "best_epoch": cells[ms].best_epoch, "error": cells[ms].error}
               for ms in cfg.frame_ms}
    prov = {"seed": cfg.seed, "code_version": __version__,
            "config_hash": config_hash({ms_tag(ms): cells[ms].config_hash for ms in cfg.frame_ms}),
            "sub_seeds": {ms_tag(ms): sub_seed(cfg.seed, ms) for ms in cfg.frame_ms},
            "batch_size": cfg.train.batch_size, "n_bins": cfg.n_bins,
            "snr_fig_frame_ms": cfg.snr_fig_frame_ms,
            "quality_metric": "SI-SDR improvement (proxy; no POLQA)",
            # wall times vary run to run, so they stay out of the report itself
            "wall_times": "logs/timing.json"}
    return SweepReport(by_fl, by_snr, summary, prov), records


# ------------------------------------------------------------ single-clip use

def enhance_clip(noisy: AudioClip, model: EnhancerModel, cfg: StftConfig) -> dict:
    """Joint, magnitude-only and phase-only reconstructions of one noisy clip.

    The input is peak-normalised before analysis (the level the model was
    trained at) and the outputs stay at that level; ``noisy`` in the result is
    the normalised input.
    """
    xn, _ = peak_normalize(noisy.samples, noisy.samples)
    spec = stft(xn, cfg)
    m, c, s = enhance(spec, model)
    sigs = triplet_signals(spec, m, c, s)
    sigs["noisy"] = xn
    return sigs


def load_model(ckpt_path) -> tuple[EnhancerModel, StftConfig]:
    ck = load_checkpoint(ckpt_path)
    return ck.build_model(), ck.stft_config()

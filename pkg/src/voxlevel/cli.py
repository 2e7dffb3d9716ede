"""``voxlevel`` command-line entry point.

Every command validates its inputs before heavy work, writes its outputs and
a ``run.json`` reproducibility record under ``--out``, and reports failures
as one JSON line on stderr with a distinct exit code.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import autoencoder as aem
from . import estimator as est
from .dsp import (AudioError, MelConfig, MelSpectrogram, load_mel_matrix, mel_spectrogram, power_contour,
                  read_config_file, save_mel_matrix)
from .evaluation import (DEFAULT_DELTAS, dynamics_histograms, load_items, transform_precision, write_histograms,
                         write_precision)
from .manifest import ManifestError, ManifestRow, read_manifest
from .modelio import FingerprintMismatch, ModelFormatError, file_fingerprint, read_container
from .recording import DegenerateContourError, UnknownGroupError, adaptive_factor
from .synth import SynthSpec, synthesize_corpus
from .trainer import TrainConfig, TrainingError, load_clip, train_estimator

log = logging.getLogger("voxlevel")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_FINGERPRINT, EXIT_INVALID, EXIT_MODEL = 0, 1, 2, 3, 4, 5, 6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- config

_SECTIONS = {
    "mel": {f.name for f in fields(MelConfig)},
    "train": {f.name for f in fields(TrainConfig)},
    "synth": {f.name for f in fields(SynthSpec)} - {"dynamics"},
    "ae": {"bottleneck", "conditioned"},
}


def merge_config(args, flag_values: dict) -> dict:
    """Defaults, then the config file, then flags; returns per-section dicts."""
    merged = {sec: {} for sec in _SECTIONS}
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for source in (file_values, {k: v for k, v in flag_values.items() if v is not None}):
        for key, value in source.items():
            targets = [sec for sec, names in _SECTIONS.items() if key in names]
            if not targets:
                raise ValueError(f"unknown config key {key!r}")
            for sec in targets:
                merged[sec][key] = value
    return merged


def _mel_config(section: dict) -> MelConfig:
    return MelConfig.from_dict(section)


def _train_config(section: dict, preset: str = "desk", base: TrainConfig | None = None) -> TrainConfig:
    if base is None:
        base = TrainConfig.desk() if preset == "desk" else TrainConfig()
    parsed = TrainConfig.from_dict(section)
    cfg = TrainConfig(**{k: getattr(parsed if k in section else base, k) for k in base.to_dict()})
    cfg.validate()
    return cfg


def _synth_spec(section: dict) -> SynthSpec:
    kw = {}
    for k, v in section.items():
        default = getattr(SynthSpec(), k)
        if isinstance(default, tuple):
            parts = [p.strip() for p in str(v).split(",") if p.strip()] if isinstance(v, str) else list(v)
            kw[k] = tuple(type(default[0])(p) for p in parts)
        elif isinstance(default, str):
            kw[k] = str(v)
        else:
            kw[k] = type(default)(v)
    spec = SynthSpec(**kw)
    spec.validate()
    return spec


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_run_record(out: Path, command: str, args, config: dict, models: dict, outputs: list[Path]) -> None:
    record = {
        "tool": "voxlevel",
        "version": __version__,
        "command": command,
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", 1),
        "config": _jsonable(config),
        "inputs": {"manifest": getattr(args, "manifest", None),
                   "manifest_sha256": file_fingerprint(args.manifest) if getattr(args, "manifest", None) else None},
        "models": {name: {"path": str(p), "sha256": file_fingerprint(p)} for name, p in models.items()},
        "outputs": {p.relative_to(out).as_posix(): file_fingerprint(p) for p in sorted(outputs) if p.is_file()},
    }
    (out / "run.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


def _require_file(path, what):
    if path is None:
        raise UsageError(f"{what} is required")
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} {path} not found")
    return Path(path)


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_manifest(args, *required):
    m = read_manifest(_require_file(args.manifest, "--manifest"))
    m.require(*required)
    m.check_files()
    return m


def _load_model(path):
    header, _ = read_container(path)
    if header.get("kind") == "estimator":
        return est.load(path)
    if header.get("kind") == "autoencoder":
        return aem.load(path)
    raise ModelFormatError(f"{path}: unknown model kind {header.get('kind')!r}")


def _load_estimator(path, flag="--model") -> est.EstimatorModel:
    model = _load_model(_require_file(path, flag))
    if not isinstance(model, est.EstimatorModel):
        raise ModelFormatError(f"{path}: {flag} must be a level estimator, got {model.kind}")
    return model


def _load_ae(path, level_model) -> aem.AEModel:
    ae = _load_model(_require_file(path, "--model"))
    if not isinstance(ae, aem.AEModel):
        raise ModelFormatError(f"{path}: --model must be an auto-encoder, got {ae.kind}")
    if ae.mel_config.fingerprint() != level_model.mel_config.fingerprint():
        raise FingerprintMismatch(ae.mel_config.fingerprint(), level_model.mel_config.fingerprint())
    if ae.level_model_id and ae.level_model_id != aem.model_id(level_model):
        raise FingerprintMismatch(ae.level_model_id, aem.model_id(level_model), "level model")
    return ae


# ---------------------------------------------------------------- commands


def cmd_synth_data(args):
    out = _out_dir(args)
    cfg = merge_config(args, {"seed": args.seed, "n_speakers": args.speakers,
                              "files_per_speaker": args.files_per_speaker, "gain_mode": args.gain_mode,
                              "duration_s": args.duration})
    spec = _synth_spec(cfg["synth"])
    manifest = synthesize_corpus(spec, out, threads=args.threads)
    outputs = [out / "manifest.jsonl"] + [manifest.resolve(r.path) for r in manifest]
    write_run_record(out, "synth-data", args, {"synth": asdict(spec)}, {}, outputs)
    print(out / "manifest.jsonl")


def cmd_train_estimator(args):
    out = _out_dir(args)
    cfg = merge_config(args, {"seed": args.seed, "max_updates": args.updates, "batch_size": args.batch_size})
    mel_cfg = _mel_config(cfg["mel"])
    tcfg = _train_config(cfg["train"], args.preset)
    manifest = _read_manifest(args, *(("group",) if args.variant == "le" else ()))
    result = train_estimator(manifest, args.variant, tcfg, mel_cfg, out_dir=out, threads=args.threads)
    est.save(result.model, out / "model.vxl")
    write_run_record(out, "train-estimator", args,
                     {"variant": args.variant, "mel": mel_cfg.to_dict(), "train": tcfg.to_dict()},
                     {}, [out / "model.vxl", out / "history.csv"])
    print(out / "model.vxl")


def cmd_train_ae(args):
    out = _out_dir(args)
    cfg = merge_config(args, {"seed": args.seed, "max_updates": args.updates, "batch_size": args.batch_size,
                              "bottleneck": args.bottleneck})
    level_model = _load_estimator(args.level_model, "--level-model")
    tcfg = _train_config(cfg["train"], args.preset, base=aem.ae_train_config() if args.preset == "desk" else None)
    manifest = _read_manifest(args, "f0_path", "voicing_path")
    items = load_items(manifest, level_model.mel_config, need=("f0_path", "voicing_path"))
    bottleneck = int(cfg["ae"].get("bottleneck", 8))
    conditioned = not args.unconditioned
    result = aem.train_ae(items, level_model, tcfg, bottleneck, conditioned, out_dir=out)
    aem.save(result.model, out / "ae.vxl")
    write_run_record(out, "train-ae", args, {"train": tcfg.to_dict(), "bottleneck": bottleneck,
                                              "conditioned": conditioned},
                     {"level_model": Path(args.level_model)}, [out / "ae.vxl", out / "ae_history.csv"])
    print(out / "ae.vxl")


def _inputs(args):
    """(rows, manifest-or-None) for commands accepting --manifest or WAV paths."""
    if args.manifest:
        m = _read_manifest(args)
        return m.rows, m
    if not args.wav:
        raise UsageError("give --manifest or one or more WAV files")
    for w in args.wav:
        _require_file(w, "WAV file")
    return [ManifestRow(path=str(Path(w))) for w in args.wav], None


def _estimate_rows(args, model, rows, manifest, out: Path, want_factor: bool):
    lines = ["path,variant,group,factor,factor_db"]
    written = []
    (out / "levels").mkdir(exist_ok=True)
    for row in rows:
        path = manifest.resolve(row.path) if manifest else Path(row.path)
        clip = load_clip(path, model.mel_config)
        mel = mel_spectrogram(clip, model.mel_config)
        q = model.predict(mel)
        p = power_contour(clip, model.mel_config, model.mel_config.power_mode)
        group = getattr(args, "group", None) or row.group
        if model.variant == "le" and group is not None:
            factor = model.factors.factor(group) * model.power_ref
            variant = "le"
        else:
            try:
                factor = adaptive_factor(p / model.power_ref, q) * model.power_ref
            except DegenerateContourError:
                factor = float("nan")
            variant = "ad"
        level = factor * q
        stem = Path(row.path).with_suffix("").as_posix().replace("/", "__")
        dest = out / "levels" / f"{stem}.csv"
        t = np.arange(q.size) * model.mel_config.hop_s
        body = ["time_s,q,level,level_db"]
        body += [f"{a!r},{b!r},{c!r},{float(10 * np.log10(c))!r}" for a, b, c in zip(t.tolist(), q.tolist(), level.tolist())]
        dest.write_text("\n".join(body) + "\n")
        written.append(dest)
        lines.append(f"{row.path},{variant},{group or ''},{float(factor)!r},{float(10 * np.log10(factor))!r}")
    if want_factor:
        (out / "factors.csv").write_text("\n".join(lines) + "\n")
        written.append(out / "factors.csv")
    return written


def cmd_estimate(args):
    out = _out_dir(args)
    model = _load_estimator(args.model)
    rows, manifest = _inputs(args)
    written = _estimate_rows(args, model, rows, manifest, out, want_factor=False)
    write_run_record(out, "estimate", args, {"mel": model.mel_config.to_dict()}, {"model": Path(args.model)}, written)


def cmd_calibrate(args):
    out = _out_dir(args)
    model = _load_estimator(args.model)
    if model.variant == "le" and args.group is not None and args.group not in model.factors:
        raise UnknownGroupError(args.group, model.factors.groups)
    rows, manifest = _inputs(args)
    if model.variant == "le":
        for row in rows:
            g = args.group or row.group
            if g is None:
                raise ManifestError(f"{row.path}: Le calibration needs a group id (--group or manifest 'group')")
            model.factors.param(g)
    written = _estimate_rows(args, model, rows, manifest, out, want_factor=True)
    write_run_record(out, "calibrate", args, {"mel": model.mel_config.to_dict()}, {"model": Path(args.model)}, written)


def _deltas(args):
    if args.delta_db is None:
        return list(DEFAULT_DELTAS)
    return [float(d) for d in args.delta_db]


def cmd_transform(args):
    out = _out_dir(args)
    level_model = _load_estimator(args.level_model, "--level-model")
    ae = _load_ae(args.model, level_model)
    if args.delta_db is None:
        raise UsageError("--delta-db is required")
    deltas = _deltas(args)
    for d in deltas:
        if abs(d) > aem.MAX_DELTA_DB:
            raise ValueError(f"delta_db {d} outside [-{aem.MAX_DELTA_DB}, {aem.MAX_DELTA_DB}]")
    manifest = _read_manifest(args, "f0_path", "voicing_path")
    items = load_items(manifest, level_model.mel_config, need=("f0_path", "voicing_path"))
    (out / "mels").mkdir(exist_ok=True)
    rows, written = [], []
    suffix = ".csv" if args.format == "csv" else ".mel"
    for it in items:
        cond = ae.conditioning(level_model, it)
        for d in deltas:
            values = ae.transform(it.mel, cond, d)
            stem = Path(it.path).with_suffix("").as_posix().replace("/", "__")
            dest = out / "mels" / f"{stem}_d{d:+g}{suffix}"
            save_mel_matrix(dest, MelSpectrogram(values, level_model.mel_config.hop_s))
            rows.append({"path": it.path, "mel_path": dest.relative_to(out).as_posix(), "delta_db": d})
            written.append(dest)
    (out / "transformed.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    written.append(out / "transformed.jsonl")
    write_run_record(out, "transform", args, {"deltas": deltas, "format": args.format},
                     {"model": Path(args.model), "level_model": Path(args.level_model)}, written)


def cmd_eval_hist(args):
    out = _out_dir(args)
    model = _load_estimator(args.model)
    manifest = _read_manifest(args, "vowel", "dynamics", "voicing_path")
    items = load_items(manifest, model.mel_config, need=("vowel", "dynamics", "voicing_path"))
    hs = dynamics_histograms(model, items, offset_db=args.offset_db)
    write_histograms(hs, out)
    files = [out / "histograms.csv", out / "histograms.dat", out / "histograms.json"]
    write_run_record(out, "eval-hist", args, {"offset_db": hs.offset_db, "sigma_db": hs.sigma_db},
                     {"model": Path(args.model)}, files)


class _Precomputed:
    """Replays mels written by ``transform`` through the precision metric."""

    def __init__(self, root: Path):
        index = _require_file(root / "transformed.jsonl", "transformed index")
        self.root = root
        self.table = {}
        for line in index.read_text().splitlines():
            if line.strip():
                r = json.loads(line)
                self.table[(r["path"], float(r["delta_db"]))] = r["mel_path"]

    def conditioning(self, level_model, item):
        return item.path

    def transform(self, mel, path, delta):
        key = (path, float(delta))
        if key not in self.table:
            raise ManifestError(f"no transformed mel for {path} at {delta:+g} dB")
        return load_mel_matrix(self.root / self.table[key]).values

    def deltas(self):
        return sorted({d for _, d in self.table})


def cmd_eval_precision(args):
    out = _out_dir(args)
    level_model = _load_estimator(args.level_model, "--level-model")
    manifest = _read_manifest(args, "voicing_path")
    if args.transformed:
        source = _Precomputed(Path(args.transformed))
        deltas = _deltas(args) if args.delta_db is not None else source.deltas()
        items = load_items(manifest, level_model.mel_config, need=("voicing_path",))
        models = {"level_model": Path(args.level_model)}
    else:
        source = _load_ae(args.model, level_model)
        deltas = _deltas(args)
        items = load_items(manifest, level_model.mel_config, need=("f0_path", "voicing_path"))
        models = {"model": Path(args.model), "level_model": Path(args.level_model)}
    report = transform_precision(source, level_model, items, deltas)
    write_precision(report, out)
    write_run_record(out, "eval-precision", args, {"deltas": deltas}, models,
                     [out / "precision.csv", out / "precision.json"])
    for r in report.rows():
        print(f"{r['delta_db']:+6.1f} dB  error {r['mean_abs_error_db']:.3f} dB  shift {r['mean_shift_db']:+.3f} dB")


def cmd_inspect_model(args):
    path = _require_file(args.model, "--model")
    header, tensors = read_container(path)
    model = _load_model(path)
    info = {
        "kind": header.get("kind"),
        "format_version": header.get("format_version"),
        "sha256": file_fingerprint(path),
        "mel_fingerprint": header.get("mel_fingerprint"),
        "mel_config": header.get("mel_config"),
        "architecture": header.get("architecture"),
        "parameters": int(sum(t.size for n, t in tensors.items() if not n.startswith("factors/"))),
    }
    if isinstance(model, est.EstimatorModel):
        info["variant"] = model.variant
        info["receptive_field"] = model.receptive_field
        info["power_ref"] = model.power_ref
        if model.factors is not None:
            info["factors"] = {g: model.factors.factor(g) for g in model.factors.groups}
    else:
        info["level_model_id"] = model.level_model_id
        info["stats"] = vars(model.stats)
    print(json.dumps(info, indent=1, sort_keys=True))


def cmd_check(args):
    from .checks import run_all, write_report

    results = run_all(seed=args.seed or 0, slow=args.slow)
    if args.out:
        write_report(results, _out_dir(args) / "checks.csv")
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  actual={r.actual:.3g}  "
              f"expected={r.expected:.3g}  tol={r.tolerance:.3g}")
    if not all(r.passed for r in results):
        raise TrainingError(f"{sum(not r.passed for r in results)} property checks failed")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="voxlevel", description="Voice-level estimation and transformation from uncalibrated audio.")
    p.add_argument("--version", action="version", version=f"voxlevel {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, manifest=True, seed=True):
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--config", help="key = value config file (flags override it)")
        sp.add_argument("--threads", type=int, default=1, help="worker cap; 1 is fully serial")
        if manifest:
            sp.add_argument("--manifest", help="JSON-lines corpus manifest")
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth-data", help="generate a synthetic corpus with ground truth")
    common(sp, manifest=False)
    sp.add_argument("--speakers", type=int)
    sp.add_argument("--files-per-speaker", type=int)
    sp.add_argument("--gain-mode", choices=["file", "speaker"])
    sp.add_argument("--duration", type=float, help="seconds per file")
    sp.set_defaults(func=cmd_synth_data)

    for name, func, extra in (("train-estimator", cmd_train_estimator, "est"), ("train-ae", cmd_train_ae, "ae")):
        sp = sub.add_parser(name, help=f"train the {'level estimator' if extra == 'est' else 'auto-encoder'}")
        common(sp)
        sp.add_argument("--updates", type=int, help="number of optimiser updates")
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--preset", choices=["desk", "full"], default="desk")
        if extra == "est":
            sp.add_argument("--variant", choices=["le", "ad"], required=True)
        else:
            sp.add_argument("--level-model", help="trained estimator (frozen)")
            sp.add_argument("--bottleneck", type=int)
            sp.add_argument("--unconditioned", action="store_true", help="drop the conditioning channels")
        sp.set_defaults(func=func)

    for name, func in (("estimate", cmd_estimate), ("calibrate", cmd_calibrate)):
        sp = sub.add_parser(name, help="voice-level contours" if name == "estimate" else "recording factors")
        common(sp, seed=False)
        sp.add_argument("--model", help="estimator model file")
        sp.add_argument("--group", help="group id for Le calibration")
        sp.add_argument("wav", nargs="*", help="WAV files (alternative to --manifest)")
        sp.set_defaults(func=func)

    sp = sub.add_parser("transform", help="shift the voice level of mels with the auto-encoder")
    common(sp, seed=False)
    sp.add_argument("--model", help="auto-encoder model file")
    sp.add_argument("--level-model", help="estimator used for conditioning")
    sp.add_argument("--delta-db", type=float, action="append", help="level shift in dB (repeatable)")
    sp.add_argument("--format", choices=["raw", "csv"], default="raw")
    sp.set_defaults(func=cmd_transform)

    sp = sub.add_parser("eval-hist", help="dynamics histograms")
    common(sp, seed=False)
    sp.add_argument("--model", help="estimator model file")
    sp.add_argument("--offset-db", type=float, help="fixed dB offset (default: fit from ground truth)")
    sp.set_defaults(func=cmd_eval_hist)

    sp = sub.add_parser("eval-precision", help="transformation precision")
    common(sp, seed=False)
    sp.add_argument("--model", help="auto-encoder model file")
    sp.add_argument("--level-model", help="estimator used as the level meter")
    sp.add_argument("--delta-db", type=float, action="append", help="delta to evaluate (repeatable)")
    sp.add_argument("--transformed", help="output directory of a previous transform run")
    sp.set_defaults(func=cmd_eval_precision)

    sp = sub.add_parser("inspect-model", help="print a model file's header")
    sp.add_argument("--model", help="model file")
    sp.set_defaults(func=cmd_inspect_model)

    sp = sub.add_parser("check", help="run the property suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--slow", action="store_true", help="include training-based checks")
    sp.add_argument("--out", help="directory for checks.csv")
    sp.set_defaults(func=cmd_check)
    return p


def _exit_code(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, UsageError):
        return EXIT_USAGE, "usage"
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING, "missing_file"
    if isinstance(exc, FingerprintMismatch):
        return EXIT_FINGERPRINT, "fingerprint_mismatch"
    if isinstance(exc, ModelFormatError):
        return EXIT_MODEL, "model_format"
    if isinstance(exc, (ManifestError, ValueError, KeyError, AudioError)):
        return EXIT_INVALID, "invalid_input"
    return EXIT_ERROR, "error"


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("VOXLEVEL_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        code, kind = _exit_code(exc)
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": message}) + "\n")
        log.debug("traceback", exc_info=True)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command line: ``hivestate {extract,run,synth,inspect}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation
from .audio_io import (AudioError, ClipEntry, DatasetManifest, HiveProfile, ManifestError,
                       load_manifest, save_manifest, save_wav, synth_hive_clip)
from .cache import CacheFormatError, FeatureCache, read_feature
from .cnn import NumericalError
from .evaluation import EXPERIMENTS, ExperimentConfig, Scheme, StageError
from .features import as_matrix

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("hivestate")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_KINDS = ("mfcc", "hht")
ALL_KINDS = ("mfcc", "mel", "logmel", "hht")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    manifest: str | None = None
    experiments: list[str] = field(default_factory=list)
    scheme: str = Scheme.RANDOM.value
    out_dir: str = "results"
    seed: int = 0
    cache_dir: str | None = None
    workers: int = 1

    def validate(self) -> None:
        if not self.manifest:
            raise UsageError("--manifest is required")
        if not self.experiments:
            raise UsageError("give --experiment NAME or --all")
        bad = [e for e in self.experiments if e not in EXPERIMENTS]
        if bad:
            raise UsageError(f"unknown experiment(s) {', '.join(bad)}; choose from {', '.join(EXPERIMENTS)}")
        try:
            Scheme(self.scheme)
        except ValueError:
            raise UsageError(f"unknown scheme {self.scheme!r}") from None
        if self.workers < 1:
            raise UsageError("--workers must be >= 1")


def _load_toml(path: str) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _default_cache() -> str | None:
    return os.environ.get("HIVE_CACHE_DIR")


# -- extract ---------------------------------------------------------------------

def _extract_job(args):
    path = args[0]
    try:
        return path, evaluation._svm_vectors_job(args), None
    except Exception as exc:  # isolate per-file failures
        return path, None, f"{type(exc).__name__}: {exc}"


def cmd_extract(manifest_path: str, cache_dir: str, kinds, workers: int = 1) -> dict:
    """Fill the cache with one file per (clip, kind); returns a report dict."""
    bad = [k for k in kinds if k not in ALL_KINDS]
    if bad:
        raise UsageError(f"unknown feature kind(s) {', '.join(bad)}")
    manifest = load_manifest(manifest_path, check_files=False)
    cache = FeatureCache(cache_dir)
    report = {"written": 0, "skipped": 0, "failed": []}
    todo = []
    for e in manifest.entries:
        missing = [k for k in kinds
                   if not cache.is_fresh(e.path, evaluation.svm_kind_name(k), evaluation.FEATURE_VERSION)]
        report["skipped"] += len(kinds) - len(missing)
        if missing:
            todo.append((e.path, tuple(missing)))
    for path, vectors, err in evaluation._map(_extract_job, todo, workers):
        if err is not None:
            report["failed"].append((path, err))
            log.error("%s: %s", path, err)
            continue
        for k, v in vectors.items():
            cache.store(path, evaluation.svm_kind_name(k), evaluation.FEATURE_VERSION,
                        as_matrix(v, evaluation._KIND_BANDS[k]))
            report["written"] += 1
    cache.flush()
    return report


# -- run -------------------------------------------------------------------------

def cmd_run(cfg: RunConfig) -> list[evaluation.AucResult]:
    cfg.validate()
    manifest = load_manifest(cfg.manifest, check_files=False)
    results = []
    for name in cfg.experiments:
        exp = ExperimentConfig(name, Scheme(cfg.scheme), cfg.seed)
        log.info("running %s (%s)", name, cfg.scheme)
        res = evaluation.run_experiment(exp, manifest, cfg.out_dir, cfg.cache_dir, cfg.workers)
        folds = ", ".join(f"fold {f['fold']}: {f['test_auc']:.3f}" for f in res.fold_results)
        print(f"{name:<24} {cfg.scheme:<17} mean test AUC {res.mean_test_auc:.3f}  ({folds})")
        results.append(res)
    return results


# -- synth -----------------------------------------------------------------------

_PROFILE_FIELDS = {f for f in HiveProfile.__dataclass_fields__}


def cmd_synth(spec_path: str, out_dir: str, seed: int = 0) -> DatasetManifest:
    """Write synthetic hive recordings plus ``manifest.csv`` from a TOML spec."""
    spec = _load_toml(spec_path)
    hives = spec.get("hive", [])
    if not hives:
        raise UsageError(f"{spec_path}: no [[hive]] tables")
    duration = float(spec.get("duration_s", 600))
    rate = int(spec.get("rate", 32000))
    per_state = int(spec.get("clips_per_state", 6))
    encoding = spec.get("encoding", "pcm16")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for h_idx, h in enumerate(hives):
        hive_id = str(h.get("id", f"hive{h_idx + 1}"))
        profile = HiveProfile(**{k: (tuple(v) if isinstance(v, list) else v)
                                 for k, v in h.items() if k in _PROFILE_FIELDS})
        for queen in (True, False):
            for k in range(per_state):
                clip_seed = int(np.random.SeedSequence([seed, h_idx, int(queen), k]).generate_state(1)[0])
                clip = synth_hive_clip(profile, queen, duration, rate, clip_seed)
                name = f"{hive_id}_{'queen' if queen else 'noqueen'}_{k:03d}.wav"
                save_wav(out / name, clip, encoding)
                entries.append(ClipEntry(str(out / name), hive_id, queen, duration))
    manifest = DatasetManifest(entries)
    save_manifest(manifest, out / "manifest.csv")
    return manifest


# -- inspect ---------------------------------------------------------------------

def cmd_inspect(path: str, stream=None) -> None:
    stream = stream or sys.stdout
    m = read_feature(path)
    stream.write(f"# band_kind={m.band_kind.name.lower()} rows={m.n_frames} cols={m.n_bands} "
                 f"frame_hop_s={m.frame_hop_s!r}\n")
    for row in m.data:
        stream.write(",".join(repr(float(v)) for v in row) + "\n")


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hivestate", description="Beehive queen-state recognition from audio.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ex = sub.add_parser("extract", help="populate the feature cache")
    ex.add_argument("--manifest", required=True)
    ex.add_argument("--cache-dir", default=_default_cache())
    ex.add_argument("--kind", action="append", choices=ALL_KINDS,
                    help="feature kind (repeatable; default mfcc and hht)")
    ex.add_argument("--workers", type=int, default=1)

    run = sub.add_parser("run", help="run named experiments")
    run.add_argument("--config", help="TOML file with defaults for the flags below")
    run.add_argument("--manifest")
    run.add_argument("--experiment", action="append", default=None)
    run.add_argument("--all", action="store_true")
    run.add_argument("--scheme", choices=[s.value for s in Scheme])
    run.add_argument("--seed", type=int)
    run.add_argument("--out-dir")
    run.add_argument("--cache-dir")
    run.add_argument("--workers", type=int)

    sy = sub.add_parser("synth", help="generate a synthetic dataset")
    sy.add_argument("--spec", required=True, help="TOML dataset description")
    sy.add_argument("--out-dir", required=True)
    sy.add_argument("--seed", type=int, default=0)

    ins = sub.add_parser("inspect", help="print a cache file as CSV")
    ins.add_argument("path")
    return p


def _run_config(args) -> RunConfig:
    base = _load_toml(args.config) if args.config else {}
    cfg = RunConfig(
        manifest=base.get("manifest"),
        experiments=list(base.get("experiments", [])),
        scheme=base.get("scheme", Scheme.RANDOM.value),
        out_dir=base.get("out_dir", "results"),
        seed=int(base.get("seed", 0)),
        cache_dir=base.get("cache_dir", _default_cache()),
        workers=int(base.get("workers", 1)),
    )
    for name in ("manifest", "scheme", "seed", "out_dir", "cache_dir", "workers"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if args.all:
        cfg.experiments = list(EXPERIMENTS)
    elif args.experiment:
        cfg.experiments = args.experiment
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "extract":
            if not args.cache_dir:
                raise UsageError("--cache-dir (or HIVE_CACHE_DIR) is required")
            report = cmd_extract(args.manifest, args.cache_dir, args.kind or DEFAULT_KINDS, args.workers)
            print(f"written {report['written']}, up to date {report['skipped']}, failed {len(report['failed'])}")
            for path, err in report["failed"]:
                print(f"FAILED {path}: {err}", file=sys.stderr)
            return EXIT_DATA if report["failed"] else EXIT_OK
        if args.command == "run":
            cmd_run(_run_config(args))
        elif args.command == "synth":
            m = cmd_synth(args.spec, args.out_dir, args.seed)
            print(f"wrote {len(m)} clips and {Path(args.out_dir) / 'manifest.csv'}")
        elif args.command == "inspect":
            cmd_inspect(args.path)
        return EXIT_OK
    except UsageError as exc:
        print(f"hivestate: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"hivestate: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ManifestError, AudioError, StageError, CacheFormatError, FileNotFoundError,
            tomllib.TOMLDecodeError) as exc:
        print(f"hivestate: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Dataset splits, AUC, and the two-fold experiment runner."""

from __future__ import annotations

import csv
import enum
import json
import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.io import wavfile
from scipy.stats import rankdata

from . import cnn, svm
from .audio_io import AudioClip, DatasetManifest, load_wav, resample, segment
from .cache import FeatureCache
from .features import (CNN_RATE, Provenance, as_matrix, cnn_stack, svm_feature, svm_vector)
from .spectral import BandKind, FeatureMatrix, ZMode, augment_shifts, pitch_shift, zscore_apply, zscore_fit


SEGMENT_SECONDS = 60.0
AUG_VERSIONS = 3
FEATURE_VERSION = "2"


class Scheme(str, enum.Enum):
    RANDOM = "random"
    HIVE_INDEPENDENT = "hive-independent"


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names which one."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    label: int
    hive_id: str
    clip_id: str


@dataclass(frozen=True)
class SplitPlan:
    scheme: Scheme
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    fold_id: int = 1
    seed: int = 0

    def check(self, n: int, hives: Sequence[str] | None = None) -> None:
        """Assert disjointness, full coverage and (hive-independent) no hive leakage."""
        parts = [set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())]
        assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]), "split parts overlap"
        assert parts[0] | parts[1] | parts[2] == set(range(n)), "split does not cover the dataset"
        if self.scheme is Scheme.HIVE_INDEPENDENT and hives is not None:
            seen = {hives[i] for i in np.concatenate([self.train, self.val])}
            assert not seen & {hives[i] for i in self.test}, "hive leakage between train and test"


# -- splitting -------------------------------------------------------------------

def _largest_remainder(total: int, weights: np.ndarray, minimum: int = 1) -> np.ndarray:
    raw = total * weights / weights.sum()
    counts = np.maximum(np.floor(raw).astype(int), minimum)
    order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    k = 0
    while counts.sum() < total:
        counts[order[k % len(order)]] += 1
        k += 1
    while counts.sum() > total:
        i = int(np.argmax(counts))
        counts[i] -= 1
    return counts


def random_split(labels: Sequence[int], test_frac: float = 0.05, needs_val: bool = False,
                 seed: int = 0, fold_id: int = 1) -> SplitPlan:
    """Stratified random split.

    The test set holds ceil(test_frac * n) samples. Without validation the rest
    is training data; with validation the rest is halved between the two.
    """
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError("random split needs both classes")
    need = 3 if needs_val else 2
    if counts.min() < need:
        raise ValueError(f"dataset too small to stratify: smallest class has {counts.min()} samples")
    rng = np.random.default_rng(seed)
    n_test = max(math.ceil(test_frac * len(y)), len(classes))
    per_class = _largest_remainder(n_test, counts.astype(float))
    per_class = np.minimum(per_class, counts - (need - 1))

    test, rest_by_class = [], []
    for cls, k in zip(classes, per_class):
        idx = rng.permutation(np.flatnonzero(y == cls))
        test.extend(idx[:k].tolist())
        rest_by_class.append(idx[k:])
    if not needs_val:
        train = np.concatenate(rest_by_class)
        val = np.array([], dtype=int)
    else:
        # alternate within each class (parity carried across), so both halves stay stratified
        chain = np.concatenate(rest_by_class)
        train = chain[0::2]
        val = chain[1::2]
    return SplitPlan(Scheme.RANDOM, np.sort(train), np.sort(val), np.sort(np.array(test, dtype=int)),
                     fold_id, seed)


def hive_independent_split(hives: Sequence[str], test_hives: Iterable[str], needs_val: bool = False,
                           seed: int = 0, fold_id: int = 1, val_frac: float = 0.1) -> SplitPlan:
    """Test on every sample of ``test_hives`` and train on the others; with
    validation, a seeded ceil(10%) of the training samples is held out."""
    hives = np.asarray(hives)
    known = set(hives.tolist())
    test_hives = set(test_hives)
    if len(known) < 2:
        raise ValueError("hive-independent split needs at least two hives")
    unknown = test_hives - known
    if unknown:
        raise ValueError(f"unknown hive id(s): {sorted(unknown)}")
    if not test_hives:
        raise ValueError("test_hives must not be empty")
    if test_hives == known:
        raise ValueError("cannot place every hive in the test set")
    in_test = np.isin(hives, list(test_hives))
    test = np.flatnonzero(in_test)
    train = np.flatnonzero(~in_test)
    val = np.array([], dtype=int)
    if needs_val:
        rng = np.random.default_rng(seed)
        k = math.ceil(val_frac * len(train))
        pick = rng.permutation(len(train))[:k]
        val = np.sort(train[pick])
        train = np.setdiff1d(train, val)
    return SplitPlan(Scheme.HIVE_INDEPENDENT, train, val, test, fold_id, seed)


def hive_folds(hives: Sequence[str]) -> list[set[str]]:
    """Test-hive sets for the two folds: the sorted hive list is halved and
    each half is tested once."""
    uniq = sorted(set(hives))
    if len(uniq) < 2:
        raise ValueError("need at least two hives")
    half = len(uniq) // 2
    first, second = set(uniq[:half]), set(uniq[half:])
    return [second, first]


# -- metric ------------------------------------------------------------------------

def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """ROC AUC via the Mann-Whitney statistic; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


# -- experiments -------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    classifier: str  # "svm" | "cnn"
    provenance: Provenance | None = None  # SVM input
    kind: str | None = None  # CNN input: mfcc | mel | logmel


EXPERIMENTS: dict[str, ExperimentSpec] = {
    "SVM_MFCCs20": ExperimentSpec("svm", Provenance.MFCC20),
    "SVM_HHTdwns20": ExperimentSpec("svm", Provenance.HHT20),
    "SVM_MFCCs20_HHTdwns20": ExperimentSpec("svm", Provenance.MFCC20_HHT20),
    "SVM_MEL120dwns20": ExperimentSpec("svm", Provenance.MEL20),
    "SVM_LOG_MEL120dwns20": ExperimentSpec("svm", Provenance.LOGMEL20),
    "CNN_MFCCs20": ExperimentSpec("cnn", kind="mfcc"),
    "CNN_MEL120": ExperimentSpec("cnn", kind="mel"),
    "CNN_LOG_MEL120": ExperimentSpec("cnn", kind="logmel"),
}

_SVM_KINDS = {
    Provenance.MFCC20: ("mfcc",),
    Provenance.HHT20: ("hht",),
    Provenance.MFCC20_HHT20: ("mfcc", "hht"),
    Provenance.MEL20: ("mel",),
    Provenance.LOGMEL20: ("logmel",),
}

_KIND_BANDS = {"mfcc": BandKind.MFCC, "mel": BandKind.MEL, "logmel": BandKind.MEL, "hht": BandKind.HHT_BAND}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    scheme: Scheme = Scheme.RANDOM
    seed: int = 0
    svm: svm.SvmConfig = field(default_factory=svm.SvmConfig)
    train: cnn.TrainConfig = field(default_factory=cnn.TrainConfig)
    arch: cnn.CnnArchitecture = field(default_factory=cnn.CnnArchitecture)
    segment_seconds: float = SEGMENT_SECONDS
    aug_versions: int = AUG_VERSIONS

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.name!r}; choose from {', '.join(EXPERIMENTS)}")
        object.__setattr__(self, "scheme", Scheme(self.scheme))

    @property
    def spec(self) -> ExperimentSpec:
        return EXPERIMENTS[self.name]

    def fold_seeds(self) -> list[int]:
        return [self.seed, self.seed + 1]


@dataclass
class AucResult:
    experiment: str
    scheme: Scheme
    fold_results: list[dict]
    seeds: list[int]
    details: dict = field(default_factory=dict)

    @property
    def mean_test_auc(self) -> float:
        return float(np.mean([f["test_auc"] for f in self.fold_results]))

    @property
    def mean_train_auc(self) -> float | None:
        vals = [f["train_auc"] for f in self.fold_results if f.get("train_auc") is not None]
        return float(np.mean(vals)) if vals else None

    def to_json(self, timestamp: str | None = None) -> dict:
        out = {
            "experiment": self.experiment,
            "scheme": self.scheme.value,
            "fold_results": self.fold_results,
            "mean_test_auc": self.mean_test_auc,
            "seeds": self.seeds,
            "timestamp": timestamp or datetime.now(timezone.utc).isoformat(),
        }
        if self.mean_train_auc is not None:
            out["mean_train_auc"] = self.mean_train_auc
        out.update(self.details)
        return out


def write_results(result: AucResult, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{result.experiment}_{result.scheme.value}"
    json_path, csv_path = out_dir / f"{stem}.json", out_dir / f"{stem}.csv"
    json_path.write_text(json.dumps(result.to_json(), indent=2))
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment", "scheme", "fold", "test_auc", "train_auc"])
        for f in result.fold_results:
            w.writerow([result.experiment, result.scheme.value, f["fold"], f["test_auc"],
                        "" if f.get("train_auc") is None else f["train_auc"]])
        w.writerow([result.experiment, result.scheme.value, "mean", result.mean_test_auc,
                    "" if result.mean_train_auc is None else result.mean_train_auc])
    return json_path, csv_path


def make_plans(cfg: ExperimentConfig, labels: Sequence[int], hives: Sequence[str]) -> list[SplitPlan]:
    needs_val = cfg.spec.classifier == "cnn"
    seeds = cfg.fold_seeds()
    if cfg.scheme is Scheme.RANDOM:
        plans = [random_split(labels, 0.05, needs_val, s, fold) for fold, s in enumerate(seeds, start=1)]
    else:
        plans = [hive_independent_split(hives, test, needs_val, s, fold)
                 for fold, (s, test) in enumerate(zip(seeds, hive_folds(hives)), start=1)]
    for p in plans:
        p.check(len(labels), hives)
    return plans


# -- feature extraction with optional cache ----------------------------------------

def _map(fn: Callable, items: list, workers: int) -> list:
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def _usable(cache: FeatureCache | None, path: str, key: str) -> bool:
    """Fresh entry, or any cached file when the audio itself is gone."""
    if cache is None:
        return False
    if cache.is_fresh(path, key, FEATURE_VERSION):
        return True
    return not os.path.isfile(path) and cache.has_file(path, key)


def svm_kind_name(kind: str) -> str:
    return f"svm-{kind}"


def _svm_vectors_job(args) -> dict[str, np.ndarray]:
    path, kinds = args
    clip = load_wav(path)
    return {k: svm_vector(clip, k) for k in kinds}


def svm_vectors(manifest: DatasetManifest, kinds: Sequence[str], cache: FeatureCache | None = None,
                workers: int = 1) -> list[dict[str, np.ndarray]]:
    """Per-entry time-aggregated vectors for each requested kind."""
    out: list[dict[str, np.ndarray]] = [{} for _ in manifest.entries]
    todo = []
    for i, e in enumerate(manifest.entries):
        missing = []
        for k in kinds:
            if _usable(cache, e.path, svm_kind_name(k)):
                out[i][k] = cache.load(e.path, svm_kind_name(k)).data[0]
            else:
                missing.append(k)
        if missing:
            if not os.path.isfile(e.path):
                raise StageError("features", f"no cached features and no audio for {e.path}")
            todo.append((i, e.path, tuple(missing)))
    results = _map(_svm_vectors_job, [(p, ks) for _, p, ks in todo], workers)
    for (i, path, _), vecs in zip(todo, results):
        for k, v in vecs.items():
            m = as_matrix(v, _KIND_BANDS[k])
            if cache is not None:
                cache.store(path, svm_kind_name(k), FEATURE_VERSION, m)
                m = cache.load(path, svm_kind_name(k))
            out[i][k] = m.data[0]
    if cache is not None:
        cache.flush()
    return out


def cnn_kind_name(kind: str, seg: int, aug: int | None = None, seed: int | None = None) -> str:
    base = f"cnn-{kind}-seg{seg:03d}"
    return base if aug is None else f"{base}-aug{aug}-seed{seed}"


def augment_seed(path: str, seg: int, seed: int) -> int:
    return (zlib.crc32(f"{os.path.basename(path)}#{seg}".encode()) + 7919 * seed) % (2 ** 32)


def _load_segments(path: str, seconds: float) -> list[AudioClip]:
    clip = load_wav(path)
    if clip.sample_rate != CNN_RATE:
        clip = resample(clip, CNN_RATE)
    return segment(clip, seconds)


def _cnn_job(args) -> dict:
    path, kind, seconds, wanted, aug_versions, seed = args
    segs = _load_segments(path, seconds)
    out = {}
    for seg_idx, with_aug in wanted:
        s = segs[seg_idx]
        out[(seg_idx, None)] = cnn_stack(s, kind).data
        if with_aug:
            shifts = augment_shifts(aug_versions, augment_seed(path, seg_idx, seed))
            for v, semis in enumerate(shifts):
                out[(seg_idx, v)] = cnn_stack(pitch_shift(s, float(semis)), kind).data
    return out


def segment_count(entry, seconds: float) -> int:
    """Number of whole segments in an entry, from the WAV header when possible."""
    if entry.duration_s is not None:
        return int(entry.duration_s // seconds)
    rate, data = wavfile.read(entry.path, mmap=True)
    n = len(data)
    n_out = int(round(n * CNN_RATE / rate))
    return n_out // int(round(seconds * CNN_RATE))


# -- runner ------------------------------------------------------------------------

def _svm_fold(cfg: ExperimentConfig, x: np.ndarray, labels: np.ndarray, plan: SplitPlan) -> dict:
    stats = zscore_fit(list(x[plan.train]), ZMode.PER_FEATURE)
    xs = np.array([zscore_apply(stats, v) for v in x])
    y = np.where(labels == 1, 1.0, -1.0)
    model = svm.train(xs[plan.train], y[plan.train], cfg.svm, seed=plan.seed)
    test_scores = svm.decision_scores(model, xs[plan.test])
    train_scores = svm.decision_scores(model, xs[plan.train])
    return {
        "fold": plan.fold_id,
        "test_auc": auc(test_scores, labels[plan.test]),
        "train_auc": auc(train_scores, labels[plan.train]),
        "n_train": int(len(plan.train)),
        "n_test": int(len(plan.test)),
        "n_support": int(len(model.alphas)),
    }


def run_svm(cfg: ExperimentConfig, manifest: DatasetManifest, cache: FeatureCache | None = None,
            workers: int = 1) -> AucResult:
    labels = np.array([int(e.queen_present) for e in manifest.entries])
    hives = [e.hive_id for e in manifest.entries]
    try:
        plans = make_plans(cfg, labels, hives)
    except ValueError as exc:
        raise StageError("split", str(exc)) from exc
    try:
        vectors = svm_vectors(manifest, _SVM_KINDS[cfg.spec.provenance], cache, workers)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("features", str(exc)) from exc
    x = np.array([svm_feature(v, cfg.spec.provenance).values for v in vectors])
    gamma = cfg.svm.gamma if cfg.svm.gamma is not None else svm.default_gamma(x.shape[1])
    folds = []
    for plan in plans:
        try:
            folds.append(_svm_fold(cfg, x, labels, plan))
        except ValueError as exc:
            raise StageError("svm", f"fold {plan.fold_id}: {exc}") from exc
    return AucResult(cfg.name, cfg.scheme, folds, cfg.fold_seeds(),
                     {"feature_dim": int(x.shape[1]), "gamma": gamma, "n_samples": int(len(x))})


def run_cnn(cfg: ExperimentConfig, manifest: DatasetManifest, cache: FeatureCache | None = None,
            workers: int = 1) -> AucResult:
    kind = cfg.spec.kind
    # one sample per whole segment of every recording
    index: list[tuple[int, int]] = []
    for i, e in enumerate(manifest.entries):
        try:
            n_seg = segment_count(e, cfg.segment_seconds)
        except (OSError, ValueError) as exc:
            raise StageError("segments", f"{e.path}: {exc}") from exc
        index.extend((i, s) for s in range(n_seg))
    if not index:
        raise StageError("segments", "no recording is long enough for one segment")
    labels = np.array([int(manifest.entries[i].queen_present) for i, _ in index])
    hives = [manifest.entries[i].hive_id for i, _ in index]
    try:
        plans = make_plans(cfg, labels, hives)
    except ValueError as exc:
        raise StageError("split", str(exc)) from exc

    in_train = np.zeros(len(index), dtype=bool)
    for p in plans:
        in_train[p.train] = True

    stacks: dict[tuple[int, int, int | None], np.ndarray] = {}
    jobs = []
    for i, e in enumerate(manifest.entries):
        wanted = []
        for n, (ei, s) in enumerate(index):
            if ei != i:
                continue
            names = [(s, None)] + ([(s, v) for v in range(cfg.aug_versions)] if in_train[n] else [])
            missing = False
            for seg, aug in names:
                key = cnn_kind_name(kind, seg, aug, cfg.seed if aug is not None else None)
                if _usable(cache, e.path, key):
                    stacks[(i, seg, aug)] = cache.load(e.path, key).data
                else:
                    missing = True
            if missing:
                wanted.append((s, bool(in_train[n])))
        if wanted:
            if not os.path.isfile(e.path):
                raise StageError("features", f"no cached features and no audio for {e.path}")
            jobs.append((i, (e.path, kind, cfg.segment_seconds, wanted, cfg.aug_versions, cfg.seed)))
    try:
        results = _map(_cnn_job, [j for _, j in jobs], workers)
    except Exception as exc:
        raise StageError("features", str(exc)) from exc
    for (i, _), res in zip(jobs, results):
        path = manifest.entries[i].path
        for (seg, aug), data in res.items():
            m = data
            if cache is not None:
                key = cnn_kind_name(kind, seg, aug, cfg.seed if aug is not None else None)
                cache.store(path, key, FEATURE_VERSION, FeatureMatrix(m, _KIND_BANDS[kind], 0.0))
                m = cache.load(path, key).data
            stacks[(i, seg, aug)] = m
    if cache is not None:
        cache.flush()

    base = np.array([stacks[(i, s, None)] for i, s in index])
    folds = []
    for plan in plans:
        train_x = [base[n] for n in plan.train]
        train_y = [labels[n] for n in plan.train]
        for n in plan.train:
            i, s = index[n]
            for v in range(cfg.aug_versions):
                train_x.append(stacks[(i, s, v)])
                train_y.append(labels[n])
        stats = zscore_fit(train_x, ZMode.FREQUENCY_WISE)
        norm = lambda arr: np.array([zscore_apply(stats, a) for a in arr])  # noqa: E731
        train_cfg = cnn.TrainConfig(**{**cfg.train.__dict__, "seed": plan.seed})
        try:
            model, tlog = cnn.train((norm(train_x), np.array(train_y, dtype=float)),
                                    (norm(base[plan.val]), labels[plan.val].astype(float)),
                                    cfg.arch, train_cfg)
            scores = cnn.predict(model, norm(base[plan.test]))
            fold_auc = auc(scores, labels[plan.test])
        except ValueError as exc:
            raise StageError("cnn", f"fold {plan.fold_id}: {exc}") from exc
        folds.append({
            "fold": plan.fold_id,
            "test_auc": fold_auc,
            "n_train": len(train_x),
            "n_val": int(len(plan.val)),
            "n_test": int(len(plan.test)),
            "epochs_run": len(tlog.epochs),
            "best_epoch": tlog.best_epoch,
        })
    return AucResult(cfg.name, cfg.scheme, folds, cfg.fold_seeds(),
                     {"input_shape": list(base.shape[1:]), "n_samples": int(len(base))})


def run_experiment(cfg: ExperimentConfig, manifest: DatasetManifest, out_dir=None,
                   cache_dir=None, workers: int = 1) -> AucResult:
    """Run both folds of one named experiment and (optionally) write results."""
    cache = FeatureCache(cache_dir) if cache_dir is not None else None
    runner = run_svm if cfg.spec.classifier == "svm" else run_cnn
    result = runner(cfg, manifest, cache, workers)
    if out_dir is not None:
        write_results(result, out_dir)
    return result

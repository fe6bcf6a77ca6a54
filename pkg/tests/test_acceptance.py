"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest -s tests/test_acceptance.py`` (or ``python3 tests/test_acceptance.py``).
Criteria 8 and 9 synthesise a 24 x 10-minute dataset; set HIVE_ACCEPTANCE_DIR to
keep it (and its feature cache) between runs. Criterion 10 needs the real recordings
and runs only when HIVE_DATASET_MANIFEST points at their manifest.
"""

import contextlib
import itertools
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import make_dataset, peak_hz
from hivestate import evaluation as ev
from hivestate.audio_io import AudioClip, load_manifest
from hivestate.cnn import CnnArchitecture, init_model
from hivestate.emd import analytic, decompose, hht_band_vector, hht_spectrogram
from hivestate.evaluation import ExperimentConfig, Scheme, auc
from hivestate.gradcheck import check_gradients
from hivestate.features import (Provenance, concat, FeatureVector, slice_stack,
                                spectral_frames)
from hivestate.spectral import n_stft_frames, stft_magnitude
from hivestate.svm import SvmConfig, decision_scores, default_gamma, dual_objective, rbf_matrix, train


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def run(number, title):
        t0 = time.perf_counter()
        notes = []
        try:
            yield notes
        except BaseException as exc:
            verdict, extra = "FAIL", f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
            raise
        else:
            verdict, extra = "PASS", "; ".join(notes)
        finally:
            with capsys.disabled():
                print(f"\n[criterion {number:>2}] {verdict}  {title}  ({time.perf_counter() - t0:.1f} s)  {extra}")
    return run


# -- 1-3: EMD and Hilbert ------------------------------------------------------------

def test_c01_emd_reconstruction(criterion):
    with criterion(1, "EMD reconstruction on 100 random frames") as notes:
        rng = np.random.default_rng(2024)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(100):
            x = rng.standard_normal(32000)
            s = decompose(x)
            worst = max(worst, np.max(np.abs(x - s.imfs.sum(0) - s.residue)) / np.max(np.abs(x)))
        elapsed = time.perf_counter() - t0
        notes.append(f"max rel error {worst:.2e}, {elapsed:.1f} s")
        assert worst <= 1e-8
        assert elapsed < 60


def test_c02_two_tone_separation(criterion):
    with criterion(2, "two-tone EMD separation") as notes:
        fs = 32000
        t = np.arange(fs) / fs
        s = decompose(np.sin(2 * np.pi * 50 * t) + np.sin(2 * np.pi * 500 * t))
        f1, f2 = peak_hz(s.imfs[0], fs), peak_hz(s.imfs[1], fs)
        notes.append(f"IMF1 {f1:.1f} Hz, IMF2 {f2:.1f} Hz")
        assert abs(f1 - 500) <= 50
        assert abs(f2 - 50) <= 5


def test_c03_hilbert_identities(criterion):
    with criterion(3, "Hilbert amplitude / frequency identities") as notes:
        fs = 32000
        t = np.arange(fs) / fs
        tr = analytic(np.cos(2 * np.pi * 100 * t), fs)
        inner = slice(fs // 10, -fs // 10)
        amp_err = np.max(np.abs(tr.amplitude[inner] - 1.0))
        f_err = np.max(np.abs(tr.inst_freq[inner] - 100.0))
        ch = analytic(np.cos(2 * np.pi * (100 * t + 50 * t ** 2)), fs)
        tenth = fs // 10
        lo, hi = np.median(ch.inst_freq[:tenth]), np.median(ch.inst_freq[-tenth:])
        notes.append(f"amp err {amp_err:.1e}, freq err {f_err:.1e} Hz, chirp {lo:.1f}->{hi:.1f} Hz")
        assert amp_err <= 0.01
        assert f_err <= 1.0
        assert abs(lo - 105) <= 5 and abs(hi - 195) <= 5


# -- 4: shapes -----------------------------------------------------------------------

def test_c04_shape_contracts(criterion):
    with criterion(4, "shape contracts") as notes:
        rng = np.random.default_rng(4)
        clip = AudioClip(rng.standard_normal(60 * 22050) * 0.1, 22050)
        assert n_stft_frames(60 * 22050, 2048, 512) == 2581
        spec = stft_magnitude(clip)
        assert spec.n_frames == 2581
        mf = spectral_frames(clip, "mfcc")
        mel = spectral_frames(clip, "mel")
        assert mf.n_bands == 20 and mel.n_bands == 120
        stack = slice_stack(mf)
        assert stack.data.shape == (30, 20)
        assert 2581 // 30 == 86
        short = AudioClip(rng.standard_normal(3 * 32000) * 0.1, 32000)
        hht = hht_band_vector(hht_spectrogram(short))
        assert hht.shape == (20,)
        both = concat(FeatureVector(mf.data.mean(0), Provenance.MFCC20), FeatureVector(hht, Provenance.HHT20))
        assert len(both.values) == 40
        assert default_gamma(len(both.values)) == pytest.approx(0.025)
        notes.append("2581 frames, 30x20 stack, 120 Mel, 20 HHT, 40-d concat")


# -- 5: gradient check ---------------------------------------------------------------

def test_c05_cnn_gradient_check(criterion):
    with criterion(5, "CNN gradient check, every parameter") as notes:
        rng = np.random.default_rng(5)
        model = init_model(CnnArchitecture(), (30, 20), seed=5)
        x = rng.normal(size=(3, 30, 20))
        labels = np.array([1.0, 0.0, 1.0])
        n_params = sum(p.size for p in model.params.values())
        t0 = time.perf_counter()
        res = check_gradients(model, x, labels)
        elapsed = time.perf_counter() - t0
        name, worst = res.worst
        notes.append(f"{res.checked}/{n_params} entries, worst {name} {worst:.2e}, "
                     f"{res.shrunk} at a kink-avoiding step, {elapsed:.0f} s")
        assert res.checked == n_params
        assert res.unresolved == 0
        assert worst < 1e-4
        assert elapsed < 300


# -- 6: AUC ------------------------------------------------------------------------

def _pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_c06_auc_oracle(criterion):
    with criterion(6, "AUC equals pair counting on 200 instances") as notes:
        rng = np.random.default_rng(6)
        mismatches = 0
        for k in range(200):
            labels = rng.integers(0, 2, 50)
            labels[:2] = [0, 1]
            # every other instance is heavily tied
            scores = rng.integers(0, 6, 50) / 5 if k % 2 else rng.normal(size=50)
            mismatches += auc(scores, labels) != _pair_count_auc(scores, labels)
        notes.append(f"{mismatches} mismatches")
        assert mismatches == 0


# -- 7: SVM --------------------------------------------------------------------------

def _grid_dual(x, y, c, gamma, step=0.01):
    gram = rbf_matrix(x, x, gamma)
    grid = np.round(np.arange(0, c + step / 2, step), 10)
    a0, a1, a2 = np.meshgrid(grid, grid, grid, indexing="ij")
    a3 = a0 + a1 - a2  # labels (+1, +1, -1, -1)
    ok = (a3 >= -1e-12) & (a3 <= c + 1e-12)
    alpha = np.stack([a0[ok], a1[ok], a2[ok], a3[ok]], axis=1)
    ay = alpha * y
    return (alpha.sum(1) - 0.5 * np.einsum("ni,ij,nj->n", ay, gram, ay)).max()


def test_c07_svm_correctness(criterion):
    with criterion(7, "SVM dual optimum, feasibility, separable blobs") as notes:
        x4 = np.array([[0.0, 0.0], [1.0, 0.2], [0.3, 1.0], [1.2, 1.1]])
        y4 = np.array([1.0, 1.0, -1.0, -1.0])
        _, a4 = train(x4, y4, SvmConfig(c=1.0), return_alpha=True)
        gap = abs(dual_objective(a4, y4, rbf_matrix(x4, x4, default_gamma(2))) - _grid_dual(x4, y4, 1.0, 0.5))
        assert gap <= 1e-2

        r = np.random.default_rng(7)
        worst_eq = 0.0
        for c in (0.1, 1.0, 10.0):
            x = r.normal(size=(80, 4))
            y = np.where(x[:, 0] + r.normal(size=80) > 0, 1.0, -1.0)
            _, alpha = train(x, y, SvmConfig(c=c), return_alpha=True)
            assert alpha.min() >= 0 and alpha.max() <= c
            worst_eq = max(worst_eq, abs(np.sum(alpha * y)))
        assert worst_eq < 1e-6

        x = np.vstack([r.normal(-2, 1, (20, 2)), r.normal(2, 1, (20, 2))])
        y = np.r_[-np.ones(20), np.ones(20)]
        train_auc = auc(decision_scores(train(x, y), x), (y > 0).astype(int))
        notes.append(f"grid gap {gap:.1e}, |sum a*y| {worst_eq:.1e}, blob train AUC {train_auc}")
        assert train_auc == 1.0


# -- 8-9: synthetic end-to-end ----------------------------------------------------------

@pytest.fixture(scope="module")
def acceptance_data(tmp_path_factory):
    root = os.environ.get("HIVE_ACCEPTANCE_DIR")
    root = Path(root) if root else tmp_path_factory.mktemp("acceptance")
    manifest = root / "data" / "manifest.csv"
    t0 = time.perf_counter()
    if not manifest.exists():
        make_dataset(root, 600, 32000, 6)
    return manifest, root / "cache", time.perf_counter() - t0


@pytest.mark.slow
def test_c08_synthetic_random_split(criterion, acceptance_data):
    manifest_path, cache, synth_s = acceptance_data
    with criterion(8, "synthetic random split, SVM_MFCCs20 and CNN_MFCCs20") as notes:
        manifest = load_manifest(manifest_path)
        assert len(manifest) == 24 and len(set(manifest.hives)) == 2
        t0 = time.perf_counter()
        means = {}
        for name in ("SVM_MFCCs20", "CNN_MFCCs20"):
            res = ev.run_experiment(ExperimentConfig(name, Scheme.RANDOM), manifest,
                                    out_dir=cache.parent / "results", cache_dir=cache)
            means[name] = res.mean_test_auc
        elapsed = time.perf_counter() - t0 + synth_s
        notes.append(", ".join(f"{k} {v:.3f}" for k, v in means.items()) + f"; {elapsed / 60:.1f} min")
        assert all(v >= 0.95 for v in means.values())
        assert elapsed < 30 * 60


@pytest.mark.slow
def test_c09_hive_independent_integrity(criterion, acceptance_data, monkeypatch, tmp_path):
    manifest_path, cache, _ = acceptance_data
    with criterion(9, "hive-independent: no leakage, two folds, per-fold and mean JSON") as notes:
        manifest = load_manifest(manifest_path)
        seen = []
        real = ev.make_plans

        def spy(cfg, labels, hives):
            plans = real(cfg, labels, hives)
            seen.append((list(hives), plans))
            return plans

        monkeypatch.setattr(ev, "make_plans", spy)
        for name in ("SVM_MFCCs20", "CNN_MFCCs20"):
            ev.run_experiment(ExperimentConfig(name, Scheme.HIVE_INDEPENDENT), manifest,
                              out_dir=tmp_path, cache_dir=cache)
            data = json.loads((tmp_path / f"{name}_hive-independent.json").read_text())
            folds = data["fold_results"]
            assert [f["fold"] for f in folds] == [1, 2]
            assert data["mean_test_auc"] == pytest.approx(np.mean([f["test_auc"] for f in folds]), abs=1e-12)
            notes.append(f"{name} folds " + "/".join(f"{f['test_auc']:.3f}" for f in folds))

        leaks = 0
        for hives, plans in seen:
            assert len(plans) == 2
            for p in plans:
                fit = {hives[i] for i in np.concatenate([p.train, p.val])}
                leaks += len(fit & {hives[i] for i in p.test})
            assert {hives[i] for i in plans[0].test}.isdisjoint(hives[i] for i in plans[1].test)
        notes.insert(0, f"{leaks} leaked hives")
        assert leaks == 0


# -- 10: optional real-data check ------------------------------------------------------

@pytest.mark.dataset
@pytest.mark.skipif(not os.environ.get("HIVE_DATASET_MANIFEST"), reason="HIVE_DATASET_MANIFEST not set")
def test_c10_real_dataset(criterion):
    with criterion(10, "SVM_MFCCs20_HHTdwns20 hive-independent on recorded data") as notes:
        manifest = load_manifest(os.environ["HIVE_DATASET_MANIFEST"])
        res = ev.run_experiment(ExperimentConfig("SVM_MFCCs20_HHTdwns20", Scheme.HIVE_INDEPENDENT),
                                manifest, cache_dir=os.environ.get("HIVE_CACHE_DIR"))
        notes.append(f"mean test AUC {res.mean_test_auc:.3f}")
        assert res.mean_test_auc >= 0.85


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", *sys.argv[1:]]))

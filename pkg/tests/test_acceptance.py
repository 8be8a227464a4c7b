"""Acceptance suite: one test per release criterion, each printing a
pass/fail line (run with `pytest tests/test_acceptance.py -v -s`).

Expected values come from independent oracles: hand-filled contingency
tables, dense brute-force recomputation, central finite differences,
exhaustive enumeration, or generator construction — never from the code
path under test.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from rwdetect import corpus, features
from rwdetect.evaluation import binary_confusion, metrics
from rwdetect.explain import lime_explain, shap_completeness_gap, shap_linear
from rwdetect.models import LogRegModel, logreg_loss_grad, train_logreg
from rwdetect.pipeline import PipelineConfig, audit_no_test_snooping, run_pipeline
from rwdetect.report_ingest import load_report_dir
from rwdetect.selection import filter_by_threshold, rfe, score_features


def announce(criterion: int, label: str) -> None:
    print(f"[PASS] criterion {criterion:2d}: {label}")


def planted_spec(seed: int) -> corpus.SynthSpec:
    return corpus.SynthSpec(
        seed=seed,
        n_goodware=200,
        n_ransomware=200,
        n_noise_features={g: 220 for g in features.GROUPS},
        planted=corpus.default_planted(20, 0.9, 0.05),
    )


def planted_matrix(seed: int):
    spec = planted_spec(seed)
    pairs = [(m.sample_id, r) for m, r in corpus.synth_reports(spec)]
    vocab = features.build_vocabulary(iter(pairs))
    matrix = features.assemble_matrix(iter(pairs), vocab)
    labels = np.array([0 if sid.startswith("g") else 1 for sid in matrix.row_ids])
    planted_cols = {vocab.index[p.name] for p in spec.planted}
    return matrix, labels, vocab, planted_cols


# -- 1 ----------------------------------------------------------------------


def test_criterion_01_metrics_oracle():
    cm = binary_confusion(tn=498, fp=12, fn=6, tp=459)
    metrics(cm)  # warm-up
    t0 = time.perf_counter()
    report = metrics(cm)
    elapsed = time.perf_counter() - t0
    expected = {
        "accuracy": 98.15,
        "balanced_accuracy": 98.18,
        "precision_weighted": 98.16,
        "recall_weighted": 98.15,
        "f1_weighted": 98.15,
    }
    for name, want in expected.items():
        assert 100 * getattr(report, name) == pytest.approx(want, abs=0.005), name
    assert elapsed < 1e-3
    announce(1, f"reference binary row reproduced in {elapsed * 1e6:.0f} us")


# -- 2 ----------------------------------------------------------------------


def dense_plugin_mi(x, y) -> float:
    n = len(x)
    total = 0.0
    for xv in (0, 1):
        px = sum(1 for v in x if v == xv) / n
        for yv in set(y):
            py = sum(1 for v in y if v == yv) / n
            pxy = sum(1 for a, b in zip(x, y) if a == xv and b == yv) / n
            if pxy > 0:
                total += pxy * math.log(pxy / (px * py))
    return total


def entropy(values) -> float:
    n = len(values)
    h = 0.0
    for v in set(values):
        p = sum(1 for u in values if u == v) / n
        h -= p * math.log(p)
    return h


def test_criterion_02_mi_brute_force_equivalence():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    checked = 0
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        m = int(rng.integers(1, 9))
        k = int(rng.integers(2, 5))
        dense = (rng.random((n, m)) < rng.random()).astype(np.int64)
        y = rng.integers(0, k, n)
        matrix = features.SparseBinaryMatrix.from_rows(
            [str(i) for i in range(n)], [np.flatnonzero(r) for r in dense], m
        )
        scores = score_features(matrix, y, "mi")
        hy = entropy(y.tolist())
        for j in range(m):
            col = dense[:, j].tolist()
            oracle = dense_plugin_mi(col, y.tolist())
            assert abs(scores[j] - oracle) <= 1e-12
            assert scores[j] >= 0.0
            assert scores[j] <= min(entropy(col), hy) + 1e-12
            checked += 1
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0
    announce(2, f"{checked} columns vs dense plug-in within 1e-12 in {elapsed:.2f}s")


# -- 3 ----------------------------------------------------------------------


def test_criterion_03_chi_square_oracle():
    from rwdetect.selection import chi_square

    # worked 2x2: O=(2,1 / 0,1), E=(1.5,1.5 / 0.5,0.5)
    assert chi_square([1, 1, 1, 0], [1, 1, 0, 0]) == pytest.approx(4.0 / 3.0, abs=1e-9)
    # perfect association on n balanced samples: chi2 = n
    for n in (4, 10, 60):
        x = [0] * (n // 2) + [1] * (n // 2)
        assert chi_square(x, x) == pytest.approx(n, abs=1e-9)
    # hand-filled 2x3: x=1 row (2,1,0), x=0 row (0,1,2), all E=1 -> chi2=4
    assert chi_square([1, 1, 1, 0, 0, 0], [0, 0, 1, 1, 2, 2]) == pytest.approx(4.0, abs=1e-9)
    # no association: O == E
    assert chi_square([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-9)
    announce(3, "hand-computed 2x2 and 2x3 tables matched within 1e-9")


# -- 4 ----------------------------------------------------------------------


def test_criterion_04_extraction_golden(tmp_path):
    data_dir = Path(__file__).parent / "data"
    t0 = time.perf_counter()
    stream, skipped = load_report_dir(data_dir / "minicorpus")
    pairs = list(stream)
    vocab = features.build_vocabulary(iter(pairs))
    matrix = features.assemble_matrix(iter(pairs), vocab)
    features.write_vocabulary(vocab, tmp_path / "vocabulary.txt")
    features.write_matrix(matrix, tmp_path / "matrix.mlrsparse")
    elapsed = time.perf_counter() - t0
    assert skipped == []
    golden = data_dir / "golden"
    assert (tmp_path / "vocabulary.txt").read_bytes() == (golden / "vocabulary.txt").read_bytes()
    assert (tmp_path / "matrix.mlrsparse").read_bytes() == (golden / "matrix.mlrsparse").read_bytes()
    assert elapsed < 1.0
    announce(4, f"6-report corpus byte-exact (MLRSPARSE + vocabulary) in {elapsed:.3f}s")


# -- 5 ----------------------------------------------------------------------


def test_criterion_05_gradient_check():
    rng = np.random.default_rng(5)
    worst = 0.0
    for trial in range(100):
        n_classes = 2 if trial % 2 == 0 else 3
        X = (rng.random((20, 10)) < 0.4).astype(float)
        y = rng.integers(0, n_classes, 20)
        size = 11 if n_classes == 2 else n_classes * 11
        params = rng.normal(size=size)
        _, analytic = logreg_loss_grad(params, X, y, 1.0, n_classes)
        h = 1e-6
        for i in range(size):
            e = np.zeros(size)
            e[i] = h
            fp, _ = logreg_loss_grad(params + e, X, y, 1.0, n_classes)
            fm, _ = logreg_loss_grad(params - e, X, y, 1.0, n_classes)
            fd = (fp - fm) / (2 * h)
            rel = abs(analytic[i] - fd) / max(abs(fd), 1e-8)
            worst = max(worst, rel)
    assert worst <= 1e-5

    X = (rng.random((50, 8)) < 0.4).astype(float)
    y = rng.integers(0, 3, 50)
    proba = train_logreg(X, y, tol=1e-4, max_iter=300).predict_proba(X)
    assert np.abs(proba.sum(axis=1) - 1.0).max() <= 1e-9
    announce(5, f"100 problems, max relative gradient error {worst:.2e}")


# -- 6 ----------------------------------------------------------------------


def test_criterion_06_planted_signal_selection():
    for seed in range(5):
        t0 = time.perf_counter()
        matrix, labels, vocab, planted_cols = planted_matrix(seed)
        assert matrix.n_cols == 2000 and matrix.n_rows == 400

        manifest = filter_by_threshold(matrix, labels, vocab, "mi", 0.01)
        kept = set(int(c) for c in manifest.kept_columns)
        assert planted_cols <= kept, f"seed {seed}: MI filter lost planted features"

        rfe_manifest = rfe(matrix, labels, 40, 0.1, {"seed": 42})
        survivors = set(int(c) for c in rfe_manifest.kept_columns)
        retained = len(planted_cols & survivors)
        elapsed = time.perf_counter() - t0
        assert retained >= 18, f"seed {seed}: RFE kept only {retained}/20"
        assert elapsed < 60.0
    announce(6, "5 seeds: MI(0.01) kept 20/20 planted, RFE(40) kept >= 18/20")


# -- 7 ----------------------------------------------------------------------


def test_criterion_07_rfe_nestedness():
    matrix, labels, _, _ = planted_matrix(3)
    kept = {}
    for target in (200, 100, 40):
        kept[target] = set(int(c) for c in rfe(matrix, labels, target, 0.1, {"seed": 42}).kept_columns)
    assert kept[40] <= kept[100] <= kept[200]
    announce(7, "survivor sets nested across targets {200, 100, 40}")


# -- 8 ----------------------------------------------------------------------


def test_criterion_08_time_aware_split():
    rng = np.random.default_rng(8)
    from datetime import date, timedelta

    types = (None, "locker", "crypto", "raas", "modern")
    records = []
    for i in range(10_000):
        t = types[int(rng.integers(0, 5))]
        day = date(2006, 1, 1) + timedelta(days=int(rng.integers(0, 6500)))
        records.append(
            corpus.SampleMetadata(
                sample_id=f"s{i:05d}",
                sha256="0" * 64,
                label="goodware" if t is None else "ransomware",
                ransomware_type=t,
                family="fam" if t else None,
                first_submission=day,
                source="synthetic",
            )
        )
    plan = corpus.time_aware_split(records, 0.8)
    by_id = {m.sample_id: m for m in records}
    train_set = set(plan.train_ids)
    strata: dict[str, list] = {}
    for m in records:
        strata.setdefault(corpus.stratum_of(m), []).append(m)
    expected = 0
    for key, members in strata.items():
        expected += int(np.floor(0.8 * len(members)))
        train_dates = [m.first_submission for m in members if m.sample_id in train_set]
        test_dates = [m.first_submission for m in members if m.sample_id not in train_set]
        assert max(train_dates) <= min(test_dates), key
    assert len(plan.train_ids) == expected
    announce(8, f"10k samples, 5 strata: boundary and sizing hold ({expected} train)")


# -- 9 ----------------------------------------------------------------------


def test_criterion_09_shap_completeness():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(1000):
        m = int(rng.integers(1, 50))
        weights = rng.normal(size=m)
        dummies = rng.random(m) < 0.2
        weights[dummies] = 0.0
        model = LogRegModel(
            weights=weights,
            intercept=np.asarray([float(rng.normal())]),
            class_names=("0", "1"),
            C=1.0,
            seed=42,
        )
        x = (rng.random(m) < 0.5).astype(float)
        mu = rng.random(m)
        worst = max(worst, shap_completeness_gap(model, x, mu))
        attributions = {a.column: a.value for a in shap_linear(model, x, mu)}
        for col in np.flatnonzero(dummies):
            assert attributions.get(int(col), 0.0) == 0.0
    assert worst <= 1e-9
    announce(9, f"1000 models: completeness gap <= {worst:.1e}, dummies exactly 0")


# -- 10 ---------------------------------------------------------------------


def test_criterion_10_lime_fidelity():
    rng = np.random.default_rng(10)
    t0 = time.perf_counter()
    agree = 0
    total = 0
    for trial in range(50):
        m = 20
        weights = rng.normal(size=m) * 2.0
        model = LogRegModel(
            weights=weights,
            intercept=np.asarray([float(rng.normal() * 0.1)]),
            class_names=("0", "1"),
            C=1.0,
            seed=42,
        )
        x = np.ones(m)
        result = lime_explain(
            model.predict_proba, x, n_samples=5000, top_k=10, seed=1000 + trial
        )
        for a in result.attributions:
            total += 1
            if np.sign(a.value) == np.sign(weights[a.column]):
                agree += 1
    elapsed = time.perf_counter() - t0
    assert total == 500
    assert agree / total >= 0.90
    assert elapsed < 30.0
    announce(10, f"sign agreement {agree}/{total} in {elapsed:.1f}s")


# -- 11 / 12 ----------------------------------------------------------------


@pytest.fixture(scope="module")
def thousand_sample_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("e2e")
    spec = corpus.SynthSpec(
        seed=42,
        n_goodware=500,
        n_ransomware=500,
        n_noise_features={g: 60 for g in features.GROUPS},
        planted=corpus.default_planted(20, 0.9, 0.05),
    )
    reports_dir, metadata_path = corpus.generate_corpus(spec, base / "corpus")

    results = []
    durations = []
    for tag in ("one", "two"):
        config = PipelineConfig(
            reports_dir=reports_dir,
            metadata_path=metadata_path,
            output_dir=base / tag,
        )
        t0 = time.perf_counter()
        results.append(run_pipeline(config))
        durations.append(time.perf_counter() - t0)
    return results, durations


def test_criterion_11_end_to_end_determinism_and_performance(thousand_sample_runs):
    (r1, r2), durations = thousand_sample_runs
    assert max(durations) < 300.0
    assert r1.report.accuracy >= 0.95
    assert r1.manifest["run_id"] == r2.manifest["run_id"]
    assert r1.manifest["artifacts"] == r2.manifest["artifacts"]
    for name in r1.manifest["artifacts"]:
        assert (r1.run_dir / name).read_bytes() == (r2.run_dir / name).read_bytes(), name
    announce(
        11,
        f"two runs in {durations[0]:.1f}s/{durations[1]:.1f}s, identical digests, "
        f"accuracy {r1.report.accuracy:.3f}",
    )


def test_criterion_12_anti_snooping_audit(thousand_sample_runs):
    (r1, _), _ = thousand_sample_runs
    manifest = r1.manifest
    assert manifest["protocol"]["paper_protocol"] is False
    assert audit_no_test_snooping(manifest)
    pre_eval = [
        e
        for e in manifest["lineage"]
        if e["stage"] in ("vocabulary", "stage1_filter", "rfe_sweep", "rfe_final", "grid_search", "train")
    ]
    assert pre_eval, "lineage must record selection and training stages"
    for entry in pre_eval:
        assert "test" not in entry["consumed"], entry
    assert manifest["row_sets"]["test"]["count"] > 0
    announce(12, "manifest lineage shows no selection/tuning stage touched test rows")

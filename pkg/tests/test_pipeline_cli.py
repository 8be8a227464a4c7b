import json

import numpy as np
import pytest

from rwdetect import corpus, features
from rwdetect.cli import main
from rwdetect.errors import PipelineError
from rwdetect.pipeline import (
    PipelineConfig,
    StageFailure,
    audit_no_test_snooping,
    compute_run_id,
    run_pipeline,
)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    base = tmp_path_factory.mktemp("corpus")
    spec = corpus.SynthSpec(
        seed=42,
        n_goodware=60,
        n_ransomware=60,
        n_noise_features={g: 20 for g in features.GROUPS},
        planted=corpus.default_planted(10, 0.9, 0.05),
    )
    reports_dir, metadata_path = corpus.generate_corpus(spec, base)
    return reports_dir, metadata_path


def make_config(small_corpus, out_dir, **overrides) -> PipelineConfig:
    reports_dir, metadata_path = small_corpus
    config = PipelineConfig(
        reports_dir=reports_dir,
        metadata_path=metadata_path,
        output_dir=out_dir,
        stage2_percentages=[10, 20, 50],
        lime_samples=400,
    )
    for key, value in overrides.items():
        setattr(config, key, value)
    return config


def test_pipeline_end_to_end_binary(small_corpus, tmp_path):
    result = run_pipeline(make_config(small_corpus, tmp_path / "runs"))
    assert result.report.accuracy >= 0.95
    expected = {
        "vocabulary.txt",
        "train.mlrsparse",
        "test.mlrsparse",
        "split_plan.txt",
        "stage1_manifest.json",
        "stage2_manifest.json",
        "rfe_sweep.json",
        "selected_columns.json",
        "model.json",
        "eval_report.json",
        "confusion.json",
        "predictions.csv",
        "shap_global.json",
        "shap_top.csv",
        "lime_explanations.json",
        "skipped.tsv",
    }
    assert expected <= set(result.manifest["artifacts"])
    assert (result.run_dir / "timings.json").exists()
    assert (result.run_dir / "report.csv").exists()
    assert audit_no_test_snooping(result.manifest)
    # every artifact names the digests of its inputs
    inputs_map = result.manifest["artifact_inputs"]
    assert set(inputs_map) == set(result.manifest["artifacts"])
    assert inputs_map["model.json"]["train.mlrsparse"] == result.manifest["artifacts"]["train.mlrsparse"]
    assert inputs_map["vocabulary.txt"]["rows:train"] == result.manifest["row_sets"]["train"]["ids_digest"]


def test_pipeline_deterministic_across_runs(small_corpus, tmp_path):
    r1 = run_pipeline(make_config(small_corpus, tmp_path / "a"))
    r2 = run_pipeline(make_config(small_corpus, tmp_path / "b"))
    assert r1.manifest["run_id"] == r2.manifest["run_id"]
    assert r1.manifest["artifacts"] == r2.manifest["artifacts"]
    for name in r1.manifest["artifacts"]:
        assert (r1.run_dir / name).read_bytes() == (r2.run_dir / name).read_bytes()


def test_existing_run_dir_requires_force(small_corpus, tmp_path):
    config = make_config(small_corpus, tmp_path / "runs")
    run_pipeline(config)
    with pytest.raises(PipelineError, match="already exists"):
        run_pipeline(config)
    run_pipeline(config, force=True)


def test_paper_protocol_consumes_test_in_sweep(small_corpus, tmp_path):
    result = run_pipeline(
        make_config(small_corpus, tmp_path / "runs", paper_protocol=True)
    )
    assert not audit_no_test_snooping(result.manifest)
    sweep = [e for e in result.manifest["lineage"] if e["stage"] == "rfe_sweep"]
    assert sweep and "test" in sweep[0]["consumed"]
    assert result.manifest["protocol"]["paper_protocol"] is True
    assert result.manifest["protocol"]["validation_carved"] is False


def test_honest_protocol_carves_and_records_validation(small_corpus, tmp_path):
    result = run_pipeline(make_config(small_corpus, tmp_path / "runs"))
    manifest = result.manifest
    assert manifest["protocol"]["validation_carved"] is True
    assert manifest["row_sets"]["validation"]["count"] > 0
    sweep = [e for e in manifest["lineage"] if e["stage"] == "rfe_sweep"][0]
    assert sweep["consumed"] == ["train_core", "validation"]
    final = [e for e in manifest["lineage"] if e["stage"] == "rfe_final"][0]
    assert final["consumed"] == ["train"]


def test_fixed_stage2_target_skips_sweep(small_corpus, tmp_path):
    result = run_pipeline(
        make_config(
            small_corpus, tmp_path / "runs", stage2_target=8, stage2_percentages=None
        )
    )
    assert "rfe_sweep.json" not in result.manifest["artifacts"]
    selected = json.loads((result.run_dir / "selected_columns.json").read_text())
    assert len(selected["columns"]) == 8
    assert result.manifest["protocol"]["validation_carved"] is False


def test_run_id_independent_of_output_dir(small_corpus, tmp_path):
    c1 = make_config(small_corpus, tmp_path / "one")
    c2 = make_config(small_corpus, tmp_path / "two")
    digests = {"reports_dir": "x", "metadata": "y"}
    assert compute_run_id(c1, digests) == compute_run_id(c2, digests)


def test_selection_failure_maps_to_stage_exit_code(small_corpus, tmp_path):
    config = make_config(small_corpus, tmp_path / "runs", stage1_threshold=1e9)
    with pytest.raises(StageFailure) as excinfo:
        run_pipeline(config)
    assert excinfo.value.stage == "selection"
    assert excinfo.value.exit_code == 30
    # partial artifacts retained for debugging
    run_dir = next((tmp_path / "runs").iterdir())
    assert (run_dir / "split_plan.txt").exists()


def test_grid_search_selects_on_validation(small_corpus, tmp_path):
    config = make_config(
        small_corpus,
        tmp_path / "runs",
        grid_search=True,
        model_variant="tree",
        stage2_target=8,
        stage2_percentages=None,
    )
    result = run_pipeline(config)
    assert "grid_scores.json" in result.manifest["artifacts"]
    grid = [e for e in result.manifest["lineage"] if e["stage"] == "grid_search"][0]
    assert grid["consumed"] == ["train_core", "validation"]
    assert audit_no_test_snooping(result.manifest)


@pytest.mark.parametrize("variant", ["tree", "random_forest", "extra_trees"])
def test_pipeline_tree_variants(small_corpus, tmp_path, variant):
    config = make_config(
        small_corpus,
        tmp_path / "runs",
        model_variant=variant,
        stage2_target=8,
        stage2_percentages=None,
        model_hyper={"n_estimators": 20} if variant != "tree" else {},
    )
    result = run_pipeline(config)
    assert result.report.accuracy >= 0.9
    # SHAP applies to the linear model only; LIME still runs
    assert "shap_global.json" not in result.manifest["artifacts"]
    assert "lime_explanations.json" in result.manifest["artifacts"]


def test_pipeline_type_task(small_corpus, tmp_path):
    config = make_config(
        small_corpus,
        tmp_path / "runs",
        task="type",
        stage2_target=8,
        stage2_percentages=None,
    )
    result = run_pipeline(config)
    assert result.report.class_names == ("goodware", "locker", "crypto", "raas", "modern")
    cm = json.loads((result.run_dir / "confusion.json").read_text())
    assert np.asarray(cm["counts"]).shape == (5, 5)


def test_pipeline_family_task(small_corpus, tmp_path):
    config = make_config(
        small_corpus,
        tmp_path / "runs",
        task="family",
        stage2_target=8,
        stage2_percentages=None,
    )
    result = run_pipeline(config)
    assert result.report.class_names[0] == "goodware"
    assert len(result.report.class_names) == 5  # goodware + one family per type


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def test_cli_gen_corpus_and_run(tmp_path, capsys):
    rc = main(
        [
            "gen-corpus",
            "--out",
            str(tmp_path / "corpus"),
            "--n-goodware",
            "30",
            "--n-ransomware",
            "30",
            "--noise-per-group",
            "10",
            "--planted-count",
            "6",
        ]
    )
    assert rc == 0
    config_path = tmp_path / "config.toml"
    config_path.write_text(
        f"""
reports_dir = "{tmp_path / 'corpus' / 'reports'}"
metadata_path = "{tmp_path / 'corpus' / 'metadata.csv'}"
output_dir = "{tmp_path / 'runs'}"
seed = 42

[selection]
stage2_percentages = [20, 50]

[explain]
lime_samples = 300
"""
    )
    rc = main(["run", "--config", str(config_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "accuracy=" in out


def test_cli_stage_round_trip(tmp_path, capsys):
    main(
        [
            "gen-corpus",
            "--out",
            str(tmp_path / "corpus"),
            "--n-goodware",
            "20",
            "--n-ransomware",
            "20",
            "--noise-per-group",
            "5",
            "--planted-count",
            "4",
        ]
    )
    corpus_dir = tmp_path / "corpus"
    assert (
        main(
            [
                "extract",
                "--reports-dir",
                str(corpus_dir / "reports"),
                "--matrix",
                str(tmp_path / "all.mlrsparse"),
                "--vocab",
                str(tmp_path / "vocab.txt"),
                "--skip-list",
                str(tmp_path / "skip.tsv"),
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "split",
                "--metadata",
                str(corpus_dir / "metadata.csv"),
                "--out",
                str(tmp_path / "plan.txt"),
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "select",
                "--matrix",
                str(tmp_path / "all.mlrsparse"),
                "--vocab",
                str(tmp_path / "vocab.txt"),
                "--metadata",
                str(corpus_dir / "metadata.csv"),
                "--rfe-target",
                "4",
                "--out",
                str(tmp_path / "sel"),
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "train",
                "--matrix",
                str(tmp_path / "all.mlrsparse"),
                "--metadata",
                str(corpus_dir / "metadata.csv"),
                "--selection",
                str(tmp_path / "sel" / "selected_columns.json"),
                "--out",
                str(tmp_path / "model.json"),
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "eval",
                "--model",
                str(tmp_path / "model.json"),
                "--matrix",
                str(tmp_path / "all.mlrsparse"),
                "--metadata",
                str(corpus_dir / "metadata.csv"),
                "--selection",
                str(tmp_path / "sel" / "selected_columns.json"),
                "--out",
                str(tmp_path / "eval.json"),
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "explain",
                "--model",
                str(tmp_path / "model.json"),
                "--train-matrix",
                str(tmp_path / "all.mlrsparse"),
                "--eval-matrix",
                str(tmp_path / "all.mlrsparse"),
                "--vocab",
                str(tmp_path / "vocab.txt"),
                "--selection",
                str(tmp_path / "sel" / "selected_columns.json"),
                "--sample-id",
                "r00001",
                "--lime-samples",
                "300",
                "--out",
                str(tmp_path / "expl"),
            ]
        )
        == 0
    )
    assert (tmp_path / "expl" / "lime_r00001.json").exists()
    assert (tmp_path / "expl" / "shap_global.json").exists()
    # training accuracy on the planted corpus is high
    doc = json.loads((tmp_path / "eval.json").read_text())
    assert doc["accuracy"] >= 0.95


def test_cli_missing_reports_dir_exits_ingest_code(tmp_path):
    config_path = tmp_path / "config.toml"
    config_path.write_text(
        f"""
reports_dir = "{tmp_path / 'nope'}"
metadata_path = "{tmp_path / 'nope.csv'}"
output_dir = "{tmp_path / 'runs'}"
"""
    )
    assert main(["run", "--config", str(config_path)]) == 10


def test_cli_split_bad_metadata_exit_code(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("wrong,header\n")
    rc = main(["split", "--metadata", str(bad), "--out", str(tmp_path / "plan.txt")])
    assert rc == 20


def test_cli_random_split_behind_explicit_flag(small_corpus, tmp_path):
    _, metadata_path = small_corpus
    out = tmp_path / "plan.txt"
    assert main(["split", "--metadata", str(metadata_path), "--random", "--out", str(out)]) == 0
    plan = corpus.read_split_plan(out)
    # a shuffle split interleaves dates, so the temporal boundary generally breaks
    meta = {m.sample_id: m for m in corpus.load_metadata(metadata_path)}
    train_max = max(meta[i].first_submission for i in plan.train_ids)
    test_min = min(meta[i].first_submission for i in plan.test_ids)
    assert len(plan.train_ids) + len(plan.test_ids) == len(meta)
    assert train_max >= test_min  # anti-property of the override path

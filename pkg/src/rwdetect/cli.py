"""Command-line interface.

Subcommands mirror the pipeline stages so each is independently runnable:

    gen-corpus   write a deterministic synthetic corpus with planted signal
    extract      reports -> vocabulary + MLRSPARSE matrix (+ skip-list)
    split        metadata -> time-aware train/test plan
    select       stage-1 threshold filter and optional RFE on a matrix
    train        fit a classifier on selected features
    eval         score a model on a matrix, emit metrics JSON/CSV
    explain      SHAP global ranking and LIME for one sample
    run          the full pipeline from a TOML config (plus overrides)

Exit codes: 0 success; 10 ingest, 20 split, 30 selection, 40 training,
50 evaluation, 60 explanation failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, corpus, evaluation, explain, features, models, selection
from .errors import PipelineError
from .pipeline import STAGE_EXIT_CODES, PipelineConfig, StageFailure, run_pipeline
from .report_ingest import load_report_dir, write_skip_list

logger = logging.getLogger("rwdetect")


def _fail(stage: str, message: str) -> int:
    logger.error("[%s] %s", stage, message)
    return STAGE_EXIT_CODES.get(stage, 1)


def _add_gen_corpus(sub) -> None:
    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--n-goodware", type=int, default=200)
    p.add_argument("--n-ransomware", type=int, default=200)
    p.add_argument("--noise-per-group", type=int, default=220)
    p.add_argument("--planted-count", type=int, default=20)
    p.add_argument("--hit-rate", type=float, default=0.9)
    p.add_argument("--leak-rate", type=float, default=0.05)
    p.add_argument("--background-rate", type=float, default=0.3)


def _cmd_gen_corpus(args) -> int:
    spec = corpus.SynthSpec(
        seed=args.seed,
        n_goodware=args.n_goodware,
        n_ransomware=args.n_ransomware,
        n_noise_features={g: args.noise_per_group for g in features.GROUPS},
        planted=corpus.default_planted(args.planted_count, args.hit_rate, args.leak_rate),
        background_rate=args.background_rate,
    )
    reports_dir, metadata_path = corpus.generate_corpus(spec, args.out)
    print(f"wrote {reports_dir} and {metadata_path}")
    return 0


def _cmd_extract(args) -> int:
    try:
        stream, skipped = load_report_dir(args.reports_dir)
        reports = list(stream)
        if args.vocab and args.vocab.exists():
            vocab = features.read_vocabulary(args.vocab)
        else:
            vocab = features.build_vocabulary(iter(reports))
            if args.vocab:
                features.write_vocabulary(vocab, args.vocab)
        matrix = features.assemble_matrix(iter(reports), vocab)
        features.write_matrix(matrix, args.matrix)
        if args.skip_list:
            write_skip_list(skipped, args.skip_list)
    except PipelineError as exc:
        return _fail("ingest", str(exc))
    print(f"{matrix.n_rows} rows x {matrix.n_cols} columns -> {args.matrix}")
    return 0


def _cmd_split(args) -> int:
    try:
        meta = corpus.load_metadata(args.metadata)
        if args.random:
            plan = corpus.random_split(meta, args.ratio, args.seed)
        else:
            plan = corpus.time_aware_split(meta, args.ratio)
        corpus.write_split_plan(plan, args.out)
    except PipelineError as exc:
        return _fail("split", str(exc))
    print(f"train={len(plan.train_ids)} test={len(plan.test_ids)} -> {args.out}")
    return 0


def _labels_for(matrix, metadata_path: Path, task: str):
    meta = corpus.load_metadata(metadata_path)
    names = corpus.class_names_for_task(task, meta)
    ds = corpus.build_dataset(matrix, meta, task, names)
    return ds, names


def _cmd_select(args) -> int:
    try:
        matrix = features.read_matrix(args.matrix)
        vocab = features.read_vocabulary(args.vocab)
        ds, _ = _labels_for(matrix, args.metadata, args.task)
        stage1 = selection.filter_by_threshold(
            matrix, ds.labels, vocab, args.method, args.threshold
        )
        stage1.write(args.out / "stage1_manifest.json")
        if args.rfe_target:
            filtered = matrix.select_columns(stage1.kept_columns)
            stage2 = selection.rfe(
                filtered, ds.labels, args.rfe_target, args.rfe_step, {"seed": args.seed}
            )
            stage2.write(args.out / "stage2_manifest.json")
            kept = selection.compose_kept_columns(stage1, stage2)
        else:
            kept = stage1.kept_columns
        doc = {"columns": [int(c) for c in kept], "names": [vocab.names[int(c)] for c in kept]}
        (args.out / "selected_columns.json").write_bytes(
            (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode("utf-8")
        )
    except PipelineError as exc:
        return _fail("selection", str(exc))
    print(f"kept {len(kept)} of {matrix.n_cols} features -> {args.out}")
    return 0


def _selected_columns(path: Path) -> np.ndarray:
    doc = json.loads(path.read_bytes().decode("utf-8"))
    return np.asarray(doc["columns"], dtype=np.int64)


def _cmd_train(args) -> int:
    try:
        matrix = features.read_matrix(args.matrix)
        if args.selection:
            matrix = matrix.select_columns(_selected_columns(args.selection))
        ds, names = _labels_for(matrix, args.metadata, args.task)
        hyper = json.loads(args.hyper) if args.hyper else {}
        from .pipeline import _train_model

        model = _train_model(
            args.variant, matrix, ds.labels, hyper, names, len(names), args.seed
        )
        models.save_model(model, args.out)
    except PipelineError as exc:
        return _fail("training", str(exc))
    print(f"trained {args.variant} on {matrix.n_rows}x{matrix.n_cols} -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    try:
        matrix = features.read_matrix(args.matrix)
        if args.selection:
            matrix = matrix.select_columns(_selected_columns(args.selection))
        model = models.load_model(args.model)
        ds, names = _labels_for(matrix, args.metadata, args.task)
        predictions = model.predict(matrix)
        cm = evaluation.confusion(ds.labels, predictions, len(names), names)
        report = evaluation.metrics(cm)
        report.write(args.out)
        print(evaluation.CSV_HEADER)
        print(report.csv_row(args.variant or "model", args.task))
    except PipelineError as exc:
        return _fail("evaluation", str(exc))
    return 0


def _cmd_explain(args) -> int:
    try:
        model = models.load_model(args.model)
        train = features.read_matrix(args.train_matrix)
        test = features.read_matrix(args.eval_matrix)
        vocab = features.read_vocabulary(args.vocab) if args.vocab else None
        if args.selection:
            cols = _selected_columns(args.selection)
            train = train.select_columns(cols)
            test = test.select_columns(cols)
            if vocab:
                vocab = features.FeatureVocabulary.from_names(
                    [vocab.names[int(c)] for c in cols]
                )
        args.out.mkdir(parents=True, exist_ok=True)
        if isinstance(model, models.LogRegModel):
            shap_class = 1 if len(model.class_names) == 2 else 0
            ranking = explain.shap_global(
                model, test, train.column_means(), vocab, args.top_n, class_index=shap_class
            )
            ranking.write(args.out / "shap_global.json")
            explain.write_attributions_csv(ranking.ranked, args.out / "shap_top.csv", vocab)
        if args.sample_id:
            try:
                row = test.row_ids.index(args.sample_id)
            except ValueError:
                raise PipelineError(f"sample {args.sample_id!r} not in eval matrix") from None
            dense = test.to_dense()
            result = explain.lime_explain(
                model.predict_proba,
                dense[row],
                n_samples=args.lime_samples,
                top_k=args.lime_top_k,
                seed=args.seed,
                vocab=vocab,
            )
            doc = {
                "sample_id": args.sample_id,
                "intercept": result.intercept,
                "r_squared": result.r_squared,
                "diagnostic": result.diagnostic,
                "attributions": [
                    {"column": a.column, "name": a.name, "value": a.value}
                    for a in result.attributions
                ],
            }
            (args.out / f"lime_{args.sample_id}.json").write_bytes(
                (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode("utf-8")
            )
    except PipelineError as exc:
        return _fail("explanation", str(exc))
    print(f"explanations -> {args.out}")
    return 0


def load_config(path: Path, overrides: argparse.Namespace) -> PipelineConfig:
    with open(path, "rb") as handle:
        doc = tomllib.load(handle)
    split = doc.get("split", {})
    sel = doc.get("selection", {})
    model = doc.get("model", {})
    expl = doc.get("explain", {})
    default_out = os.environ.get("RWDETECT_OUTPUT_DIR", "runs")
    config = PipelineConfig(
        reports_dir=Path(doc["reports_dir"]),
        metadata_path=Path(doc["metadata_path"]),
        output_dir=Path(doc.get("output_dir", default_out)),
        task=doc.get("task", "binary"),
        seed=doc.get("seed", 42),
        split_ratio=split.get("ratio", 0.8),
        paper_protocol=split.get("paper_protocol", False),
        stage1_method=sel.get("stage1_method", "mi"),
        stage1_threshold=sel.get("stage1_threshold", 0.01),
        stage2_target=sel.get("stage2_target"),
        stage2_percentages=sel.get("stage2_percentages"),
        rfe_step=sel.get("rfe_step", 0.1),
        model_variant=model.get("variant", "logreg"),
        model_hyper=model.get("hyper", {}),
        grid_search=model.get("grid_search", False),
        explain_top_n=expl.get("top_n", 50),
        lime_samples=expl.get("lime_samples", 5000),
        lime_top_k=expl.get("lime_top_k", 5),
        lime_max_instances=expl.get("lime_max_instances", 5),
        threads=doc.get("threads", 1),
    )
    for name in ("seed", "task", "output_dir", "stage2_target"):
        value = getattr(overrides, name.replace("-", "_"), None)
        if value is not None:
            setattr(config, name, value)
    if overrides.paper_protocol:
        config.paper_protocol = True
    if overrides.ratio is not None:
        config.split_ratio = overrides.ratio
    if getattr(overrides, "threads", None):
        config.threads = overrides.threads
    return config


def _cmd_run(args) -> int:
    try:
        config = load_config(args.config, args)
        result = run_pipeline(config, force=args.force)
    except StageFailure as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except PipelineError as exc:
        return _fail("ingest", str(exc))
    report = result.report
    print(f"run {result.manifest['run_id']} -> {result.run_dir}")
    print(
        "accuracy={:.4f} balanced={:.4f} f1={:.4f}".format(
            report.accuracy, report.balanced_accuracy, report.f1_weighted
        )
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rwdetect",
        description="Behavioural ransomware detection pipeline over sandbox reports.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=os.environ.get("RWDETECT_LOG_LEVEL", "INFO"))
    sub = parser.add_subparsers(dest="command", required=True)

    _add_gen_corpus(sub)

    p = sub.add_parser("extract", help="parse reports into a sparse matrix")
    p.add_argument("--reports-dir", type=Path, required=True)
    p.add_argument("--matrix", type=Path, required=True)
    p.add_argument("--vocab", type=Path, help="read if present, else written")
    p.add_argument("--skip-list", type=Path)

    p = sub.add_parser("split", help="time-aware train/test split")
    p.add_argument("--metadata", type=Path, required=True)
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument(
        "--random",
        action="store_true",
        help="override: shuffle split ignoring submission dates",
    )
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("select", help="threshold filter + optional RFE")
    p.add_argument("--matrix", type=Path, required=True)
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--metadata", type=Path, required=True)
    p.add_argument("--task", default="binary", choices=corpus.TASKS)
    p.add_argument("--method", default="mi", choices=["mi", "chi2"])
    p.add_argument("--threshold", type=float, default=0.01)
    p.add_argument("--rfe-target", type=int)
    p.add_argument("--rfe-step", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a classifier")
    p.add_argument("--matrix", type=Path, required=True)
    p.add_argument("--metadata", type=Path, required=True)
    p.add_argument("--task", default="binary", choices=corpus.TASKS)
    p.add_argument("--selection", type=Path, help="selected_columns.json")
    p.add_argument("--variant", default="logreg", choices=["logreg", "tree", "random_forest", "extra_trees"])
    p.add_argument("--hyper", help="JSON dict of hyperparameters")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="evaluate a model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--matrix", type=Path, required=True)
    p.add_argument("--metadata", type=Path, required=True)
    p.add_argument("--task", default="binary", choices=corpus.TASKS)
    p.add_argument("--selection", type=Path)
    p.add_argument("--variant", help="model name for the CSV row")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("explain", help="SHAP global ranking and optional LIME")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--train-matrix", type=Path, required=True)
    p.add_argument("--eval-matrix", type=Path, required=True)
    p.add_argument("--vocab", type=Path)
    p.add_argument("--selection", type=Path)
    p.add_argument("--sample-id", help="explain this sample with LIME")
    p.add_argument("--top-n", type=int, default=50)
    p.add_argument("--lime-samples", type=int, default=5000)
    p.add_argument("--lime-top-k", type=int, default=5)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("run", help="full pipeline from a TOML config")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--task", choices=corpus.TASKS)
    p.add_argument("--ratio", type=float)
    p.add_argument("--output-dir", type=Path, dest="output_dir")
    p.add_argument("--stage2-target", type=int, dest="stage2_target")
    p.add_argument("--paper-protocol", action="store_true")
    p.add_argument("--threads", type=int, help="worker cap (results are schedule-independent)")
    p.add_argument("--force", action="store_true")
    return parser


_COMMANDS = {
    "gen-corpus": _cmd_gen_corpus,
    "extract": _cmd_extract,
    "split": _cmd_split,
    "select": _cmd_select,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "explain": _cmd_explain,
    "run": _cmd_run,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    if args.command == "select":
        args.out.mkdir(parents=True, exist_ok=True)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())

"""Two-stage feature selection: score-threshold filtering, then RFE.

Stage 1 scores every feature against the labels with mutual information
(plug-in estimate, natural log) or the chi-square statistic, and keeps
features scoring strictly above a threshold, applied group by group with
one shared threshold (equivalent to the global filter since groups
partition the columns).

Stage 2 is recursive feature elimination: train a logistic-regression
ranker on the survivors, drop the lowest-importance ceil(step * k)
columns (never below the target), repeat until the target count remains.
A sweep mode evaluates a list of retention percentages on a held-out set
and reports the count with the best balanced accuracy.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import models
from .errors import LengthMismatch, PipelineError, TargetTooLarge
from .evaluation import confusion, metrics
from .features import FeatureVocabulary, SparseBinaryMatrix

logger = logging.getLogger(__name__)

MatrixLike = Union[SparseBinaryMatrix, np.ndarray]


@dataclass(frozen=True)
class FeatureScore:
    column: int
    score: float
    method: str  # "MI" | "CHI2"


@dataclass
class SelectionManifest:
    """Ordered record of one selection stage's survivors."""

    stage: str  # "MI_FILTER" | "CHI2_FILTER" | "RFE"
    kept_columns: np.ndarray  # strictly increasing original indices
    params: dict
    per_group_counts: dict[str, int] = field(default_factory=dict)
    scores: Optional[np.ndarray] = None  # aligned with kept_columns
    input_digest: str = ""
    elimination_order: Optional[np.ndarray] = None  # RFE drop order

    def feature_scores(self) -> list[FeatureScore]:
        """Kept columns as typed score records (original column indices)."""
        if self.scores is None:
            return []
        method = {"MI_FILTER": "MI", "CHI2_FILTER": "CHI2"}.get(self.stage, self.stage)
        return [
            FeatureScore(int(c), float(s), method)
            for c, s in zip(self.kept_columns, self.scores)
        ]

    def to_json(self) -> str:
        doc = {
            "stage": self.stage,
            "params": self.params,
            "kept_columns": [int(c) for c in self.kept_columns],
            "per_group_counts": self.per_group_counts,
            "scores": None if self.scores is None else [float(s) for s in self.scores],
            "input_digest": self.input_digest,
            "elimination_order": (
                None
                if self.elimination_order is None
                else [int(c) for c in self.elimination_order]
            ),
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def write(self, path: Path) -> None:
        Path(path).write_bytes(self.to_json().encode("utf-8"))

    @classmethod
    def read(cls, path: Path) -> "SelectionManifest":
        doc = json.loads(Path(path).read_bytes().decode("utf-8"))
        return cls(
            stage=doc["stage"],
            kept_columns=np.asarray(doc["kept_columns"], dtype=np.int64),
            params=doc["params"],
            per_group_counts=doc.get("per_group_counts", {}),
            scores=None if doc.get("scores") is None else np.asarray(doc["scores"]),
            input_digest=doc.get("input_digest", ""),
            elimination_order=(
                None
                if doc.get("elimination_order") is None
                else np.asarray(doc["elimination_order"], dtype=np.int64)
            ),
        )


def dataset_digest(X: MatrixLike, labels: np.ndarray) -> str:
    """Stable hash of a matrix + label vector, for manifest provenance."""
    h = hashlib.sha256()
    if isinstance(X, SparseBinaryMatrix):
        h.update(f"sparse rows={X.n_rows} cols={X.n_cols}".encode())
        h.update(X.indptr.tobytes())
        h.update(X.indices.tobytes())
    else:
        arr = np.ascontiguousarray(X)
        h.update(f"dense shape={arr.shape}".encode())
        h.update(arr.astype(np.float64).tobytes())
    h.update(np.asarray(labels, dtype=np.int64).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Per-feature scores
# ---------------------------------------------------------------------------


def _check_binary_column(column: np.ndarray) -> np.ndarray:
    x = np.asarray(column)
    if x.ndim != 1:
        raise LengthMismatch("column must be one-dimensional")
    if x.size and not np.isin(x, (0, 1)).all():
        raise PipelineError("column must be binary (0/1)")
    return x.astype(np.int64)


def _ones_counts(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Counts of x==1 per class, plus total class counts."""
    n_classes = int(y.max()) + 1 if y.size else 1
    class_counts = np.bincount(y, minlength=n_classes)
    ones = np.bincount(y[x == 1], minlength=n_classes)
    return ones.reshape(1, -1).astype(np.float64), class_counts.astype(np.float64)


def _mi_from_counts(ones: np.ndarray, class_counts: np.ndarray, n: int) -> np.ndarray:
    """Plug-in MI in nats for each row of `ones` (counts of x=1 per class)."""
    n = float(n)
    p1y = ones / n
    p0y = (class_counts[None, :] - ones) / n
    px1 = ones.sum(axis=1, keepdims=True) / n
    px0 = 1.0 - px1
    py = class_counts[None, :] / n

    def terms(pxy: np.ndarray, px: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.log(pxy) - np.log(px * py)
            vals = pxy * logs
        return np.where(pxy > 0, vals, 0.0)

    mi = (terms(p1y, px1) + terms(p0y, px0)).sum(axis=1)
    return np.maximum(mi, 0.0)


def _chi2_from_counts(ones: np.ndarray, class_counts: np.ndarray, n: int) -> np.ndarray:
    """Chi-square over the 2xk table per row; cells with E=0 are skipped."""
    n = float(n)
    n1 = ones.sum(axis=1, keepdims=True)
    e1 = n1 * class_counts[None, :] / n
    e0 = (n - n1) * class_counts[None, :] / n
    o0 = class_counts[None, :] - ones

    def cells(o: np.ndarray, e: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            v = (o - e) ** 2 / e
        return np.where(e > 0, v, 0.0)

    return (cells(ones, e1) + cells(o0, e0)).sum(axis=1)


def _validate_pair(column: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = _check_binary_column(column)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] != y.shape[0]:
        raise LengthMismatch(f"column has {x.shape[0]} entries, labels {y.shape[0]}")
    if x.size == 0:
        raise LengthMismatch("need at least one sample")
    return x, y


def mutual_information(column: np.ndarray, labels: np.ndarray) -> float:
    """Plug-in mutual information (nats) between a binary column and labels."""
    x, y = _validate_pair(column, labels)
    ones, class_counts = _ones_counts(x, y)
    return float(_mi_from_counts(ones, class_counts, x.shape[0])[0])


def chi_square(column: np.ndarray, labels: np.ndarray) -> float:
    """Chi-square statistic of the 2xk contingency table (constant column -> 0)."""
    x, y = _validate_pair(column, labels)
    ones, class_counts = _ones_counts(x, y)
    return float(_chi2_from_counts(ones, class_counts, x.shape[0])[0])


def score_features(
    matrix: SparseBinaryMatrix, labels: np.ndarray, method: str
) -> np.ndarray:
    """Score every column at once from the sparse structure (one pass over nnz)."""
    y = np.asarray(labels, dtype=np.int64)
    if y.shape[0] != matrix.n_rows:
        raise LengthMismatch(f"matrix has {matrix.n_rows} rows, labels {y.shape[0]}")
    n_classes = int(y.max()) + 1 if y.size else 1
    class_counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    rows, cols = matrix.coo()
    ones = np.zeros((matrix.n_cols, n_classes))
    np.add.at(ones, (cols, y[rows]), 1.0)
    if method == "mi":
        return _mi_from_counts(ones, class_counts, matrix.n_rows)
    if method == "chi2":
        return _chi2_from_counts(ones, class_counts, matrix.n_rows)
    raise PipelineError(f"unknown scoring method {method!r}")


def filter_by_threshold(
    matrix: SparseBinaryMatrix,
    labels: np.ndarray,
    vocab: FeatureVocabulary,
    method: str = "mi",
    threshold: float = 0.01,
) -> SelectionManifest:
    """Keep features with score strictly above the threshold, group by group."""
    if len(vocab) != matrix.n_cols:
        raise PipelineError("vocabulary size does not match matrix columns")
    scores = score_features(matrix, labels, method)
    kept_parts = []
    per_group = {}
    for group, span in vocab.group_slices().items():
        group_cols = np.arange(span.start, span.stop, dtype=np.int64)
        kept = group_cols[scores[span] > threshold]
        per_group[group] = int(kept.size)
        kept_parts.append(kept)
    kept_columns = np.concatenate(kept_parts) if kept_parts else np.zeros(0, np.int64)
    kept_columns.sort()
    return SelectionManifest(
        stage="MI_FILTER" if method == "mi" else "CHI2_FILTER",
        kept_columns=kept_columns,
        params={"method": method, "threshold": threshold},
        per_group_counts=per_group,
        scores=scores[kept_columns],
        input_digest=dataset_digest(matrix, labels),
    )


# ---------------------------------------------------------------------------
# Recursive feature elimination
# ---------------------------------------------------------------------------

DEFAULT_RANKER_PARAMS = {"C": 1.0, "tol": 1e-4, "max_iter": 400, "seed": 42}


def _importance(model: models.LogRegModel) -> np.ndarray:
    w = model.weights
    if w.ndim == 1:
        return np.abs(w)
    return np.linalg.norm(w, axis=0)


def rfe(
    X_train: MatrixLike,
    y_train: np.ndarray,
    target_count: int,
    step_fraction: float = 0.1,
    ranker_params: Optional[Mapping] = None,
) -> SelectionManifest:
    """Eliminate lowest-|coefficient| features until target_count remain.

    Each round trains the ranker on the survivors and drops
    ceil(step_fraction * survivors), floored so the final round lands
    exactly on the target. Ranker non-convergence is logged and tolerated;
    elimination proceeds with the last iterate.
    """
    X = models.as_dense(X_train)
    y = np.asarray(y_train, dtype=np.int64)
    n_cols = X.shape[1]
    if not 1 <= target_count <= n_cols:
        raise TargetTooLarge(f"target {target_count} not in [1, {n_cols}]")
    if not 0 < step_fraction < 1:
        raise PipelineError(f"step_fraction must be in (0,1), got {step_fraction}")
    params = dict(DEFAULT_RANKER_PARAMS)
    params.update(ranker_params or {})

    surviving = np.arange(n_cols, dtype=np.int64)
    eliminated: list[int] = []
    model = None
    while True:
        model = models.train_logreg(X[:, surviving], y, **params)
        if not model.converged:
            logger.warning(
                "RFE ranker did not converge at %d features (grad norm %.3g); proceeding",
                surviving.size,
                model.grad_norm,
            )
        if surviving.size == target_count:
            break
        importance = _importance(model)
        drop = min(
            int(np.ceil(step_fraction * surviving.size)),
            surviving.size - target_count,
        )
        order = np.argsort(importance, kind="stable")
        dropped = surviving[order[:drop]]
        eliminated.extend(int(c) for c in np.sort(dropped))
        keep_mask = np.ones(surviving.size, dtype=bool)
        keep_mask[order[:drop]] = False
        surviving = surviving[keep_mask]

    kept = np.sort(surviving)
    final_importance = _importance(model)
    by_col = {int(c): float(s) for c, s in zip(surviving, final_importance)}
    return SelectionManifest(
        stage="RFE",
        kept_columns=kept,
        params={
            "target_count": target_count,
            "step_fraction": step_fraction,
            "ranker": params,
        },
        scores=np.asarray([by_col[int(c)] for c in kept]),
        input_digest=dataset_digest(X_train, y),
        elimination_order=np.asarray(eliminated, dtype=np.int64),
    )


def retention_counts(percentages: Sequence[float], n_cols: int) -> dict[float, int]:
    """Map each percentage to floor(p/100 * n_cols) surviving features."""
    return {p: int(np.floor(p / 100.0 * n_cols)) for p in percentages}


@dataclass
class SweepResult:
    scores: dict[int, float]  # surviving feature count -> balanced accuracy
    best_count: Optional[int]
    manifests: dict[int, SelectionManifest]
    errors: dict[int, str]

    def to_json(self) -> str:
        doc = {
            "scores": {str(k): v for k, v in self.scores.items()},
            "best_count": self.best_count,
            "errors": {str(k): v for k, v in self.errors.items()},
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def rfe_sweep(
    X_train: MatrixLike,
    y_train: np.ndarray,
    X_eval: MatrixLike,
    y_eval: np.ndarray,
    percentages: Sequence[float],
    step_fraction: float = 0.1,
    ranker_params: Optional[Mapping] = None,
) -> SweepResult:
    """Balanced accuracy on the evaluation set per retention percentage.

    Feature counts are floor(p/100 * n_cols). Per-count failures are
    recorded without aborting the sweep; ties on balanced accuracy resolve
    toward the smaller count.
    """
    if isinstance(X_train, SparseBinaryMatrix) and isinstance(X_eval, SparseBinaryMatrix):
        overlap = set(X_train.row_ids) & set(X_eval.row_ids)
        if overlap:
            raise PipelineError(
                f"evaluation rows overlap training rows ({len(overlap)} shared ids)"
            )
    X = models.as_dense(X_train)
    Xe = models.as_dense(X_eval)
    y = np.asarray(y_train, dtype=np.int64)
    ye = np.asarray(y_eval, dtype=np.int64)
    n_cols = X.shape[1]
    n_classes = int(max(y.max(), ye.max())) + 1
    params = dict(DEFAULT_RANKER_PARAMS)
    params.update(ranker_params or {})

    result = SweepResult(scores={}, best_count=None, manifests={}, errors={})
    counts = []
    for count in retention_counts(percentages, n_cols).values():
        if count not in counts:
            counts.append(count)
    for count in counts:
        try:
            manifest = rfe(X, y, count, step_fraction, params)
        except (TargetTooLarge, PipelineError) as exc:
            result.errors[count] = str(exc)
            continue
        kept = manifest.kept_columns
        clf = models.train_logreg(X[:, kept], y, **params)
        predictions = clf.predict(Xe[:, kept])
        report = metrics(confusion(ye, predictions, n_classes))
        result.scores[count] = report.balanced_accuracy
        result.manifests[count] = manifest
    if result.scores:
        result.best_count = max(result.scores.items(), key=lambda kv: (kv[1], -kv[0]))[0]
    return result


def compose_kept_columns(
    stage1: SelectionManifest, stage2: SelectionManifest
) -> np.ndarray:
    """Map stage-2 survivors (indices into stage-1 output) back to original columns."""
    return stage1.kept_columns[stage2.kept_columns]

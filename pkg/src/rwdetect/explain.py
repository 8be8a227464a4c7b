"""Model explanations: exact linear SHAP and LIME over binary rows.

For a linear logit z(x) = w.x + b with independent features, the exact
Shapley attribution of feature i at row x against a background of
per-column training means mu is

    phi_i = w_i * (x_i - mu_i)

which satisfies completeness: sum(phi) = z(x) - z(mu). Global importance
ranks features by mean |phi| over an evaluation set.

LIME treats the instance's active feature set as the interpretable
representation: perturbations flip each active coordinate to 0 with
probability 1/2 (inactive coordinates stay 0), are weighted by
exp(-d^2 / kernel_width^2) with d the Hamming distance over the active
set, and a weighted ridge surrogate is fit to the model's positive-class
probability. The top coefficients by magnitude explain the verdict.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ColumnMismatch
from .features import FeatureVocabulary, SparseBinaryMatrix, feature_group
from .models import LogRegModel

DEFAULT_LIME_SAMPLES = 5000
DEFAULT_RIDGE_STRENGTH = 1.0


@dataclass(frozen=True)
class Attribution:
    column: int
    name: Optional[str]
    value: float


@dataclass
class LimeExplanation:
    attributions: list[Attribution]
    intercept: float = 0.0
    r_squared: float = 0.0
    diagnostic: Optional[str] = None


def _class_weights(model: LogRegModel, class_index: Optional[int]) -> tuple[np.ndarray, float]:
    if model.weights.ndim == 1:
        return model.weights, float(model.intercept[0])
    if class_index is None:
        raise ColumnMismatch("multiclass model: class_index is required for SHAP")
    return model.weights[class_index], float(model.intercept[class_index])


def shap_linear(
    model: LogRegModel,
    x: np.ndarray,
    background_means: np.ndarray,
    vocab: Optional[FeatureVocabulary] = None,
    class_index: Optional[int] = None,
) -> list[Attribution]:
    """Exact logit-scale attributions for one row (columns where phi can be != 0)."""
    weights, _ = _class_weights(model, class_index)
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(background_means, dtype=np.float64)
    if x.shape[0] != weights.shape[0] or mu.shape[0] != weights.shape[0]:
        raise ColumnMismatch(
            f"row/means must have {weights.shape[0]} columns, got {x.shape[0]}/{mu.shape[0]}"
        )
    phi = weights * (x - mu)
    columns = np.flatnonzero((x != 0) | (mu != 0))
    return [
        Attribution(int(c), vocab.names[int(c)] if vocab else None, float(phi[c]))
        for c in columns
    ]


def shap_completeness_gap(
    model: LogRegModel,
    x: np.ndarray,
    background_means: np.ndarray,
    class_index: Optional[int] = None,
) -> float:
    """|sum(phi) - (logit(x) - logit(mu))|; exactly 0 up to float addition."""
    weights, intercept = _class_weights(model, class_index)
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(background_means, dtype=np.float64)
    phi_sum = float((weights * (x - mu)).sum())
    gap = phi_sum - ((weights @ x + intercept) - (weights @ mu + intercept))
    return abs(float(gap))


@dataclass
class GlobalImportance:
    ranked: list[Attribution]  # value = mean |phi|, descending
    group_counts: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "top_features": [
                {"column": a.column, "name": a.name, "mean_abs_shap": a.value}
                for a in self.ranked
            ],
            "group_counts": self.group_counts,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def write(self, path: Path) -> None:
        Path(path).write_bytes(self.to_json().encode("utf-8"))


def shap_global(
    model: LogRegModel,
    X_eval: SparseBinaryMatrix,
    background_means: np.ndarray,
    vocab: Optional[FeatureVocabulary] = None,
    top_n: int = 50,
    class_index: Optional[int] = None,
) -> GlobalImportance:
    """Rank features by mean |phi| over the evaluation rows.

    For binary columns |x - mu| is mu where x=0 and 1-mu where x=1, so the
    mean over rows has a closed form in the per-column active counts.
    Multiclass models without an explicit class_index rank by the Euclidean
    norm of the per-class coefficients (the same convention RFE uses).
    """
    if model.weights.ndim == 1:
        magnitude = np.abs(model.weights)
    elif class_index is not None:
        magnitude = np.abs(model.weights[class_index])
    else:
        magnitude = np.linalg.norm(model.weights, axis=0)
    if X_eval.n_cols != magnitude.shape[0]:
        raise ColumnMismatch(
            f"matrix has {X_eval.n_cols} columns, model expects {magnitude.shape[0]}"
        )
    mu = np.asarray(background_means, dtype=np.float64)
    n = max(1, X_eval.n_rows)
    active = X_eval.column_counts().astype(np.float64)
    mean_abs_dev = (active * (1.0 - mu) + (n - active) * mu) / n
    importance = magnitude * mean_abs_dev

    order = np.argsort(-importance, kind="stable")[:top_n]
    ranked = [
        Attribution(int(c), vocab.names[int(c)] if vocab else None, float(importance[c]))
        for c in order
    ]
    group_counts: dict[str, int] = {}
    if vocab is not None:
        for a in ranked:
            group = feature_group(a.name)
            group_counts[group] = group_counts.get(group, 0) + 1
    return GlobalImportance(ranked, group_counts)


def lime_explain(
    predict_proba_fn: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    n_samples: int = DEFAULT_LIME_SAMPLES,
    kernel_width: Optional[float] = None,
    top_k: int = 5,
    seed: int = 42,
    vocab: Optional[FeatureVocabulary] = None,
    class_index: int = 1,
    ridge_strength: float = DEFAULT_RIDGE_STRENGTH,
) -> LimeExplanation:
    """Local surrogate explanation of one binary row (see module docstring)."""
    x = np.asarray(x, dtype=np.float64)
    active = np.flatnonzero(x)
    if active.size == 0:
        return LimeExplanation([], diagnostic="degenerate neighborhood: no active features")
    if kernel_width is None:
        kernel_width = 0.75 * float(np.sqrt(active.size))

    rng = np.random.default_rng(seed)
    kept = rng.random((n_samples, active.size)) >= 0.5  # True keeps the coordinate
    if bool(np.all(kept == kept[0])):
        return LimeExplanation(
            [], diagnostic="degenerate neighborhood: all perturbations identical"
        )

    rows = np.zeros((n_samples, x.shape[0]))
    rows[:, active] = kept.astype(np.float64)
    target = predict_proba_fn(rows)[:, class_index]

    distance = (active.size - kept.sum(axis=1)).astype(np.float64)
    sample_weights = np.exp(-(distance**2) / kernel_width**2)

    # Weighted ridge with unpenalized intercept: solve (A^T W A + lam*I') beta = A^T W t
    design = np.column_stack([kept.astype(np.float64), np.ones(n_samples)])
    wd = design * sample_weights[:, None]
    gram = design.T @ wd
    penalty = ridge_strength * np.eye(active.size + 1)
    penalty[-1, -1] = 0.0
    beta = np.linalg.solve(gram + penalty, wd.T @ target)
    coefs, intercept = beta[:-1], float(beta[-1])

    fitted = design @ beta
    wsum = sample_weights.sum()
    mean_t = float((sample_weights * target).sum() / wsum)
    ss_res = float((sample_weights * (target - fitted) ** 2).sum())
    ss_tot = float((sample_weights * (target - mean_t) ** 2).sum())
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0

    order = sorted(range(active.size), key=lambda i: (-abs(coefs[i]), active[i]))[:top_k]
    attributions = [
        Attribution(
            int(active[i]),
            vocab.names[int(active[i])] if vocab else None,
            float(coefs[i]),
        )
        for i in order
    ]
    return LimeExplanation(attributions, intercept, r_squared)


def write_attributions_csv(
    attributions: Sequence[Attribution], path: Path, vocab: Optional[FeatureVocabulary] = None
) -> None:
    """CSV emission (feature, group, value, rank) for plot-ready downstream use."""
    lines = ["feature,group,value,rank"]
    for rank, a in enumerate(attributions, start=1):
        name = a.name if a.name is not None else (vocab.names[a.column] if vocab else str(a.column))
        group = feature_group(name) if ":" in name else ""
        safe = name.replace('"', '""')
        lines.append(f'"{safe}",{group},{a.value!r},{rank}')
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))

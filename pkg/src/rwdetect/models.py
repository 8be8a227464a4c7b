"""Classifiers: L2 logistic regression, Gini decision tree, and ensembles.

Logistic regression minimizes

    mean cross-entropy + ||w||^2 / (2 * C * n)        (intercept unpenalized)

with a monotone first-order method (Barzilai-Borwein steps safeguarded by
Armijo step-halving), so the recorded loss never increases across accepted
iterations and results are bit-reproducible. Binary models keep a single
weight vector; multiclass uses softmax cross-entropy.

Trees split binary features greedily by Gini decrease (value 0 goes left,
1 goes right). random_forest trains on bootstrap resamples with sqrt(m)
candidate columns per node and predicts by majority vote; extra_trees
trains on the full sample with random candidate columns and predicts by
averaging leaf distributions. Because features are binary the only
possible threshold is 0/1, so extra-trees randomness lives entirely in
candidate sampling. Per-tree PRNG streams derive from (seed, tree index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ColumnMismatch, PipelineError
from .features import SparseBinaryMatrix

MatrixLike = Union[SparseBinaryMatrix, np.ndarray]


def as_dense(X: MatrixLike) -> np.ndarray:
    if isinstance(X, SparseBinaryMatrix):
        return X.to_dense()
    return np.asarray(X, dtype=np.float64)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logreg_loss_grad(
    params: np.ndarray, X: np.ndarray, y: np.ndarray, C: float, n_classes: int
) -> tuple[float, np.ndarray]:
    """Objective and gradient at flat `params` (weights then intercepts)."""
    n, m = X.shape
    reg = 1.0 / (2.0 * C * n)
    if n_classes == 2:
        w, b = params[:m], params[m]
        z = X @ w + b
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z) + reg * (w @ w))
        residual = (_sigmoid(z) - y) / n
        grad_w = X.T @ residual + w / (C * n)
        grad_b = residual.sum()
        return loss, np.concatenate([grad_w, [grad_b]])

    W = params[: n_classes * m].reshape(n_classes, m)
    b = params[n_classes * m :]
    Z = X @ W.T + b
    Zmax = Z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(Z - Zmax).sum(axis=1, keepdims=True)) + Zmax
    log_probs = Z - log_norm
    loss = float(-np.mean(log_probs[np.arange(n), y]) + reg * (W * W).sum())
    D = np.exp(log_probs)
    D[np.arange(n), y] -= 1.0
    D /= n
    grad_W = D.T @ X + W / (C * n)
    grad_b = D.sum(axis=0)
    return loss, np.concatenate([grad_W.ravel(), grad_b])


def _minimize(fun_grad, w0: np.ndarray, tol: float, max_iter: int):
    """Monotone descent: Barzilai-Borwein trial step, Armijo step-halving."""
    w = w0.copy()
    f, g = fun_grad(w)
    history = [f]
    step = 1.0
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        grad_norm = float(np.abs(g).max()) if g.size else 0.0
        if grad_norm <= tol:
            converged = True
            iterations -= 1
            break
        gg = float(g @ g)
        accepted = None
        t = step
        for _ in range(64):
            w_try = w - t * g
            f_try, g_try = fun_grad(w_try)
            if f_try <= f - 1e-4 * t * gg:
                accepted = (w_try, f_try, g_try)
                break
            t *= 0.5
        if accepted is None:
            break  # no float-representable descent left
        w_new, f_new, g_new = accepted
        s = w_new - w
        yv = g_new - g
        sy = float(s @ yv)
        step = float(s @ s) / sy if sy > 1e-300 else 1.0
        w, f, g = w_new, f_new, g_new
        history.append(f)
    grad_norm = float(np.abs(g).max()) if g.size else 0.0
    if grad_norm <= tol:
        converged = True
    return w, f, g, iterations, converged, history


@dataclass
class LogRegModel:
    weights: np.ndarray  # (m,) binary, (k, m) multiclass
    intercept: np.ndarray  # scalar array binary, (k,) multiclass
    class_names: tuple[str, ...]
    C: float
    seed: int
    n_iter: int = 0
    final_loss: float = 0.0
    grad_norm: float = 0.0
    converged: bool = True
    loss_history: list[float] = field(default_factory=list, repr=False)

    @property
    def n_features(self) -> int:
        return self.weights.shape[-1]

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = as_dense(X)
        if X.shape[1] != self.n_features:
            raise ColumnMismatch(
                f"model expects {self.n_features} columns, got {X.shape[1]}"
            )
        return X

    def decision_function(self, X: MatrixLike) -> np.ndarray:
        X = self._check(X)
        if self.weights.ndim == 1:
            return X @ self.weights + self.intercept[0]
        return X @ self.weights.T + self.intercept

    def predict_proba(self, X: MatrixLike) -> np.ndarray:
        z = self.decision_function(X)
        if z.ndim == 1:
            p1 = _sigmoid(z)
            return np.column_stack([1.0 - p1, p1])
        zmax = z.max(axis=1, keepdims=True)
        e = np.exp(z - zmax)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X: MatrixLike) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


def train_logreg(
    X: MatrixLike,
    y: np.ndarray,
    C: float = 1.0,
    tol: float = 1e-6,
    max_iter: int = 10000,
    seed: int = 42,
    class_names: Optional[Sequence[str]] = None,
    n_classes: Optional[int] = None,
) -> LogRegModel:
    """Deterministic training from a zero start; non-convergence is flagged."""
    X = as_dense(X)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] != y.shape[0]:
        raise PipelineError("X and y must align")
    if C <= 0:
        raise PipelineError("C must be positive")
    n, m = X.shape
    k = n_classes or (len(class_names) if class_names else int(y.max()) + 1)
    k = max(k, 2)
    names = tuple(class_names) if class_names else tuple(str(i) for i in range(k))

    size = m + 1 if k == 2 else k * (m + 1)
    w0 = np.zeros(size)
    w, f, g, n_iter, converged, history = _minimize(
        lambda p: logreg_loss_grad(p, X, y, C, k), w0, tol, max_iter
    )
    if k == 2:
        weights, intercept = w[:m], np.asarray([w[m]])
    else:
        weights, intercept = w[: k * m].reshape(k, m), w[k * m :]
    return LogRegModel(
        weights=weights,
        intercept=intercept,
        class_names=names,
        C=C,
        seed=seed,
        n_iter=n_iter,
        final_loss=f,
        grad_norm=float(np.abs(g).max()) if g.size else 0.0,
        converged=converged,
        loss_history=history,
    )


# ---------------------------------------------------------------------------
# Gini trees and ensembles
# ---------------------------------------------------------------------------


def gini_impurity(distribution: np.ndarray) -> float:
    p = np.asarray(distribution, dtype=np.float64)
    total = p.sum()
    if total <= 0:
        return 0.0
    p = p / total
    return float(1.0 - (p * p).sum())


@dataclass
class TreeModel:
    """Node-table tree: leaf nodes have split_col == -1 and a distribution."""

    split_col: np.ndarray  # int64, -1 for leaves
    left: np.ndarray  # child index, -1 for leaves
    right: np.ndarray
    leaf_dist: np.ndarray  # (n_nodes, k); zeros except at leaves
    class_names: tuple[str, ...]
    max_depth: Optional[int]
    min_samples_split: int
    seed: int

    @property
    def n_classes(self) -> int:
        return self.leaf_dist.shape[1]

    def predict_proba(self, X: MatrixLike) -> np.ndarray:
        X = as_dense(X)
        out = np.zeros((X.shape[0], self.n_classes))
        for i in range(X.shape[0]):
            node = 0
            while self.split_col[node] >= 0:
                col = self.split_col[node]
                node = self.right[node] if X[i, col] > 0.5 else self.left[node]
            out[i] = self.leaf_dist[node]
        return out

    def predict(self, X: MatrixLike) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


def _best_split(
    X: np.ndarray, y: np.ndarray, idx: np.ndarray, candidates: np.ndarray, n_classes: int
) -> tuple[int, float]:
    """(column, gini decrease) of the best candidate split, or (-1, 0)."""
    sub = X[np.ix_(idx, candidates)]
    labels = y[idx]
    n = idx.size
    total_counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    parent_gini = gini_impurity(total_counts)

    right_counts = np.zeros((candidates.size, n_classes))
    for k in range(n_classes):
        mask = labels == k
        if mask.any():
            right_counts[:, k] = sub[mask].sum(axis=0)
    left_counts = total_counts[None, :] - right_counts
    n_right = right_counts.sum(axis=1)
    n_left = n - n_right

    def side_gini(counts: np.ndarray, sizes: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            p = counts / sizes[:, None]
            g = 1.0 - (p * p).sum(axis=1)
        return np.where(sizes > 0, g, 0.0)

    weighted = (
        n_left * side_gini(left_counts, n_left)
        + n_right * side_gini(right_counts, n_right)
    ) / n
    decrease = parent_gini - weighted
    # A valid split needs both sides non-empty; zero decrease is still a
    # split (stopping is governed by purity / depth / min_samples_split),
    # which is what lets depth-2 trees fit XOR-style interactions.
    decrease[(n_left == 0) | (n_right == 0)] = -np.inf
    best = int(np.argmax(decrease))
    if not np.isfinite(decrease[best]):
        return -1, 0.0
    return int(candidates[best]), float(decrease[best])


def _grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    sample_idx: np.ndarray,
    n_classes: int,
    max_depth: Optional[int],
    min_samples_split: int,
    candidate_picker,
) -> dict:
    split_col: list[int] = []
    left: list[int] = []
    right: list[int] = []
    leaf_dist: list[np.ndarray] = []

    def new_node() -> int:
        split_col.append(-1)
        left.append(-1)
        right.append(-1)
        leaf_dist.append(np.zeros(n_classes))
        return len(split_col) - 1

    root = new_node()
    stack = [(root, sample_idx, 0)]
    while stack:
        node, idx, depth = stack.pop()
        counts = np.bincount(y[idx], minlength=n_classes).astype(np.float64)
        pure = (counts > 0).sum() <= 1
        at_depth = max_depth is not None and depth >= max_depth
        if pure or at_depth or idx.size < min_samples_split:
            leaf_dist[node] = counts / counts.sum()
            continue
        candidates = candidate_picker()
        col, _ = _best_split(X, y, idx, candidates, n_classes)
        if col < 0:
            leaf_dist[node] = counts / counts.sum()
            continue
        mask = X[idx, col] > 0.5
        split_col[node] = col
        left_child = new_node()
        right_child = new_node()
        left[node] = left_child
        right[node] = right_child
        # Right pushed first so the left branch grows first (stable node ids).
        stack.append((right_child, idx[mask], depth + 1))
        stack.append((left_child, idx[~mask], depth + 1))
    return {
        "split_col": np.asarray(split_col, dtype=np.int64),
        "left": np.asarray(left, dtype=np.int64),
        "right": np.asarray(right, dtype=np.int64),
        "leaf_dist": np.vstack(leaf_dist),
    }


def train_tree(
    X: MatrixLike,
    y: np.ndarray,
    max_depth: Optional[int] = None,
    min_samples_split: int = 2,
    seed: int = 42,
    class_names: Optional[Sequence[str]] = None,
    n_classes: Optional[int] = None,
) -> TreeModel:
    """Greedy Gini tree over all columns (single-class data yields one leaf)."""
    X = as_dense(X)
    y = np.asarray(y, dtype=np.int64)
    k = n_classes or (len(class_names) if class_names else int(y.max()) + 1)
    k = max(k, 2)
    names = tuple(class_names) if class_names else tuple(str(i) for i in range(k))
    all_cols = np.arange(X.shape[1], dtype=np.int64)
    parts = _grow_tree(
        X, y, np.arange(X.shape[0]), k, max_depth, min_samples_split, lambda: all_cols
    )
    return TreeModel(
        class_names=names,
        max_depth=max_depth,
        min_samples_split=min_samples_split,
        seed=seed,
        **parts,
    )


@dataclass
class EnsembleModel:
    variant: str  # "random_forest" | "extra_trees"
    trees: list[TreeModel]
    class_names: tuple[str, ...]
    n_estimators: int
    max_depth: Optional[int]
    min_samples_split: int
    seed: int
    bootstrap: bool = True

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def predict_proba(self, X: MatrixLike) -> np.ndarray:
        X = as_dense(X)
        if self.variant == "random_forest":
            votes = np.zeros((X.shape[0], self.n_classes))
            for tree in self.trees:
                picks = tree.predict(X)
                votes[np.arange(X.shape[0]), picks] += 1.0
            return votes / len(self.trees)
        acc = np.zeros((X.shape[0], self.n_classes))
        for tree in self.trees:
            acc += tree.predict_proba(X)
        return acc / len(self.trees)

    def predict(self, X: MatrixLike) -> np.ndarray:
        # argmax of vote fractions / mean distributions; ties resolve to the
        # lowest class index in both variants.
        return np.argmax(self.predict_proba(X), axis=1)


def train_ensemble(
    X: MatrixLike,
    y: np.ndarray,
    variant: str,
    n_estimators: int = 100,
    max_depth: Optional[int] = None,
    min_samples_split: int = 2,
    seed: int = 42,
    class_names: Optional[Sequence[str]] = None,
    n_classes: Optional[int] = None,
) -> EnsembleModel:
    if variant not in ("random_forest", "extra_trees"):
        raise PipelineError(f"unknown ensemble variant {variant!r}")
    X = as_dense(X)
    y = np.asarray(y, dtype=np.int64)
    n, m = X.shape
    k = n_classes or (len(class_names) if class_names else int(y.max()) + 1)
    k = max(k, 2)
    names = tuple(class_names) if class_names else tuple(str(i) for i in range(k))
    bootstrap = variant == "random_forest"
    n_candidates = max(1, int(np.sqrt(m)))

    trees = []
    for t in range(n_estimators):
        rng = np.random.default_rng([seed, t])
        idx = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        picker = lambda: np.sort(rng.choice(m, size=min(n_candidates, m), replace=False))
        parts = _grow_tree(X, y, np.asarray(idx), k, max_depth, min_samples_split, picker)
        trees.append(
            TreeModel(
                class_names=names,
                max_depth=max_depth,
                min_samples_split=min_samples_split,
                seed=seed,
                **parts,
            )
        )
    return EnsembleModel(
        variant=variant,
        trees=trees,
        class_names=names,
        n_estimators=n_estimators,
        max_depth=max_depth,
        min_samples_split=min_samples_split,
        seed=seed,
        bootstrap=bootstrap,
    )


# ---------------------------------------------------------------------------
# Persistence (MLRMODEL v1)
# ---------------------------------------------------------------------------


def _tree_doc(tree: TreeModel) -> dict:
    return {
        "split_col": [int(v) for v in tree.split_col],
        "left": [int(v) for v in tree.left],
        "right": [int(v) for v in tree.right],
        "leaf_dist": [[float(p) for p in row] for row in tree.leaf_dist],
    }


def _tree_from_doc(doc: dict, names: tuple[str, ...], hyper: dict) -> TreeModel:
    return TreeModel(
        split_col=np.asarray(doc["split_col"], dtype=np.int64),
        left=np.asarray(doc["left"], dtype=np.int64),
        right=np.asarray(doc["right"], dtype=np.int64),
        leaf_dist=np.asarray(doc["leaf_dist"], dtype=np.float64),
        class_names=names,
        max_depth=hyper.get("max_depth"),
        min_samples_split=hyper.get("min_samples_split", 2),
        seed=hyper.get("seed", 42),
    )


def save_model(model, path: Path) -> None:
    if isinstance(model, LogRegModel):
        doc = {
            "format": "MLRMODEL v1",
            "variant": "logreg",
            "class_names": list(model.class_names),
            "hyper": {"C": model.C, "seed": model.seed},
            "weights": (
                [float(w) for w in model.weights]
                if model.weights.ndim == 1
                else [[float(w) for w in row] for row in model.weights]
            ),
            "intercept": [float(b) for b in model.intercept],
            "diagnostics": {
                "n_iter": model.n_iter,
                "final_loss": model.final_loss,
                "grad_norm": model.grad_norm,
                "converged": model.converged,
            },
        }
    elif isinstance(model, TreeModel):
        doc = {
            "format": "MLRMODEL v1",
            "variant": "tree",
            "class_names": list(model.class_names),
            "hyper": {
                "max_depth": model.max_depth,
                "min_samples_split": model.min_samples_split,
                "seed": model.seed,
            },
            "nodes": _tree_doc(model),
        }
    elif isinstance(model, EnsembleModel):
        doc = {
            "format": "MLRMODEL v1",
            "variant": model.variant,
            "class_names": list(model.class_names),
            "hyper": {
                "n_estimators": model.n_estimators,
                "max_depth": model.max_depth,
                "min_samples_split": model.min_samples_split,
                "seed": model.seed,
                "bootstrap": model.bootstrap,
            },
            "trees": [_tree_doc(t) for t in model.trees],
        }
    else:
        raise PipelineError(f"cannot serialize model of type {type(model).__name__}")
    Path(path).write_bytes(
        (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode("utf-8")
    )


def load_model(path: Path):
    doc = json.loads(Path(path).read_bytes().decode("utf-8"))
    if doc.get("format") != "MLRMODEL v1":
        raise PipelineError(f"not an MLRMODEL v1 file: {path}")
    names = tuple(doc["class_names"])
    hyper = doc.get("hyper", {})
    variant = doc["variant"]
    if variant == "logreg":
        weights = np.asarray(doc["weights"], dtype=np.float64)
        diag = doc.get("diagnostics", {})
        return LogRegModel(
            weights=weights,
            intercept=np.asarray(doc["intercept"], dtype=np.float64),
            class_names=names,
            C=hyper.get("C", 1.0),
            seed=hyper.get("seed", 42),
            n_iter=diag.get("n_iter", 0),
            final_loss=diag.get("final_loss", 0.0),
            grad_norm=diag.get("grad_norm", 0.0),
            converged=diag.get("converged", True),
        )
    if variant == "tree":
        return _tree_from_doc(doc["nodes"], names, hyper)
    if variant in ("random_forest", "extra_trees"):
        trees = [_tree_from_doc(t, names, hyper) for t in doc["trees"]]
        return EnsembleModel(
            variant=variant,
            trees=trees,
            class_names=names,
            n_estimators=hyper.get("n_estimators", len(trees)),
            max_depth=hyper.get("max_depth"),
            min_samples_split=hyper.get("min_samples_split", 2),
            seed=hyper.get("seed", 42),
            bootstrap=hyper.get("bootstrap", variant == "random_forest"),
        )
    raise PipelineError(f"unknown model variant {variant!r}")

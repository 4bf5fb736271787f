"""Shallow-classifier probes of what the embeddings encode."""

from __future__ import annotations

import copy
import csv
import itertools
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.decomposition import PCA
from sklearn.exceptions import ConvergenceWarning
from sklearn.model_selection import train_test_split
from sklearn.neural_network import MLPClassifier
from sklearn.preprocessing import StandardScaler
from sklearn.tree import DecisionTreeClassifier
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import quantize_pitch

logger = logging.getLogger(__name__)

DT_MAX_DEPTHS = (3, 5, 8, 12, None)
DT_MIN_LEAVES = (1, 5, 20)
LARGE_CORPUS_THRESHOLD = 2000


class ProbeError(ValueError):
    pass


# --------------------------------------------------------------------------
# Metrics


def f1_report(predictions, labels, classes=None) -> tuple[float, float]:
    """(micro F1, macro F1).  Macro averages per-class F1 over ``classes``
    (default: every class seen in labels or predictions); a class without
    any true or predicted sample scores 0."""
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    if pred.shape != true.shape:
        raise ValueError("predictions and labels differ in length")
    if true.size == 0:
        raise ValueError("empty input")
    if classes is None:
        classes = np.union1d(np.unique(true), np.unique(pred))
    micro = float(np.mean(pred == true))
    per_class = []
    for c in classes:
        tp = np.sum((pred == c) & (true == c))
        denom = np.sum(pred == c) + np.sum(true == c)
        per_class.append(2.0 * tp / denom if denom else 0.0)
    return micro, float(np.mean(per_class))


def relative_improvement(f1: float, f1_majority: float) -> float:
    """(F1 - F1_majority) / F1_majority."""
    if f1_majority == 0:
        raise ZeroDivisionError("relative improvement undefined for a zero baseline")
    return (f1 - f1_majority) / f1_majority


def majority_label(y):
    values, counts = np.unique(np.asarray(y), return_counts=True)
    return values[np.argmax(counts)]


# --------------------------------------------------------------------------
# Splits


def split_probe(labels, seed: int = 0, ratios=(8, 1, 1)):
    """Disjoint train/valid/test index arrays at ``ratios``, stratified when
    every class has enough members."""
    labels = np.asarray(labels)
    n = labels.size
    if n < 10:
        raise ProbeError("need at least 10 labelled samples to split")
    total = sum(ratios)
    n_test = int(round(n * ratios[2] / total))
    n_valid = int(round(n * ratios[1] / total))
    idx = np.arange(n)
    _, counts = np.unique(labels, return_counts=True)
    stratify = labels if counts.min() >= 3 else None
    try:
        rest, test = train_test_split(idx, test_size=n_test, random_state=seed, stratify=stratify)
        train, valid = train_test_split(rest, test_size=n_valid, random_state=seed,
                                        stratify=None if stratify is None else labels[rest])
    except ValueError:
        rest, test = train_test_split(idx, test_size=n_test, random_state=seed)
        train, valid = train_test_split(rest, test_size=n_valid, random_state=seed)
    return np.sort(train), np.sort(valid), np.sort(test)


# --------------------------------------------------------------------------
# Probes


class MLPProbe(ClassifierMixin, BaseEstimator):
    """One-hidden-layer ReLU MLP, early-stopped on validation micro F1.

    ``hidden_size=None`` picks 300 for probe-train sets of at least 2000
    samples and 100 otherwise.
    """

    def __init__(self, hidden_size=None, max_epochs=200, patience=20, random_state=0):
        self.hidden_size = hidden_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.random_state = random_state

    def fit(self, X, y, X_valid=None, y_valid=None):
        X, y = check_X_y(X, y)
        if X_valid is None:
            X_valid, y_valid = X, y
        X_valid = check_array(X_valid)
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ProbeError("probe needs at least two classes")
        hidden = self.hidden_size or (300 if len(y) >= LARGE_CORPUS_THRESHOLD else 100)
        self.scaler_ = StandardScaler().fit(X)
        Xs, Xv = self.scaler_.transform(X), self.scaler_.transform(X_valid)
        mlp = MLPClassifier((hidden,), activation="relu", random_state=self.random_state)
        best, best_score, stale = None, -1.0, 0
        self.history_ = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            for epoch in range(self.max_epochs):
                mlp.partial_fit(Xs, y, classes=self.classes_)
                score = f1_report(mlp.predict(Xv), y_valid)[0]
                self.history_.append(score)
                if score > best_score:
                    best, best_score, stale = copy.deepcopy(mlp), score, 0
                else:
                    stale += 1
                    if stale >= self.patience:
                        break
        self.mlp_ = best
        self.hidden_size_ = hidden
        self.valid_score_ = best_score
        return self

    def predict(self, X):
        check_is_fitted(self, "mlp_")
        return self.mlp_.predict(self.scaler_.transform(check_array(X)))


class DecisionTreeProbe(ClassifierMixin, BaseEstimator):
    """CART (Gini) with a grid search over depth and leaf size on the
    validation micro F1; ties keep the earliest grid point."""

    def __init__(self, max_depths=DT_MAX_DEPTHS, min_leaves=DT_MIN_LEAVES, random_state=0):
        self.max_depths = max_depths
        self.min_leaves = min_leaves
        self.random_state = random_state

    def fit(self, X, y, X_valid=None, y_valid=None):
        X, y = check_X_y(X, y)
        if X_valid is None:
            X_valid, y_valid = X, y
        X_valid = check_array(X_valid)
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ProbeError("probe needs at least two classes")
        self.grid_scores_ = {}
        best, best_score = None, -1.0
        for depth, leaf in itertools.product(self.max_depths, self.min_leaves):
            tree = DecisionTreeClassifier(criterion="gini", max_depth=depth,
                                          min_samples_leaf=leaf,
                                          random_state=self.random_state).fit(X, y)
            score = f1_report(tree.predict(X_valid), y_valid)[0]
            self.grid_scores_[(depth, leaf)] = score
            if score > best_score:
                best, best_score = tree, score
        self.tree_ = best
        self.best_params_ = {"max_depth": best.max_depth, "min_samples_leaf": best.min_samples_leaf}
        return self

    def predict(self, X):
        check_is_fitted(self, "tree_")
        return self.tree_.predict(check_array(X))


def train_mlp_probe(X_train, y_train, X_valid, y_valid, seed=0, hidden_size=None) -> MLPProbe:
    return MLPProbe(hidden_size=hidden_size, random_state=seed).fit(X_train, y_train,
                                                                   X_valid, y_valid)


def train_dt_probe(X_train, y_train, X_valid, y_valid, seed=0) -> DecisionTreeProbe:
    return DecisionTreeProbe(random_state=seed).fit(X_train, y_train, X_valid, y_valid)


# --------------------------------------------------------------------------
# Tasks and reports


@dataclass
class ProbeTask:
    name: str
    label_field: str
    scope: dict | None = None  # field -> required value
    quantize: str | None = None  # "octave" for pitch

    def select(self, table: dict):
        """Indices and labels of the samples this task covers."""
        labels = np.asarray(table[self.label_field], dtype=object)
        mask = np.array([v is not None for v in labels])
        for k, v in (self.scope or {}).items():
            mask &= np.asarray(table[k], dtype=object) == v
        idx = np.flatnonzero(mask)
        y = labels[idx]
        if self.quantize == "octave":
            y = np.array([quantize_pitch(v) for v in y])
        else:
            y = np.array([str(v) for v in y])
        if np.unique(y).size < 2:
            raise ProbeError(f"task {self.name!r} has fewer than two classes")
        return idx, y


def default_tasks(table: dict, names=("family", "source", "pitch", "velocity", "style")) -> list:
    tasks = []
    for name in names:
        if name == "pitch":
            tasks.append(ProbeTask("pitch", "pitch", quantize="octave"))
        elif name == "style":
            # one playing-style probe per instrument family
            for fam in sorted({f for f in table["family"] if f is not None}):
                tasks.append(ProbeTask(f"style[{fam}]", "style", {"family": fam}))
        else:
            tasks.append(ProbeTask(name, name))
    return tasks


@dataclass
class ProbeResult:
    task: str
    classifier: str
    n_classes: int
    n_train: int
    n_test: int
    micro_f1: float
    macro_f1: float
    majority_micro_f1: float
    majority_macro_f1: float
    improvement_micro: float
    improvement_macro: float


@dataclass
class ProbeReport:
    results: list = field(default_factory=list)

    def get(self, task: str, classifier: str) -> ProbeResult:
        for r in self.results:
            if r.task == task and r.classifier == classifier:
                return r
        raise KeyError((task, classifier))

    def to_csv(self, path) -> None:
        names = list(ProbeResult.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=names)
            w.writeheader()
            for r in self.results:
                w.writerow(asdict(r))


def _improvement(f1, base):
    try:
        return relative_improvement(f1, base)
    except ZeroDivisionError:
        return math.nan


def run_probe_task(task: ProbeTask, embeddings: np.ndarray, table: dict, seed: int = 0,
                   classifiers=("mlp", "dt"), hidden_size=None) -> list:
    idx, y = task.select(table)
    X = np.asarray(embeddings)[idx]
    tr, va, te = split_probe(y, seed)
    missing = set(np.unique(y[np.concatenate([va, te])])) - set(np.unique(y[tr]))
    if missing:
        logger.warning("task %s: classes %s absent from probe-train; skipped",
                       task.name, sorted(missing))
        return []
    majority = majority_label(y[tr])
    base_pred = np.full(te.size, majority, dtype=y.dtype)
    classes = np.unique(y)
    base_micro, base_macro = f1_report(base_pred, y[te], classes)
    out = []
    for name in classifiers:
        if name == "mlp":
            clf = train_mlp_probe(X[tr], y[tr], X[va], y[va], seed, hidden_size)
        elif name == "dt":
            clf = train_dt_probe(X[tr], y[tr], X[va], y[va], seed)
        else:
            raise ValueError(f"unknown probe classifier {name!r}")
        micro, macro = f1_report(clf.predict(X[te]), y[te], classes)
        out.append(ProbeResult(task.name, name, classes.size, tr.size, te.size, micro, macro,
                               base_micro, base_macro, _improvement(micro, base_micro),
                               _improvement(macro, base_macro)))
    return out


def run_probes(embeddings: np.ndarray, table: dict, tasks=None, seed: int = 0,
               classifiers=("mlp", "dt"), hidden_size=None) -> ProbeReport:
    """Train and evaluate every probe task; ``table`` maps label field -> values."""
    tasks = default_tasks(table) if tasks is None else tasks
    report = ProbeReport()
    for task in tasks:
        try:
            report.results.extend(run_probe_task(task, embeddings, table, seed, classifiers,
                                                 hidden_size))
        except ProbeError as exc:
            logger.warning("skipping task %s: %s", task.name, exc)
    return report


def pca_projection(embeddings: np.ndarray, dims: int = 2, seed: int = 0) -> np.ndarray:
    return PCA(n_components=dims, random_state=seed).fit_transform(np.asarray(embeddings))

"""Cross-validated training and evaluation with imbalance-aware batching.

Folds are assigned at the record level (windows of one record never split
across train/test). Batches are class-proportional by largest-remainder
apportionment. AUROC is the Mann-Whitney statistic with tie handling,
computed one-vs-all per class and macro-averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fusion
from .cache import FeatureStore
from .model import (
    ModelDims,
    ModelParams,
    OptimizerState,
    adam_step,
    backward,
    init_optimizer,
    init_params,
    sequence_probs,
)

__all__ = [
    "EvalError",
    "ClassTooSmall",
    "EmptyTrainingSet",
    "DegenerateLabels",
    "LengthMismatch",
    "ConfigInvalid",
    "FoldAssignment",
    "MetricsReport",
    "TrainSettings",
    "stratified_kfold",
    "balanced_batches",
    "auroc",
    "classification_metrics",
    "train_model",
    "fuse_features",
    "decision_scores",
    "run_experiment",
]


class EvalError(Exception):
    pass


class ClassTooSmall(EvalError):
    pass


class EmptyTrainingSet(EvalError):
    pass


class DegenerateLabels(EvalError):
    pass


class LengthMismatch(EvalError):
    pass


class ConfigInvalid(EvalError):
    pass


@dataclass
class FoldAssignment:
    """Record-to-fold map; per-class counts across folds differ by at most 1."""

    k: int
    assignment: dict[str, int]
    strata: dict[str, int]

    def fold_records(self, fold: int) -> list[str]:
        return sorted(r for r, f in self.assignment.items() if f == fold)

    def complement_records(self, fold: int) -> list[str]:
        return sorted(r for r, f in self.assignment.items() if f != fold)


def stratified_kfold(labels: dict[str, int], k: int, seed: int) -> FoldAssignment:
    """Shuffle each class (seeded) and deal records round-robin to folds.

    The dealing pointer continues across classes, so fold sizes stay as even
    as the total allows, not just per-class counts.
    """
    if k < 2:
        raise ConfigInvalid(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[str]] = {}
    for rec in sorted(labels):
        by_class.setdefault(labels[rec], []).append(rec)
    for cls, recs in sorted(by_class.items()):
        if len(recs) < k:
            raise ClassTooSmall(f"class {cls} has {len(recs)} records, need >= {k}")
    assignment: dict[str, int] = {}
    pointer = 0
    for cls in sorted(by_class):
        recs = by_class[cls]
        order = rng.permutation(len(recs))
        for idx in order:
            assignment[recs[idx]] = pointer % k
            pointer += 1
    return FoldAssignment(k=k, assignment=assignment, strata=dict(labels))


def _largest_remainder(weights: np.ndarray, total: int, caps: np.ndarray) -> np.ndarray:
    """Integer apportionment of `total` by `weights`, capped per class."""
    ideal = weights / weights.sum() * total
    counts = np.minimum(np.floor(ideal).astype(int), caps)
    remainders = ideal - np.floor(ideal)
    # Hand out leftover seats by remainder, then class index; skip full classes.
    order = sorted(range(len(weights)), key=lambda c: (-remainders[c], c))
    i = 0
    while counts.sum() < total:
        c = order[i % len(order)]
        if counts[c] < caps[c]:
            counts[c] += 1
        i += 1
    return counts


def balanced_batches(
    records: list[tuple[str, int]], batch_size: int, seed: int
) -> list[list[str]]:
    """Partition records into class-proportional batches.

    Every batch's composition matches the remaining class proportions to
    within one sample per class; the union over the epoch is the training set
    exactly once, and the final batch may be partial.
    """
    if not records:
        raise EmptyTrainingSet("no training records")
    rng = np.random.default_rng(seed)
    classes = sorted({cls for _, cls in records})
    queues: dict[int, list[str]] = {cls: [] for cls in classes}
    for rec, cls in sorted(records):
        queues[cls].append(rec)
    for cls in classes:
        rng.shuffle(queues[cls])
    heads = {cls: 0 for cls in classes}
    batches: list[list[str]] = []
    remaining = len(records)
    while remaining > 0:
        m = min(batch_size, remaining)
        rem = np.array([len(queues[cls]) - heads[cls] for cls in classes], dtype=float)
        counts = _largest_remainder(rem, m, rem.astype(int))
        batch: list[str] = []
        for cls, cnt in zip(classes, counts):
            start = heads[cls]
            batch.extend(queues[cls][start : start + cnt])
            heads[cls] += int(cnt)
        rng.shuffle(batch)
        batches.append(batch)
        remaining -= m
    return batches


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUROC with half-credit for ties, via one sort."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise LengthMismatch("scores and labels must be equal-length vectors")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("need at least one positive and one negative")
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    y = labels[order]
    u = 0.0
    neg_below = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        pos_here = int(y[i:j].sum())
        neg_here = (j - i) - pos_here
        u += pos_here * (neg_below + 0.5 * neg_here)
        neg_below += neg_here
        i = j
    return u / (n_pos * n_neg)


@dataclass
class MetricsReport:
    """Confusion matrix and the derived scalar metrics."""

    confusion: np.ndarray
    accuracy: float
    precision: float
    sensitivity: float
    specificity: float
    f1: float
    per_class: dict[str, list[float]] = field(default_factory=dict)
    zero_division_flags: list[str] = field(default_factory=list)
    auroc_per_class: list[float] | None = None
    auroc_macro: float | None = None

    def to_dict(self) -> dict:
        out = {
            "confusion_matrix": self.confusion.tolist(),
            "accuracy": self.accuracy,
            "precision": self.precision,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "f1": self.f1,
            "per_class": self.per_class,
            "zero_division_flags": self.zero_division_flags,
        }
        if self.auroc_per_class is not None:
            out["auroc_per_class"] = self.auroc_per_class
            out["auroc_macro"] = self.auroc_macro
        return out


def _safe_div(num: float, den: float, flag: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def classification_metrics(
    preds: np.ndarray, truth: np.ndarray, n_classes: int
) -> MetricsReport:
    """Confusion matrix (rows = truth) plus accuracy/precision/sensitivity/
    specificity/F1; macro-averaged when n_classes > 2, else for class 0."""
    preds = np.asarray(preds, dtype=np.intp)
    truth = np.asarray(truth, dtype=np.intp)
    if preds.shape != truth.shape or preds.ndim != 1 or preds.size == 0:
        raise LengthMismatch("preds and truth must be equal-length non-empty vectors")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, preds), 1)
    total = cm.sum()
    flags: list[str] = []
    per_class: dict[str, list[float]] = {"precision": [], "sensitivity": [], "specificity": [], "f1": []}
    for c in range(n_classes):
        tp = float(cm[c, c])
        fn = float(cm[c].sum() - tp)
        fp = float(cm[:, c].sum() - tp)
        tn = float(total - tp - fn - fp)
        p = _safe_div(tp, tp + fp, f"precision[{c}]", flags)
        s = _safe_div(tp, tp + fn, f"sensitivity[{c}]", flags)
        sp = _safe_div(tn, tn + fp, f"specificity[{c}]", flags)
        f1 = _safe_div(2 * p * s, p + s, f"f1[{c}]", flags)
        per_class["precision"].append(p)
        per_class["sensitivity"].append(s)
        per_class["specificity"].append(sp)
        per_class["f1"].append(f1)
    if n_classes == 2:
        # Binary task: class 0 (MI) is the positive class.
        pick = lambda key: per_class[key][0]
    else:
        pick = lambda key: float(np.mean(per_class[key]))
    return MetricsReport(
        confusion=cm,
        accuracy=float(np.trace(cm) / total),
        precision=pick("precision"),
        sensitivity=pick("sensitivity"),
        specificity=pick("specificity"),
        f1=pick("f1"),
        per_class=per_class,
        zero_division_flags=flags,
    )


def auroc_one_vs_all(scores: np.ndarray, truth: np.ndarray, n_classes: int) -> list[float]:
    """Per-class AUROC where class c's score is its predicted probability."""
    return [auroc(scores[:, c], truth == c) for c in range(n_classes)]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainSettings:
    lr: float = 0.01
    batch_size: int = 64
    epochs: int = 30
    patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.2


def _macro_auroc(scores: np.ndarray, truth: np.ndarray, n_classes: int) -> float:
    vals = []
    for c in range(n_classes):
        pos = truth == c
        if pos.any() and (~pos).any():
            vals.append(auroc(scores[:, c], pos))
    if not vals:
        raise DegenerateLabels("no class with both positives and negatives")
    return float(np.mean(vals))


def train_model(
    x: np.ndarray,
    y: np.ndarray,
    dims: ModelDims,
    seed: int,
    settings: TrainSettings,
    x_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
) -> tuple[ModelParams, OptimizerState, list[dict]]:
    """Adam training with class-proportional batches and early stopping.

    Early stopping monitors validation macro AUROC with the configured
    patience and restores the best parameters; without a validation split it
    simply runs all epochs.
    """
    if x.shape[0] == 0:
        raise EmptyTrainingSet("no training sequences")
    params = init_params(dims, seed)
    state = init_optimizer(params, settings.lr, settings.beta1, settings.beta2, settings.eps)
    records = [(str(idx), int(cls)) for idx, cls in enumerate(y)]
    best_metric = -np.inf
    best_flat = params.flatten()
    best_state = state
    since_best = 0
    history: list[dict] = []
    for epoch in range(settings.epochs):
        batches = balanced_batches(records, settings.batch_size, seed + 1000 * (epoch + 1))
        epoch_loss = 0.0
        for batch in batches:
            idx = np.asarray([int(r) for r in batch], dtype=np.intp)
            loss_val, grads = backward(x[idx], y[idx], params)
            params, state = adam_step(params, grads, state)
            epoch_loss += loss_val * len(idx)
        epoch_loss /= x.shape[0]
        entry = {"epoch": epoch, "train_loss": epoch_loss}
        if x_val is not None and len(x_val):
            val_scores = sequence_probs(x_val, params)
            entry["val_auroc"] = _macro_auroc(val_scores, y_val, dims.n_classes)
            if entry["val_auroc"] > best_metric + 1e-12:
                best_metric = entry["val_auroc"]
                best_flat = params.flatten()
                best_state = state
                since_best = 0
            else:
                since_best += 1
            history.append(entry)
            if since_best > settings.patience:
                break
        else:
            history.append(entry)
    if x_val is not None and len(x_val):
        params = params.from_flat(best_flat)
        state = best_state
    return params, state, history


# ---------------------------------------------------------------------------
# Fusion-aware experiment driver
# ---------------------------------------------------------------------------

def carve_validation(
    pool_ids: list[str], lab: dict[str, int], val_fraction: float, seed: int
) -> tuple[list[str], list[str]]:
    """Stratified train/validation split of a training pool.

    Falls back to no validation split when some class is too small to donate
    a record (training then runs all epochs without early stopping).
    """
    counts: dict[int, int] = {}
    for rid in pool_ids:
        counts[lab[rid]] = counts.get(lab[rid], 0) + 1
    smallest = min(counts.values())
    if smallest < 2:
        return list(pool_ids), []
    val_k = min(max(2, int(round(1.0 / max(val_fraction, 1e-9)))), smallest)
    split = stratified_kfold({r: lab[r] for r in pool_ids}, val_k, seed)
    return split.complement_records(0), split.fold_records(0)


def fuse_features(arr: np.ndarray, strategy: str) -> np.ndarray:
    """(n_leads, gamma, tau) cache entry -> (gamma, d_in) model input."""
    if strategy == "data":
        if arr.shape[0] != 1:
            raise ConfigInvalid("data fusion needs a stacked-input cache (n_leads=1)")
        return arr[0].astype(np.float64)
    if strategy == "feature_concat":
        return np.ascontiguousarray(np.transpose(arr, (1, 0, 2))).reshape(arr.shape[1], -1).astype(np.float64)
    if strategy == "feature_accum":
        return arr.astype(np.float64).sum(axis=0) / arr.shape[0]
    raise ConfigInvalid(f"not a sequence-level fusion strategy: {strategy!r}")


def _model_input_width(store: FeatureStore, strategy: str) -> int:
    if strategy == "data":
        return store.tau
    if strategy == "feature_concat":
        return store.n_leads * store.tau
    if strategy == "feature_accum":
        return store.tau
    return store.tau  # decision strategies train per-lead models on tau


def decision_scores(
    per_lead_params: list[ModelParams], arr: np.ndarray, strategy: str
) -> np.ndarray:
    """Fuse 12 per-lead record predictions into one probability vector."""
    probs = np.stack(
        [
            sequence_probs(arr[j].astype(np.float64)[None], per_lead_params[j])[0]
            for j in range(arr.shape[0])
        ]
    )
    bundle = fusion.LeadPredictionBundle(
        n=0, predictions={lead: probs[j] for j, lead in enumerate(fusion.LEAD_ORDER)}
    )
    if strategy == "decision_accum":
        return fusion.decision_accumulate(bundle)
    votes = np.argmax(probs, axis=1)
    shares = np.bincount(votes, minlength=probs.shape[1]) / probs.shape[0]
    winner = fusion.majority_vote(bundle)
    # Vote shares serve as scores; nudge guarantees argmax == vote winner
    # when shares tie (the bundle tie-break uses mean probability).
    scores = shares.astype(np.float64)
    scores[winner] += 1e-9
    return scores / scores.sum()


def run_experiment(store: FeatureStore, labels: dict[str, int], config: dict) -> dict:
    """Stratified k-fold cross-validation of one fusion + model combination.

    `labels` maps record_id to class index. Returns a JSON-ready report with
    per-fold and pooled metrics. Deterministic given the config seed.
    """
    strategy = config["fusion"]
    mode = config["model"]
    n_classes = int(config["n_classes"])
    folds = int(config.get("folds", 10))
    seed = int(config.get("seed", 0))
    settings = TrainSettings(
        lr=float(config.get("lr", 0.01)),
        batch_size=int(config.get("batch_size", 64)),
        epochs=int(config.get("epochs", 30)),
        patience=int(config.get("patience", 5)),
        val_fraction=float(config.get("val_fraction", 0.2)),
    )
    if strategy not in fusion.FUSION_STRATEGIES:
        raise ConfigInvalid(f"unknown fusion strategy {strategy!r}")
    if strategy == "data" and store.fusion_input != "stacked":
        raise ConfigInvalid("data fusion requires a cache encoded with --fusion-input stacked")
    if strategy != "data" and store.fusion_input != "per-lead":
        raise ConfigInvalid(f"{strategy} requires a cache encoded with --fusion-input per-lead")

    ids = [rid for rid in store.record_ids() if rid in labels]
    if not ids:
        raise EmptyTrainingSet("no labelled records in the feature cache")
    lab = {rid: int(labels[rid]) for rid in ids}
    assign = stratified_kfold(lab, folds, seed)

    decision = strategy in ("decision_accum", "decision_vote")
    d_in = _model_input_width(store, strategy)
    dims = ModelDims(
        mode=mode,
        tau_in=d_in,
        n_classes=n_classes,
        kappa=int(config.get("kappa", 16)),
        nu=int(config.get("nu", 16)),
    )

    def model_inputs(rids: list[str]) -> np.ndarray:
        return np.stack([fuse_features(store.get(r), strategy) for r in rids])

    def lead_inputs(rids: list[str], lead_idx: int) -> np.ndarray:
        return np.stack([store.get(r)[lead_idx].astype(np.float64) for r in rids])

    per_fold = []
    pooled_scores = []
    pooled_truth = []
    pooled_ids = []
    for fold in range(folds):
        test_ids = assign.fold_records(fold)
        pool_ids = assign.complement_records(fold)
        # Leakage guard: the held-out fold never appears in the training pool.
        overlap = set(test_ids) & set(pool_ids)
        assert not overlap, f"records in both train and test: {sorted(overlap)}"
        train_ids, val_ids = carve_validation(
            pool_ids, lab, settings.val_fraction, seed + 7919 * (fold + 1)
        )
        y_train = np.asarray([lab[r] for r in train_ids], dtype=np.intp)
        y_val = np.asarray([lab[r] for r in val_ids], dtype=np.intp)
        y_test = np.asarray([lab[r] for r in test_ids], dtype=np.intp)

        if not decision:
            x_train = model_inputs(train_ids)
            x_val = model_inputs(val_ids) if val_ids else None
            x_test = model_inputs(test_ids)
            params, _, history = train_model(
                x_train, y_train, dims, seed + fold, settings, x_val, y_val
            )
            scores = sequence_probs(x_test, params)
        else:
            per_lead_params = []
            for j in range(store.n_leads):
                xj_train = lead_inputs(train_ids, j)
                xj_val = lead_inputs(val_ids, j) if val_ids else None
                params_j, _, _ = train_model(
                    xj_train, y_train, dims, seed + fold * 31 + j, settings, xj_val, y_val
                )
                per_lead_params.append(params_j)
            history = []
            scores = np.stack(
                [decision_scores(per_lead_params, store.get(r), strategy) for r in test_ids]
            )

        preds = np.argmax(scores, axis=1)
        report = classification_metrics(preds, y_test, n_classes)
        try:
            report.auroc_per_class = auroc_one_vs_all(scores, y_test, n_classes)
            report.auroc_macro = float(np.mean(report.auroc_per_class))
        except DegenerateLabels:
            report.auroc_per_class = None
        per_fold.append(
            {
                "fold": fold,
                "n_train": len(train_ids),
                "n_val": len(val_ids),
                "n_test": len(test_ids),
                "epochs_run": len(history),
                **report.to_dict(),
            }
        )
        pooled_scores.append(scores)
        pooled_truth.append(y_test)
        pooled_ids.extend(test_ids)

    scores_all = np.concatenate(pooled_scores)
    truth_all = np.concatenate(pooled_truth)
    preds_all = np.argmax(scores_all, axis=1)
    agg = classification_metrics(preds_all, truth_all, n_classes)
    # Label-based metrics pool across folds; AUROC averages the per-fold
    # values instead, because probability scales are not comparable between
    # independently trained fold models.
    fold_aurocs = [f["auroc_per_class"] for f in per_fold if f.get("auroc_per_class")]
    if fold_aurocs:
        agg.auroc_per_class = [float(v) for v in np.mean(fold_aurocs, axis=0)]
        agg.auroc_macro = float(np.mean(agg.auroc_per_class))
    return {
        "config_hash": config.get("config_hash"),
        "fusion": strategy,
        "model": mode,
        "n_classes": n_classes,
        "folds": folds,
        "seed": seed,
        "n_records": len(ids),
        "per_fold": per_fold,
        "aggregate": agg.to_dict(),
    }

"""Patient-level scoring, ROC/PR metrics with bootstrap intervals, CV splits, timing."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class PatientScore:
    patient_id: str
    score: float
    label: int | None
    n_tiles: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise EvaluationError(f"patient {self.patient_id}: score {self.score} outside [0, 1]")
        if self.n_tiles < 1:
            raise EvaluationError(f"patient {self.patient_id}: no tiles")


def aggregate_patient(tile_scores: Sequence[float]) -> float:
    scores = np.asarray(tile_scores, dtype=np.float64)
    if scores.size == 0:
        raise EvaluationError("cannot aggregate an empty tile list")
    if (scores < 0).any() or (scores > 1).any():
        raise EvaluationError("tile scores must lie in [0, 1]")
    # fsum keeps the mean independent of tile order; the clip undoes a last-ulp
    # rounding of the division that could otherwise step outside [min, max]
    mean = math.fsum(scores.tolist()) / scores.size
    return float(min(max(mean, scores.min()), scores.max()))


def aggregate_by_patient(patient_ids: Sequence[str], tile_scores: Sequence[float],
                         labels: dict[str, int] | None = None) -> list[PatientScore]:
    groups: dict[str, list[float]] = {}
    for pid, s in zip(patient_ids, tile_scores):
        groups.setdefault(pid, []).append(float(s))
    labels = labels or {}
    return [PatientScore(pid, aggregate_patient(groups[pid]), labels.get(pid), len(groups[pid]))
            for pid in sorted(groups)]


# ----------------------------------------------------------------------
# metrics


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise EvaluationError(f"scores {s.shape} and labels {y.shape} must be matching vectors")
    if not np.isin(y, (0, 1)).all():
        raise EvaluationError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(pos > neg) with ties counted one half."""
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUROC needs both classes")
    ranks = rankdata(s)  # average ranks; sums stay exact multiples of 1/2
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_counts(s, y):
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]  # end of each tie group
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return tp, fp, s[last]


def auprc(scores, labels) -> float:
    """Average precision with tied scores sharing one threshold."""
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise EvaluationError("AUPRC needs at least one positive")
    tp, fp, _ = _threshold_counts(s, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s, y = _check_binary(scores, labels)
    tp, fp, _ = _threshold_counts(s, y)
    n_pos, n_neg = y.sum(), len(y) - y.sum()
    return np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos]


def pr_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s, y = _check_binary(scores, labels)
    tp, fp, _ = _threshold_counts(s, y)
    return tp / y.sum(), tp / (tp + fp)


METRICS: dict[str, Callable] = {"auroc": auroc, "auprc": auprc}


# ----------------------------------------------------------------------
# bootstrap


@dataclass(frozen=True)
class BootstrapCI:
    lo: float
    hi: float
    n_valid: int
    n_skipped: int

    def __iter__(self):
        return iter((self.lo, self.hi))


def bootstrap_ci(scores, labels, metric: str | Callable = "auroc", n: int = 1000, seed: int = 0,
                 max_retries: int = 20, level: float = 0.95) -> BootstrapCI:
    """Percentile interval over ``n`` patient resamples.

    Each iteration draws from its own generator derived from ``seed``, so the
    result does not depend on evaluation order. Resamples missing a class are
    redrawn up to ``max_retries`` times and then skipped.
    """
    fn = METRICS[metric] if isinstance(metric, str) else metric
    s, y = _check_binary(scores, labels)
    fn(s, y)  # must be computable on the full sample
    vals, skipped = [], 0
    for i in range(n):
        for attempt in range(max_retries + 1):
            idx = rng_for(seed, "bootstrap", i, attempt).integers(0, len(s), len(s))
            yb = y[idx]
            if 0 < yb.sum() < len(yb):
                vals.append(fn(s[idx], yb))
                break
        else:
            skipped += 1
    if skipped:
        warnings.warn(f"bootstrap: {skipped} of {n} resamples skipped for lacking both classes")
    if len(vals) < 2:
        raise EvaluationError(f"only {len(vals)} valid bootstrap resamples")
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(np.asarray(vals), [tail, 100.0 - tail])
    return BootstrapCI(float(lo), float(hi), len(vals), skipped)


# ----------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def assignment(self) -> dict[str, str]:
        out = {p: "train" for p in self.train}
        out.update({p: "val" for p in self.val})
        out.update({p: "test" for p in self.test})
        return out


def kfold_split(patients: Sequence[str], labels: Sequence[int], k: int = 4, val_fraction: float = 0.15,
                seed: int = 0) -> list[Fold]:
    """Stratified patient folds; the non-test remainder splits into train/val per fold."""
    if len(patients) != len(labels):
        raise EvaluationError("patients and labels must align")
    if len(set(patients)) != len(patients):
        raise EvaluationError("patient ids must be unique")
    by_class: dict[int, list[str]] = {}
    for p, y in sorted(zip(patients, labels)):
        by_class.setdefault(int(y), []).append(p)
    for y, ps in by_class.items():
        if len(ps) < k:
            raise EvaluationError(f"class {y} has {len(ps)} patients, fewer than k={k}")
    rng = rng_for(seed, "kfold")
    dealt = []
    for y in sorted(by_class):
        ps = list(by_class[y])
        rng.shuffle(ps)
        dealt.extend((p, y) for p in ps)
    fold_of = {p: i % k for i, (p, _) in enumerate(dealt)}
    label_of = dict(dealt)

    folds = []
    for f in range(k):
        test = sorted(p for p in fold_of if fold_of[p] == f)
        rest = [p for p, _ in dealt if fold_of[p] != f]
        vrng = rng_for(seed, "kfold-val", f)
        val = []
        for y in sorted(by_class):
            ps = sorted(p for p in rest if label_of[p] == y)
            vrng.shuffle(ps)
            val.extend(ps[: int(round(val_fraction * len(ps)))])
        vset = set(val)
        train = sorted(p for p in rest if p not in vset)
        folds.append(Fold(tuple(train), tuple(sorted(val)), tuple(test)))
    return folds


def cv_summary(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation across folds."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise EvaluationError("need at least two folds")
    return float(np.mean(v)), float(np.std(v, ddof=1))


# ----------------------------------------------------------------------
# reports


@dataclass
class MetricEstimate:
    value: float
    ci_lo: float | None = None
    ci_hi: float | None = None


@dataclass
class EvalReport:
    n_patients: int
    n_positive: int
    auroc: MetricEstimate
    auprc: MetricEstimate
    n_bootstrap: int
    seed: int
    bootstrap_skipped: dict[str, int] = field(default_factory=dict)
    folds: list[dict] = field(default_factory=list)
    cv: dict[str, dict[str, float]] = field(default_factory=dict)
    timing: dict | None = None
    config_hash: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate_scores(scores, labels, n_bootstrap: int = 1000, seed: int = 0) -> EvalReport:
    s, y = _check_binary(scores, labels)
    est, skipped = {}, {}
    for name, fn in METRICS.items():
        value = fn(s, y)
        if n_bootstrap:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ci = bootstrap_ci(s, y, fn, n_bootstrap, derive_seed(seed, name))
            est[name] = MetricEstimate(value, ci.lo, ci.hi)
            skipped[name] = ci.n_skipped
        else:
            est[name] = MetricEstimate(value)
    return EvalReport(len(y), int(y.sum()), est["auroc"], est["auprc"], n_bootstrap, seed, skipped)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_curves(out_dir, scores, labels) -> None:
    out_dir = Path(out_dir)
    fpr, tpr = roc_curve(scores, labels)
    with open(out_dir / "roc_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fpr", "tpr"))
        w.writerows(zip(map(repr, fpr.tolist()), map(repr, tpr.tolist())))
    recall, precision = pr_curve(scores, labels)
    with open(out_dir / "pr_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("recall", "precision"))
        w.writerows(zip(map(repr, recall.tolist()), map(repr, precision.tolist())))


# ----------------------------------------------------------------------
# timing


@dataclass
class BenchRecord:
    train_seconds_per_epoch: float
    predict_seconds: float
    n_train_tiles: int
    n_predict_tiles: int
    n_patients: int
    param_count: int
    threads: int | None
    cpu_count: int | None

    def to_dict(self) -> dict:
        return asdict(self)


def bench(model, dataset, train_config=None, threads: int | None = None) -> BenchRecord:
    """Wall-clock one training epoch and a full prediction pass over ``dataset``.

    A warm-up step of each kind runs first and is excluded. Training runs on a
    copy, so ``model`` is left unchanged.
    """
    from .training import TrainConfig, TileDataset, fit

    cfg = train_config or TrainConfig(max_epochs=1, patience=None, schedule="fixed")
    cfg = TrainConfig(**{**cfg.to_dict(), "max_epochs": 1, "patience": None})
    warm = TileDataset(dataset.images[: cfg.batch_size], dataset.labels[: cfg.batch_size],
                       dataset.patient_ids[: cfg.batch_size])
    fit(copy.deepcopy(model), warm, None, TrainConfig(**{**cfg.to_dict(), "class_weights": None}))
    scratch = copy.deepcopy(model)
    t0 = time.perf_counter()
    fit(scratch, dataset, None, cfg)
    train_s = time.perf_counter() - t0

    model.predict_proba(dataset.images[:1])
    t0 = time.perf_counter()
    probs = model.predict_proba(dataset.images)
    aggregate_by_patient(dataset.patient_ids, probs[:, -1])
    predict_s = time.perf_counter() - t0
    return BenchRecord(train_s, predict_s, len(dataset), len(dataset), len(set(dataset.patient_ids)),
                       model.param_count(), threads, os.cpu_count())

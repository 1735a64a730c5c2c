"""Two-phase optimization: tissue fine-tuning, then weighted biomarker training."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .manifest import TileManifest
from .model import DpseqModel, save_checkpoint
from .preprocess import load_rgb, resample
from .seeding import derive_seed, rng_for
from .tensor import Tape, Tensor, log_softmax, pick

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "seconds")


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    schedule: str = "cosine"  # "cosine" | "fixed"
    max_epochs: int = 50
    cosine_horizon: int | None = None  # defaults to max_epochs
    patience: int | None = 8  # None disables early stopping
    class_weights: tuple[float, ...] | str | None = "inverse_frequency"
    batch_size: int = 32
    seed: int = 0
    dropout: bool = True

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise TrainingError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if not self.lr > 0:
            out.append("lr must be positive")
        if self.schedule not in ("cosine", "fixed"):
            out.append(f"schedule must be 'cosine' or 'fixed', got {self.schedule!r}")
        if self.max_epochs < 1:
            out.append("max_epochs must be at least 1")
        if self.patience is not None and self.patience < 1:
            out.append("patience must be at least 1")
        if self.batch_size < 1:
            out.append("batch_size must be at least 1")
        if self.cosine_horizon is not None and self.cosine_horizon < self.max_epochs - 1:
            out.append("cosine_horizon must cover every epoch")
        cw = self.class_weights
        if isinstance(cw, str) and cw != "inverse_frequency":
            out.append(f"class_weights must be a list, 'inverse_frequency' or null, got {cw!r}")
        elif isinstance(cw, (tuple, list)) and any(not w > 0 for w in cw):
            out.append("class weights must be positive")
        return out

    @classmethod
    def tissue_phase(cls, **kw) -> "TrainConfig":
        base = dict(lr=1e-4, schedule="fixed", max_epochs=2, patience=None, class_weights=None)
        base.update(kw)
        return cls(**base)

    @classmethod
    def biomarker_phase(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("class_weights"), list):
            d["class_weights"] = tuple(d["class_weights"])
        return cls(**d)


# ----------------------------------------------------------------------
# loss, optimizer, schedule, stopping


def class_weights_from_counts(counts: Sequence[int]) -> np.ndarray:
    """Inverse class frequency ``N / (k * n_c)``."""
    counts = np.asarray(counts, dtype=np.float64)
    if (counts <= 0).any():
        raise TrainingError(f"every class needs at least one example, counts {counts.tolist()}")
    return counts.sum() / (len(counts) * counts)


def weighted_cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Batch mean of ``w_y * nll``, with weights rescaled to mean one over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise TrainingError(f"labels shape {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise TrainingError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    nll = -pick(log_softmax(logits), labels)
    if weights is None:
        return nll.mean()
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise TrainingError(f"need {k} class weights, got {w.shape}")
    applied = w[labels]
    if (applied == applied[0]).all():
        scale = np.ones_like(applied)
    else:
        scale = applied / applied.mean()
    return (nll * Tensor(scale.astype(logits.dtype))).mean()


@dataclass
class OptimizerState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0


def adam_step(params: Sequence[Tensor], grads: dict, state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    """Bias-corrected Adam. Parameters without a gradient are left untouched."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, p in enumerate(params):
        g = grads.get(p)
        if g is None:
            continue
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        upd = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        p.data = (p.data - upd).astype(p.data.dtype)
    return state


def cosine_lr(t: float, horizon: float, lr0: float) -> float:
    if t < 0 or t > horizon:
        raise ValueError(f"epoch {t} outside [0, {horizon}]")
    return max(0.0, lr0 * (1.0 + math.cos(math.pi * t / horizon)) / 2.0)


class StopDecision(NamedTuple):
    stop: bool
    best_epoch: int  # 1-based


def early_stopping(history: Sequence[float], patience: int = 8) -> StopDecision:
    """Stop once the best validation loss is ``patience`` epochs old."""
    if not history:
        raise ValueError("history must be non-empty")
    best = int(np.argmin(np.asarray(history)))  # first occurrence wins ties
    return StopDecision(len(history) - 1 - best >= patience, best + 1)


# ----------------------------------------------------------------------
# data


@dataclass
class TileDataset:
    images: np.ndarray  # (N, h, w, 3) uint8
    labels: np.ndarray  # (N,) int
    patient_ids: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_manifest(cls, manifest: TileManifest, image_size: int, label_field: str = "label") -> "TileDataset":
        imgs, labels, pids = [], [], []
        for rec in manifest:
            y = getattr(rec, label_field)
            if y is None:
                raise TrainingError(f"tile {rec.tile_path!r} has no {label_field}")
            img = load_rgb(manifest.resolve(rec))
            if img.shape[:2] != (image_size, image_size):
                img = resample(img, (image_size, image_size))
            imgs.append(img)
            labels.append(int(y))
            pids.append(rec.patient_id)
        images = np.stack(imgs) if imgs else np.zeros((0, image_size, image_size, 3), np.uint8)
        return cls(images, np.asarray(labels, dtype=np.int64), pids)

    def class_counts(self, k: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=k)


def split_train_val(ds: TileDataset, val_fraction: float, seed: int) -> tuple[TileDataset, TileDataset]:
    """Patient-level split, stratified by label."""
    by_label: dict[int, list[str]] = {}
    first = {}
    for pid, y in zip(ds.patient_ids, ds.labels):
        first.setdefault(pid, int(y))
    for pid, y in sorted(first.items()):
        by_label.setdefault(y, []).append(pid)
    rng = rng_for(seed, "train-val")
    val = set()
    for y in sorted(by_label):
        pids = list(by_label[y])
        rng.shuffle(pids)
        val.update(pids[: int(round(val_fraction * len(pids)))])
    mask = np.array([p in val for p in ds.patient_ids])
    return _take(ds, ~mask), _take(ds, mask)


def _take(ds: TileDataset, mask: np.ndarray) -> TileDataset:
    idx = np.flatnonzero(mask)
    return TileDataset(ds.images[idx], ds.labels[idx], [ds.patient_ids[i] for i in idx])


# ----------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: DpseqModel
    log: list[dict]
    step_lrs: list[float]
    best_epoch: int
    stopped_early: bool
    class_weights: list[float] | None

    def write_log(self, path) -> None:
        write_training_log(self.log, path)


def write_training_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in LOG_COLUMNS])


def evaluate_loss(model: DpseqModel, ds: TileDataset, weights=None, batch_size: int = 64) -> float:
    total, n = 0.0, 0
    for i in range(0, len(ds), batch_size):
        x = model.normalize(ds.images[i:i + batch_size])
        y = ds.labels[i:i + batch_size]
        loss = weighted_cross_entropy(model.forward(x), y, weights)
        total += float(loss.item()) * len(y)
        n += len(y)
    return total / n


def _resolve_weights(config: TrainConfig, train: TileDataset, k: int):
    cw = config.class_weights
    if cw is None:
        return None
    if cw == "inverse_frequency":
        return class_weights_from_counts(train.class_counts(k))
    if len(cw) != k:
        raise TrainingError(f"{len(cw)} class weights for {k} classes")
    return np.asarray(cw, dtype=np.float64)


def fit(model: DpseqModel, train: TileDataset, val: TileDataset | None, config: TrainConfig,
        out_dir: str | Path | None = None) -> TrainResult:
    """Train in place and return the model restored to its best-validation weights."""
    k = model.config.n_classes
    if len(train) == 0:
        raise TrainingError("empty training set")
    if train.labels.min() < 0 or train.labels.max() >= k:
        raise TrainingError(f"training labels outside [0, {k})")
    weights = _resolve_weights(config, train, k)
    horizon = config.cosine_horizon or config.max_epochs
    params = model.parameters()
    state = OptimizerState()
    rows: list[dict] = []
    step_lrs: list[float] = []
    val_hist: list[float] = []
    best_state, best_val, best_epoch, stopped = None, math.inf, 0, False

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        lr = config.lr if config.schedule == "fixed" else cosine_lr(epoch - 1, horizon, config.lr)
        order = rng_for(config.seed, "shuffle", epoch).permutation(len(train))
        drop_rng = rng_for(config.seed, "dropout", epoch) if config.dropout else None
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            x = model.normalize(train.images[idx])
            with Tape() as tape:
                loss = weighted_cross_entropy(model.forward(x, rng=drop_rng), train.labels[idx], weights)
            grads = tape.backward(loss)
            adam_step(params, grads, state, lr)
            step_lrs.append(lr)
            total += float(loss.item()) * len(idx)
        train_loss = total / len(train)
        val_loss = evaluate_loss(model, val, weights) if val is not None and len(val) else None
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                     "lr": lr, "seconds": time.perf_counter() - t0})
        log.info("epoch %d train %.4f val %s lr %.2e", epoch, train_loss, val_loss, lr)

        if val_loss is not None:
            val_hist.append(val_loss)
            if val_loss < best_val:
                best_state, best_val, best_epoch = model.state_dict(), val_loss, epoch
            if config.patience is not None and early_stopping(val_hist, config.patience).stop:
                stopped = True
                break

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out_dir / "last.ckpt")
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = len(rows)
    if out_dir is not None:
        save_checkpoint(model, out_dir / "best.ckpt")
        write_training_log(rows, out_dir / "train_log.csv")
    return TrainResult(model, rows, step_lrs, best_epoch, stopped,
                       None if weights is None else [float(w) for w in weights])


def finetune_tissue(model: DpseqModel, manifest: TileManifest, config: TrainConfig | None = None,
                    out_dir=None) -> TrainResult:
    """Phase 1: nine-class tissue training, fixed learning rate, plain cross-entropy."""
    config = config or TrainConfig.tissue_phase()
    if model.config.n_classes != 9:
        raise TrainingError(f"tissue fine-tuning needs a 9-class head, model has {model.config.n_classes}")
    bad = [r.tile_path for r in manifest if r.tissue_class is None or not 0 <= r.tissue_class < 9]
    if bad:
        raise TrainingError(f"{len(bad)} tiles lack a tissue class in [0, 9), e.g. {bad[0]!r}")
    train = TileDataset.from_manifest(manifest.subset("train") if _has_splits(manifest) else manifest,
                                      model.config.image_size, "tissue_class")
    val = None
    if _has_splits(manifest) and manifest.subset("val"):
        val = TileDataset.from_manifest(manifest.subset("val"), model.config.image_size, "tissue_class")
    return fit(model, train, val, config, out_dir)


def train_biomarker(model: DpseqModel, manifest: TileManifest, config: TrainConfig | None = None,
                    out_dir=None, val_fraction: float = 0.15) -> TrainResult:
    """Phase 2: binary biomarker training on patient-labelled tiles.

    Uses the manifest's ``train``/``val`` split tags when present; otherwise
    holds out ``val_fraction`` of patients for validation.
    """
    config = config or TrainConfig.biomarker_phase()
    if model.config.n_classes != 2:
        raise TrainingError("biomarker training needs a binary head; call replace_head(2) first")
    size = model.config.image_size
    if _has_splits(manifest):
        train = TileDataset.from_manifest(manifest.subset("train"), size)
        val_rows = manifest.subset("val")
        val = TileDataset.from_manifest(val_rows, size) if len(val_rows) else None
    else:
        train, val = split_train_val(TileDataset.from_manifest(manifest, size), val_fraction,
                                     derive_seed(config.seed, "val-split"))
    if len(np.unique(train.labels)) < 2:
        raise TrainingError("training set contains a single class")
    return fit(model, train, val, config, out_dir)


def _has_splits(manifest: TileManifest) -> bool:
    return any(r.split for r in manifest)

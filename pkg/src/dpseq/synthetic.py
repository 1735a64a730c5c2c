"""Synthetic H&E-like images with known ground truth, for experiments and tests."""

from __future__ import annotations

import numpy as np

from .preprocess import od_inverse
from .training import TileDataset

# Ruifrok & Johnston hematoxylin / eosin OD directions
HE_STAINS = np.array([[0.650, 0.072], [0.704, 0.990], [0.286, 0.105]])
HE_STAINS = HE_STAINS / np.linalg.norm(HE_STAINS, axis=0)


def render(conc: np.ndarray, stains: np.ndarray = HE_STAINS) -> np.ndarray:
    """Concentrations (..., 2) -> 8-bit RGB through Beer-Lambert mixing."""
    return od_inverse(conc @ np.asarray(stains).T)


def stain_concentrations(rng: np.random.Generator, n_pixels: int, pure_fraction: float = 0.2,
                         background_fraction: float = 0.0, low: float = 0.2, high: float = 1.2) -> np.ndarray:
    """Random positive two-stain concentrations, with a share of single-stain pixels."""
    c = rng.uniform(low, high, size=(n_pixels, 2))
    u = rng.random(n_pixels)
    c[u < pure_fraction, 1] = 0.0
    c[(u >= pure_fraction) & (u < 2 * pure_fraction), 0] = 0.0
    if background_fraction:
        c[rng.random(n_pixels) < background_fraction] = 0.0
    return c


def stain_tile(rng: np.random.Generator, size: int = 128, stains: np.ndarray = HE_STAINS,
               **kw) -> tuple[np.ndarray, np.ndarray]:
    """An 8-bit tile and its (size*size, 2) concentration field."""
    c = stain_concentrations(rng, size * size, **kw)
    return render(c, stains).reshape(size, size, 3), c


def _smooth_field(rng, size: int, cells: int = 4) -> np.ndarray:
    coarse = rng.random((cells, cells))
    reps = -(-size // cells)
    return np.kron(coarse, np.ones((reps, reps)))[:size, :size]


def biomarker_tiles(n_patients: int = 100, tiles_per_patient: int = 20, size: int = 28,
                    prevalence: float = 0.3, seed: int = 0, separation: float = 0.35) -> TileDataset:
    """Two-class tile set whose tiles inherit their patient's label.

    Positive patients carry a higher mean hematoxylin concentration, which is
    linearly separable in pixel space; texture noise is shared by both classes.
    """
    rng = np.random.default_rng(seed)
    n_pos = int(round(prevalence * n_patients))
    patient_labels = np.array([1] * n_pos + [0] * (n_patients - n_pos))
    rng.shuffle(patient_labels)
    images, labels, pids = [], [], []
    for p, y in enumerate(patient_labels):
        pid = f"P{p:03d}"
        for _ in range(tiles_per_patient):
            h = 0.35 + separation * y + 0.25 * _smooth_field(rng, size) + 0.05 * rng.random((size, size))
            e = 0.45 + 0.3 * _smooth_field(rng, size) + 0.05 * rng.random((size, size))
            images.append(render(np.stack([h, e], axis=-1)))
            labels.append(int(y))
            pids.append(pid)
    return TileDataset(np.stack(images), np.asarray(labels, dtype=np.int64), pids)


def tissue_tiles(n_per_class: int = 20, size: int = 28, seed: int = 0, n_classes: int = 9) -> TileDataset:
    """Nine texture classes: stripe orientation and frequency plus a stain balance per class."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    images, labels = [], []
    for k in range(n_classes):
        theta = np.pi * k / n_classes
        freq = 2 + (k % 3)
        for _ in range(n_per_class):
            phase = rng.uniform(0, 2 * np.pi)
            wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
            h = (0.2 + 0.08 * k) * wave + 0.05 * rng.random((size, size))
            e = (0.9 - 0.08 * k) * (1 - wave) + 0.05 * rng.random((size, size))
            images.append(render(np.stack([h, e], axis=-1)))
            labels.append(k)
    order = rng.permutation(len(labels))
    pids = [f"T{i:04d}" for i in range(len(labels))]
    return TileDataset(np.stack(images)[order], np.asarray(labels, dtype=np.int64)[order], pids)


def slide(rng: np.random.Generator, height: int, width: int, stains: np.ndarray = HE_STAINS) -> np.ndarray:
    """A large stained image with blotchy tissue and no background."""
    h = 0.3 + 0.6 * _smooth_field(rng, max(height, width), cells=16)[:height, :width]
    e = 0.3 + 0.5 * _smooth_field(rng, max(height, width), cells=16)[:height, :width]
    c = np.stack([h, e], axis=-1) + 0.05 * rng.random((height, width, 2))
    return render(c, stains)

"""Slide tessellation, Macenko stain normalization, tumor filtering and tile sampling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence, TypeVar

import numpy as np
from PIL import Image

from .seeding import derive_seed

log = logging.getLogger(__name__)

STAIN_PROFILE_VERSION = 1
TUM_INDEX = 8  # position of TUM in model.TISSUE_CLASSES

T = TypeVar("T")


class InsufficientTissueError(ValueError):
    """Too few pixels above the optical-density threshold; the tile is background."""


@dataclass(frozen=True)
class TileSpec:
    tile_px: int = 512
    mpp: float = 0.5
    model_px: int = 224

    def __post_init__(self):
        if self.tile_px <= 0 or self.mpp <= 0 or self.model_px <= 0:
            raise ValueError("tile edge, MPP and model edge must be positive")


# ----------------------------------------------------------------------
# tiling


def resample(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an 8-bit RGB array to ``(height, width)``."""
    h, w = size
    if image.shape[:2] == (h, w):
        return np.array(image, dtype=np.uint8)
    img = Image.fromarray(np.asarray(image, dtype=np.uint8))
    return np.asarray(img.resize((w, h), Image.Resampling.BILINEAR))


def tessellate(image: np.ndarray, source_mpp: float, spec: TileSpec = TileSpec()):
    """Cut ``image`` into non-overlapping ``spec.tile_px`` tiles at ``spec.mpp``.

    The image is first rescaled to the target resolution. Tiles start at the
    top-left corner; partial tiles on the right and bottom edges are dropped.
    Returns ``(tiles, coords)`` with coords as (row, col) pixel offsets in the
    rescaled image.
    """
    if not source_mpp or source_mpp <= 0:
        raise ValueError(f"source MPP must be positive, got {source_mpp!r}")
    h, w = image.shape[:2]
    scale = source_mpp / spec.mpp
    nh, nw = int(round(h * scale)), int(round(w * scale))
    if nh < spec.tile_px or nw < spec.tile_px:
        raise ValueError(f"image {h}x{w} at {source_mpp} MPP is {nh}x{nw} at {spec.mpp} MPP, "
                         f"smaller than one {spec.tile_px}px tile")
    img = resample(image, (nh, nw))
    t = spec.tile_px
    tiles, coords = [], []
    for r in range(0, nh - t + 1, t):
        for c in range(0, nw - t + 1, t):
            tiles.append(img[r:r + t, c:c + t].copy())
            coords.append((r, c))
    return tiles, coords


# ----------------------------------------------------------------------
# optical density


def od_transform(rgb: np.ndarray) -> np.ndarray:
    v = np.maximum(np.asarray(rgb, dtype=np.float64), 1.0)
    return -np.log10(v / 255.0)


def od_inverse(od: np.ndarray) -> np.ndarray:
    v = 255.0 * np.power(10.0, -np.asarray(od, dtype=np.float64))
    return np.floor(np.clip(v, 0.0, 255.0) + 0.5).astype(np.uint8)


@dataclass(frozen=True)
class StainProfile:
    stain_matrix: np.ndarray  # (3, 2) unit OD columns, hematoxylin first
    max_conc: np.ndarray  # (2,) 99th-percentile concentrations
    beta: float = 0.15
    alpha: float = 1.0

    def __post_init__(self):
        s = np.asarray(self.stain_matrix, dtype=np.float64)
        m = np.asarray(self.max_conc, dtype=np.float64)
        if s.shape != (3, 2) or m.shape != (2,):
            raise ValueError(f"stain matrix must be 3x2 and maxima length 2, got {s.shape}, {m.shape}")
        if not np.allclose(np.linalg.norm(s, axis=0), 1.0, atol=1e-6):
            raise ValueError("stain columns must have unit norm")
        if (s < 0).any():
            raise ValueError("stain columns must be non-negative in OD space")
        if (m <= 0).any():
            raise ValueError("reference maxima must be positive")
        object.__setattr__(self, "stain_matrix", s)
        object.__setattr__(self, "max_conc", m)

    def to_dict(self) -> dict:
        return {"version": STAIN_PROFILE_VERSION,
                "stain_matrix": self.stain_matrix.tolist(),
                "max_conc": self.max_conc.tolist(),
                "beta": self.beta, "alpha": self.alpha}

    @classmethod
    def from_dict(cls, d: dict) -> "StainProfile":
        if d.get("version") != STAIN_PROFILE_VERSION:
            raise ValueError(f"unsupported stain profile version {d.get('version')!r}")
        return cls(np.array(d["stain_matrix"]), np.array(d["max_conc"]), d["beta"], d["alpha"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "StainProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))


def reference_profile() -> StainProfile:
    """The shipped normalization target."""
    text = resources.files("dpseq").joinpath("data/reference_stain.json").read_text()
    return StainProfile.from_dict(json.loads(text))


def nnls_concentrations(stains: np.ndarray, od: np.ndarray) -> np.ndarray:
    """Non-negative least squares of each OD row against two stain columns.

    Exact for two unknowns: take the unconstrained solution where it is
    feasible, otherwise the better of the two single-stain fits.
    """
    s = np.asarray(stains, dtype=np.float64)
    y = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    c = y @ np.linalg.pinv(s).T
    bad = (c < 0).any(axis=1)
    if bad.any():
        yb = y[bad]
        n2 = (s * s).sum(axis=0)
        a = np.maximum(yb @ s[:, 0] / n2[0], 0.0)
        b = np.maximum(yb @ s[:, 1] / n2[1], 0.0)
        ra = ((yb - a[:, None] * s[:, 0]) ** 2).sum(axis=1)
        rb = ((yb - b[:, None] * s[:, 1]) ** 2).sum(axis=1)
        use_a = ra <= rb
        c[bad] = np.where(use_a[:, None], np.stack([a, np.zeros_like(a)], 1), np.stack([np.zeros_like(b), b], 1))
    return c


def estimate_stains(tile: np.ndarray, beta: float = 0.15, alpha: float = 1.0, min_pixels: int = 100) -> StainProfile:
    od = od_transform(tile).reshape(-1, 3)
    tissue = od[np.linalg.norm(od, axis=1) > beta]
    if len(tissue) < min_pixels:
        raise InsufficientTissueError(
            f"{len(tissue)} pixels above OD {beta}, need {min_pixels}")
    _, _, vt = np.linalg.svd(tissue, full_matrices=False)
    plane = vt[:2]
    if plane[0].sum() < 0:
        plane[0] = -plane[0]
    proj = tissue @ plane.T
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [alpha, 100 - alpha])
    v1 = plane.T @ np.array([np.cos(lo), np.sin(lo)])
    v2 = plane.T @ np.array([np.cos(hi), np.sin(hi)])
    vecs = []
    for v in (v1, v2):
        v = v if v.sum() >= 0 else -v
        v = np.clip(v, 0.0, None)
        vecs.append(v / np.linalg.norm(v))
    # hematoxylin absorbs red light most strongly
    if vecs[0][0] < vecs[1][0]:
        vecs.reverse()
    stains = np.stack(vecs, axis=1)
    conc = nnls_concentrations(stains, tissue)
    max_conc = np.maximum(np.percentile(conc, 99, axis=0), 1e-6)
    return StainProfile(stains, max_conc, beta, alpha)


def macenko_normalize(tile: np.ndarray, source: StainProfile, reference: StainProfile) -> np.ndarray:
    """Re-express ``tile``'s stain concentrations through the reference stains."""
    shape = tile.shape
    conc = nnls_concentrations(source.stain_matrix, od_transform(tile))
    conc *= reference.max_conc / source.max_conc
    od = conc @ reference.stain_matrix.T
    return od_inverse(od).reshape(shape)


def normalize_tile(tile: np.ndarray, reference: StainProfile | None = None) -> np.ndarray:
    """Estimate the tile's own stains, then map onto ``reference``.

    Raises InsufficientTissueError for background tiles.
    """
    reference = reference or reference_profile()
    source = estimate_stains(tile, reference.beta, reference.alpha)
    return macenko_normalize(tile, source, reference)


# ----------------------------------------------------------------------
# tumor selection and sampling


def tumor_scores(tiles: np.ndarray, tissue_model) -> np.ndarray:
    """Softmax probability of the TUM class per 8-bit tile."""
    if tissue_model.config.n_classes != 9:
        raise ValueError(f"tissue model must have 9 classes, has {tissue_model.config.n_classes}")
    return tissue_model.predict_proba(tiles)[:, TUM_INDEX]


def tumor_filter(tiles: np.ndarray, tissue_model, threshold: float = 0.5, records=None) -> list[int]:
    """Indices of tiles whose TUM probability strictly exceeds ``threshold``.

    When ``records`` (one per tile) is given, each gets its ``tumor_score`` set.
    """
    scores = tumor_scores(tiles, tissue_model)
    if records is not None:
        if len(records) != len(scores):
            raise ValueError("records must align with tiles")
        for rec, s in zip(records, scores):
            rec.tumor_score = float(s)
    return [i for i, s in enumerate(scores) if s > threshold]


def sample_tiles(tiles: Sequence[T], cap: int = 500, seed: int = 0) -> list[T]:
    """All tiles if there are at most ``cap``; else a uniform subset of ``cap``, in input order."""
    if cap < 1:
        raise ValueError("cap must be at least 1")
    tiles = list(tiles)
    if len(tiles) <= cap:
        return tiles
    idx = np.sort(np.random.default_rng(seed).choice(len(tiles), size=cap, replace=False))
    return [tiles[i] for i in idx]


def sample_per_patient(records, cap: int = 500, seed: int = 0) -> list:
    by_patient: dict[str, list] = {}
    for r in records:
        by_patient.setdefault(r.patient_id, []).append(r)
    out = []
    for pid in sorted(by_patient):
        out.extend(sample_tiles(by_patient[pid], cap, derive_seed(seed, "sample", pid)))
    return out


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def save_rgb(path, tile: np.ndarray) -> None:
    Image.fromarray(np.asarray(tile, dtype=np.uint8)).save(path, format="PNG")

from pathlib import Path

import numpy as np
import pytest

from dpseq.manifest import TileManifest, TileRecord
from dpseq.model import DpseqModel, ModelConfig
from dpseq.preprocess import save_rgb


@pytest.fixture(scope="session")
def default_model():
    return DpseqModel(ModelConfig(), seed=0)


@pytest.fixture(scope="session")
def default_tile():
    return np.random.default_rng(0).integers(0, 256, size=(224, 224, 3), dtype=np.uint8)


@pytest.fixture
def small_model():
    return DpseqModel(ModelConfig.small(), seed=0)


def analytic_param_count(depths, dims, hidden, mlp_ratio, patch, chans, downsample, head, n_classes):
    """Per-layer tally written out independently of the model code."""
    total = patch * patch * chans * dims[0] + dims[0]
    for s, (n, e, d) in enumerate(zip(depths, dims, hidden)):
        if s:
            prev = dims[s - 1]
            if downsample[s - 1]:
                total += 4 * prev * e + e
            elif prev != e:
                total += prev * e + e
        lstm = 4 * (4 * (d * e + d * d + d))
        fusion = e * 4 * d + e
        mlp = (e * mlp_ratio * e + mlp_ratio * e) + (mlp_ratio * e * e + e)
        total += n * (4 * e + lstm + fusion + mlp)
    total += 2 * dims[-1]
    widths = (dims[-1], *head)
    for a, b in zip(widths[:-1], widths[1:]):
        total += a * b + b
    return total + widths[-1] * n_classes + n_classes


def write_manifest(ds, root, field="label", splits=None):
    """Write a TileDataset as PNG tiles plus manifest.csv under ``root``; returns the manifest path."""
    root = Path(root)
    (root / "tiles").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (img, y, pid) in enumerate(zip(ds.images, ds.labels, ds.patient_ids)):
        rel = f"tiles/{i:05d}.png"
        save_rgb(root / rel, img)
        rec = TileRecord(pid, rel, split=None if splits is None else splits[pid])
        setattr(rec, field, int(y))
        rows.append(rec)
    TileManifest(rows, root).write_csv(root / "manifest.csv")
    return root / "manifest.csv"

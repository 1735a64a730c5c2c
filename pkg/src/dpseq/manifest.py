"""Tile manifest: one CSV row per tile, keyed by patient."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Iterator

COLUMNS = ("patient_id", "tile_path", "tissue_class", "tumor_score", "label", "split")


class ManifestError(ValueError):
    pass


@dataclass
class TileRecord:
    patient_id: str
    tile_path: str
    tissue_class: int | None = None
    tumor_score: float | None = None
    label: int | None = None
    split: str | None = None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class TileManifest:
    def __init__(self, rows: Iterable[TileRecord] = (), root: str | os.PathLike | None = None):
        self.rows: list[TileRecord] = list(rows)
        self.root = Path(root) if root is not None else None
        self.validate()

    def validate(self) -> None:
        seen = set()
        for i, r in enumerate(self.rows):
            if not r.patient_id:
                raise ManifestError(f"row {i}: empty patient_id")
            if r.tile_path in seen:
                raise ManifestError(f"row {i}: duplicate tile_path {r.tile_path!r}")
            seen.add(r.tile_path)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[TileRecord]:
        return iter(self.rows)

    def resolve(self, record: TileRecord) -> Path:
        p = Path(record.tile_path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def patients(self) -> list[str]:
        return sorted({r.patient_id for r in self.rows})

    def patient_labels(self) -> dict[str, int]:
        labels: dict[str, int] = {}
        for r in self.rows:
            if r.label is None:
                continue
            prev = labels.setdefault(r.patient_id, r.label)
            if prev != r.label:
                raise ManifestError(f"patient {r.patient_id!r} has conflicting labels {prev} and {r.label}")
        return labels

    def subset(self, split: str | None = None, patients: Iterable[str] | None = None) -> "TileManifest":
        keep = set(patients) if patients is not None else None
        rows = [r for r in self.rows
                if (split is None or r.split == split) and (keep is None or r.patient_id in keep)]
        return TileManifest(rows, self.root)

    def with_splits(self, assignment: dict[str, str]) -> "TileManifest":
        """Copy with ``split`` set from a patient -> split-tag map; unassigned patients are dropped."""
        rows = [TileRecord(**{**r.__dict__, "split": assignment[r.patient_id]})
                for r in self.rows if r.patient_id in assignment]
        return TileManifest(rows, self.root)

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "TileManifest":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames) != COLUMNS:
                raise ManifestError(f"{path}: header must be {','.join(COLUMNS)}, got {reader.fieldnames}")
            rows = []
            for n, raw in enumerate(reader, start=2):
                try:
                    rows.append(TileRecord(
                        patient_id=raw["patient_id"],
                        tile_path=raw["tile_path"],
                        tissue_class=int(raw["tissue_class"]) if raw["tissue_class"] else None,
                        tumor_score=float(raw["tumor_score"]) if raw["tumor_score"] else None,
                        label=int(raw["label"]) if raw["label"] else None,
                        split=raw["split"] or None,
                    ))
                except ValueError as exc:
                    raise ManifestError(f"{path}:{n}: {exc}") from None
        return cls(rows, root=path.parent)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(getattr(r, f.name)) for f in fields(TileRecord)])

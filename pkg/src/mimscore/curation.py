"""Manifest curation: foreground coverage, threshold filtering, dataset statistics.

Manifests are line-delimited UTF-8 JSON, one record per line; unknown keys are
ignored on read. Masks and object counts come with the manifest — nothing here
runs a detector.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import DataError, ParameterError

__all__ = [
    "CurationRecord",
    "foreground_coverage",
    "fc_after_center_crop",
    "filter_manifest",
    "manifest_stats",
    "read_manifest",
    "write_manifest",
    "load_mask",
]

_FIELDS = ("id", "path", "width", "height", "object_count", "fg_mask_path", "fc", "mos")


@dataclass
class CurationRecord:
    id: str
    path: str
    width: int
    height: int
    object_count: int = 0
    fg_mask_path: str | None = None
    fc: float | None = None
    mos: float | None = None  # present in synthetic/labeled manifests only

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ParameterError(f"record {self.id!r}: dims must be >= 1")
        if self.object_count < 0:
            raise ParameterError(f"record {self.id!r}: object_count must be >= 0")
        if self.fc is not None and not 0.0 <= self.fc <= 1.0:
            raise ParameterError(f"record {self.id!r}: fc must be in [0, 1]")

    @property
    def short_side(self) -> int:
        return min(self.width, self.height)

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "CurationRecord":
        raw = json.loads(line)
        known = {k: raw[k] for k in _FIELDS if k in raw}
        missing = {"id", "path", "width", "height"} - known.keys()
        if missing:
            raise DataError(f"manifest record missing keys: {sorted(missing)}")
        return cls(**known)


def read_manifest(path: str | Path) -> list[CurationRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(CurationRecord.from_json(line))
    return records


def write_manifest(records, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    return path


def load_mask(path: str | Path) -> np.ndarray:
    """Binary foreground mask from an image file (any nonzero pixel is foreground)."""
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise DataError(f"cannot read mask {path}")
    return (raw > 127).astype(np.uint8)


def foreground_coverage(mask: np.ndarray) -> float:
    """Fraction of pixels marked foreground; mask values must be 0/1."""
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ParameterError("empty mask")
    if not np.isin(mask, (0, 1)).all():
        raise ParameterError("mask values must be 0 or 1")
    return float(mask.mean())


def fc_after_center_crop(mask: np.ndarray, crop: int) -> float:
    """Coverage over a centered crop×crop window (reflect-padded when small).

    Approximates post-crop coverage statistics; the actual training crop is
    random, this uses the centered window.
    """
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ParameterError("empty mask")
    if crop <= 0:
        raise ParameterError("crop must be positive")
    pad_h = max(0, crop - mask.shape[0])
    pad_w = max(0, crop - mask.shape[1])
    if pad_h or pad_w:
        mask = np.pad(mask, ((0, pad_h), (0, pad_w)), mode="symmetric")
    top = (mask.shape[0] - crop) // 2
    left = (mask.shape[1] - crop) // 2
    return foreground_coverage(mask[top : top + crop, left : left + crop])


def filter_manifest(
    records,
    min_objects: int = 50,
    min_short_side: int = 0,
    min_fc: float = 0.0,
) -> list[CurationRecord]:
    """Keep records meeting all thresholds; order preserved.

    A record with no fc value passes the fc test (coverage unknown is not
    grounds for rejection).
    """
    return [
        r
        for r in records
        if r.object_count >= min_objects
        and r.short_side >= min_short_side
        and (r.fc is None or r.fc >= min_fc)
    ]


def manifest_stats(records, crop_size: int | None = None) -> dict:
    """Summary statistics: mean dims, 10-bin FC histogram, object-count quantiles.

    When crop_size is given and mask files are readable, also reports the FC
    histogram recomputed over centered crops.
    """
    records = list(records)
    if not records:
        raise ParameterError("manifest_stats needs at least one record")
    widths = np.array([r.width for r in records], dtype=np.float64)
    heights = np.array([r.height for r in records], dtype=np.float64)
    counts = np.array([r.object_count for r in records], dtype=np.float64)
    stats = {
        "n_records": len(records),
        "mean_width": float(widths.mean()),
        "mean_height": float(heights.mean()),
        "object_count_quantiles": {
            str(q): float(np.quantile(counts, q)) for q in (0.0, 0.25, 0.5, 0.75, 1.0)
        },
    }
    fcs = [r.fc for r in records if r.fc is not None]
    hist, _ = np.histogram(fcs, bins=10, range=(0.0, 1.0))
    stats["fc_histogram"] = hist.tolist()
    if crop_size is not None:
        cropped = []
        for r in records:
            if r.fg_mask_path and Path(r.fg_mask_path).exists():
                cropped.append(fc_after_center_crop(load_mask(r.fg_mask_path), crop_size))
        hist_c, _ = np.histogram(cropped, bins=10, range=(0.0, 1.0))
        stats["fc_after_crop_histogram"] = hist_c.tolist()
        stats["fc_after_crop_size"] = crop_size
    return stats
